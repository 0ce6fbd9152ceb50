//! Prompt templates with marked placeholder slots.
//!
//! Two placeholder spellings are understood: named slots such as `{f}` and
//! `{l}` that map positionally onto the concept's slots, and the single
//! marker `{S*}` that expands to all concept slots in order.

use crate::error::{Error, Result};

pub const ALL_SLOTS_MARKER: &str = "{S*}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateItem {
    /// Literal word, resolved through the embedding table.
    Word(String),
    /// One named placeholder slot.
    Slot(String),
    /// The `{S*}` marker: expands to every concept slot in order.
    AllSlots,
}

/// A whitespace-tokenized prompt with placeholder slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    items: Vec<TemplateItem>,
    raw: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for word in text.split_whitespace() {
            if word == ALL_SLOTS_MARKER {
                items.push(TemplateItem::AllSlots);
            } else if word.starts_with('{') && word.ends_with('}') && word.len() > 2 {
                items.push(TemplateItem::Slot(word[1..word.len() - 1].to_string()));
            } else if word.contains('{') || word.contains('}') {
                return Err(Error::BadTemplate(format!(
                    "malformed placeholder {word:?} in {text:?}"
                )));
            } else {
                items.push(TemplateItem::Word(word.to_string()));
            }
        }
        if items.is_empty() {
            return Err(Error::BadTemplate("empty template".into()));
        }
        if items
            .iter()
            .filter(|i| **i == TemplateItem::AllSlots)
            .count()
            > 1
        {
            return Err(Error::BadTemplate(format!(
                "template {text:?} contains more than one {ALL_SLOTS_MARKER} marker"
            )));
        }
        Ok(PromptTemplate {
            items,
            raw: text.to_string(),
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn items(&self) -> &[TemplateItem] {
        &self.items
    }

    /// Number of placeholder positions once `{S*}` is expanded for a
    /// concept with `k` slots.
    pub fn slot_count(&self, k: usize) -> usize {
        self.items
            .iter()
            .map(|i| match i {
                TemplateItem::Word(_) => 0,
                TemplateItem::Slot(_) => 1,
                TemplateItem::AllSlots => k,
            })
            .sum()
    }

    /// Expand `{S*}` into the given slot names, yielding only words and
    /// named slots.
    pub fn resolve(&self, slot_names: &[&str]) -> Vec<TemplateItem> {
        let mut out = Vec::with_capacity(self.items.len() + slot_names.len());
        for item in &self.items {
            match item {
                TemplateItem::AllSlots => {
                    for name in slot_names {
                        out.push(TemplateItem::Slot((*name).to_string()));
                    }
                }
                other => out.push(other.clone()),
            }
        }
        out
    }

    /// Replace every placeholder with literal words (used to compare a
    /// spliced concept against encoding the literal prompt).
    pub fn substitute_literal(&self, words: &[&str]) -> Result<PromptTemplate> {
        let k = words.len();
        if self.slot_count(k) != k {
            return Err(Error::SlotCountMismatch {
                template_slots: self.slot_count(k),
                concept_slots: k,
            });
        }
        let mut idx = 0;
        let mut out_words = Vec::new();
        for item in &self.items {
            match item {
                TemplateItem::Word(w) => out_words.push(w.clone()),
                TemplateItem::Slot(_) => {
                    out_words.push(words[idx].to_string());
                    idx += 1;
                }
                TemplateItem::AllSlots => {
                    for w in words {
                        out_words.push((*w).to_string());
                    }
                    idx += words.len();
                }
            }
        }
        PromptTemplate::parse(&out_words.join(" "))
    }
}

/// Replace the `{S*}` marker in a prompt string with a class word
/// (evaluation scoring path).
pub fn replace_marker(prompt: &str, class_word: &str) -> String {
    prompt.replace(ALL_SLOTS_MARKER, class_word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_named_slots() {
        let t = PromptTemplate::parse("a photo of a {f} {l} person").unwrap();
        assert_eq!(t.slot_count(2), 2);
        assert_eq!(t.items()[4], TemplateItem::Slot("f".to_string()),);
    }

    #[test]
    fn marker_expands_to_k_slots() {
        let t = PromptTemplate::parse("a photo of a {S*} person").unwrap();
        assert_eq!(t.slot_count(2), 2);
        assert_eq!(t.slot_count(1), 1);
        let resolved = t.resolve(&["f", "l"]);
        let slots: Vec<_> = resolved
            .iter()
            .filter(|i| matches!(i, TemplateItem::Slot(_)))
            .collect();
        assert_eq!(slots.len(), 2);
    }

    #[test]
    fn rejects_malformed_braces_and_double_marker() {
        assert!(PromptTemplate::parse("a {f person").is_err());
        assert!(PromptTemplate::parse("{S*} and {S*}").is_err());
        assert!(PromptTemplate::parse("   ").is_err());
    }

    #[test]
    fn literal_substitution() {
        let t = PromptTemplate::parse("a photo of a {f} {l} person").unwrap();
        let lit = t.substitute_literal(&["john", "smith"]).unwrap();
        assert_eq!(lit.raw(), "a photo of a john smith person");
        assert!(t.substitute_literal(&["john"]).is_err());
    }

    #[test]
    fn marker_replacement_for_scoring() {
        assert_eq!(
            replace_marker("a photo of a {S*} person", "person"),
            "a photo of a person person"
        );
    }
}
