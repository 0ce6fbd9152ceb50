//! Token-embedding storage, placeholder concept registration, and
//! mean-name embedding construction.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-dimension real vector housing a single token embedding or an
/// encoder output for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Validates that every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding vector has no entries".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptFile {
                path: "<memory>".into(),
                reason: "embedding vector contains non-finite entries".into(),
            });
        }
        Ok(EmbeddingVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// How a concept's vectors were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Encoder output on the mean-name embedding.
    Cross,
    /// Embeddings of coarse class tokens ("human", "face").
    SuperCategory,
    /// Mean of name embeddings, not passed through the encoder.
    RawMean,
    /// Same vectors as `Cross`, but optimization splices them directly into
    /// the conditioning, bypassing the encoder at the placeholder positions.
    DirectOutput,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InitStrategy::Cross => "cross",
            InitStrategy::SuperCategory => "super_category",
            InitStrategy::RawMean => "raw_mean",
            InitStrategy::DirectOutput => "direct_output",
        };
        f.write_str(s)
    }
}

/// Ordered list of named slot vectors representing the learnable concept.
/// Default is two slots, `f` and `l`, for the first/last name positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    tokens: Vec<(String, EmbeddingVector)>,
    init_strategy: InitStrategy,
}

impl ConceptEmbedding {
    pub fn new(
        tokens: Vec<(String, EmbeddingVector)>,
        init_strategy: InitStrategy,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("concept has no slots".into()));
        }
        let dim = tokens[0].1.dim();
        for (_, v) in &tokens {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
        }
        for i in 0..tokens.len() {
            for j in i + 1..tokens.len() {
                if tokens[i].0 == tokens[j].0 {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate slot name {:?}",
                        tokens[i].0
                    )));
                }
            }
        }
        Ok(ConceptEmbedding {
            tokens,
            init_strategy,
        })
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].1.dim()
    }

    pub fn init_strategy(&self) -> InitStrategy {
        self.init_strategy
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.tokens.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn slot_names(&self) -> Vec<&str> {
        self.tokens.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn vector(&self, idx: usize) -> &EmbeddingVector {
        &self.tokens[idx].1
    }

    pub fn vectors(&self) -> Vec<&EmbeddingVector> {
        self.tokens.iter().map(|(_, v)| v).collect()
    }

    /// Replace all slot vectors, keeping names, and retag the strategy.
    pub fn with_vectors(
        &self,
        vectors: Vec<EmbeddingVector>,
        strategy: InitStrategy,
    ) -> Result<Self> {
        if vectors.len() != self.k() {
            return Err(Error::SlotCountMismatch {
                template_slots: vectors.len(),
                concept_slots: self.k(),
            });
        }
        ConceptEmbedding::new(
            self.tokens
                .iter()
                .map(|(n, _)| n.clone())
                .zip(vectors)
                .collect(),
            strategy,
        )
    }

    /// All slot values concatenated into one flat vector.
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() * self.dim());
        for (_, v) in &self.tokens {
            out.extend_from_slice(v.values());
        }
        out
    }
}

/// A list of (first, last) name pairs used to build the mean embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NameList {
    entries: Vec<(String, String)>,
}

impl NameList {
    pub fn new(entries: Vec<(String, String)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyNameList);
        }
        for (i, (f, l)) in entries.iter().enumerate() {
            if f.trim().is_empty() || l.trim().is_empty() {
                return Err(Error::MalformedName {
                    line: i + 1,
                    reason: "empty name component".into(),
                });
            }
        }
        Ok(NameList { entries })
    }

    /// Parse the newline-separated `First Last` format. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let first = parts.next();
            let last = parts.next();
            match (first, last, parts.next()) {
                (Some(f), Some(l), None) => entries.push((f.to_string(), l.to_string())),
                _ => {
                    return Err(Error::MalformedName {
                        line: lineno + 1,
                        reason: format!("expected 'First Last', got {line:?}"),
                    })
                }
            }
        }
        NameList::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        NameList::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// A single-entry list holding only the first name pair.
    pub fn head(&self) -> NameList {
        NameList {
            entries: vec![self.entries[0].clone()],
        }
    }
}

/// Lookup table mapping tokens to embedding rows. Real backends implement
/// this over their own tokenizer; the toy table uses whitespace tokens.
pub trait EmbeddingTable {
    fn dim(&self) -> usize;

    /// Tokenize a piece of text into vocabulary subtokens.
    fn subtokens(&self, text: &str) -> Result<Vec<String>>;

    /// The embedding row for one exact vocabulary token.
    fn row(&self, token: &str) -> Result<EmbeddingVector>;

    /// Begin/end-of-sequence tokens, if the table defines them.
    fn bos_eos(&self) -> Option<(String, String)> {
        None
    }
}

/// Look up the embedding for a token string. Multi-subtoken inputs resolve
/// to the first subtoken's embedding (a warning is logged); the result is a
/// copy of the table row, never an alias into the table.
pub fn lookup_embedding(token: &str, table: &dyn EmbeddingTable) -> Result<EmbeddingVector> {
    let subs = table.subtokens(token)?;
    if subs.is_empty() {
        return Err(Error::UnknownToken(token.to_string()));
    }
    if subs.len() > 1 {
        log::warn!(
            "token {token:?} maps to {} subtokens; using the first ({:?})",
            subs.len(),
            subs[0]
        );
    }
    table.row(&subs[0])
}

/// Arithmetic mean of the first-name and last-name embeddings over the
/// whole list, as a two-slot `raw_mean` concept (`f` then `l`).
pub fn mean_name_embedding(
    names: &NameList,
    table: &dyn EmbeddingTable,
) -> Result<ConceptEmbedding> {
    if names.is_empty() {
        return Err(Error::EmptyNameList);
    }
    let dim = table.dim();
    let mut first_sum = vec![0.0; dim];
    let mut last_sum = vec![0.0; dim];
    for (first, last) in names.entries() {
        let fv = lookup_embedding(first, table)?;
        let lv = lookup_embedding(last, table)?;
        for (acc, v) in first_sum.iter_mut().zip(fv.values()) {
            *acc += v;
        }
        for (acc, v) in last_sum.iter_mut().zip(lv.values()) {
            *acc += v;
        }
    }
    let m = names.len() as f64;
    for v in first_sum.iter_mut() {
        *v /= m;
    }
    for v in last_sum.iter_mut() {
        *v /= m;
    }
    ConceptEmbedding::new(
        vec![
            ("f".to_string(), EmbeddingVector::new(first_sum)?),
            ("l".to_string(), EmbeddingVector::new(last_sum)?),
        ],
        InitStrategy::RawMean,
    )
}

const CONCEPT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConceptFile {
    version: u32,
    dim: usize,
    init_strategy: InitStrategy,
    tokens: Vec<ConceptFileSlot>,
    metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ConceptFileSlot {
    slot: String,
    values: Vec<f64>,
}

/// Write a concept to the versioned JSON format.
pub fn save_concept(
    concept: &ConceptEmbedding,
    path: &Path,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let file = ConceptFile {
        version: CONCEPT_SCHEMA_VERSION,
        dim: concept.dim(),
        init_strategy: concept.init_strategy(),
        tokens: concept
            .slots()
            .map(|(name, v)| ConceptFileSlot {
                slot: name.to_string(),
                values: v.values().to_vec(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Load a concept written by [`save_concept`]. The round-trip is bit-exact
/// for finite values.
pub fn load_concept(
    path: &Path,
) -> Result<(ConceptEmbedding, serde_json::Map<String, serde_json::Value>)> {
    let text = std::fs::read_to_string(path)?;
    let file: ConceptFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    if file.version != CONCEPT_SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch {
            found: file.version,
            supported: CONCEPT_SCHEMA_VERSION,
        });
    }
    if file.tokens.is_empty() {
        return Err(Error::CorruptFile {
            path: path.display().to_string(),
            reason: "no token slots".into(),
        });
    }
    let mut tokens = Vec::with_capacity(file.tokens.len());
    for slot in file.tokens {
        if slot.values.len() != file.dim {
            return Err(Error::DimensionMismatch {
                expected: file.dim,
                got: slot.values.len(),
            });
        }
        if !slot.values.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("slot {:?} contains non-finite values", slot.slot),
            });
        }
        tokens.push((slot.slot, EmbeddingVector::new(slot.values)?));
    }
    Ok((
        ConceptEmbedding::new(tokens, file.init_strategy)?,
        file.metadata,
    ))
}

/// Default vocabulary for the toy table: four reserved specials followed by
/// prompt vocabulary and a small pool of name words. Sized so the shipped
/// name list and evaluation prompts tokenize without fallback.
pub const TOY_SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

pub const TOY_WORDS: [&str; 124] = [
    // prompt vocabulary
    "a",
    "an",
    "and",
    "are",
    "art",
    "at",
    "amusement",
    "angry",
    "anne",
    "baking",
    "backpack",
    "beach",
    "birthday",
    "cake",
    "camping",
    "cave",
    "conference",
    "cubism",
    "day",
    "depicting",
    "driving",
    "enjoying",
    "expression",
    "face",
    "fauvism",
    "fighter",
    "hands",
    "happy",
    "hathaway",
    "high",
    "hike",
    "human",
    "in",
    "jet",
    "latte",
    "lego",
    "man",
    "mountains",
    "mural",
    "news",
    "of",
    "on",
    "outdoors",
    "painting",
    "park",
    "person",
    "photo",
    "piloting",
    "plays",
    "pointillism",
    "portrait",
    "puzzled",
    "raw",
    "relaxing",
    "res",
    "sad",
    "scifi",
    "shakes",
    "sit",
    "sofa",
    "space",
    "spacesuit",
    "stove",
    "sweater",
    "taking",
    "the",
    "toys",
    "ultra",
    "wearing",
    "with",
    "woman",
    // filler context words
    "blue",
    "red",
    "green",
    "old",
    "young",
    "small",
    "big",
    "city",
    "garden",
    "house",
    "river",
    "winter",
    "summer",
    "morning",
    "evening",
    "smiling",
    "standing",
    "reading",
    "book",
    "coffee",
    "window",
    "street",
    "music",
    "dancing",
    "cooking",
    "kitchen",
    "dog",
    "cat",
    "holding",
    // first names
    "john",
    "mary",
    "david",
    "anna",
    "james",
    "lisa",
    "peter",
    "sara",
    "tom",
    "nina",
    "omar",
    "emma",
    // last names
    "smith",
    "jones",
    "chen",
    "garcia",
    "lee",
    "brown",
    "kim",
    "patel",
    "novak",
    "silva",
    "murphy",
    "stone",
];

/// Seeded random embedding table over a whitespace-token vocabulary.
pub struct ToyEmbeddingTable {
    vocab: Vec<String>,
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl ToyEmbeddingTable {
    /// Table over the default vocabulary (`TOY_SPECIALS` + `TOY_WORDS`).
    pub fn new(dim: usize, seed: u64) -> Self {
        let words: Vec<String> = TOY_SPECIALS
            .iter()
            .chain(TOY_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Self::with_words(words, dim, seed)
    }

    /// Table over a custom vocabulary. The four specials are prepended if
    /// not already present.
    pub fn with_words(words: Vec<String>, dim: usize, seed: u64) -> Self {
        let mut vocab: Vec<String> = TOY_SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let rows = (0..vocab.len())
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        ToyEmbeddingTable { vocab, rows, dim }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.iter().any(|w| w == token)
    }

    fn normalize(word: &str) -> String {
        word.chars()
            .filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>')
            .collect::<String>()
            .to_lowercase()
    }
}

impl EmbeddingTable for ToyEmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn subtokens(&self, text: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let norm = Self::normalize(word);
            if norm.is_empty() {
                continue;
            }
            if self.contains(&norm) {
                out.push(norm);
            } else {
                return Err(Error::UnknownToken(word.to_string()));
            }
        }
        if out.is_empty() {
            return Err(Error::UnknownToken(text.to_string()));
        }
        Ok(out)
    }

    fn row(&self, token: &str) -> Result<EmbeddingVector> {
        let idx = self
            .vocab
            .iter()
            .position(|w| w == token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))?;
        EmbeddingVector::new(self.rows[idx].clone())
    }

    fn bos_eos(&self) -> Option<(String, String)> {
        Some(("<bos>".to_string(), "<eos>".to_string()))
    }
}
