//! Conditioning assembly: splices concept vectors into prompt templates,
//! encodes them, and derives cross-initialized concepts from the encoder's
//! own outputs.

use std::path::Path;

use crate::embedding::{ConceptEmbedding, EmbeddingTable, EmbeddingVector, InitStrategy};
use crate::encoder::{ConditioningVector, Pullback, TextEncoder};
use crate::error::{Error, Result};
use crate::prompt::{PromptTemplate, TemplateItem};

/// A fully resolved pre-encoder sequence plus the positions the concept's
/// slot vectors were spliced into.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub vectors: Vec<EmbeddingVector>,
    pub slot_positions: Vec<usize>,
}

/// Build the pre-encoder sequence for a template: placeholder slots receive
/// the concept's vectors, every other position is a table lookup, and the
/// table's BOS/EOS wrap the sequence when defined.
pub fn build_sequence(
    template: &PromptTemplate,
    concept: &ConceptEmbedding,
    table: &dyn EmbeddingTable,
) -> Result<AssembledSequence> {
    let slot_names = concept.slot_names();
    let resolved = template.resolve(&slot_names);
    let template_slots = resolved
        .iter()
        .filter(|i| matches!(i, TemplateItem::Slot(_)))
        .count();
    if template_slots != concept.k() {
        return Err(Error::SlotCountMismatch {
            template_slots,
            concept_slots: concept.k(),
        });
    }
    if concept.dim() != table.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            got: concept.dim(),
        });
    }

    let mut vectors = Vec::new();
    let mut slot_positions = Vec::new();
    let bos_eos = table.bos_eos();
    if let Some((bos, _)) = &bos_eos {
        vectors.push(table.row(bos)?);
    }
    let mut slot_idx = 0;
    for item in &resolved {
        match item {
            TemplateItem::Word(w) => {
                for sub in table.subtokens(w)? {
                    vectors.push(table.row(&sub)?);
                }
            }
            TemplateItem::Slot(_) => {
                slot_positions.push(vectors.len());
                vectors.push(concept.vector(slot_idx).clone());
                slot_idx += 1;
            }
            TemplateItem::AllSlots => unreachable!("resolved template"),
        }
    }
    if let Some((_, eos)) = &bos_eos {
        vectors.push(table.row(eos)?);
    }
    Ok(AssembledSequence {
        vectors,
        slot_positions,
    })
}

/// Encode a template with the concept's vectors injected at the placeholder
/// positions.
pub fn assemble_conditioning(
    template: &PromptTemplate,
    concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    table: &dyn EmbeddingTable,
) -> Result<ConditioningVector> {
    let assembled = build_sequence(template, concept, table)?;
    encoder.encode(&assembled.vectors)
}

/// As [`assemble_conditioning`], but also returns the slot positions and the
/// encoder pull-back for gradient propagation to the spliced vectors.
pub fn assemble_with_pullback(
    template: &PromptTemplate,
    concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    table: &dyn EmbeddingTable,
) -> Result<(ConditioningVector, Vec<usize>, Pullback)> {
    let assembled = build_sequence(template, concept, table)?;
    let (cond, pullback) = encoder.encode_with_pullback(&assembled.vectors)?;
    Ok((cond, assembled.slot_positions, pullback))
}

/// Direct-output assembly: the encoder sees `context` at the placeholder
/// positions, then the `output` concept's vectors overwrite those positions
/// of the encoded conditioning. Gradients for the output vectors are read
/// straight off the conditioning cotangent; the encoder is bypassed.
pub fn assemble_direct(
    template: &PromptTemplate,
    context: &ConceptEmbedding,
    output: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    table: &dyn EmbeddingTable,
) -> Result<(ConditioningVector, Vec<usize>)> {
    if output.k() != context.k() {
        return Err(Error::SlotCountMismatch {
            template_slots: context.k(),
            concept_slots: output.k(),
        });
    }
    if output.dim() != encoder.dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.dim(),
            got: output.dim(),
        });
    }
    let assembled = build_sequence(template, context, table)?;
    let mut cond = encoder.encode(&assembled.vectors)?;
    for (i, &pos) in assembled.slot_positions.iter().enumerate() {
        *cond.position_mut(pos) = output.vector(i).clone();
    }
    Ok((cond, assembled.slot_positions))
}

/// Encoder outputs at the placeholder positions when `concept` is injected
/// into `template`.
pub fn encoder_outputs_at_slots(
    template: &PromptTemplate,
    concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    table: &dyn EmbeddingTable,
) -> Result<Vec<EmbeddingVector>> {
    let assembled = build_sequence(template, concept, table)?;
    let cond = encoder.encode(&assembled.vectors)?;
    Ok(assembled
        .slot_positions
        .iter()
        .map(|&pos| cond.position(pos).clone())
        .collect())
}

/// Encode the template with `concept` injected and return the encoder
/// outputs at the placeholder positions as a new concept tagged with
/// `strategy`.
fn encode_at_slots(
    template: &PromptTemplate,
    concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    table: &dyn EmbeddingTable,
    strategy: InitStrategy,
) -> Result<ConceptEmbedding> {
    let vectors = encoder_outputs_at_slots(template, concept, encoder, table)?;
    concept.with_vectors(vectors, strategy)
}

/// Cross initialization: encode the mean-name concept in context and take
/// the encoder outputs at the placeholder positions as the new concept.
pub fn cross_initialize(
    mean_concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    template: &PromptTemplate,
    table: &dyn EmbeddingTable,
) -> Result<ConceptEmbedding> {
    if mean_concept.init_strategy() != InitStrategy::RawMean {
        return Err(Error::InvalidInitStrategy {
            expected: "raw_mean".into(),
            got: mean_concept.init_strategy().to_string(),
        });
    }
    encode_at_slots(template, mean_concept, encoder, table, InitStrategy::Cross)
}

/// Iterated encoder application: `[v, E(v), E(E(v)), ...]` of length `k+1`,
/// where each element re-encodes the previous one at the placeholder
/// positions of `template`.
pub fn repeated_encoding_trace(
    concept: &ConceptEmbedding,
    encoder: &dyn TextEncoder,
    template: &PromptTemplate,
    table: &dyn EmbeddingTable,
    k: usize,
) -> Result<Vec<ConceptEmbedding>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(concept.clone());
    for _ in 0..k {
        let prev = out.last().expect("nonempty");
        out.push(encode_at_slots(
            template,
            prev,
            encoder,
            table,
            InitStrategy::Cross,
        )?);
    }
    Ok(out)
}

/// Iterated encoder application over a raw sequence (no placeholders):
/// `[seq, E(seq), E(E(seq)), ...]` of length `k+1`.
pub fn repeated_sequence_encoding(
    sequence: &[EmbeddingVector],
    encoder: &dyn TextEncoder,
    k: usize,
) -> Result<Vec<Vec<EmbeddingVector>>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(sequence.to_vec());
    for _ in 0..k {
        let prev = out.last().expect("nonempty");
        let cond = encoder.encode(prev)?;
        out.push(cond.positions().to_vec());
    }
    Ok(out)
}

/// Export the trajectory of one position across repeated sequence
/// encodings, CSV columns `stage,norm,cosine_to_final`.
pub fn write_position_trace_csv(
    iterates: &[Vec<EmbeddingVector>],
    position: usize,
    path: &Path,
) -> Result<()> {
    if iterates.is_empty() {
        return Err(Error::EmptyInput("repeated-encoding iterates".into()));
    }
    if position >= iterates[0].len() {
        return Err(Error::PositionOutOfRange {
            position,
            len: iterates[0].len(),
        });
    }
    let last = iterates.last().expect("nonempty")[position].values();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = String::from("stage,norm,cosine_to_final\n");
    for (i, seq) in iterates.iter().enumerate() {
        let v = seq[position].values();
        let dot: f64 = v.iter().zip(last).map(|(a, b)| a * b).sum();
        let denom = norm(v) * norm(last);
        let cos = if denom == 0.0 { 0.0 } else { dot / denom };
        out.push_str(&format!("E^{},{:.12e},{:.12e}\n", i, norm(v), cos));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Export a repeated-encoding trace as CSV with columns
/// `stage,norm,cosine_to_final`. Each stage is the concatenation of the
/// concept's slot vectors; cosines are taken against the last iterate.
pub fn write_repeated_encoding_csv(trace: &[ConceptEmbedding], path: &Path) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("repeated-encoding trace".into()));
    }
    let last = trace.last().expect("nonempty").concat();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = String::from("stage,norm,cosine_to_final\n");
    for (i, concept) in trace.iter().enumerate() {
        let flat = concept.concat();
        let dot: f64 = flat.iter().zip(&last).map(|(a, b)| a * b).sum();
        let denom = norm(&flat) * norm(&last);
        let cos = if denom == 0.0 { 0.0 } else { dot / denom };
        out.push_str(&format!("E^{},{:.12e},{:.12e}\n", i, norm(&flat), cos));
    }
    std::fs::write(path, out)?;
    Ok(())
}
