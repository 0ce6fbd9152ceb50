//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token: {0:?} has no vocabulary entry")]
    UnknownToken(String),

    #[error("name list is empty")]
    EmptyNameList,

    #[error("name list entry {line} is malformed: {reason}")]
    MalformedName { line: usize, reason: String },

    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersionMismatch { found: u32, supported: u32 },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("template has {template_slots} placeholder slots but concept has {concept_slots}")]
    SlotCountMismatch {
        template_slots: usize,
        concept_slots: usize,
    },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("sequence length {len} exceeds encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("adapter missing: {0}")]
    AdapterMissing(String),

    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },

    #[error("initialization strategy {strategy:?} requires a name list")]
    MissingNames { strategy: String },

    #[error("reference vector has zero norm")]
    ZeroReference,

    #[error("trajectory step {step} is not greater than last recorded step {last}")]
    NonMonotonicStep { step: usize, last: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("all {skipped} images were skipped (no face detected)")]
    EmptyAfterSkips { skipped: usize },

    #[error("scorer failure: {0}")]
    ScorerFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expected init strategy {expected:?}, got {got:?}")]
    InvalidInitStrategy { expected: String, got: String },

    #[error("prompt template error: {0}")]
    BadTemplate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
