//! Cross-initialization toolkit for textual-inversion-style concept
//! learning: mean-name embedding construction, encoder-output
//! initialization, regularized diffusion-loss optimization of concept
//! vectors, embedding-geometry diagnostics, and similarity evaluation.
//!
//! Everything runs at desk scale against a deterministic toy encoder and
//! denoiser; pretrained backends plug in through the adapter traits
//! ([`encoder::TextEncoder`], [`diffusion::Denoiser`],
//! [`diffusion::LatentSpaceEncoder`], [`diffusion::LatentDecoder`],
//! [`evaluation::FaceEmbedder`], [`evaluation::ImageTextScorer`]).

pub mod autodiff;
pub mod backend;
pub mod conditioning;
pub mod diagnostics;
pub mod diffusion;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod inversion;
pub mod prompt;

pub use backend::Backend;
pub use embedding::{
    load_concept, lookup_embedding, mean_name_embedding, save_concept, ConceptEmbedding,
    EmbeddingTable, EmbeddingVector, InitStrategy, NameList, ToyEmbeddingTable,
};
pub use encoder::{
    BlockTrace, ConditioningVector, EncoderConfig, IdentityEncoder, TextEncoder, ToyTextEncoder,
};
pub use error::{Error, Result};
pub use inversion::{
    ablation_run, initialize, optimize, reg_loss, total_loss, AblationMode, OptimizationResult,
    OptimizeInputs, OptimizerConfig,
};
pub use prompt::PromptTemplate;
