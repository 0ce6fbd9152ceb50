//! Backend bundles: the toy stack, the built-in identity adapter, and
//! resolution of `--backend` specs. Real pretrained backends implement the
//! same traits and construct a [`Backend`] by hand.

use crate::diffusion::{
    Denoiser, LatentDecoder, LatentSpaceEncoder, NoiseSchedule, ToyDenoiser, ToyLatentEncoder,
};
use crate::embedding::{EmbeddingTable, ToyEmbeddingTable};
use crate::encoder::{EncoderConfig, IdentityEncoder, TextEncoder, ToyTextEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{FaceEmbedder, ImageTextScorer, SeededStubEmbedder};

pub const TOY_DIM: usize = 32;
pub const TOY_LATENT_DIM: usize = 16;
pub const TOY_DENOISER_HIDDEN: usize = 64;
pub const TOY_EMBEDDER_DIM: usize = 32;

/// One resolved backend. Components a backend does not provide stay `None`
/// and surface as `AdapterMissing` when a command needs them.
pub struct Backend {
    pub name: String,
    pub table: Box<dyn EmbeddingTable>,
    pub encoder: Box<dyn TextEncoder>,
    pub denoiser: Option<Box<dyn Denoiser>>,
    pub latent_encoder: Option<Box<dyn LatentSpaceEncoder>>,
    pub decoder: Option<Box<dyn LatentDecoder>>,
    pub face: Option<Box<dyn FaceEmbedder>>,
    pub scorer: Option<Box<dyn ImageTextScorer>>,
    pub schedule: NoiseSchedule,
}

impl Backend {
    /// Full toy stack. Component streams derive from the run seed:
    /// table `seed`, encoder `seed+1`, denoiser `seed+2`, latent encoder
    /// `seed+3`, evaluation stubs `seed+4`.
    pub fn toy(seed: u64) -> Result<Backend> {
        Ok(Backend {
            name: "toy".to_string(),
            table: Box::new(ToyEmbeddingTable::new(TOY_DIM, seed)),
            encoder: Box::new(ToyTextEncoder::new(EncoderConfig {
                seed: seed.wrapping_add(1),
                ..EncoderConfig::default()
            })?),
            denoiser: Some(Box::new(ToyDenoiser::new(
                TOY_LATENT_DIM,
                TOY_DIM,
                TOY_DENOISER_HIDDEN,
                seed.wrapping_add(2),
            ))),
            latent_encoder: Some(Box::new(ToyLatentEncoder::new(
                TOY_LATENT_DIM,
                seed.wrapping_add(3),
            ))),
            decoder: None,
            face: Some(Box::new(SeededStubEmbedder::new(
                TOY_LATENT_DIM,
                TOY_EMBEDDER_DIM,
                seed.wrapping_add(4),
            ))),
            scorer: Some(Box::new(SeededStubEmbedder::new(
                TOY_LATENT_DIM,
                TOY_EMBEDDER_DIM,
                seed.wrapping_add(4),
            ))),
            schedule: NoiseSchedule::linear(100, 1e-4, 0.02)?,
        })
    }

    /// Identity-encoder adapter: toy embedding table, pass-through encoder,
    /// no generation or evaluation components.
    pub fn identity(seed: u64) -> Result<Backend> {
        Ok(Backend {
            name: "adapter:identity".to_string(),
            table: Box::new(ToyEmbeddingTable::new(TOY_DIM, seed)),
            encoder: Box::new(IdentityEncoder::new(TOY_DIM)),
            denoiser: None,
            latent_encoder: None,
            decoder: None,
            face: None,
            scorer: None,
            schedule: NoiseSchedule::linear(100, 1e-4, 0.02)?,
        })
    }

    /// Resolve a `--backend` spec: `toy` or `adapter:<name>`.
    pub fn resolve(spec: &str, seed: u64) -> Result<Backend> {
        match spec {
            "toy" => Backend::toy(seed),
            "adapter:identity" => Backend::identity(seed),
            other if other.starts_with("adapter:") => Err(Error::AdapterMissing(format!(
                "no adapter registered under {other:?}"
            ))),
            other => Err(Error::InvalidConfig(format!(
                "unknown backend {other:?} (expected 'toy' or 'adapter:<name>')"
            ))),
        }
    }

    pub fn denoiser(&self) -> Result<&dyn Denoiser> {
        self.denoiser.as_deref().ok_or_else(|| {
            Error::AdapterMissing(format!("backend {:?} has no denoiser", self.name))
        })
    }

    pub fn latent_encoder(&self) -> Result<&dyn LatentSpaceEncoder> {
        self.latent_encoder.as_deref().ok_or_else(|| {
            Error::AdapterMissing(format!("backend {:?} has no latent encoder", self.name))
        })
    }

    pub fn decoder(&self) -> Result<&dyn LatentDecoder> {
        self.decoder.as_deref().ok_or_else(|| {
            Error::AdapterMissing(format!("backend {:?} has no image decoder", self.name))
        })
    }

    pub fn face(&self) -> Result<&dyn FaceEmbedder> {
        self.face.as_deref().ok_or_else(|| {
            Error::AdapterMissing(format!("backend {:?} has no face embedder", self.name))
        })
    }

    pub fn scorer(&self) -> Result<&dyn ImageTextScorer> {
        self.scorer.as_deref().ok_or_else(|| {
            Error::AdapterMissing(format!("backend {:?} has no image-text scorer", self.name))
        })
    }
}
