//! Text-encoder abstraction: a toy causal transformer, an identity test
//! double, the adapter contract for pretrained encoders, and per-block
//! geometry instrumentation.
//!
//! Encoders are immutable after construction and never trained here; they
//! only need to map per-token input vectors to per-token output vectors and
//! support pulling a cotangent back to the inputs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, NodeId, Tape};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

/// Architecture and seeding for the toy encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            seed: 0,
            vocab_size: 128,
            max_seq_len: 32,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || self.num_blocks == 0 {
            return Err(Error::InvalidConfig(
                "dim, num_heads, and num_blocks must be positive".into(),
            ));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} < 4 (BOS, EOS, PAD, UNK are reserved)",
                self.vocab_size
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Per-position encoder outputs fed to the denoiser's conditioning pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    vectors: Vec<EmbeddingVector>,
}

impl ConditioningVector {
    pub fn new(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::EmptyInput("conditioning has no positions".into()));
        }
        let dim = vectors[0].dim();
        for v in &vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
        }
        Ok(ConditioningVector { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }

    pub fn position(&self, idx: usize) -> &EmbeddingVector {
        &self.vectors[idx]
    }

    pub fn positions(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn position_mut(&mut self, idx: usize) -> &mut EmbeddingVector {
        &mut self.vectors[idx]
    }
}

/// Norm and orientation of one sequence position as it moves through the
/// encoder: an `input` entry, one entry per block, and a `final` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub position: usize,
    pub entries: Vec<BlockTraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTraceEntry {
    pub stage: String,
    pub norm: f64,
    pub cosine_to_final: f64,
}

impl BlockTrace {
    /// CSV with columns `stage,norm,cosine_to_final`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("stage,norm,cosine_to_final\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:.12e},{:.12e}\n",
                e.stage, e.norm, e.cosine_to_final
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Cotangent pull-back: maps per-position output gradients to per-position
/// input gradients.
pub type Pullback = Box<dyn FnOnce(&[Vec<f64>]) -> Vec<Vec<f64>>>;

/// Adapter contract for text encoders. Given pre-encoder per-token vectors,
/// return per-token outputs; `encode_with_pullback` additionally accepts
/// gradient pull-back. Adapters must declare their dimension.
pub trait TextEncoder {
    fn dim(&self) -> usize;

    fn encode(&self, sequence: &[EmbeddingVector]) -> Result<ConditioningVector>;

    fn encode_with_pullback(
        &self,
        sequence: &[EmbeddingVector],
    ) -> Result<(ConditioningVector, Pullback)>;

    /// Norm/orientation trace of one position through the encoder.
    fn block_trace(&self, sequence: &[EmbeddingVector], position: usize) -> Result<BlockTrace>;
}

fn check_sequence(sequence: &[EmbeddingVector], dim: usize) -> Result<()> {
    if sequence.is_empty() {
        return Err(Error::EmptyInput("encode of empty sequence".into()));
    }
    for v in sequence {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frozen weights for one transformer block.
struct BlockWeights {
    /// Per-head query/key/value projections, each `[dim, head_dim]`.
    wq: Vec<Mat>,
    wk: Vec<Mat>,
    wv: Vec<Mat>,
    /// Output projection `[dim, dim]`.
    wo: Mat,
    /// MLP projections `[dim, hidden]` and `[hidden, dim]`.
    w1: Mat,
    w2: Mat,
}

/// Seeded toy transformer encoder: learned positional embeddings, pre-LN
/// causal self-attention blocks with QuickGELU MLPs, and a final LayerNorm.
///
/// Weight initialization order (ChaCha12 stream seeded with `config.seed`,
/// all entries N(0, 0.02^2) drawn row-major): positional table
/// `[max_seq_len, dim]`, then per block Wq, Wk, Wv (each `[dim, dim]`,
/// split column-wise into heads), Wo `[dim, dim]`, W1 `[dim, hidden]`,
/// W2 `[hidden, dim]`. LayerNorm gains are 1 and biases 0 throughout.
pub struct ToyTextEncoder {
    config: EncoderConfig,
    positional: Mat,
    blocks: Vec<BlockWeights>,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = config.mlp_hidden();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let mut draw = |rows: usize, cols: usize| -> Mat {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Mat::from_vec(rows, cols, data)
        };

        let positional = draw(config.max_seq_len, d);
        let head_dim = d / config.num_heads;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let wq_full = draw(d, d);
            let wk_full = draw(d, d);
            let wv_full = draw(d, d);
            let wo = draw(d, d);
            let w1 = draw(d, hidden);
            let w2 = draw(hidden, d);
            let split = |m: &Mat| -> Vec<Mat> {
                (0..config.num_heads)
                    .map(|h| {
                        let mut part = Mat::zeros(d, head_dim);
                        for r in 0..d {
                            for c in 0..head_dim {
                                *part.at_mut(r, c) = m.at(r, h * head_dim + c);
                            }
                        }
                        part
                    })
                    .collect()
            };
            blocks.push(BlockWeights {
                wq: split(&wq_full),
                wk: split(&wk_full),
                wv: split(&wv_full),
                wo,
                w1,
                w2,
            });
        }
        Ok(ToyTextEncoder {
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            config,
            positional,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Build the forward graph; returns (tape, input node, per-block nodes,
    /// final node).
    fn forward(&self, sequence: &[EmbeddingVector]) -> Result<(Tape, NodeId, Vec<NodeId>, NodeId)> {
        check_sequence(sequence, self.config.dim)?;
        let n = sequence.len();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let d = self.config.dim;
        let head_dim = d / self.config.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let eps = self.config.layer_norm_eps;

        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = sequence.iter().map(|v| v.values().to_vec()).collect();
        let input = tape.input(Mat::from_rows(&rows));

        let mut pos_slice = Mat::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                *pos_slice.at_mut(r, c) = self.positional.at(r, c);
            }
        }
        let mut x = tape.add_const(input, &pos_slice);

        let mut block_nodes = Vec::with_capacity(self.config.num_blocks);
        for block in &self.blocks {
            let h = tape.layer_norm(x, &self.ln_gain, &self.ln_bias, eps);
            let mut head_outs = Vec::with_capacity(self.config.num_heads);
            for hd in 0..self.config.num_heads {
                let q = tape.matmul_const(h, &block.wq[hd]);
                let k = tape.matmul_const(h, &block.wk[hd]);
                let v = tape.matmul_const(h, &block.wv[hd]);
                let scores = tape.matmul_nt(q, k);
                let probs = tape.causal_softmax(scores, scale);
                head_outs.push(tape.matmul(probs, v));
            }
            let concat = tape.concat_cols(&head_outs);
            let attn = tape.matmul_const(concat, &block.wo);
            x = tape.add(x, attn);

            let h2 = tape.layer_norm(x, &self.ln_gain, &self.ln_bias, eps);
            let f = tape.matmul_const(h2, &block.w1);
            let f = tape.quick_gelu(f);
            let f = tape.matmul_const(f, &block.w2);
            x = tape.add(x, f);
            block_nodes.push(x);
        }

        let final_node = tape.layer_norm(x, &self.ln_gain, &self.ln_bias, eps);
        Ok((tape, input, block_nodes, final_node))
    }
}

fn mat_to_conditioning(m: &Mat) -> Result<ConditioningVector> {
    let vectors = m
        .rows_vec()
        .into_iter()
        .map(EmbeddingVector::new)
        .collect::<Result<Vec<_>>>()?;
    ConditioningVector::new(vectors)
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, sequence: &[EmbeddingVector]) -> Result<ConditioningVector> {
        let (tape, _, _, final_node) = self.forward(sequence)?;
        mat_to_conditioning(tape.value(final_node))
    }

    fn encode_with_pullback(
        &self,
        sequence: &[EmbeddingVector],
    ) -> Result<(ConditioningVector, Pullback)> {
        let (tape, input, _, final_node) = self.forward(sequence)?;
        let cond = mat_to_conditioning(tape.value(final_node))?;
        let n = sequence.len();
        let d = self.config.dim;
        let pullback: Pullback = Box::new(move |cotangent: &[Vec<f64>]| {
            assert_eq!(cotangent.len(), n, "cotangent position count");
            let seed = Mat::from_rows(cotangent);
            assert_eq!(seed.cols, d, "cotangent dimension");
            let grads = tape.backward(final_node, seed);
            grads[input.index()]
                .as_ref()
                .map(|m| m.rows_vec())
                .unwrap_or_else(|| vec![vec![0.0; d]; n])
        });
        Ok((cond, pullback))
    }

    fn block_trace(&self, sequence: &[EmbeddingVector], position: usize) -> Result<BlockTrace> {
        if position >= sequence.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: sequence.len(),
            });
        }
        let (tape, _, block_nodes, final_node) = self.forward(sequence)?;
        let final_row = tape.value(final_node).row(position).to_vec();
        let mut entries = Vec::with_capacity(block_nodes.len() + 2);
        let input_row = sequence[position].values();
        entries.push(BlockTraceEntry {
            stage: "input".to_string(),
            norm: norm(input_row),
            cosine_to_final: cosine(input_row, &final_row),
        });
        for (i, node) in block_nodes.iter().enumerate() {
            let row = tape.value(*node).row(position);
            entries.push(BlockTraceEntry {
                stage: format!("block{}", i + 1),
                norm: norm(row),
                cosine_to_final: cosine(row, &final_row),
            });
        }
        entries.push(BlockTraceEntry {
            stage: "final".to_string(),
            norm: norm(&final_row),
            cosine_to_final: 1.0,
        });
        Ok(BlockTrace { position, entries })
    }
}

/// Zero-block test double: outputs equal inputs and the pull-back is the
/// identity (final normalization disabled).
pub struct IdentityEncoder {
    dim: usize,
}

impl IdentityEncoder {
    pub fn new(dim: usize) -> Self {
        IdentityEncoder { dim }
    }
}

impl TextEncoder for IdentityEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sequence: &[EmbeddingVector]) -> Result<ConditioningVector> {
        check_sequence(sequence, self.dim)?;
        ConditioningVector::new(sequence.to_vec())
    }

    fn encode_with_pullback(
        &self,
        sequence: &[EmbeddingVector],
    ) -> Result<(ConditioningVector, Pullback)> {
        let cond = self.encode(sequence)?;
        let pullback: Pullback = Box::new(|cotangent: &[Vec<f64>]| cotangent.to_vec());
        Ok((cond, pullback))
    }

    fn block_trace(&self, sequence: &[EmbeddingVector], position: usize) -> Result<BlockTrace> {
        if position >= sequence.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: sequence.len(),
            });
        }
        check_sequence(sequence, self.dim)?;
        let row = sequence[position].values();
        let n = norm(row);
        let entry = |stage: &str| BlockTraceEntry {
            stage: stage.to_string(),
            norm: n,
            cosine_to_final: 1.0,
        };
        Ok(BlockTrace {
            position,
            entries: vec![entry("input"), entry("final")],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_sequence(n: usize, dim: usize, salt: u64) -> Vec<EmbeddingVector> {
        (0..n)
            .map(|i| {
                EmbeddingVector::new(
                    (0..dim)
                        .map(|j| ((i * dim + j) as f64 * 0.13 + salt as f64 * 0.71).sin() * 0.05)
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn toy() -> ToyTextEncoder {
        ToyTextEncoder::new(EncoderConfig {
            seed: 7,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn identity_encoder_returns_input() {
        let enc = IdentityEncoder::new(8);
        let seq = fixture_sequence(3, 8, 1);
        let cond = enc.encode(&seq).unwrap();
        assert_eq!(cond.positions(), &seq[..]);
    }

    #[test]
    fn identity_block_trace_is_flat() {
        let enc = IdentityEncoder::new(8);
        let seq = fixture_sequence(3, 8, 2);
        let trace = enc.block_trace(&seq, 1).unwrap();
        assert_eq!(trace.entries.len(), 2);
        for e in &trace.entries {
            assert!((e.norm - seq[1].norm()).abs() < 1e-15);
            assert!((e.cosine_to_final - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_encode_is_deterministic() {
        let enc = toy();
        let seq = fixture_sequence(5, 32, 3);
        let a = enc.encode(&seq).unwrap();
        let b = enc.encode(&seq).unwrap();
        assert_eq!(a, b);
        let enc2 = toy();
        let c = enc2.encode(&seq).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn toy_outputs_have_layernorm_scale() {
        let enc = toy();
        let seq = fixture_sequence(6, 32, 4);
        let cond = enc.encode(&seq).unwrap();
        let expected = (32.0f64).sqrt();
        for pos in cond.positions() {
            assert!(
                (pos.norm() - expected).abs() < 1e-5,
                "norm {} != sqrt(dim) {}",
                pos.norm(),
                expected
            );
        }
    }

    #[test]
    fn toy_rejects_dim_mismatch_and_long_sequences() {
        let enc = toy();
        let bad = fixture_sequence(2, 16, 5);
        assert!(matches!(
            enc.encode(&bad),
            Err(Error::DimensionMismatch { .. })
        ));
        let long = fixture_sequence(33, 32, 6);
        assert!(matches!(
            enc.encode(&long),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn toy_block_trace_shape_and_final_cosine() {
        let enc = toy();
        let seq = fixture_sequence(5, 32, 7);
        let trace = enc.block_trace(&seq, 2).unwrap();
        assert_eq!(trace.entries.len(), 4 + 2);
        assert_eq!(trace.entries[0].stage, "input");
        assert_eq!(trace.entries.last().unwrap().stage, "final");
        assert!((trace.entries.last().unwrap().cosine_to_final - 1.0).abs() < 1e-6);
        assert!(matches!(
            enc.block_trace(&seq, 9),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_matches_pullback_forward() {
        let enc = toy();
        let seq = fixture_sequence(4, 32, 8);
        let plain = enc.encode(&seq).unwrap();
        let (with_pb, _) = enc.encode_with_pullback(&seq).unwrap();
        assert_eq!(plain, with_pb);
    }

    #[test]
    fn pullback_gradient_matches_finite_differences() {
        let enc = toy();
        let seq = fixture_sequence(4, 32, 9);
        // scalar loss: weighted mean square of all outputs
        let weights: Vec<f64> = (0..4).map(|i| 0.5 + i as f64 * 0.25).collect();
        let loss = |seq: &[EmbeddingVector]| -> f64 {
            let cond = enc.encode(seq).unwrap();
            cond.positions()
                .iter()
                .zip(&weights)
                .map(|(p, w)| w * p.values().iter().map(|v| v * v).sum::<f64>() / (4.0 * 32.0))
                .sum()
        };
        let (cond, pullback) = enc.encode_with_pullback(&seq).unwrap();
        let cotangent: Vec<Vec<f64>> = cond
            .positions()
            .iter()
            .zip(&weights)
            .map(|(p, w)| {
                p.values()
                    .iter()
                    .map(|v| 2.0 * w * v / (4.0 * 32.0))
                    .collect()
            })
            .collect();
        let analytic = pullback(&cotangent);

        let h = 1e-5;
        for pos in 0..4 {
            for j in (0..32).step_by(7) {
                let mut plus = seq.clone();
                plus[pos].values_mut()[j] += h;
                let mut minus = seq.clone();
                minus[pos].values_mut()[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = analytic[pos][j];
                // relative check with an absolute floor for near-zero
                // components where central differences are noise-bound
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "pos {pos} dim {j}: analytic {an}, fd {fd}"
                );
            }
        }
    }
}
