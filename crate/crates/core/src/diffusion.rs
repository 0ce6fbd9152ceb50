//! Noise schedule, LDM epsilon-prediction loss, toy differentiable
//! denoiser and latent autoencoder stub, adapter contracts for pretrained
//! denoisers/decoders, and a minimal deterministic sampler.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Mat, Tape};
use crate::encoder::ConditioningVector;
use crate::error::{Error, Result};

/// Forward-process schedule: betas and their cumulative alpha products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp; the toy default is `linear(100, 1e-4, 0.02)`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
        }
        let betas = (0..t_steps)
            .map(|t| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("schedule needs T >= 1".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "beta[{i}] = {b} outside (0,1)"
                )));
            }
            if i > 0 && betas[i] <= betas[i - 1] {
                return Err(Error::InvalidConfig(format!(
                    "betas must be strictly increasing at index {i}"
                )));
            }
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let schedule = NoiseSchedule {
            betas,
            alphas_cumprod,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Re-derive the invariants: betas in (0,1) strictly increasing,
    /// cumulative products strictly decreasing and within 1e-12 of the
    /// running product.
    pub fn validate(&self) -> Result<()> {
        let mut acc = 1.0;
        for t in 0..self.len() {
            acc *= 1.0 - self.betas[t];
            if (self.alphas_cumprod[t] - acc).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "alphas_cumprod[{t}] drifts from the running product"
                )));
            }
            if !(self.alphas_cumprod[t] > 0.0 && self.alphas_cumprod[t] <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "alphas_cumprod[{t}] outside (0,1]"
                )));
            }
            if t > 0 && self.alphas_cumprod[t] >= self.alphas_cumprod[t - 1] {
                return Err(Error::InvalidConfig(format!(
                    "alphas_cumprod not strictly decreasing at {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.betas
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.len() })
    }

    pub fn alpha_cumprod(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.len() })
    }
}

/// A batch of clean latents, their noise draws, and timesteps.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z0: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub t: Vec<usize>,
}

impl LatentBatch {
    pub fn new(
        z0: Vec<Vec<f64>>,
        eps: Vec<Vec<f64>>,
        t: Vec<usize>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if z0.is_empty() {
            return Err(Error::EmptyInput("latent batch".into()));
        }
        if z0.len() != eps.len() || z0.len() != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch sizes differ: z0 {}, eps {}, t {}",
                z0.len(),
                eps.len(),
                t.len()
            )));
        }
        let dim = z0[0].len();
        for (a, b) in z0.iter().zip(eps.iter()) {
            if a.len() != dim || b.len() != dim {
                return Err(Error::ShapeMismatch("ragged latent batch".into()));
            }
        }
        for &ti in &t {
            if ti >= schedule.len() {
                return Err(Error::TimestepOutOfRange {
                    t: ti,
                    max: schedule.len(),
                });
            }
        }
        Ok(LatentBatch { z0, eps, t })
    }

    pub fn len(&self) -> usize {
        self.z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.z0[0].len()
    }
}

/// Forward-noise one latent: `sqrt(a_t) z0 + sqrt(1 - a_t) eps`.
pub fn noisify(z0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "z0 len {} != eps len {}",
            z0.len(),
            eps.len()
        )));
    }
    let a = schedule.alpha_cumprod(t)?;
    let sa = a.sqrt();
    let sn = (1.0 - a).sqrt();
    Ok(z0
        .iter()
        .zip(eps.iter())
        .map(|(z, e)| sa * z + sn * e)
        .collect())
}

/// Pull-back from the epsilon prediction to the conditioning positions.
pub type DenoiserPullback = Box<dyn FnOnce(&[f64]) -> Vec<Vec<f64>>>;

/// Adapter contract for denoisers: declare the latent shape, accept
/// `(z_t, t, conditioning)`, return the noise estimate, and support
/// gradient pull-back to the conditioning.
pub trait Denoiser {
    fn latent_dim(&self) -> usize;

    fn predict(&self, z_t: &[f64], t: usize, cond: &ConditioningVector) -> Result<Vec<f64>>;

    fn predict_with_pullback(
        &self,
        z_t: &[f64],
        t: usize,
        cond: &ConditioningVector,
    ) -> Result<(Vec<f64>, DenoiserPullback)>;
}

/// Adapter contract for the latent-space image encoder (the `E` stub).
pub trait LatentSpaceEncoder {
    fn latent_dim(&self) -> usize;
    fn encode_image(&self, path: &Path) -> Result<Vec<f64>>;
}

/// Adapter contract for decoders mapping a latent to an image file.
pub trait LatentDecoder {
    fn decode_to_image(&self, latent: &[f64], path: &Path) -> Result<()>;
}

/// Fixed seeded linear projection of a flattened 16x16 grayscale image to
/// the toy latent space.
pub struct ToyLatentEncoder {
    projection: Mat,
    latent_dim: usize,
}

pub const TOY_IMAGE_SIDE: u32 = 16;

impl ToyLatentEncoder {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        let input_dim = (TOY_IMAGE_SIDE * TOY_IMAGE_SIDE) as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("valid stddev");
        let data = (0..latent_dim * input_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        ToyLatentEncoder {
            projection: Mat::from_vec(latent_dim, input_dim, data),
            latent_dim,
        }
    }

    /// Project an already flattened image vector.
    pub fn encode_flat(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        if pixels.len() != self.projection.cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {} pixels, got {}",
                self.projection.cols,
                pixels.len()
            )));
        }
        let mut out = vec![0.0; self.latent_dim];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self
                .projection
                .row(r)
                .iter()
                .zip(pixels)
                .map(|(w, p)| w * p)
                .sum();
        }
        Ok(out)
    }
}

impl LatentSpaceEncoder for ToyLatentEncoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn encode_image(&self, path: &Path) -> Result<Vec<f64>> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{path:?}: {e}")))?;
        let gray = image::imageops::resize(
            &img.to_luma8(),
            TOY_IMAGE_SIDE,
            TOY_IMAGE_SIDE,
            image::imageops::FilterType::Triangle,
        );
        let pixels: Vec<f64> = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        self.encode_flat(&pixels)
    }
}

/// Two-hidden-layer perceptron denoiser over
/// `[z_t || sinusoidal t-embedding || mean-pooled conditioning]`.
///
/// Weights are drawn from a ChaCha12 stream seeded with `seed`, N(0, 0.1^2),
/// in order W1 `[in, hidden]`, W2 `[hidden, hidden]`, W3 `[hidden, latent]`,
/// all row-major. The activation is tanh. The denoiser is frozen; only the
/// conditioning receives gradients.
pub struct ToyDenoiser {
    w1: Mat,
    w2: Mat,
    w3: Mat,
    latent_dim: usize,
    cond_dim: usize,
    t_embed_dim: usize,
}

impl ToyDenoiser {
    pub fn new(latent_dim: usize, cond_dim: usize, hidden: usize, seed: u64) -> Self {
        let t_embed_dim = 8;
        let in_dim = latent_dim + t_embed_dim + cond_dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid stddev");
        let mut draw = |rows: usize, cols: usize| -> Mat {
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
            )
        };
        ToyDenoiser {
            w1: draw(in_dim, hidden),
            w2: draw(hidden, hidden),
            w3: draw(hidden, latent_dim),
            latent_dim,
            cond_dim,
            t_embed_dim,
        }
    }

    pub fn sinusoidal_t_embedding(&self, t: usize) -> Vec<f64> {
        sinusoidal_embedding(t, self.t_embed_dim)
    }

    fn forward(
        &self,
        z_t: &[f64],
        t: usize,
        cond: &ConditioningVector,
    ) -> Result<(Tape, crate::autodiff::NodeId, crate::autodiff::NodeId)> {
        if z_t.len() != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "z_t len {} != latent_dim {}",
                z_t.len(),
                self.latent_dim
            )));
        }
        if cond.dim() != self.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cond_dim,
                got: cond.dim(),
            });
        }
        let mut tape = Tape::new();
        let cond_rows: Vec<Vec<f64>> = cond
            .positions()
            .iter()
            .map(|p| p.values().to_vec())
            .collect();
        let cond_node = tape.input(Mat::from_rows(&cond_rows));
        let pooled = tape.mean_rows(cond_node);
        let z_node = tape.input(Mat::row_vector(z_t));
        let temb = tape.input(Mat::row_vector(&self.sinusoidal_t_embedding(t)));
        let joined = tape.concat_cols(&[z_node, temb, pooled]);
        let h = tape.matmul_const(joined, &self.w1);
        let h = tape.tanh(h);
        let h = tape.matmul_const(h, &self.w2);
        let h = tape.tanh(h);
        let out = tape.matmul_const(h, &self.w3);
        Ok((tape, cond_node, out))
    }
}

/// Standard sinusoidal position embedding of a timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    out
}

impl Denoiser for ToyDenoiser {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn predict(&self, z_t: &[f64], t: usize, cond: &ConditioningVector) -> Result<Vec<f64>> {
        let (tape, _, out) = self.forward(z_t, t, cond)?;
        Ok(tape.value(out).data.clone())
    }

    fn predict_with_pullback(
        &self,
        z_t: &[f64],
        t: usize,
        cond: &ConditioningVector,
    ) -> Result<(Vec<f64>, DenoiserPullback)> {
        let (tape, cond_node, out) = self.forward(z_t, t, cond)?;
        let prediction = tape.value(out).data.clone();
        let n_pos = cond.len();
        let cond_dim = self.cond_dim;
        let latent_dim = self.latent_dim;
        let pullback: DenoiserPullback = Box::new(move |cotangent: &[f64]| {
            assert_eq!(cotangent.len(), latent_dim, "cotangent latent size");
            let seed = Mat::row_vector(cotangent);
            let grads = tape.backward(out, seed);
            grads[cond_node.index()]
                .as_ref()
                .map(|m| m.rows_vec())
                .unwrap_or_else(|| vec![vec![0.0; cond_dim]; n_pos])
        });
        Ok((prediction, pullback))
    }
}

/// Mean squared error between the injected noise and the denoiser's
/// prediction, averaged over batch and latent dimensions.
pub fn ldm_loss(
    batch: &LatentBatch,
    cond: &ConditioningVector,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    ldm_loss_impl(batch, cond, denoiser, schedule, false).map(|(l, _)| l)
}

/// As [`ldm_loss`], also returning the gradient with respect to each
/// conditioning position.
pub fn ldm_loss_with_grad(
    batch: &LatentBatch,
    cond: &ConditioningVector,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Vec<f64>>)> {
    ldm_loss_impl(batch, cond, denoiser, schedule, true)
        .map(|(l, g)| (l, g.expect("gradient requested")))
}

fn ldm_loss_impl(
    batch: &LatentBatch,
    cond: &ConditioningVector,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let latent_dim = denoiser.latent_dim();
    if batch.latent_dim() != latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "batch latent dim {} != denoiser latent dim {}",
            batch.latent_dim(),
            latent_dim
        )));
    }
    let b = batch.len() as f64;
    let d = latent_dim as f64;
    let mut loss = 0.0;
    let mut grad: Option<Vec<Vec<f64>>> =
        with_grad.then(|| vec![vec![0.0; cond.dim()]; cond.len()]);
    for i in 0..batch.len() {
        let z_t = noisify(&batch.z0[i], &batch.eps[i], batch.t[i], schedule)?;
        if with_grad {
            let (eps_hat, pullback) = denoiser.predict_with_pullback(&z_t, batch.t[i], cond)?;
            let mut cot = vec![0.0; latent_dim];
            for j in 0..latent_dim {
                let diff = batch.eps[i][j] - eps_hat[j];
                loss += diff * diff;
                cot[j] = 2.0 * (eps_hat[j] - batch.eps[i][j]) / (b * d);
            }
            let g = pullback(&cot);
            let grad = grad.as_mut().expect("allocated above");
            for (acc, row) in grad.iter_mut().zip(g.iter()) {
                for (a, v) in acc.iter_mut().zip(row.iter()) {
                    *a += v;
                }
            }
        } else {
            let eps_hat = denoiser.predict(&z_t, batch.t[i], cond)?;
            for j in 0..latent_dim {
                let diff = batch.eps[i][j] - eps_hat[j];
                loss += diff * diff;
            }
        }
    }
    Ok((loss / (b * d), grad))
}

/// Deterministic ancestral sampler: walks `steps` evenly spaced timesteps
/// from T-1 down, using the exact posterior between selected steps. All
/// noise comes from a ChaCha stream seeded with `seed` (initial draw first,
/// then one per intermediate step), so identical seeds give identical
/// outputs.
pub fn sample_latent(
    cond: &ConditioningVector,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("sampler needs steps >= 1".into()));
    }
    let t_max = schedule.len();
    let latent_dim = denoiser.latent_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..latent_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let steps = steps.min(t_max);
    let timesteps: Vec<usize> = if steps == 1 {
        vec![t_max - 1]
    } else {
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| {
                ((t_max - 1) as f64 * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize
            })
            .collect();
        ts.dedup();
        ts
    };

    for (i, &t_cur) in timesteps.iter().enumerate() {
        let eps_hat = denoiser.predict(&z, t_cur, cond)?;
        let a_cur = schedule.alpha_cumprod(t_cur)?;
        let a_prev = if i + 1 < timesteps.len() {
            schedule.alpha_cumprod(timesteps[i + 1])?
        } else {
            1.0
        };
        let gamma = a_cur / a_prev;
        let x0_hat: Vec<f64> = z
            .iter()
            .zip(eps_hat.iter())
            .map(|(zv, ev)| (zv - (1.0 - a_cur).sqrt() * ev) / a_cur.sqrt())
            .collect();
        let coef_z = gamma.sqrt() * (1.0 - a_prev) / (1.0 - a_cur);
        let coef_x0 = a_prev.sqrt() * (1.0 - gamma) / (1.0 - a_cur);
        let var = (1.0 - a_prev) * (1.0 - gamma) / (1.0 - a_cur);
        let last = i + 1 == timesteps.len();
        for j in 0..latent_dim {
            let mean = coef_z * z[j] + coef_x0 * x0_hat[j];
            z[j] = if last {
                mean
            } else {
                let noise: f64 = StandardNormal.sample(&mut rng);
                mean + var.max(0.0).sqrt() * noise
            };
        }
    }
    Ok(z)
}
