//! The optimization engine: initialization strategies, the regularized
//! objective, the SGD loop over the concept vectors (encoder and denoiser
//! stay frozen), ablation modes, and checkpointing.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_direct, assemble_with_pullback, cross_initialize};
use crate::diagnostics::{record_step, StepLosses, TrajectoryRecord};
use crate::diffusion::{ldm_loss_with_grad, Denoiser, LatentBatch, NoiseSchedule};
use crate::embedding::{
    lookup_embedding, mean_name_embedding, save_concept, ConceptEmbedding, EmbeddingTable,
    EmbeddingVector, InitStrategy, NameList,
};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;

/// Default super-category tokens, matching the traditional "human face"
/// initialization.
pub const DEFAULT_SUPER_TOKENS: [&str; 2] = ["human", "face"];

/// Run hyperparameters. Defaults follow the reference setup: 320 steps,
/// learning rate 0.005, batch size 8, lambda 1e-5; fast mode resolves to
/// 25 steps at learning rate 0.08.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub init_strategy: InitStrategy,
    pub seed: u64,
    pub fast: bool,
    /// Checkpoint cadence in steps.
    pub checkpoint_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            steps: 320,
            learning_rate: 0.005,
            batch_size: 8,
            lambda: 1e-5,
            init_strategy: InitStrategy::Cross,
            seed: 0,
            fast: false,
            checkpoint_every: 80,
        }
    }
}

pub const FAST_STEPS: usize = 25;
pub const FAST_LEARNING_RATE: f64 = 0.08;

impl OptimizerConfig {
    /// Apply the fast-mode overrides. Fast wins over any explicit
    /// steps/learning-rate setting.
    pub fn resolved(&self) -> OptimizerConfig {
        let mut c = self.clone();
        if c.fast {
            c.steps = FAST_STEPS;
            c.learning_rate = FAST_LEARNING_RATE;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(
                "lambda must be finite and >= 0".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of one optimization run.
#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// The learned concept.
    pub concept: ConceptEmbedding,
    /// The regularizer anchor, unchanged for the whole run.
    pub v_init: ConceptEmbedding,
    pub trajectory: TrajectoryRecord,
    /// Resolved config echo.
    pub config: OptimizerConfig,
    pub wall_time_secs: f64,
}

/// Squared L2 distance between a concept and its initialization, summed
/// over slots.
pub fn reg_loss(v: &ConceptEmbedding, v_init: &ConceptEmbedding) -> Result<f64> {
    if v.k() != v_init.k() || v.dim() != v_init.dim() {
        return Err(Error::ShapeMismatch(format!(
            "concept ({}x{}) vs init ({}x{})",
            v.k(),
            v.dim(),
            v_init.k(),
            v_init.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..v.k() {
        for (a, b) in v.vector(i).values().iter().zip(v_init.vector(i).values()) {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok(acc)
}

/// Gradient of [`reg_loss`] w.r.t. `v`: `2 (v - v_init)` per slot.
pub fn reg_grad(v: &ConceptEmbedding, v_init: &ConceptEmbedding) -> Result<Vec<Vec<f64>>> {
    if v.k() != v_init.k() || v.dim() != v_init.dim() {
        return Err(Error::ShapeMismatch("concept vs init".into()));
    }
    Ok((0..v.k())
        .map(|i| {
            v.vector(i)
                .values()
                .iter()
                .zip(v_init.vector(i).values())
                .map(|(a, b)| 2.0 * (a - b))
                .collect()
        })
        .collect())
}

/// `diffusion_loss + lambda * reg`.
pub fn total_loss(diffusion_loss: f64, reg: f64, lambda: f64) -> Result<f64> {
    if !diffusion_loss.is_finite() || !reg.is_finite() || !lambda.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!(
                "total_loss inputs: diffusion {diffusion_loss}, reg {reg}, lambda {lambda}"
            ),
        });
    }
    let total = diffusion_loss + lambda * reg;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!("total_loss result from diffusion {diffusion_loss}, reg {reg}"),
        });
    }
    Ok(total)
}

/// Build an initial concept for the chosen strategy.
///
/// * `cross`: encoder output on the mean-name embedding.
/// * `super_category`: lookups of the configured class tokens.
/// * `raw_mean`: mean-name embedding only.
/// * `direct_output`: same vectors as `cross`, tagged so optimization
///   splices them straight into the conditioning.
pub fn initialize(
    strategy: InitStrategy,
    names: Option<&NameList>,
    table: &dyn EmbeddingTable,
    encoder: &dyn TextEncoder,
    template: &PromptTemplate,
    super_tokens: &[String],
    k: usize,
) -> Result<ConceptEmbedding> {
    if k == 0 || k > 2 {
        return Err(Error::InvalidConfig(format!(
            "k-tokens {k} unsupported (1 or 2)"
        )));
    }
    let needs_names = matches!(
        strategy,
        InitStrategy::Cross | InitStrategy::RawMean | InitStrategy::DirectOutput
    );
    if needs_names && names.is_none() {
        return Err(Error::MissingNames {
            strategy: strategy.to_string(),
        });
    }
    let concept = match strategy {
        InitStrategy::RawMean => {
            shrink_to_k(mean_name_embedding(names.expect("checked"), table)?, k)?
        }
        InitStrategy::Cross => {
            let mean = shrink_to_k(mean_name_embedding(names.expect("checked"), table)?, k)?;
            cross_initialize(&mean, encoder, template, table)?
        }
        InitStrategy::DirectOutput => {
            let mean = shrink_to_k(mean_name_embedding(names.expect("checked"), table)?, k)?;
            let crossed = cross_initialize(&mean, encoder, template, table)?;
            crossed.with_vectors(
                crossed.vectors().into_iter().cloned().collect(),
                InitStrategy::DirectOutput,
            )?
        }
        InitStrategy::SuperCategory => {
            if super_tokens.len() < k {
                return Err(Error::InvalidConfig(format!(
                    "{} super-category tokens provided, {} needed",
                    super_tokens.len(),
                    k
                )));
            }
            let slot_names: &[&str] = if k == 2 { &["f", "l"] } else { &["f"] };
            let tokens = super_tokens[..k]
                .iter()
                .zip(slot_names)
                .map(|(tok, name)| Ok((name.to_string(), lookup_embedding(tok, table)?)))
                .collect::<Result<Vec<_>>>()?;
            ConceptEmbedding::new(tokens, InitStrategy::SuperCategory)?
        }
    };
    Ok(concept)
}

/// Keep the first `k` slots of a concept (the mean-name concept always has
/// two: first-name then last-name).
fn shrink_to_k(concept: ConceptEmbedding, k: usize) -> Result<ConceptEmbedding> {
    if concept.k() == k {
        return Ok(concept);
    }
    let tokens: Vec<(String, EmbeddingVector)> = concept
        .slots()
        .take(k)
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    ConceptEmbedding::new(tokens, concept.init_strategy())
}

/// Everything an optimization run reads. The latents are the pre-encoded
/// clean codes of the input images (one per image).
pub struct OptimizeInputs<'a> {
    pub latents: &'a [Vec<f64>],
    pub config: &'a OptimizerConfig,
    pub names: Option<&'a NameList>,
    pub table: &'a dyn EmbeddingTable,
    pub encoder: &'a dyn TextEncoder,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    /// Training prompts containing the placeholder slots.
    pub templates: &'a [PromptTemplate],
    /// Template used for initialization and for the per-step encoder-output
    /// geometry reference.
    pub init_template: &'a PromptTemplate,
    pub super_tokens: &'a [String],
    pub k: usize,
}

/// One evaluation of the total objective at `v`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub total: f64,
    pub diffusion: f64,
    pub reg: f64,
    /// Gradient of the total loss w.r.t. each slot vector.
    pub slot_grads: Vec<Vec<f64>>,
}

/// Evaluate `L_diffusion + lambda * L_reg` and its gradient w.r.t. the
/// concept vectors for one (template, batch) draw. When `direct_context`
/// is given the concept bypasses the encoder: its vectors overwrite the
/// conditioning at the placeholder positions and gradients are read
/// straight off the conditioning cotangent.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_grad(
    v: &ConceptEmbedding,
    v_init: &ConceptEmbedding,
    lambda: f64,
    template: &PromptTemplate,
    batch: &LatentBatch,
    table: &dyn EmbeddingTable,
    encoder: &dyn TextEncoder,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    direct_context: Option<&ConceptEmbedding>,
) -> Result<ObjectiveEval> {
    let (diffusion, slot_diff_grads) = match direct_context {
        Some(context) => {
            let (cond, slots) = assemble_direct(template, context, v, encoder, table)?;
            let (loss, dcond) = ldm_loss_with_grad(batch, &cond, denoiser, schedule)?;
            let grads = slots.iter().map(|&p| dcond[p].clone()).collect::<Vec<_>>();
            (loss, grads)
        }
        None => {
            let (cond, slots, pullback) = assemble_with_pullback(template, v, encoder, table)?;
            let (loss, dcond) = ldm_loss_with_grad(batch, &cond, denoiser, schedule)?;
            let dinputs = pullback(&dcond);
            let grads = slots
                .iter()
                .map(|&p| dinputs[p].clone())
                .collect::<Vec<_>>();
            (loss, grads)
        }
    };
    let reg = reg_loss(v, v_init)?;
    let reg_g = reg_grad(v, v_init)?;
    let slot_grads = slot_diff_grads
        .into_iter()
        .zip(reg_g)
        .map(|(dg, rg)| {
            dg.into_iter()
                .zip(rg)
                .map(|(d, r)| d + lambda * r)
                .collect()
        })
        .collect();
    Ok(ObjectiveEval {
        total: diffusion + lambda * reg,
        diffusion,
        reg,
        slot_grads,
    })
}

/// Loss-only evaluation of the total objective (used by finite-difference
/// checks).
#[allow(clippy::too_many_arguments)]
pub fn objective(
    v: &ConceptEmbedding,
    v_init: &ConceptEmbedding,
    lambda: f64,
    template: &PromptTemplate,
    batch: &LatentBatch,
    table: &dyn EmbeddingTable,
    encoder: &dyn TextEncoder,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    direct_context: Option<&ConceptEmbedding>,
) -> Result<f64> {
    let cond = match direct_context {
        Some(context) => assemble_direct(template, context, v, encoder, table)?.0,
        None => {
            let assembled = crate::conditioning::build_sequence(template, v, table)?;
            encoder.encode(&assembled.vectors)?
        }
    };
    let diffusion = crate::diffusion::ldm_loss(batch, &cond, denoiser, schedule)?;
    let reg = reg_loss(v, v_init)?;
    Ok(diffusion + lambda * reg)
}

fn draw_batch(
    rng: &mut ChaCha12Rng,
    latents: &[Vec<f64>],
    batch_size: usize,
    latent_dim: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch> {
    let mut z0 = Vec::with_capacity(batch_size);
    let mut eps = Vec::with_capacity(batch_size);
    let mut t = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let img = rng.gen_range(0..latents.len());
        z0.push(latents[img].clone());
        t.push(rng.gen_range(0..schedule.len()));
        eps.push(
            (0..latent_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        );
    }
    LatentBatch::new(z0, eps, t, schedule)
}

/// Gradient descent on the concept vectors only. Each step samples one
/// training template and a batch of (latent, noise, timestep) triples,
/// records a trajectory point, then applies one SGD update; the final
/// state is recorded without an update, so the trajectory has `steps + 1`
/// points. A non-finite loss aborts the run after persisting the last
/// finite state as a checkpoint.
pub fn optimize(
    inputs: &OptimizeInputs<'_>,
    checkpoint_dir: Option<&Path>,
) -> Result<OptimizationResult> {
    let started = Instant::now();
    let config = inputs.config.resolved();
    config.validate()?;
    if inputs.latents.is_empty() {
        return Err(Error::EmptyInput(
            "optimize needs at least one input image".into(),
        ));
    }
    if inputs.templates.is_empty() {
        return Err(Error::EmptyInput(
            "optimize needs at least one training template".into(),
        ));
    }

    let v_init = initialize(
        config.init_strategy,
        inputs.names,
        inputs.table,
        inputs.encoder,
        inputs.init_template,
        inputs.super_tokens,
        inputs.k,
    )?;
    // Pre-encoder context for direct-output mode: the frozen raw-mean
    // vectors occupy the placeholder positions so other tokens still see a
    // name-like context.
    let direct_context = if config.init_strategy == InitStrategy::DirectOutput {
        Some(shrink_to_k(
            mean_name_embedding(
                inputs.names.ok_or(Error::MissingNames {
                    strategy: "direct_output".into(),
                })?,
                inputs.table,
            )?,
            inputs.k,
        )?)
    } else {
        None
    };

    let mut v = v_init.clone();
    let mut trajectory = TrajectoryRecord::new();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let latent_dim = inputs.denoiser.latent_dim();
    let mut last_finite = v.clone();
    let mut last_finite_step = 0usize;

    for step in 0..=config.steps {
        // Draw order is fixed: template index, then per-element
        // (image, timestep, noise) triples.
        let template = &inputs.templates[rng.gen_range(0..inputs.templates.len())];
        let batch = draw_batch(
            &mut rng,
            inputs.latents,
            config.batch_size,
            latent_dim,
            inputs.schedule,
        )?;

        let eval = objective_with_grad(
            &v,
            &v_init,
            config.lambda,
            template,
            &batch,
            inputs.table,
            inputs.encoder,
            inputs.denoiser,
            inputs.schedule,
            direct_context.as_ref(),
        )?;
        let grads_finite = eval
            .slot_grads
            .iter()
            .all(|g| g.iter().all(|x| x.is_finite()));
        if !eval.total.is_finite() || !grads_finite {
            if let Some(dir) = checkpoint_dir {
                let mut meta = serde_json::Map::new();
                meta.insert("step".into(), serde_json::json!(last_finite_step));
                meta.insert("aborted_at_step".into(), serde_json::json!(step));
                save_concept(&last_finite, &dir.join("last_finite.json"), meta)?;
            }
            return Err(Error::NonFiniteLoss {
                context: format!("step {step} (last finite state: step {last_finite_step})"),
            });
        }

        record_step(
            &mut trajectory,
            step,
            StepLosses {
                total: eval.total,
                diffusion: eval.diffusion,
                reg: eval.reg,
            },
            &v,
            &v_init,
            inputs.encoder,
            inputs.init_template,
            inputs.table,
        )?;
        last_finite = v.clone();
        last_finite_step = step;

        if let Some(dir) = checkpoint_dir {
            if step > 0 && step % config.checkpoint_every == 0 && step != config.steps {
                let mut meta = serde_json::Map::new();
                meta.insert("step".into(), serde_json::json!(step));
                save_concept(
                    &v,
                    &dir.join(format!("checkpoint_step{step:04}.json")),
                    meta,
                )?;
            }
        }

        if step < config.steps {
            let updated: Vec<Vec<f64>> = (0..v.k())
                .map(|i| {
                    v.vector(i)
                        .values()
                        .iter()
                        .zip(eval.slot_grads[i].iter())
                        .map(|(val, g)| val - config.learning_rate * g)
                        .collect()
                })
                .collect();
            if updated.iter().any(|vec| vec.iter().any(|x| !x.is_finite())) {
                if let Some(dir) = checkpoint_dir {
                    let mut meta = serde_json::Map::new();
                    meta.insert("step".into(), serde_json::json!(last_finite_step));
                    meta.insert("aborted_at_step".into(), serde_json::json!(step + 1));
                    save_concept(&last_finite, &dir.join("last_finite.json"), meta)?;
                }
                return Err(Error::NonFiniteLoss {
                    context: format!("update after step {step} produced non-finite vectors"),
                });
            }
            let new_vectors = updated
                .into_iter()
                .map(EmbeddingVector::new)
                .collect::<Result<Vec<_>>>()?;
            v = v.with_vectors(new_vectors, v.init_strategy())?;
        }
    }

    Ok(OptimizationResult {
        concept: v,
        v_init,
        trajectory,
        config,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Ablation modes: drop cross initialization, the mean embedding, or the
/// regularizer; `full` is the unmodified configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    NoCi,
    NoMean,
    NoReg,
    Full,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_ci" | "no-ci" => Ok(AblationMode::NoCi),
            "no_mean" | "no-mean" => Ok(AblationMode::NoMean),
            "no_reg" | "no-reg" => Ok(AblationMode::NoReg),
            "full" => Ok(AblationMode::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation mode {other:?}"
            ))),
        }
    }
}

/// Run [`optimize`] under an ablation mode:
/// `no_ci` switches to super-category initialization, `no_mean` computes
/// cross initialization from the first name alone, `no_reg` zeroes lambda.
pub fn ablation_run(
    mode: AblationMode,
    inputs: &OptimizeInputs<'_>,
    checkpoint_dir: Option<&Path>,
) -> Result<OptimizationResult> {
    let mut config = inputs.config.clone();
    let single_name;
    let mut names = inputs.names;
    match mode {
        AblationMode::NoCi => {
            config.init_strategy = InitStrategy::SuperCategory;
        }
        AblationMode::NoMean => {
            let full = inputs.names.ok_or(Error::MissingNames {
                strategy: "no_mean ablation".into(),
            })?;
            single_name = full.head();
            names = Some(&single_name);
        }
        AblationMode::NoReg => {
            config.lambda = 0.0;
        }
        AblationMode::Full => {}
    }
    let adjusted = OptimizeInputs {
        config: &config,
        names,
        ..*inputs
    };
    optimize(&adjusted, checkpoint_dir)
}
