//! Run configuration: built-in defaults, optional JSON config file, and
//! command-line flags, merged with precedence CLI > file > defaults.

use std::path::{Path, PathBuf};

use crossinit::embedding::InitStrategy;
use crossinit::error::{Error, Result};
use crossinit::inversion::OptimizerConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_INIT_TEMPLATE: &str = "a photo of a {f} {l} person";
pub const DEFAULT_TRAIN_TEMPLATES: [&str; 2] =
    ["a photo of a {f} {l} person", "a portrait of {f} {l}"];
pub const DEFAULT_CLASS_WORD: &str = "person";
pub const DEFAULT_SAMPLE_STEPS: usize = 10;

/// One layer of settings; `None` means "not set at this layer".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub backend: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub images: Option<Vec<PathBuf>>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub init: Option<String>,
    pub fast: Option<bool>,
    pub checkpoint_every: Option<usize>,
    pub init_template: Option<String>,
    pub train_templates: Option<Vec<String>>,
    pub k_tokens: Option<usize>,
    pub prompts: Option<PathBuf>,
    pub n_per_prompt: Option<usize>,
    pub sample_steps: Option<usize>,
    pub class_word: Option<String>,
    pub run_id: Option<String>,
}

impl PartialConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// Fields set in `over` win over `self`.
    fn overlaid(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            backend: over.backend.or(self.backend),
            seed: over.seed.or(self.seed),
            output_dir: over.output_dir.or(self.output_dir),
            names: over.names.or(self.names),
            images: over.images.or(self.images),
            steps: over.steps.or(self.steps),
            learning_rate: over.learning_rate.or(self.learning_rate),
            batch_size: over.batch_size.or(self.batch_size),
            lambda: over.lambda.or(self.lambda),
            init: over.init.or(self.init),
            fast: over.fast.or(self.fast),
            checkpoint_every: over.checkpoint_every.or(self.checkpoint_every),
            init_template: over.init_template.or(self.init_template),
            train_templates: over.train_templates.or(self.train_templates),
            k_tokens: over.k_tokens.or(self.k_tokens),
            prompts: over.prompts.or(self.prompts),
            n_per_prompt: over.n_per_prompt.or(self.n_per_prompt),
            sample_steps: over.sample_steps.or(self.sample_steps),
            class_word: over.class_word.or(self.class_word),
            run_id: over.run_id.or(self.run_id),
        }
    }
}

fn parse_init(s: &str) -> Result<InitStrategy> {
    match s {
        "cross" => Ok(InitStrategy::Cross),
        "super-category" | "super_category" => Ok(InitStrategy::SuperCategory),
        "raw-mean" | "raw_mean" => Ok(InitStrategy::RawMean),
        "direct-output" | "direct_output" => Ok(InitStrategy::DirectOutput),
        other => Err(Error::InvalidConfig(format!(
            "unknown init strategy {other:?} (cross | super-category | raw-mean | direct-output)"
        ))),
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub backend: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub names: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub init: InitStrategy,
    pub fast: bool,
    pub checkpoint_every: usize,
    pub init_template: String,
    pub train_templates: Vec<String>,
    pub k_tokens: usize,
    pub prompts: Option<PathBuf>,
    pub n_per_prompt: Option<usize>,
    pub sample_steps: usize,
    pub class_word: String,
    pub run_id: Option<String>,
}

impl RunConfig {
    /// Merge the three layers. `file` comes from `--config` when given.
    pub fn resolve(cli: PartialConfig, file: Option<PartialConfig>) -> Result<RunConfig> {
        let merged = match file {
            Some(f) => PartialConfig::default().overlaid(f).overlaid(cli),
            None => cli,
        };
        let defaults = OptimizerConfig::default();
        let mut config = RunConfig {
            backend: merged.backend.unwrap_or_else(|| "toy".to_string()),
            seed: merged.seed.unwrap_or(0),
            output_dir: merged.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            names: merged.names,
            images: merged.images.unwrap_or_default(),
            steps: merged.steps.unwrap_or(defaults.steps),
            learning_rate: merged.learning_rate.unwrap_or(defaults.learning_rate),
            batch_size: merged.batch_size.unwrap_or(defaults.batch_size),
            lambda: merged.lambda.unwrap_or(defaults.lambda),
            init: parse_init(merged.init.as_deref().unwrap_or("cross"))?,
            fast: merged.fast.unwrap_or(false),
            checkpoint_every: merged.checkpoint_every.unwrap_or(defaults.checkpoint_every),
            init_template: merged
                .init_template
                .unwrap_or_else(|| DEFAULT_INIT_TEMPLATE.to_string()),
            train_templates: merged.train_templates.unwrap_or_else(|| {
                DEFAULT_TRAIN_TEMPLATES
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            }),
            k_tokens: merged.k_tokens.unwrap_or(2),
            prompts: merged.prompts,
            n_per_prompt: merged.n_per_prompt,
            sample_steps: merged.sample_steps.unwrap_or(DEFAULT_SAMPLE_STEPS),
            class_word: merged
                .class_word
                .unwrap_or_else(|| DEFAULT_CLASS_WORD.to_string()),
            run_id: merged.run_id,
        };
        if config.fast {
            config.steps = crossinit::inversion::FAST_STEPS;
            config.learning_rate = crossinit::inversion::FAST_LEARNING_RATE;
        }
        Ok(config)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda: self.lambda,
            init_strategy: self.init,
            seed: self.seed,
            fast: self.fast,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Referenced input paths must exist at launch.
    pub fn check_paths(&self) -> Result<()> {
        let mut missing = Vec::new();
        if let Some(p) = &self.names {
            if !p.exists() {
                missing.push(p.clone());
            }
        }
        if let Some(p) = &self.prompts {
            if !p.exists() {
                missing.push(p.clone());
            }
        }
        for p in &self.images {
            if !p.exists() {
                missing.push(p.clone());
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "missing input paths: {missing:?}"
            )))
        }
    }
}
