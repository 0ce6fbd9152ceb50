//! Subcommand surface: train, analyze, generate, evaluate, ablate.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crossinit::backend::Backend;
use crossinit::conditioning::{
    assemble_conditioning, build_sequence, repeated_encoding_trace, repeated_sequence_encoding,
    write_position_trace_csv, write_repeated_encoding_csv,
};
use crossinit::diagnostics::{export_trajectory, export_trajectory_concat};
use crossinit::diffusion::sample_latent;
use crossinit::embedding::{load_concept, save_concept, EmbeddingVector, NameList};
use crossinit::error::{Error, Result};
use crossinit::evaluation::{evaluate, EvalContext, EvalImage, PromptSet};
use crossinit::inversion::{
    ablation_run, optimize, AblationMode, OptimizeInputs, DEFAULT_SUPER_TOKENS,
};
use crossinit::prompt::PromptTemplate;

use crate::config::{PartialConfig, RunConfig};
use crate::manifest::{
    derive_run_id, digest_file, digest_literal, write_manifest, InputDigest, Manifest,
};

/// Placeholder name list shipped with the toolkit; any user list is
/// accepted via --names.
const DEFAULT_NAMES: &str = include_str!("../../../data/names.txt");

#[derive(Parser)]
#[command(
    name = "crossinit",
    version,
    about = "Concept personalization via encoder-output initialization: train, analyze, generate, evaluate, ablate"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a concept from input images (initialize then optimize).
    Train(TrainArgs),
    /// Export block traces and repeated-encoding traces.
    Analyze(AnalyzeArgs),
    /// Sample latents (or images, with a decoder adapter) from a concept.
    Generate(GenerateArgs),
    /// Score identity and prompt similarity over a prompt set.
    Evaluate(EvaluateArgs),
    /// Run one of the ablation modes of the optimization.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct SharedArgs {
    /// Backend: `toy` or `adapter:<name>`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; command-line flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Name list file ("First Last" per line). Defaults to the shipped
    /// placeholder list.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Input image (repeatable).
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Initialization strategy: cross | super-category | raw-mean | direct-output.
    #[arg(long)]
    init: Option<String>,
    /// Fast mode: 25 steps at learning rate 0.08.
    #[arg(long)]
    fast: bool,
    /// Template used for initialization and geometry tracing.
    #[arg(long)]
    init_template: Option<String>,
    /// Training template (repeatable); defaults to the built-in captions.
    #[arg(long = "train-template")]
    train_templates: Vec<String>,
    /// Prompt set file (tag<TAB>prompt). Defaults to the built-in 20.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Number of concept token slots (1 or 2).
    #[arg(long)]
    k_tokens: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    n_per_prompt: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
    /// Class word substituted for the placeholder when scoring prompts.
    #[arg(long)]
    class_word: Option<String>,
    /// Override the derived run id used in artifact names.
    #[arg(long)]
    run_id: Option<String>,
}

impl SharedArgs {
    fn to_partial(&self) -> PartialConfig {
        PartialConfig {
            backend: self.backend.clone(),
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            names: self.names.clone(),
            images: (!self.images.is_empty()).then(|| self.images.clone()),
            steps: self.steps,
            learning_rate: self.lr,
            batch_size: self.batch,
            lambda: self.lambda,
            init: self.init.clone(),
            fast: self.fast.then_some(true),
            checkpoint_every: self.checkpoint_every,
            init_template: self.init_template.clone(),
            train_templates: (!self.train_templates.is_empty())
                .then(|| self.train_templates.clone()),
            k_tokens: self.k_tokens,
            prompts: self.prompts.clone(),
            n_per_prompt: self.n_per_prompt,
            sample_steps: self.sample_steps,
            class_word: self.class_word.clone(),
            run_id: self.run_id.clone(),
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => Some(PartialConfig::load(path)?),
            None => None,
        };
        let config = RunConfig::resolve(self.to_partial(), file)?;
        config.check_paths()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Concept file to trace.
    #[arg(long)]
    concept: Option<PathBuf>,
    /// Raw prompt to trace instead of a concept.
    #[arg(long)]
    prompt: Option<String>,
    /// Number of repeated encodings.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Sequence position to trace (defaults to the first placeholder, or
    /// the last token in prompt mode).
    #[arg(long)]
    position: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Concept file to generate from.
    #[arg(long)]
    concept: PathBuf,
    /// Decode latents to image files (requires a decoder adapter).
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Concept file to evaluate.
    #[arg(long)]
    concept: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Ablation mode: no-ci | no-mean | no-reg | full.
    #[arg(long)]
    mode: String,
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::Json { .. }
        | Error::MalformedName { .. }
        | Error::EmptyNameList
        | Error::BadTemplate(_)
        | Error::SchemaVersionMismatch { .. }
        | Error::UnknownToken(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::AdapterMissing(_) => 4,
        _ => 1,
    }
}

fn load_names(config: &RunConfig) -> Result<(NameList, InputDigest)> {
    match &config.names {
        Some(path) => Ok((NameList::load(path)?, digest_file(path)?)),
        None => Ok((
            NameList::parse(DEFAULT_NAMES)?,
            digest_literal("<builtin names>", DEFAULT_NAMES),
        )),
    }
}

fn parse_templates(config: &RunConfig) -> Result<(Vec<PromptTemplate>, PromptTemplate)> {
    let train = config
        .train_templates
        .iter()
        .map(|t| PromptTemplate::parse(t))
        .collect::<Result<Vec<_>>>()?;
    let init = PromptTemplate::parse(&config.init_template)?;
    Ok((train, init))
}

fn encode_input_images(config: &RunConfig, backend: &Backend) -> Result<Vec<Vec<f64>>> {
    if config.images.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one --image is required".into(),
        ));
    }
    let latent_encoder = backend.latent_encoder()?;
    config
        .images
        .iter()
        .map(|p| latent_encoder.encode_image(p))
        .collect()
}

fn default_n_per_prompt(config: &RunConfig) -> usize {
    config
        .n_per_prompt
        .unwrap_or(if config.backend == "toy" { 2 } else { 32 })
}

fn load_prompt_set(config: &RunConfig) -> Result<(PromptSet, Option<InputDigest>)> {
    match &config.prompts {
        Some(path) => Ok((PromptSet::load(path)?, Some(digest_file(path)?))),
        None => Ok((PromptSet::default_set(), None)),
    }
}

struct RunDirs {
    out: PathBuf,
    checkpoints: PathBuf,
}

fn prepare_dirs(config: &RunConfig, with_checkpoints: bool) -> Result<RunDirs> {
    std::fs::create_dir_all(&config.output_dir)?;
    let checkpoints = config.output_dir.join("checkpoints");
    if with_checkpoints {
        std::fs::create_dir_all(&checkpoints)?;
    }
    Ok(RunDirs {
        out: config.output_dir.clone(),
        checkpoints,
    })
}

fn concept_metadata(
    config: &RunConfig,
    run_id: &str,
) -> serde_json::Map<String, serde_json::Value> {
    let mut meta = serde_json::Map::new();
    meta.insert("run_id".into(), serde_json::json!(run_id));
    meta.insert("backend".into(), serde_json::json!(config.backend));
    meta.insert("seed".into(), serde_json::json!(config.seed));
    meta.insert("steps".into(), serde_json::json!(config.steps));
    meta
}

fn train_like(args: &SharedArgs, command: &str, mode: Option<AblationMode>) -> Result<()> {
    let started = Instant::now();
    let config = args.resolve()?;
    let run_id = derive_run_id(command, &config)?;
    let backend = Backend::resolve(&config.backend, config.seed)?;
    let latents = encode_input_images(&config, &backend)?;
    let (names, names_digest) = load_names(&config)?;
    let (train_templates, init_template) = parse_templates(&config)?;
    let dirs = prepare_dirs(&config, true)?;

    let optimizer_config = config.optimizer_config();
    let super_tokens: Vec<String> = DEFAULT_SUPER_TOKENS.iter().map(|s| s.to_string()).collect();
    let denoiser = backend.denoiser()?;
    let inputs = OptimizeInputs {
        latents: &latents,
        config: &optimizer_config,
        names: Some(&names),
        table: backend.table.as_ref(),
        encoder: backend.encoder.as_ref(),
        denoiser,
        schedule: &backend.schedule,
        templates: &train_templates,
        init_template: &init_template,
        super_tokens: &super_tokens,
        k: config.k_tokens,
    };
    let result = match mode {
        Some(m) => ablation_run(m, &inputs, Some(&dirs.checkpoints))?,
        None => optimize(&inputs, Some(&dirs.checkpoints))?,
    };

    let concept_path = dirs.out.join("concept.json");
    save_concept(
        &result.concept,
        &concept_path,
        concept_metadata(&config, &run_id),
    )?;
    let trajectory_path = dirs.out.join(format!("{run_id}_trajectory.csv"));
    export_trajectory(&result.trajectory, &trajectory_path)?;
    let concat_path = dirs.out.join(format!("{run_id}_trajectory_concat.csv"));
    export_trajectory_concat(&result.trajectory, &concat_path)?;

    let mut digests = vec![names_digest];
    for image in &config.images {
        digests.push(digest_file(image)?);
    }
    let manifest = Manifest {
        version: 1,
        command,
        run_id: &run_id,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        input_digests: digests,
        artifacts: vec![
            concept_path.clone(),
            trajectory_path.clone(),
            concat_path.clone(),
        ],
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &dirs.out.join("manifest.json"))?;

    let last = result
        .trajectory
        .points()
        .last()
        .expect("nonempty trajectory");
    println!(
        "{command} {run_id}: {} steps, final total loss {:.6}, wrote {}",
        result.config.steps,
        last.total_loss,
        concept_path.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    train_like(&args.shared, "train", None)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mode: AblationMode = args.mode.parse()?;
    train_like(&args.shared, "ablate", Some(mode))
}

/// Sequence of table rows for a raw prompt (no placeholders), wrapped in
/// BOS/EOS when the table defines them.
fn tokenize_raw_prompt(
    text: &str,
    table: &dyn crossinit::embedding::EmbeddingTable,
) -> Result<Vec<EmbeddingVector>> {
    let mut vectors = Vec::new();
    let bos_eos = table.bos_eos();
    if let Some((bos, _)) = &bos_eos {
        vectors.push(table.row(bos)?);
    }
    for sub in table.subtokens(text)? {
        vectors.push(table.row(&sub)?);
    }
    if let Some((_, eos)) = &bos_eos {
        vectors.push(table.row(eos)?);
    }
    Ok(vectors)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let started = Instant::now();
    let config = args.shared.resolve()?;
    let run_id = derive_run_id("analyze", &config)?;
    let backend = Backend::resolve(&config.backend, config.seed)?;
    let dirs = prepare_dirs(&config, false)?;

    let block_path = dirs.out.join(format!("{run_id}_block_trace.csv"));
    let repeat_path = dirs.out.join(format!("{run_id}_repeated_encoding.csv"));
    let mut digests = Vec::new();

    match (&args.concept, &args.prompt) {
        (Some(concept_path), _) => {
            let (concept, _) = load_concept(concept_path)?;
            digests.push(digest_file(concept_path)?);
            let template = PromptTemplate::parse(&config.init_template)?;
            let assembled = build_sequence(&template, &concept, backend.table.as_ref())?;
            let position = args.position.unwrap_or(assembled.slot_positions[0]);
            let trace = backend.encoder.block_trace(&assembled.vectors, position)?;
            trace.write_csv(&block_path)?;
            let iterates = repeated_encoding_trace(
                &concept,
                backend.encoder.as_ref(),
                &template,
                backend.table.as_ref(),
                args.k,
            )?;
            write_repeated_encoding_csv(&iterates, &repeat_path)?;
        }
        (None, Some(prompt)) => {
            let sequence = tokenize_raw_prompt(prompt, backend.table.as_ref())?;
            let position = args.position.unwrap_or(sequence.len() - 1);
            let trace = backend.encoder.block_trace(&sequence, position)?;
            trace.write_csv(&block_path)?;
            let iterates = repeated_sequence_encoding(&sequence, backend.encoder.as_ref(), args.k)?;
            write_position_trace_csv(&iterates, position, &repeat_path)?;
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "analyze needs --concept or --prompt".into(),
            ));
        }
    }

    let manifest = Manifest {
        version: 1,
        command: "analyze",
        run_id: &run_id,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        input_digests: digests,
        artifacts: vec![block_path.clone(), repeat_path.clone()],
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &dirs.out.join("manifest.json"))?;
    println!(
        "analyze {run_id}: wrote {} and {}",
        block_path.display(),
        repeat_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LatentFile<'a> {
    version: u32,
    prompt: &'a str,
    image_seed: u64,
    latent: &'a [f64],
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let started = Instant::now();
    let config = args.shared.resolve()?;
    let run_id = derive_run_id("generate", &config)?;
    let backend = Backend::resolve(&config.backend, config.seed)?;
    let denoiser = backend.denoiser()?;
    if args.png {
        backend.decoder()?; // AdapterMissing unless a decoder is registered
    }
    let (concept, _) = load_concept(&args.concept)?;
    let (prompt_set, prompt_digest) = load_prompt_set(&config)?;
    let n = default_n_per_prompt(&config);
    let dirs = prepare_dirs(&config, false)?;

    let mut seed_rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
    let mut artifacts = Vec::new();
    for (i, (_, prompt)) in prompt_set.iter().enumerate() {
        let template = PromptTemplate::parse(prompt)?;
        let cond = assemble_conditioning(
            &template,
            &concept,
            backend.encoder.as_ref(),
            backend.table.as_ref(),
        )?;
        for j in 0..n {
            let image_seed: u64 = seed_rng.gen();
            let latent = sample_latent(
                &cond,
                denoiser,
                &backend.schedule,
                config.sample_steps,
                image_seed,
            )?;
            if args.png {
                let path = dirs.out.join(format!("{run_id}_gen_p{i:02}_i{j:02}.png"));
                backend.decoder()?.decode_to_image(&latent, &path)?;
                artifacts.push(path);
            } else {
                let path = dirs.out.join(format!("{run_id}_gen_p{i:02}_i{j:02}.json"));
                let file = LatentFile {
                    version: 1,
                    prompt,
                    image_seed,
                    latent: &latent,
                };
                let json = serde_json::to_string_pretty(&file).map_err(|source| Error::Json {
                    path: path.display().to_string(),
                    source,
                })?;
                std::fs::write(&path, json + "\n")?;
                artifacts.push(path);
            }
        }
    }

    let manifest = Manifest {
        version: 1,
        command: "generate",
        run_id: &run_id,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        input_digests: prompt_digest
            .into_iter()
            .chain([digest_file(&args.concept)?])
            .collect(),
        artifacts: artifacts.clone(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &dirs.out.join("manifest.json"))?;
    println!(
        "generate {run_id}: {} latents over {} prompts",
        artifacts.len(),
        prompt_set.len()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let config = args.shared.resolve()?;
    let run_id = derive_run_id("evaluate", &config)?;
    let backend = Backend::resolve(&config.backend, config.seed)?;
    let denoiser = backend.denoiser()?;
    let face = backend.face()?;
    let scorer = backend.scorer()?;
    if config.images.is_empty() {
        return Err(Error::InvalidConfig(
            "evaluate needs --image (the reference image)".into(),
        ));
    }
    let reference_latent = backend.latent_encoder()?.encode_image(&config.images[0])?;
    let reference = EvalImage::Latent(reference_latent);
    let (concept, _) = load_concept(&args.concept)?;
    let (prompt_set, prompt_digest) = load_prompt_set(&config)?;
    let n = default_n_per_prompt(&config);
    let dirs = prepare_dirs(&config, false)?;

    let ctx = EvalContext {
        table: backend.table.as_ref(),
        encoder: backend.encoder.as_ref(),
        denoiser,
        schedule: &backend.schedule,
        face,
        scorer,
        reference: &reference,
        sample_steps: config.sample_steps,
        class_word: &config.class_word,
    };
    let report = evaluate(&concept, &prompt_set, n, &ctx, config.seed)?;
    let report_path = dirs.out.join("report.json");
    report.write_json(&report_path)?;

    let mut digests = vec![digest_file(&args.concept)?, digest_file(&config.images[0])?];
    digests.extend(prompt_digest);
    let manifest = Manifest {
        version: 1,
        command: "evaluate",
        run_id: &run_id,
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        input_digests: digests,
        artifacts: vec![report_path.clone()],
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    write_manifest(&manifest, &dirs.out.join("manifest.json"))?;
    match report.identity_mean {
        Some(id) => println!(
            "evaluate {run_id}: identity {:.4}, prompt {:.4} over {} prompts",
            id,
            report.prompt_mean,
            report.per_prompt.len()
        ),
        None => println!(
            "evaluate {run_id}: identity undefined (all prompts style-tagged), prompt {:.4}",
            report.prompt_mean
        ),
    }
    Ok(())
}
