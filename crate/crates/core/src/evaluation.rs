//! Identity-similarity and prompt-similarity scoring with pluggable
//! embedders, prompt-set management, and report emission.
//!
//! Embedders sit behind one-call contracts so the whole harness runs
//! offline against stubs; real face-recognition / vision-language adapters
//! plug into the same traits.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::conditioning::assemble_conditioning;
use crate::diffusion::{sample_latent, Denoiser, NoiseSchedule};
use crate::embedding::{ConceptEmbedding, EmbeddingTable};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::prompt::{replace_marker, PromptTemplate, ALL_SLOTS_MARKER};

/// Prompt category; style prompts are excluded from identity aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    Expression,
    Background,
    Interaction,
    Style,
    Plain,
}

impl std::str::FromStr for PromptTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expression" => Ok(PromptTag::Expression),
            "background" => Ok(PromptTag::Background),
            "interaction" => Ok(PromptTag::Interaction),
            "style" => Ok(PromptTag::Style),
            "plain" => Ok(PromptTag::Plain),
            other => Err(Error::InvalidConfig(format!(
                "unknown prompt tag {other:?}"
            ))),
        }
    }
}

/// Tagged evaluation prompts, each containing exactly one `{S*}` marker.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<(PromptTag, String)>,
}

/// The 20 default evaluation prompts.
pub const DEFAULT_PROMPTS: [(&str, &str); 20] = [
    ("plain", "a photo of a {S*} person"),
    ("expression", "a {S*} person with a sad expression"),
    ("expression", "a {S*} person with a happy expression"),
    ("expression", "a {S*} person with a puzzled expression"),
    ("expression", "a {S*} person with an angry expression"),
    ("background", "a {S*} person plays the LEGO toys"),
    ("background", "a {S*} person on the beach"),
    ("background", "a {S*} person piloting a fighter jet"),
    (
        "background",
        "a {S*} person wearing the sweater, a backpack and camping stove, outdoors, RAW, ultra high res",
    ),
    ("background", "a {S*} person wearing a scifi spacesuit in space"),
    ("interaction", "a {S*} person and Anne Hathaway are baking a birthday cake"),
    (
        "interaction",
        "a {S*} person and Anne Hathaway taking a relaxing hike in the mountains",
    ),
    ("interaction", "a {S*} person and Anne Hathaway sit on a sofa"),
    (
        "interaction",
        "a {S*} person and Anne Hathaway enjoying a day at an amusement park",
    ),
    (
        "interaction",
        "a {S*} person shakes hands with Anne Hathaway in news conference",
    ),
    ("style", "cubism painting of a {S*} person"),
    ("style", "fauvism painting of a {S*} person"),
    ("style", "cave mural depicting a {S*} person"),
    ("style", "pointillism painting of a {S*} person"),
    ("style", "a {S*} person latte art"),
];

impl PromptSet {
    pub fn new(prompts: Vec<(PromptTag, String)>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::EmptyInput("prompt set".into()));
        }
        for (_, p) in &prompts {
            if p.matches(ALL_SLOTS_MARKER).count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "prompt {p:?} must contain exactly one {ALL_SLOTS_MARKER} marker"
                )));
            }
        }
        Ok(PromptSet { prompts })
    }

    pub fn default_set() -> Self {
        PromptSet::new(
            DEFAULT_PROMPTS
                .iter()
                .map(|(tag, p)| (tag.parse().expect("known tag"), p.to_string()))
                .collect(),
        )
        .expect("default prompts are valid")
    }

    /// `tag<TAB>prompt` per line; blanks and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut prompts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, prompt) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected 'tag<TAB>prompt'", lineno + 1))
            })?;
            prompts.push((tag.trim().parse()?, prompt.trim().to_string()));
        }
        PromptSet::new(prompts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(PromptTag, String)> {
        self.prompts.iter()
    }
}

/// An image under evaluation: either a toy latent or a file on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalImage {
    Latent(Vec<f64>),
    File(PathBuf),
}

/// Face-recognition contract: a fixed-dimension vector per image, or
/// `None` when no face is detected.
pub trait FaceEmbedder {
    fn embed(&self, image: &EvalImage) -> Result<Option<Vec<f64>>>;
}

/// Vision-language scoring contract: image and text vectors in a shared
/// space.
pub trait ImageTextScorer {
    fn embed_image(&self, image: &EvalImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        Ok(0.0)
    } else {
        Ok(dot / (na * nb))
    }
}

/// Mean cosine similarity between each generated image's face embedding and
/// the reference's. Images without a detected face are skipped and counted.
pub fn identity_similarity(
    generated: &[EvalImage],
    reference: &EvalImage,
    embedder: &dyn FaceEmbedder,
) -> Result<(f64, usize)> {
    if generated.is_empty() {
        return Err(Error::EmptyInput(
            "identity_similarity generated list".into(),
        ));
    }
    let ref_vec = embedder
        .embed(reference)?
        .ok_or_else(|| Error::EmptyInput("no face detected in reference image".into()))?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for img in generated {
        match embedder.embed(img)? {
            Some(v) => {
                sum += cosine(&v, &ref_vec)?;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::EmptyAfterSkips { skipped });
    }
    Ok((sum / used as f64, skipped))
}

/// Mean cosine similarity between image embeddings and the prompt's text
/// embedding. The `{S*}` marker is replaced with `class_word` before
/// scoring.
pub fn prompt_similarity(
    generated: &[EvalImage],
    prompt: &str,
    scorer: &dyn ImageTextScorer,
    class_word: &str,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("prompt_similarity generated list".into()));
    }
    let text_vec = scorer.embed_text(&replace_marker(prompt, class_word))?;
    let mut sum = 0.0;
    for img in generated {
        sum += cosine(&scorer.embed_image(img)?, &text_vec)?;
    }
    Ok(sum / generated.len() as f64)
}

/// Per-prompt scores in an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt: String,
    pub tag: PromptTag,
    pub identity: f64,
    pub prompt_sim: f64,
    pub n_images: usize,
    pub skipped_no_face: usize,
}

/// Aggregated identity/prompt similarity over a prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` when every prompt is style-tagged (identity undefined).
    pub identity_mean: Option<f64>,
    pub prompt_mean: f64,
    pub per_prompt: Vec<PromptScore>,
    pub excluded_from_identity: Vec<String>,
    pub wall_time_secs: f64,
}

const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ReportFile {
    version: u32,
    identity_mean: Option<f64>,
    prompt_mean: f64,
    per_prompt: Vec<PromptScore>,
    excluded_from_identity: Vec<String>,
}

impl EvalReport {
    /// Versioned JSON. Wall time deliberately stays out of the file so
    /// repeat runs are byte-identical; it lives in the run manifest.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = ReportFile {
            version: REPORT_SCHEMA_VERSION,
            identity_mean: self.identity_mean,
            prompt_mean: self.prompt_mean,
            per_prompt: self.per_prompt.clone(),
            excluded_from_identity: self.excluded_from_identity.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path)?;
        let file: ReportFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        if file.version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch {
                found: file.version,
                supported: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(EvalReport {
            identity_mean: file.identity_mean,
            prompt_mean: file.prompt_mean,
            per_prompt: file.per_prompt,
            excluded_from_identity: file.excluded_from_identity,
            wall_time_secs: 0.0,
        })
    }
}

/// Backend pieces and embedders the evaluation loop needs.
pub struct EvalContext<'a> {
    pub table: &'a dyn EmbeddingTable,
    pub encoder: &'a dyn TextEncoder,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub face: &'a dyn FaceEmbedder,
    pub scorer: &'a dyn ImageTextScorer,
    pub reference: &'a EvalImage,
    pub sample_steps: usize,
    pub class_word: &'a str,
}

/// Generate `n_per_prompt` latents per prompt, score both metrics, exclude
/// style-tagged prompts from the identity mean. Per-image sampler seeds
/// come from one ChaCha stream over `seed`, drawn prompt-major, so the
/// whole evaluation is deterministic.
pub fn evaluate(
    concept: &ConceptEmbedding,
    prompt_set: &PromptSet,
    n_per_prompt: usize,
    ctx: &EvalContext<'_>,
    seed: u64,
) -> Result<EvalReport> {
    let started = Instant::now();
    if n_per_prompt == 0 {
        return Err(Error::InvalidConfig("n_per_prompt must be >= 1".into()));
    }
    let mut seed_rng = ChaCha12Rng::seed_from_u64(seed);
    let mut per_prompt = Vec::with_capacity(prompt_set.len());
    let mut excluded = Vec::new();

    for (tag, prompt) in prompt_set.iter() {
        let template = PromptTemplate::parse(prompt)?;
        let cond = assemble_conditioning(&template, concept, ctx.encoder, ctx.table)?;
        let mut generated = Vec::with_capacity(n_per_prompt);
        for _ in 0..n_per_prompt {
            let image_seed: u64 = seed_rng.gen();
            let latent = sample_latent(
                &cond,
                ctx.denoiser,
                ctx.schedule,
                ctx.sample_steps,
                image_seed,
            )?;
            generated.push(EvalImage::Latent(latent));
        }
        let (identity, skipped) = identity_similarity(&generated, ctx.reference, ctx.face)?;
        let prompt_sim = prompt_similarity(&generated, prompt, ctx.scorer, ctx.class_word)?;
        if *tag == PromptTag::Style {
            excluded.push(prompt.clone());
        }
        per_prompt.push(PromptScore {
            prompt: prompt.clone(),
            tag: *tag,
            identity,
            prompt_sim,
            n_images: generated.len() - skipped,
            skipped_no_face: skipped,
        });
    }

    let included: Vec<f64> = per_prompt
        .iter()
        .filter(|p| p.tag != PromptTag::Style)
        .map(|p| p.identity)
        .collect();
    let identity_mean = if included.is_empty() {
        None
    } else {
        Some(included.iter().sum::<f64>() / included.len() as f64)
    };
    let prompt_mean =
        per_prompt.iter().map(|p| p.prompt_sim).sum::<f64>() / per_prompt.len() as f64;

    Ok(EvalReport {
        identity_mean,
        prompt_mean,
        per_prompt,
        excluded_from_identity: excluded,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Stub embedder mapping every image and text to one constant vector.
pub struct ConstantEmbedder {
    pub vector: Vec<f64>,
}

impl FaceEmbedder for ConstantEmbedder {
    fn embed(&self, _: &EvalImage) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.vector.clone()))
    }
}

impl ImageTextScorer for ConstantEmbedder {
    fn embed_image(&self, _: &EvalImage) -> Result<Vec<f64>> {
        Ok(self.vector.clone())
    }
    fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
        Ok(self.vector.clone())
    }
}

/// Deterministic offline embedder: latents go through a fixed seeded
/// projection, text hashes word-wise into seeded vectors. Stands in for
/// face-recognition and vision-language models in toy runs.
pub struct SeededStubEmbedder {
    projection: Mat,
    out_dim: usize,
    seed: u64,
}

impl SeededStubEmbedder {
    pub fn new(latent_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid stddev");
        let data = (0..out_dim * latent_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        SeededStubEmbedder {
            projection: Mat::from_vec(out_dim, latent_dim, data),
            out_dim,
            seed,
        }
    }

    fn project(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.projection.cols {
            return Err(Error::DimensionMismatch {
                expected: self.projection.cols,
                got: latent.len(),
            });
        }
        Ok((0..self.out_dim)
            .map(|r| {
                self.projection
                    .row(r)
                    .iter()
                    .zip(latent)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect())
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(h ^ self.seed);
        let normal = Normal::new(0.0, 1.0).expect("valid stddev");
        (0..self.out_dim).map(|_| normal.sample(&mut rng)).collect()
    }
}

impl FaceEmbedder for SeededStubEmbedder {
    fn embed(&self, image: &EvalImage) -> Result<Option<Vec<f64>>> {
        match image {
            EvalImage::Latent(latent) => Ok(Some(self.project(latent)?)),
            EvalImage::File(path) => Err(Error::ScorerFailure(format!(
                "the stub embedder scores latents only; pre-encode {path:?}"
            ))),
        }
    }
}

impl ImageTextScorer for SeededStubEmbedder {
    fn embed_image(&self, image: &EvalImage) -> Result<Vec<f64>> {
        self.embed(image)?
            .ok_or_else(|| Error::ScorerFailure("stub embedder returned no vector".into()))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.out_dim];
        let mut count = 0usize;
        for word in text.split_whitespace() {
            for (a, v) in acc.iter_mut().zip(self.word_vector(word)) {
                *a += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::ScorerFailure("empty prompt text".into()));
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latents(n: usize, dim: usize) -> Vec<EvalImage> {
        (0..n)
            .map(|i| {
                EvalImage::Latent(
                    (0..dim)
                        .map(|j| ((i * dim + j) as f64 * 0.3).sin())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn default_set_has_twenty_prompts_with_five_styles() {
        let set = PromptSet::default_set();
        assert_eq!(set.len(), 20);
        let styles = set.iter().filter(|(t, _)| *t == PromptTag::Style).count();
        assert_eq!(styles, 5);
        for (_, p) in set.iter() {
            assert_eq!(p.matches(ALL_SLOTS_MARKER).count(), 1);
        }
    }

    #[test]
    fn prompt_set_parse_rejects_bad_lines() {
        assert!(PromptSet::parse("style no tab here\n").is_err());
        assert!(PromptSet::parse("style\ta prompt without marker\n").is_err());
        let ok = PromptSet::parse("# comment\nplain\ta photo of a {S*} person\n").unwrap();
        assert_eq!(ok.len(), 1);
    }

    #[test]
    fn identity_constant_embedder_gives_one() {
        let stub = ConstantEmbedder {
            vector: vec![0.5, 0.5, 0.5],
        };
        let gen = latents(3, 4);
        let reference = EvalImage::Latent(vec![0.0; 4]);
        let (mean, skipped) = identity_similarity(&gen, &reference, &stub).unwrap();
        assert!((mean - 1.0).abs() < 1e-15);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn identity_orthogonal_embedder_gives_zero() {
        struct Orth;
        impl FaceEmbedder for Orth {
            fn embed(&self, image: &EvalImage) -> Result<Option<Vec<f64>>> {
                // reference (empty latent marker) -> e0, generated -> e1
                Ok(Some(match image {
                    EvalImage::Latent(l) if l.is_empty() => vec![1.0, 0.0],
                    _ => vec![0.0, 1.0],
                }))
            }
        }
        let gen = latents(2, 4);
        let reference = EvalImage::Latent(vec![]);
        let (mean, _) = identity_similarity(&gen, &reference, &Orth).unwrap();
        assert!(mean.abs() < 1e-15);
    }

    #[test]
    fn identity_mean_matches_scalar_oracle_and_skips() {
        struct Table {
            vecs: Vec<Option<Vec<f64>>>,
        }
        impl FaceEmbedder for Table {
            fn embed(&self, image: &EvalImage) -> Result<Option<Vec<f64>>> {
                match image {
                    EvalImage::Latent(l) => Ok(self.vecs[l[0] as usize].clone()),
                    _ => unreachable!(),
                }
            }
        }
        // index 0: reference; 1..: generated (index 2 has no face)
        let table = Table {
            vecs: vec![
                Some(vec![1.0, 1.0]),
                Some(vec![2.0, 0.0]),
                None,
                Some(vec![0.0, 3.0]),
            ],
        };
        let gen: Vec<EvalImage> = (1..4).map(|i| EvalImage::Latent(vec![i as f64])).collect();
        let reference = EvalImage::Latent(vec![0.0]);
        let (mean, skipped) = identity_similarity(&gen, &reference, &table).unwrap();
        // hand-computed cosines against [1,1]/sqrt(2): both 1/sqrt(2)
        let expected = (1.0 / 2f64.sqrt() + 1.0 / 2f64.sqrt()) / 2.0;
        assert!((mean - expected).abs() < 1e-12);
        assert_eq!(skipped, 1);

        // all skipped
        let none_table = Table {
            vecs: vec![Some(vec![1.0, 0.0]), None, None, None],
        };
        assert!(matches!(
            identity_similarity(&gen, &reference, &none_table),
            Err(Error::EmptyAfterSkips { skipped: 3 })
        ));
    }

    #[test]
    fn prompt_similarity_stub_and_empty_input() {
        let stub = ConstantEmbedder {
            vector: vec![1.0, 2.0],
        };
        let gen = latents(4, 4);
        let sim = prompt_similarity(&gen, "a photo of a {S*} person", &stub, "person").unwrap();
        assert!((sim - 1.0).abs() < 1e-15);
        assert!(matches!(
            prompt_similarity(&[], "x {S*}", &stub, "person"),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn similarities_stay_in_range_with_seeded_stub() {
        let stub = SeededStubEmbedder::new(4, 6, 99);
        let gen = latents(5, 4);
        let reference = EvalImage::Latent(vec![0.3, -0.2, 0.9, 0.1]);
        let (mean, _) = identity_similarity(&gen, &reference, &stub).unwrap();
        assert!((-1.0..=1.0).contains(&mean));
        let sim = prompt_similarity(&gen, "a {S*} on the beach", &stub, "person").unwrap();
        assert!((-1.0..=1.0).contains(&sim));
    }

    #[test]
    fn style_only_prompt_set_leaves_identity_undefined() {
        use crate::conditioning::cross_initialize;
        use crate::diffusion::ToyDenoiser;
        use crate::embedding::{mean_name_embedding, NameList, ToyEmbeddingTable};
        use crate::encoder::{EncoderConfig, ToyTextEncoder};
        use crate::prompt::PromptTemplate;

        let table = ToyEmbeddingTable::new(32, 7);
        let encoder = ToyTextEncoder::new(EncoderConfig {
            seed: 8,
            ..EncoderConfig::default()
        })
        .unwrap();
        let denoiser = ToyDenoiser::new(16, 32, 64, 9);
        let schedule = crate::diffusion::NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let names = NameList::new(vec![("john".into(), "smith".into())]).unwrap();
        let template = PromptTemplate::parse("a photo of a {f} {l} person").unwrap();
        let mean = mean_name_embedding(&names, &table).unwrap();
        let concept = cross_initialize(&mean, &encoder, &template, &table).unwrap();

        let set = PromptSet::new(vec![
            (PromptTag::Style, "cubism painting of a {S*} person".into()),
            (PromptTag::Style, "a {S*} person latte art".into()),
        ])
        .unwrap();
        let face = SeededStubEmbedder::new(16, 8, 4);
        let scorer = SeededStubEmbedder::new(16, 8, 4);
        let reference = EvalImage::Latent(vec![0.25; 16]);
        let ctx = EvalContext {
            table: &table,
            encoder: &encoder,
            denoiser: &denoiser,
            schedule: &schedule,
            face: &face,
            scorer: &scorer,
            reference: &reference,
            sample_steps: 4,
            class_word: "person",
        };
        let report = evaluate(&concept, &set, 2, &ctx, 11).unwrap();
        assert!(report.identity_mean.is_none());
        assert_eq!(report.excluded_from_identity.len(), 2);
        assert!(report.prompt_mean.is_finite());
        assert!((-1.0..=1.0).contains(&report.prompt_mean));
    }

    #[test]
    fn aggregation_is_order_independent() {
        let stub = SeededStubEmbedder::new(4, 6, 5);
        let mut gen = latents(6, 4);
        let reference = EvalImage::Latent(vec![0.5; 4]);
        let (a, _) = identity_similarity(&gen, &reference, &stub).unwrap();
        gen.reverse();
        let (b, _) = identity_similarity(&gen, &reference, &stub).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}
