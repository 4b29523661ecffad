use std::path::{Path, PathBuf};

use geostyle_core::diffusion::{
    build_schedule, GuidanceConfig, InvertOptions, Schedule, ScheduleConfig, ToyExtractorConfig, ToyObjective,
    ToyPredictor,
};
use geostyle_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inputs::{load, read_json};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Mean image of the toy data distribution; `mean_value` everywhere when
    /// absent.
    pub mean: Option<PathBuf>,
    pub mean_value: f64,
    pub scale: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            mean: None,
            mean_value: 0.5,
            scale: 0.5,
        }
    }
}

impl PredictorConfig {
    pub fn build(&self, like: &Tensor, base: &Path) -> Result<ToyPredictor> {
        let mean = match &self.mean {
            Some(p) => load(&base.join(p))?,
            None => Tensor::full(like.shape().to_vec(), self.mean_value)?,
        };
        ToyPredictor::new(mean, self.scale)
    }
}

/// `run.json` for `guide` and `step`. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: PathBuf,
    pub source_text: Option<PathBuf>,
    pub target_text: Option<PathBuf>,
    /// Seed for text embeddings that are not given as files.
    pub text_seed: u64,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub extractors: ToyExtractorConfig,
    pub predictor: PredictorConfig,
    pub invert: InvertOptions,
    /// Seed for the sampling noise (used when sigma > 0).
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: PathBuf::new(),
            source_text: None,
            target_text: None,
            text_seed: 1,
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig {
                eta: 1e-4,
                ..Default::default()
            },
            extractors: ToyExtractorConfig::default(),
            predictor: PredictorConfig::default(),
            invert: InvertOptions::default(),
            seed: 0,
            output: None,
        }
    }
}

pub struct Run {
    pub config: RunConfig,
    pub source: Tensor,
    pub schedule: Schedule,
    pub predictor: ToyPredictor,
    pub objective: ToyObjective,
}

fn random_text(dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

impl Run {
    pub fn from_file(path: &Path) -> Result<Self> {
        let config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::new(config, base)
    }

    pub fn new(config: RunConfig, base: &Path) -> Result<Self> {
        if config.source.as_os_str().is_empty() {
            return Err(Error::Config("run config needs a \"source\" image".into()));
        }
        let source = load(&base.join(&config.source))?;
        let schedule = build_schedule(&config.schedule)?;
        let predictor = config.predictor.build(&source, base)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.text_seed);
        let dim = config.extractors.patch_dim;
        let source_text = match &config.source_text {
            Some(p) => load(&base.join(p))?,
            None => random_text(dim, &mut rng)?,
        };
        let target_text = match &config.target_text {
            Some(p) => load(&base.join(p))?,
            None => random_text(dim, &mut rng)?,
        };
        let objective = ToyObjective::new(
            source.clone(),
            source_text,
            target_text,
            &config.guidance,
            &config.extractors,
        )?;
        Ok(Self {
            config,
            source,
            schedule,
            predictor,
            objective,
        })
    }
}
