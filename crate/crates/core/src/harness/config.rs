use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adamask::{CategorySpec, MaskConfig};
use crate::env::{LmEnvConfig, PlantedConfig};
use crate::hppo::PpoConfig;
use crate::judge::JudgeConfig;
use crate::rng::derive_seed;
use crate::taskgen::{FactWorld, WorldConfig};
use crate::tinylm::{ModelConfig, TrainOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Lm,
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub n_options: usize,
    pub train_fraction: f64,
    pub min_pool: usize,
    pub split_seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            n_options: 4,
            train_fraction: 0.5,
            min_pool: 10,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub updates: usize,
    /// Checkpoint every this many updates (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub agent_seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            updates: 200,
            checkpoint_every: 50,
            agent_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSection {
    pub n_categories: usize,
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for PlantedSection {
    fn default() -> Self {
        Self {
            n_categories: 4,
            emb_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSection {
    pub partial_credit: f64,
    /// Defaults to `1 / ln(vocab_size)`.
    pub fluency_slope: Option<f64>,
    pub fluency_intercept: f64,
}

impl Default for JudgeSection {
    fn default() -> Self {
        Self {
            partial_credit: 0.5,
            fluency_slope: None,
            fluency_intercept: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Policy steps per held-out case.
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub coefficients: Vec<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            coefficients: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { reps: 200, warmup: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            counts: vec![0, 4, 8, 16, 32, 64],
        }
    }
}

/// Everything a run needs. Nested `seed` fields are per-stage seeds; each is
/// mixed with the global `seed` before use, so overriding the global seed
/// gives an independent replicate of the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: RunMode,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub pretrain: TrainOptions,
    pub stage1: Stage1Config,
    /// `None` uses the first and second half of every layer.
    pub categories: Option<CategorySpec>,
    pub env: LmEnvConfig,
    pub planted: PlantedSection,
    pub ppo: PpoConfig,
    pub mask: MaskConfig,
    pub judge: JudgeSection,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub baseline: BaselineConfig,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            mode: RunMode::Lm,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            pretrain: TrainOptions::default(),
            stage1: Stage1Config::default(),
            categories: None,
            env: LmEnvConfig::default(),
            planted: PlantedSection::default(),
            ppo: PpoConfig::default(),
            mask: MaskConfig::default(),
            judge: JudgeSection::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            baseline: BaselineConfig::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.world.vocab_needed() > self.model.vocab_size {
            return Err(Error::Config(format!(
                "world needs {} tokens but vocab_size is {}",
                self.world.vocab_needed(),
                self.model.vocab_size
            )));
        }
        if self.model.context_len < 4 {
            return Err(Error::Config("context_len must fit a prompt and its answer (>= 4)".into()));
        }
        self.category_spec().validate(&self.model)?;
        self.env.episode.validate()?;
        self.env.reward.validate()?;
        self.ppo.validate()?;
        self.mask.validate()?;
        if self.eval.steps == 0 {
            return Err(Error::Config("eval.steps must be >= 1".into()));
        }
        if self.bench.reps == 0 {
            return Err(Error::Config("bench.reps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn category_spec(&self) -> CategorySpec {
        self.categories.clone().unwrap_or_else(|| CategorySpec::halves(&self.model))
    }

    fn mix(&self, stage_seed: u64, tag: u64) -> u64 {
        derive_seed(&[self.seed, stage_seed, tag])
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.mix(self.world.seed, 1),
            ..self.world
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.mix(self.model.seed, 2),
            ..self.model
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.mix(self.stage1.split_seed, 3)
    }

    pub fn env_config(&self) -> LmEnvConfig {
        LmEnvConfig {
            seed: self.mix(self.env.seed, 4),
            ..self.env.clone()
        }
    }

    pub fn agent_seed(&self) -> u64 {
        self.mix(self.stage2.agent_seed, 5)
    }

    pub fn planted_config(&self) -> PlantedConfig {
        PlantedConfig {
            n_categories: self.planted.n_categories,
            emb_dim: self.planted.emb_dim,
            episode: self.env.episode.clone(),
            reward: self.env.reward,
            seed: self.mix(self.planted.seed, 6),
        }
    }

    pub fn judge_config(&self, world: &FactWorld) -> JudgeConfig {
        let mut j = JudgeConfig::new(world.answer_range(), self.model.vocab_size);
        j.partial_credit = self.judge.partial_credit;
        j.fluency_intercept = self.judge.fluency_intercept;
        if let Some(s) = self.judge.fluency_slope {
            j.fluency_slope = s;
        }
        j
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
