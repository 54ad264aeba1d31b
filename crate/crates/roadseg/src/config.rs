//! TOML run configuration: `[model]`, `[train]` and an optional `[data]` table, all fields
//! defaulting to the tiny setup.

use std::fs;
use std::path::{Path, PathBuf};

use roadseg_core::data::TilingPreset;
use roadseg_core::optim::AdamWConfig;
use roadseg_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate on the validation set every this many steps (0: only at the end).
    pub eval_interval: u64,
    /// Keep a `step-XXXXXX` checkpoint every this many steps (0: never).
    pub archive_interval: u64,
    /// Relative paths resolve against the run's output directory.
    pub checkpoint_dir: PathBuf,
    /// Kept for reproducibility records; every run is single-threaded and deterministic.
    pub deterministic: bool,
    pub seed: u64,
    /// Random horizontal, vertical and diagonal flips, each with probability 0.5.
    pub augment: bool,
    pub dice_eps: f64,
    /// Probability threshold used by validation metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 4,
            epochs: 100,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            eval_interval: 0,
            archive_interval: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            deterministic: true,
            seed: 0,
            augment: true,
            dice_eps: roadseg_core::objectives::DICE_EPS,
            threshold: roadseg_core::objectives::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> AppResult<()> {
        let bad = |field: &str, msg: String| Err(AppError::Config(format!("train.{field}: {msg}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be a finite non-negative number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps", format!("must be positive, got {}", self.dice_eps));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", format!("must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub preset: TilingPreset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> AppResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> AppResult<()> {
        self.model.validate().map_err(|e| match e {
            roadseg_core::Error::Config(m) => AppError::Config(format!("model.{m}")),
            other => other.into(),
        })?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}
