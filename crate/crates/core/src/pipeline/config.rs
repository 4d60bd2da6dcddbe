use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::{CoarseConfig, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::fine::FineConfig;
use crate::scene::io::read_json;
use crate::scene::{QueryConfig, SceneConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "RETLOC_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Epoch at which the rate drops tenfold.
    pub decay_epoch: Option<usize>,
    pub weight_decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 18,
            batch: 16,
            decay_epoch: Some(9),
            weight_decay: 0.01,
        }
    }
}

impl StageConfig {
    pub fn matcher() -> Self {
        Self {
            lr: 5e-4,
            epochs: 16,
            batch: 16,
            decay_epoch: None,
            weight_decay: 0.0,
        }
    }

    pub fn regressor() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch: 16,
            decay_epoch: None,
            weight_decay: 0.0,
        }
    }

    fn validate(&self, name: &str, min_batch: usize) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch < min_batch || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "{name}: need lr > 0, epochs ≥ 1, batch ≥ {min_batch}, weight_decay ≥ 0"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub shuffle_hints: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            shuffle_hints: true,
            rotate: true,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            flip: false,
            shuffle_hints: false,
            rotate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub cell_size: f64,
    pub cell_stride: f64,
    pub min_instances: usize,
    pub queries: QueryConfig,
    pub train_queries: usize,
    pub val_queries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            cell_size: 30.0,
            cell_stride: 10.0,
            min_instances: 6,
            queries: QueryConfig::default(),
            train_queries: 2000,
            val_queries: 500,
        }
    }
}

/// Everything a run needs; serialised as the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub coarse_train: StageConfig,
    pub matcher_train: StageConfig,
    pub regressor_train: StageConfig,
    /// Margin of the ranking loss.
    pub alpha: f64,
    pub augment: AugmentConfig,
    /// Train matcher and regressor together instead of in sequence.
    pub joint: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            coarse: CoarseConfig::default(),
            fine: FineConfig::default(),
            coarse_train: StageConfig::default(),
            matcher_train: StageConfig::matcher(),
            regressor_train: StageConfig::regressor(),
            alpha: DEFAULT_MARGIN,
            augment: AugmentConfig::default(),
            joint: false,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.coarse.validate()?;
        self.fine.validate()?;
        self.coarse_train.validate("coarse_train", 2)?;
        self.matcher_train.validate("matcher_train", 1)?;
        self.regressor_train.validate("regressor_train", 1)?;
        if self.data.train_queries == 0 || self.data.val_queries == 0 {
            return Err(Error::Config("train and val query counts must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("margin {} must be positive", self.alpha)));
        }
        Ok(())
    }

    /// Reads and validates a config file, then applies [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Config = read_json(path)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}
