//! Run configuration: one TOML file, every table optional, unknown keys
//! rejected. `MAFF_TRAIN_DIR`, `MAFF_VAL_DIR` and `MAFF_GT_DATABASE`
//! override the matching `[data]` paths; nothing else is read from the
//! environment.
//!
//! A table left out entirely keeps the desk-scale default. A table given in
//! part is completed from that table type's own defaults, so write out the
//! whole `[model.pillars]` grid when changing any of it.

use std::path::{Path, PathBuf};

use maff_core::augment::AugmentConfig;
use maff_core::evalkit::EvalOptions;
use maff_core::net::{AdamConfig, InferConfig, ModelConfig};
use maff_core::synthetic::SceneConfig;
use maff_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_TRAIN_DIR: &str = "MAFF_TRAIN_DIR";
pub const ENV_VAL_DIR: &str = "MAFF_VAL_DIR";
pub const ENV_GT_DATABASE: &str = "MAFF_GT_DATABASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per optimiser step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, batch_size: 1, optimizer: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// KITTI-layout root used by `train` and `build-db`.
    pub train_dir: Option<PathBuf>,
    /// KITTI-layout root used by `infer`.
    pub val_dir: Option<PathBuf>,
    pub gt_database: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub scene: SceneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames: 8, scene: SceneConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
    pub eval: EvalOptions,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialise")
    }

    /// Reads, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env(|k| std::env::var_os(k));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<std::ffi::OsString>) {
        if let Some(v) = get(ENV_TRAIN_DIR) {
            self.data.train_dir = Some(v.into());
        }
        if let Some(v) = get(ENV_VAL_DIR) {
            self.data.val_dir = Some(v.into());
        }
        if let Some(v) = get(ENV_GT_DATABASE) {
            self.data.gt_database = Some(v.into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        self.synth.scene.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        let i = &self.infer;
        if !(0.0..=1.0).contains(&i.score_threshold) || !(0.0..=1.0).contains(&i.nms_threshold) {
            return Err(Error::Config("infer thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
