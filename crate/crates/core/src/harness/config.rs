use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::ModelConfig;
use crate::sam::Perturbation;

/// Everything a training run needs, read from one JSON file. Unknown keys
/// are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_folds: usize,
    pub fold: usize,
    /// Stop after this many epochs without a better validation result.
    pub patience: Option<usize>,
    pub sam_perturbation: Perturbation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            seed: 0,
            n_folds: 10,
            fold: 0,
            patience: None,
            sam_perturbation: Perturbation::Add,
        }
    }
}

impl TrainConfig {
    /// Matching model and feature settings for [`ModelConfig::tiny`].
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            features: FeatureConfig {
                base_window: 4,
                frames: 16,
                delta: 1,
                levels: 2,
                band_low: 0.01,
                band_high: 0.08,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        if self.n_folds < 3 || self.fold >= self.n_folds {
            return Err(Error::Config(format!("fold {} of {} folds (need >= 3 folds)", self.fold, self.n_folds)));
        }
        if self.features.frames != self.model.frames || self.features.levels != self.model.levels() {
            return Err(Error::Config(format!(
                "features produce {} frames at {} levels; the model expects {} frames and {} levels",
                self.features.frames,
                self.features.levels,
                self.model.frames,
                self.model.levels()
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
