use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_tensor, write_tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::model::HahiModel;

use super::config::TrainConfig;
use super::train::{EpochRecord, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub seed: u64,
    pub fold: usize,
    pub n_folds: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_accuracy: f64,
    /// Manifest the model was trained from, if known.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: HahiModel,
    pub history: Vec<EpochRecord>,
    pub summary: CheckpointSummary,
}

fn layout(model: &HahiModel) -> Vec<(String, Vec<usize>)> {
    model.store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

impl Checkpoint {
    pub fn from_outcome(config: TrainConfig, outcome: TrainOutcome, manifest: Option<PathBuf>) -> Self {
        let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
        let last = outcome.history.last();
        let summary = CheckpointSummary {
            seed: config.seed,
            fold: config.fold,
            n_folds: config.n_folds,
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_val_loss: last.map_or(f64::NAN, |r| r.val_loss),
            best_val_accuracy: best.map_or(f64::NAN, |r| r.val_accuracy),
            manifest,
        };
        Self {
            config,
            model: outcome.model,
            history: outcome.history,
            summary,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), &self.config)?;
        let flat: Vec<f32> = self.model.store.flatten().iter().map(|&v| v as f32).collect();
        let params = TensorContainer::new(vec![flat.len()], flat)?
            .with_meta("kind", "parameters")
            .with_meta("layout", serde_json::to_string(&layout(&self.model))?);
        write_tensor(&params, dir.join("params"))?;
        write_history(dir.join("history.csv"), &self.history)?;
        write_json(&dir.join("summary.json"), &self.summary)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: TrainConfig = read_json(&dir.join("config.json"))?;
        config.validate()?;
        let mut model = HahiModel::new(config.model.clone(), config.seed)?;
        let params = read_tensor(dir.join("params"))?;
        let expected = layout(&model);
        let stored: Vec<(String, Vec<usize>)> = params
            .meta
            .get("layout")
            .map(|s| serde_json::from_str(s))
            .transpose()?
            .ok_or_else(|| Error::Config("checkpoint parameters lack a layout".into()))?;
        if stored != expected {
            return Err(Error::Config("checkpoint parameter layout does not match its config".into()));
        }
        let flat: Vec<f64> = params.payload().iter().map(|&v| v as f64).collect();
        model.store.load_flat(&flat).map_err(Error::Config)?;
        Ok(Self {
            config,
            model,
            history: read_history(dir.join("history.csv"))?,
            summary: read_json(&dir.join("summary.json"))?,
        })
    }
}
