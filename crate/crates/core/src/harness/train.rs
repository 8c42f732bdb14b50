use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{HahiModel, SubjectInputs};

use super::config::TrainConfig;
use super::metrics::{argmax, metrics_from_predictions, Metrics};
use super::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: HahiModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

/// Mean batch loss and accuracy over a set, without updating anything.
pub fn assess(model: &HahiModel, data: &[&SubjectInputs], batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut batches = 0;
    for chunk in data.chunks(batch_size) {
        let mut g = Graph::new();
        let l = model.batch_loss(&mut g, chunk)?;
        loss += g.value(l.total).item();
        batches += 1;
        correct += l.logits.iter().zip(chunk).filter(|(lg, x)| argmax(lg) == x.label).count();
    }
    Ok((loss / batches as f64, correct as f64 / data.len() as f64))
}

fn better(candidate: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    match best {
        None => true,
        Some(b) => {
            candidate.val_accuracy > b.val_accuracy
                || (candidate.val_accuracy == b.val_accuracy && candidate.val_loss < b.val_loss)
        }
    }
}

/// Minimizes the total loss over `train` with Adam. The batch order of each
/// epoch is a seeded shuffle, so runs are bitwise reproducible. The returned
/// model holds the parameters of the epoch with the best validation accuracy
/// (ties: lower validation loss); with no validation data, the last epoch.
pub fn train_model(
    train: &[&SubjectInputs],
    val: &[&SubjectInputs],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = HahiModel::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EpochRecord, HahiModel)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SubjectInputs> = idx.iter().map(|&i| train[i]).collect();
            let mut g = Graph::new();
            let loss = match model.batch_loss(&mut g, &batch) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss.total).item();
            let grads = g.backward(loss.total);
            opt.step(&mut model.store, &grads);
            total += value;
            steps += 1;
        }
        let (val_loss, val_accuracy) = match assess(&model, val, cfg.batch_size) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step: steps, loss: f64::NAN }),
            other => other?,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / steps as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&rec);
        if val.is_empty() || better(&rec, best.as_ref().map(|b| &b.0)) {
            best = Some((rec.clone(), model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(rec);
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (rec, model) = match best {
        Some(b) => b,
        None => (
            EpochRecord {
                epoch: 0,
                train_loss: f64::NAN,
                val_loss: f64::NAN,
                val_accuracy: f64::NAN,
            },
            model,
        ),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: rec.epoch,
    })
}

/// Argmax predictions and metrics on a set of subjects.
pub fn evaluate_model(model: &HahiModel, data: &[&SubjectInputs], positive: &BTreeSet<usize>) -> Result<Metrics> {
    if let Some(&c) = positive.iter().find(|&&c| c >= model.cfg.n_classes) {
        return Err(Error::Config(format!("positive class {c} but the model has {} classes", model.cfg.n_classes)));
    }
    let mut predicted = Vec::with_capacity(data.len());
    for x in data {
        predicted.push(argmax(&model.logits(x)?));
    }
    let actual: Vec<usize> = data.iter().map(|x| x.label).collect();
    metrics_from_predictions(&predicted, &actual, positive)
}
