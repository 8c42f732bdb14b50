use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::data::{split_indices, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{Component, SubjectInputs};

use super::config::TrainConfig;
use super::dataset::LoadedSubject;
use super::metrics::{read_metrics_csv, summarize, Metrics, MetricsRow};
use super::train::{evaluate_model, train_model, EpochRecord, TrainOutcome};

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub metrics: Metrics,
    pub test_size: usize,
}

fn pick<'a>(subjects: &'a [LoadedSubject], idx: &[usize]) -> Vec<&'a SubjectInputs> {
    idx.iter().map(|&i| &subjects[i].inputs).collect()
}

/// Trains on one fold's train split, selects on its val split and scores
/// the test split. `subjects` must be loaded in manifest order.
pub fn run_fold(
    m: &DatasetManifest,
    subjects: &[LoadedSubject],
    cfg: &TrainConfig,
    positive: &BTreeSet<usize>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldResult> {
    if subjects.len() != m.len() {
        return Err(Error::Config(format!("{} subjects for {} manifest rows", subjects.len(), m.len())));
    }
    if m.cohort.n_classes() != cfg.model.n_classes {
        return Err(Error::Config(format!(
            "cohort has {} classes, model expects {}",
            m.cohort.n_classes(),
            cfg.model.n_classes
        )));
    }
    let idx = split_indices(m, cfg.fold, cfg.n_folds, cfg.seed)?;
    let outcome = train_model(&pick(subjects, &idx.train), &pick(subjects, &idx.val), cfg, on_epoch)?;
    let test = pick(subjects, &idx.test);
    let metrics = evaluate_model(&outcome.model, &test, positive)?;
    Ok(FoldResult {
        fold: cfg.fold,
        outcome,
        metrics,
        test_size: test.len(),
    })
}

#[derive(Debug, Clone)]
pub struct CvSummary {
    pub folds: Vec<FoldResult>,
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
    pub std: MetricsRow,
}

impl CvSummary {
    /// Per-fold rows followed by the mean and std rows.
    pub fn table(&self) -> Vec<MetricsRow> {
        let mut t = self.rows.clone();
        t.push(self.mean.clone());
        t.push(self.std.clone());
        t
    }
}

pub fn run_cv(
    m: &DatasetManifest,
    subjects: &[LoadedSubject],
    cfg: &TrainConfig,
    positive: &BTreeSet<usize>,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<CvSummary> {
    let mut folds = Vec::with_capacity(cfg.n_folds);
    for fold in 0..cfg.n_folds {
        let fc = TrainConfig { fold, ..cfg.clone() };
        folds.push(run_fold(m, subjects, &fc, positive, |r| on_epoch(fold, r))?);
    }
    let rows: Vec<MetricsRow> = folds.iter().map(|f| MetricsRow::new(f.fold, &f.metrics)).collect();
    let (mean, std) = summarize(&rows).expect("at least three folds");
    Ok(CvSummary { folds, rows, mean, std })
}

/// The six nested configurations obtained by removing components one at a
/// time, starting from the full model.
pub fn ablation_schedule() -> Vec<BTreeSet<Component>> {
    (0..=Component::ORDER.len()).map(|k| Component::ORDER[..k].iter().copied().collect()).collect()
}

/// Components must be removed outermost first: GI, FI, FSA, DSA, TSA.
pub fn check_ablation_order(disable: &BTreeSet<Component>, free_order: bool) -> Result<()> {
    if free_order {
        return Ok(());
    }
    let prefix: BTreeSet<Component> = Component::ORDER[..disable.len()].iter().copied().collect();
    if &prefix != disable {
        let names: Vec<&str> = prefix.iter().map(|c| c.name()).collect();
        return Err(Error::AblationOrder(format!(
            "removing {} components requires exactly {{{}}}; pass --free-order to override",
            disable.len(),
            names.join(",")
        )));
    }
    Ok(())
}

pub fn parse_components(list: &str) -> Result<BTreeSet<Component>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Gathers every per-fold row from `metrics.csv` files below `runs`, labels
/// each with its run directory, and appends mean, std and best-fold rows.
pub fn collect_report(runs: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let runs = runs.as_ref();
    let mut files = vec![];
    find_metrics(runs, &mut files)?;
    let mut rows = vec![];
    for f in &files {
        let run = f
            .parent()
            .and_then(|p| p.strip_prefix(runs).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        for r in read_metrics_csv(f)? {
            if r.fold == "mean" || r.fold == "std" || r.fold.starts_with("best") {
                continue;
            }
            let fold = if run.is_empty() { r.fold.clone() } else { format!("{run}/{}", r.fold) };
            rows.push(MetricsRow { fold, ..r });
        }
    }
    let (mean, std) = summarize(&rows).ok_or_else(|| Error::Config(format!("no metrics rows under {}", runs.display())))?;
    let best = rows
        .iter()
        .fold(None::<&MetricsRow>, |b, r| match b {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .cloned()
        .map(|r| MetricsRow {
            fold: format!("best:{}", r.fold),
            ..r
        })
        .expect("rows are non-empty");
    rows.extend([mean, std, best]);
    Ok(rows)
}
