use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Standard binary metrics; every zero denominator yields 0.
pub fn metrics_from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Metrics> {
    let total = tp + fp + tn + fn_;
    if total == 0 {
        return Err(Error::Counts("all confusion counts are zero".into()));
    }
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    Ok(Metrics {
        accuracy: ratio(tp + tn, total),
        recall,
        precision,
        f1: f1_score(precision, recall),
        tp,
        fp,
        tn,
        fn_,
    })
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Accuracy on the raw class predictions; recall and precision on the
/// binarized "any positive class" decision.
pub fn metrics_from_predictions(predicted: &[usize], actual: &[usize], positive: &BTreeSet<usize>) -> Result<Metrics> {
    if predicted.len() != actual.len() || predicted.is_empty() {
        return Err(Error::Counts(format!("{} predictions for {} labels", predicted.len(), actual.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, a) in predicted.iter().zip(actual) {
        match (positive.contains(p), positive.contains(a)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut m = metrics_from_counts(tp, fp, tn, fn_)?;
    m.accuracy = ratio(predicted.iter().zip(actual).filter(|(p, a)| p == a).count(), actual.len());
    Ok(m)
}

/// Every class except 0.
pub fn default_positive_classes(n_classes: usize) -> BTreeSet<usize> {
    (1..n_classes).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub fold: String,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl MetricsRow {
    pub fn new(fold: impl ToString, m: &Metrics) -> Self {
        Self {
            fold: fold.to_string(),
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
        }
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["fold", "accuracy", "recall", "precision", "f1"] {
        return Err(Error::Config(format!("{} is not a metrics CSV", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}

/// Mean and population standard deviation of each metric.
pub fn summarize(rows: &[MetricsRow]) -> Option<(MetricsRow, MetricsRow)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let col = |f: fn(&MetricsRow) -> f64| {
        let mean = rows.iter().map(f).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, sd)
    };
    let (a, sa) = col(|r| r.accuracy);
    let (re, sre) = col(|r| r.recall);
    let (p, sp) = col(|r| r.precision);
    let (f, sf) = col(|r| r.f1);
    Some((
        MetricsRow {
            fold: "mean".into(),
            accuracy: a,
            recall: re,
            precision: p,
            f1: f,
        },
        MetricsRow {
            fold: "std".into(),
            accuracy: sa,
            recall: sre,
            precision: sp,
            f1: sf,
        },
    ))
}
