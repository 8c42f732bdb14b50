use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Row indices of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified rotating split. Each class is shuffled (seeded per class) and
/// cut into `n_folds` near-equal chunks; fold `f` tests on chunk `f`,
/// validates on chunk `f + 1` and trains on the rest. With ten folds this is
/// the 8:1:1 ratio.
pub fn split_indices(m: &DatasetManifest, fold: usize, n_folds: usize, seed: u64) -> Result<SplitIndices> {
    if n_folds < 3 {
        return Err(Error::Config(format!("n_folds must be >= 3, got {n_folds}")));
    }
    if fold >= n_folds {
        return Err(Error::Config(format!("fold {fold} out of range for {n_folds} folds")));
    }
    let mut out = SplitIndices {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for class in 0..m.cohort.n_classes() {
        let mut members: Vec<usize> = (0..m.rows.len()).filter(|&i| m.rows[i].label == class).collect();
        if members.len() < n_folds {
            return Err(Error::TooFewSubjects {
                class,
                count: members.len(),
                needed: n_folds,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let n = members.len();
        let chunk = |k: usize| &members[k * n / n_folds..(k + 1) * n / n_folds];
        let test_k = fold;
        let val_k = (fold + 1) % n_folds;
        out.test.extend_from_slice(chunk(test_k));
        out.val.extend_from_slice(chunk(val_k));
        for k in (0..n_folds).filter(|&k| k != test_k && k != val_k) {
            out.train.extend_from_slice(chunk(k));
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn split_dataset(m: &DatasetManifest, fold: usize, n_folds: usize, seed: u64) -> Result<Split> {
    let idx = split_indices(m, fold, n_folds, seed)?;
    Ok(Split {
        train: m.subset(&idx.train),
        val: m.subset(&idx.val),
        test: m.subset(&idx.test),
    })
}
