//! Synthetic cohort with planted class effects.
//!
//! ROI time series follow a stationary AR(1) process whose innovations carry
//! a class-specific correlation structure (a baseline correlation plus a
//! per-class delta on the planted ROI block). FA-like volumes are a baseline
//! intensity plus a per-class delta on the planted atlas blocks plus voxel
//! noise.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::atlas::AtlasLayout;
use super::container::{write_tensor, TensorContainer};
use super::manifest::{CohortMeta, DatasetManifest, ManifestRow};
use crate::error::{Error, Result};

/// Smallest eigenvalue kept when repairing a target correlation matrix.
pub const EIGEN_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub class_names: Vec<String>,
    pub rois: usize,
    pub n_timepoints: usize,
    pub sampling_interval: f64,
    pub ar_coefficient: f64,
    pub baseline_correlation: f64,
    pub planted_rois: Vec<usize>,
    /// Added to the within-block target correlation, one entry per class.
    pub connectivity_delta: Vec<f64>,
    /// Added to FA intensity inside the planted blocks, one entry per class.
    pub regional_delta: Vec<f64>,
    pub fa_baseline: f64,
    /// Standard deviation of the additive voxel noise.
    pub noise: f64,
    pub grid: [usize; 3],
    pub blocks_per_axis: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_per_class: 60,
            class_names: vec!["HC".into(), "MCI".into()],
            rois: 32,
            n_timepoints: 240,
            sampling_interval: 2.0,
            ar_coefficient: 0.3,
            baseline_correlation: 0.1,
            planted_rois: vec![0, 2, 8, 10],
            connectivity_delta: vec![0.0, 0.3],
            regional_delta: vec![0.0, 1.0],
            fa_baseline: 0.5,
            noise: 1.0,
            grid: [32, 32, 32],
            blocks_per_axis: [4, 4, 2],
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn atlas(&self) -> Result<AtlasLayout> {
        AtlasLayout::regular(self.grid, self.blocks_per_axis)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if self.rois < 2 || self.n_timepoints < 2 {
            return Err(Error::Config("need at least 2 ROIs and 2 time samples".into()));
        }
        if !(self.sampling_interval > 0.0) || !(self.ar_coefficient.abs() < 1.0) {
            return Err(Error::Config("sampling_interval must be > 0 and |ar_coefficient| < 1".into()));
        }
        if let Some(&k) = self.planted_rois.iter().find(|&&k| k >= self.rois) {
            return Err(Error::Config(format!("planted ROI {k} >= R = {}", self.rois)));
        }
        if self.connectivity_delta.len() != c || self.regional_delta.len() != c {
            return Err(Error::Config("one connectivity and regional delta per class required".into()));
        }
        let finite = self
            .connectivity_delta
            .iter()
            .chain(&self.regional_delta)
            .chain([&self.baseline_correlation, &self.fa_baseline, &self.noise])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("deltas and levels must be finite".into()));
        }
        let atlas = self.atlas()?;
        atlas.validate()?;
        if atlas.n_rois() != self.rois {
            return Err(Error::Config(format!(
                "atlas has {} blocks but R = {}",
                atlas.n_rois(),
                self.rois
            )));
        }
        Ok(())
    }

    /// Class target correlation before positive-definite repair.
    pub fn target_correlation(&self, class: usize) -> DMatrix<f64> {
        let r = self.rois;
        let planted = |i: usize| self.planted_rois.contains(&i);
        DMatrix::from_fn(r, r, |i, j| {
            if i == j {
                1.0
            } else if planted(i) && planted(j) {
                self.baseline_correlation + self.connectivity_delta[class]
            } else {
                self.baseline_correlation
            }
        })
    }
}

/// Clips eigenvalues at [`EIGEN_FLOOR`] and rescales to unit diagonal.
pub fn nearest_correlation(target: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(target.clone());
    let clipped = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (d[i] * d[j])
        }
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub label: usize,
    /// `N_t x R`.
    pub timeseries: Array2<f64>,
    pub fa: Array3<f64>,
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn ar1_series(chol: &DMatrix<f64>, n_t: usize, phi: f64, rng: &mut impl Rng) -> Array2<f64> {
    let r = chol.nrows();
    let mut out = Array2::zeros((n_t, r));
    let mut prev = vec![0.0; r];
    let stationary = 1.0 / (1.0 - phi * phi).sqrt();
    let mut z = vec![0.0; r];
    for t in 0..n_t {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..r {
            let mut e = 0.0;
            for j in 0..=i {
                e += chol[(i, j)] * z[j];
            }
            let x = if t == 0 { e * stationary } else { phi * prev[i] + e };
            out[(t, i)] = x;
        }
        for i in 0..r {
            prev[i] = out[(t, i)];
        }
    }
    out
}

/// Generates every subject in memory (class-major order). Pure in `cfg`.
pub fn generate_subjects(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSubject>> {
    cfg.validate()?;
    let atlas = cfg.atlas()?;
    let mask = atlas.mask(&cfg.planted_rois);
    let chols = (0..cfg.n_classes())
        .map(|c| {
            let corr = nearest_correlation(&cfg.target_correlation(c));
            corr.cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| Error::Config(format!("class {c} target correlation not positive definite")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut subjects = Vec::with_capacity(cfg.n_per_class * cfg.n_classes());
    for label in 0..cfg.n_classes() {
        for _ in 0..cfg.n_per_class {
            let index = subjects.len();
            let mut rng = subject_rng(cfg.seed, index);
            let timeseries = ar1_series(&chols[label], cfg.n_timepoints, cfg.ar_coefficient, &mut rng);
            let [nx, ny, nz] = cfg.grid;
            let mut fa = Array3::zeros((nx, ny, nz));
            for (value, &planted) in fa.iter_mut().zip(&mask) {
                let noise: f64 = rng.sample(StandardNormal);
                *value = cfg.fa_baseline + if planted { cfg.regional_delta[label] } else { 0.0 } + cfg.noise * noise;
            }
            subjects.push(SyntheticSubject {
                subject_id: format!("sub-{index:04}"),
                label,
                timeseries,
                fa,
            });
        }
    }
    Ok(subjects)
}

/// Writes the cohort below `out_dir` and returns its manifest.
pub fn generate_synthetic_cohort(cfg: &SyntheticConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let subjects = generate_subjects(cfg)?;
    let seed = cfg.seed.to_string();
    let mut rows = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let ts_rel = format!("subjects/{}/ts", s.subject_id);
        let fa_rel = format!("subjects/{}/fa", s.subject_id);
        let ts = TensorContainer::from_array(&s.timeseries.clone().into_dyn())?
            .with_meta("modality", "timeseries")
            .with_meta("units", "a.u.")
            .with_meta("sampling_interval", cfg.sampling_interval.to_string())
            .with_meta("seed", seed.clone());
        write_tensor(&ts, out_dir.join(&ts_rel))?;
        let fa = TensorContainer::from_array(&s.fa.clone().into_dyn())?
            .with_meta("modality", "FA")
            .with_meta("units", "a.u.")
            .with_meta("seed", seed.clone());
        write_tensor(&fa, out_dir.join(&fa_rel))?;
        rows.push(ManifestRow {
            subject_id: s.subject_id.clone(),
            label: s.label,
            ts_path: ts_rel,
            fa_path: fa_rel,
        });
    }
    let manifest = DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        rows,
        cohort: CohortMeta {
            class_names: cfg.class_names.clone(),
            rois: cfg.rois,
            n_timepoints: cfg.n_timepoints,
            sampling_interval: cfg.sampling_interval,
            seed: cfg.seed,
            atlas: cfg.atlas()?,
            planted_rois: cfg.planted_rois.clone(),
        },
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::pearson_fc;

    fn small(delta: f64, regional: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_per_class: 50,
            rois: 8,
            n_timepoints: 240,
            planted_rois: vec![0, 1, 2, 3],
            connectivity_delta: vec![0.0, delta],
            regional_delta: vec![0.0, regional],
            grid: [4, 4, 4],
            blocks_per_axis: [2, 2, 2],
            ..SyntheticConfig::default()
        }
    }

    /// Per-subject mean off-diagonal correlation inside the planted block.
    fn block_means(subjects: &[SyntheticSubject], label: usize, block: &[usize]) -> Vec<f64> {
        subjects
            .iter()
            .filter(|s| s.label == label)
            .map(|s| {
                let fc = pearson_fc(s.timeseries.view()).unwrap();
                let mut acc = 0.0;
                let mut n = 0.0;
                for &i in block {
                    for &j in block {
                        if i < j {
                            acc += fc[(i, j)];
                            n += 1.0;
                        }
                    }
                }
                acc / n
            })
            .collect()
    }

    fn mean_and_var(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    }

    #[test]
    fn same_seed_same_cohort() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg = small(0.3, 1.0);
        cfg.n_per_class = 3;
        cfg.seed = 7;
        let a = generate_synthetic_cohort(&cfg, dir_a.path()).unwrap();
        let b = generate_synthetic_cohort(&cfg, dir_b.path()).unwrap();
        assert_eq!(a.rows, b.rows);
        for row in &a.rows {
            for rel in [&row.ts_path, &row.fa_path] {
                let x = std::fs::read(dir_a.path().join(rel).join("data.bin")).unwrap();
                let y = std::fs::read(dir_b.path().join(rel).join("data.bin")).unwrap();
                assert_eq!(x, y);
            }
        }
        let ma = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
        let read = DatasetManifest::read(dir_a.path().join("manifest.csv")).unwrap();
        assert_eq!(read.rows, a.rows);
    }

    #[test]
    fn null_effect_is_null() {
        let subjects = generate_subjects(&small(0.0, 0.0)).unwrap();
        let block = [0, 1, 2, 3];
        let (m0, v0) = mean_and_var(&block_means(&subjects, 0, &block));
        let (m1, v1) = mean_and_var(&block_means(&subjects, 1, &block));
        let se = (v0 / 50.0 + v1 / 50.0).sqrt();
        assert!((m1 - m0).abs() < 3.0 * se, "diff {} se {se}", m1 - m0);
    }

    #[test]
    fn planted_connectivity_effect_survives() {
        let subjects = generate_subjects(&small(0.3, 0.0)).unwrap();
        let block = [0, 1, 2, 3];
        let (m0, _) = mean_and_var(&block_means(&subjects, 0, &block));
        let (m1, _) = mean_and_var(&block_means(&subjects, 1, &block));
        assert!(m1 - m0 >= 0.15, "diff {}", m1 - m0);
    }

    #[test]
    fn regional_effect_on_planted_blocks() {
        let mut cfg = small(0.0, 1.0);
        cfg.n_per_class = 4;
        let subjects = generate_subjects(&cfg).unwrap();
        let mask = cfg.atlas().unwrap().mask(&cfg.planted_rois);
        let mean_in = |s: &SyntheticSubject| {
            let v: Vec<f64> = s.fa.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let c0: f64 = subjects.iter().filter(|s| s.label == 0).map(mean_in).sum::<f64>() / 4.0;
        let c1: f64 = subjects.iter().filter(|s| s.label == 1).map(mean_in).sum::<f64>() / 4.0;
        assert!((c1 - c0 - 1.0).abs() < 0.1, "{c0} {c1}");
    }

    #[test]
    fn repair_makes_positive_definite() {
        let mut cfg = small(0.0, 0.0);
        cfg.baseline_correlation = -0.5; // indefinite for R = 8
        let target = cfg.target_correlation(0);
        assert!(target.clone().cholesky().is_none());
        let fixed = nearest_correlation(&target);
        assert!(fixed.clone().cholesky().is_some());
        for i in 0..8 {
            assert!((fixed[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validation() {
        let mut cfg = small(0.0, 0.0);
        cfg.planted_rois = vec![8];
        assert!(cfg.validate().is_err());
        let mut cfg = small(0.0, 0.0);
        cfg.regional_delta = vec![0.0, f64::NAN];
        assert!(cfg.validate().is_err());
        let mut cfg = small(0.0, 0.0);
        cfg.rois = 9;
        assert!(cfg.validate().is_err());
    }
}
