#![allow(dead_code)]

use std::path::Path;

use hahi::data::{generate_subjects, generate_synthetic_cohort, DatasetManifest, SyntheticConfig};
use hahi::features::RoiTimeSeries;
use hahi::harness::TrainConfig;
use hahi::model::SubjectInputs;

/// Cohort matching the tiny model: 8 ROIs on an 8^3 grid.
pub fn tiny_cohort(n_per_class: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_per_class,
        rois: 8,
        n_timepoints: 80,
        planted_rois: vec![0, 1],
        grid: [8, 8, 8],
        blocks_per_axis: [2, 2, 2],
        seed,
        ..SyntheticConfig::default()
    }
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-3,
        n_folds: 5,
        ..TrainConfig::tiny()
    }
}

/// Model inputs straight from generated subjects, in generation order.
pub fn tiny_inputs(n_per_class: usize, seed: u64) -> Vec<SubjectInputs> {
    let sc = tiny_cohort(n_per_class, seed);
    let atlas = sc.atlas().unwrap();
    let features = TrainConfig::tiny().features;
    generate_subjects(&sc)
        .unwrap()
        .into_iter()
        .map(|s| {
            let ts = RoiTimeSeries::new(s.timeseries, sc.sampling_interval).unwrap();
            SubjectInputs::from_raw(&ts, &s.fa, &atlas, &features, s.label).unwrap()
        })
        .collect()
}

pub fn write_tiny_cohort(dir: &Path, n_per_class: usize, seed: u64) -> DatasetManifest {
    generate_synthetic_cohort(&tiny_cohort(n_per_class, seed), dir).unwrap()
}
