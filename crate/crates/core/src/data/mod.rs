//! Containers, manifests, splits and the synthetic cohort.

pub mod atlas;
pub mod container;
pub mod manifest;
pub mod split;
pub mod synth;

pub use atlas::{AtlasBlock, AtlasLayout};
pub use container::{read_tensor, write_tensor, TensorContainer};
pub use manifest::{CohortMeta, DatasetManifest, ManifestRow};
pub use split::{split_dataset, split_indices, Split, SplitIndices};
pub use synth::{generate_subjects, generate_synthetic_cohort, SyntheticConfig, SyntheticSubject};
