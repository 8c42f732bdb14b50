//! Training, evaluation, cross-validation and run bookkeeping.

pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod dataset;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointSummary};
pub use config::TrainConfig;
pub use cv::{ablation_schedule, check_ablation_order, collect_report, parse_components, run_cv, run_fold, CvSummary, FoldResult};
pub use dataset::{load_subject, load_subjects, LoadedSubject};
pub use metrics::{default_positive_classes, metrics_from_counts, metrics_from_predictions, Metrics, MetricsRow};
pub use optim::Adam;
pub use train::{assess, evaluate_model, train_model, EpochRecord, TrainOutcome};
