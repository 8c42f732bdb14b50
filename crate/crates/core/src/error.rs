use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("payload/shape mismatch: shape {shape:?} needs {expected} scalars, payload has {actual}")]
    PayloadShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {0:?}: entries must be positive and non-empty")]
    InvalidShape(Vec<usize>),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("unsupported layout {0:?}")]
    UnsupportedLayout(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("too few subjects in class {class}: {count} < {needed}")]
    TooFewSubjects {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("constant column at ROI {0}: correlation undefined")]
    ConstantColumn(usize),

    #[error("window exceeds series: window {window} > {samples} samples")]
    WindowExceedsSeries { window: usize, samples: usize },

    #[error("empty frequency band [{low}, {high}] Hz: no spectral bins in range")]
    EmptyBand { low: f64, high: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("zero vector: cosine similarity undefined")]
    ZeroVector,

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid counts: {0}")]
    Counts(String),

    #[error("invalid component name {0:?}")]
    Component(String),

    #[error("ablation out of order: {0}")]
    AblationOrder(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("model not initialized")]
    Uninitialized,

    #[error("unknown subject {0:?}")]
    UnknownSubject(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
