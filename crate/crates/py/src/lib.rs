use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use hahi::data::{generate_synthetic_cohort, DatasetManifest, SyntheticConfig};
use hahi::features::{self, RoiTimeSeries};
use hahi::harness::{self, default_positive_classes, load_subjects, run_fold, Checkpoint, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(err("ragged rows"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect()).map_err(err)
}

fn nested(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "Metrics", frozen, get_all, skip_from_py_object)]
struct PyMetrics {
    accuracy: f64,
    recall: f64,
    precision: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    tn: usize,
    #[pyo3(name = "fn")]
    fn_: usize,
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!(
            "Metrics(accuracy={:.4}, recall={:.4}, precision={:.4}, f1={:.4})",
            self.accuracy, self.recall, self.precision, self.f1
        )
    }
}

impl From<harness::Metrics> for PyMetrics {
    fn from(m: harness::Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            tp: m.tp,
            fp: m.fp,
            tn: m.tn,
            fn_: m.fn_,
        }
    }
}

#[pyfunction]
#[pyo3(name = "metrics_from_counts")]
fn py_metrics_from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> PyResult<PyMetrics> {
    harness::metrics_from_counts(tp, fp, tn, fn_).map(Into::into).map_err(err)
}

/// Pearson correlation between the columns of a samples x ROIs matrix.
#[pyfunction]
fn pearson_fc(window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let w = matrix(window)?;
    features::pearson_fc(w.view()).map(|c| nested(&c)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (values, sampling_interval = 2.0))]
fn static_fc(values: Vec<Vec<f64>>, sampling_interval: f64) -> PyResult<Vec<Vec<f64>>> {
    let ts = RoiTimeSeries::new(matrix(values)?, sampling_interval).map_err(err)?;
    let c = features::static_fc(&ts).map_err(err)?;
    Ok(nested(&c.values.index_axis(ndarray::Axis(2), 0).to_owned()))
}

/// Returns the dynamic connectivity frames, each an ROI x ROI matrix.
#[pyfunction]
#[pyo3(signature = (values, scale, base_window = 7, frames = 128, sampling_interval = 2.0))]
fn dynamic_fc(
    values: Vec<Vec<f64>>,
    scale: usize,
    base_window: usize,
    frames: usize,
    sampling_interval: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let ts = RoiTimeSeries::new(matrix(values)?, sampling_interval).map_err(err)?;
    let c = features::dynamic_fc(&ts, scale, base_window, frames).map_err(err)?;
    Ok(c.values.axis_iter(ndarray::Axis(2)).map(|f| nested(&f.to_owned())).collect())
}

#[pyfunction]
#[pyo3(signature = (values, sampling_interval = 2.0, band_low = 0.01, band_high = 0.08))]
fn alff(values: Vec<Vec<f64>>, sampling_interval: f64, band_low: f64, band_high: f64) -> PyResult<Vec<f64>> {
    let ts = RoiTimeSeries::new(matrix(values)?, sampling_interval).map_err(err)?;
    features::alff(&ts, band_low, band_high).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (z_d, z_s, tau = 0.5, symmetric = true))]
fn dsa_loss(z_d: Vec<Vec<f64>>, z_s: Vec<Vec<f64>>, tau: f64, symmetric: bool) -> PyResult<f64> {
    hahi::dmha::dsa_loss(&z_d, &z_s, tau, symmetric).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (z_star, z_plus, tau = 0.5, symmetric = true))]
fn fsa_loss(z_star: Vec<Vec<f64>>, z_plus: Vec<Vec<f64>>, tau: f64, symmetric: bool) -> PyResult<f64> {
    hahi::dmha::fsa_loss(&z_star, &z_plus, tau, symmetric).map_err(err)
}

/// Writes a synthetic cohort and returns the number of subjects.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn synthesize(out_dir: &str, config_json: Option<&str>) -> PyResult<usize> {
    let cfg: SyntheticConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => SyntheticConfig::default(),
    };
    generate_synthetic_cohort(&cfg, out_dir).map(|m| m.len()).map_err(err)
}

/// Trains one fold, saves the checkpoint to `out_dir` and returns the
/// test-split metrics.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config_json = None))]
fn train_fold(py: Python<'_>, manifest: &str, out_dir: &str, config_json: Option<&str>) -> PyResult<PyMetrics> {
    let cfg = match config_json {
        Some(s) => TrainConfig::from_json(s).map_err(err)?,
        None => TrainConfig::default(),
    };
    py.detach(|| {
        let m = DatasetManifest::read(manifest)?;
        let subjects = load_subjects(&m, &cfg.features)?;
        let r = run_fold(&m, &subjects, &cfg, &default_positive_classes(cfg.model.n_classes), |_| {})?;
        Checkpoint::from_outcome(cfg.clone(), r.outcome, Some(manifest.into())).save(out_dir)?;
        Ok::<_, hahi::error::Error>(r.metrics.into())
    })
    .map_err(err)
}

#[pymodule]
fn pyhahi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(py_metrics_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_fc, m)?)?;
    m.add_function(wrap_pyfunction!(static_fc, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_fc, m)?)?;
    m.add_function(wrap_pyfunction!(alff, m)?)?;
    m.add_function(wrap_pyfunction!(dsa_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fsa_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train_fold, m)?)?;
    Ok(())
}
