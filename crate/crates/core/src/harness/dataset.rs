use ndarray::{Array2, Array3, Ix2, Ix3};

use crate::data::{read_tensor, DatasetManifest, ManifestRow};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, RoiTimeSeries};
use crate::model::SubjectInputs;

/// One subject's identifier and model inputs.
#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub subject_id: String,
    pub inputs: SubjectInputs,
}

pub fn read_timeseries(m: &DatasetManifest, row: &ManifestRow) -> Result<RoiTimeSeries> {
    let t = read_tensor(m.resolve(&row.ts_path))?;
    let values: Array2<f64> = t
        .to_array()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Dimension(format!("{}: time series must be 2D, got {:?}", row.subject_id, t.shape())))?;
    if values.ncols() != m.cohort.rois {
        return Err(Error::Dimension(format!(
            "{}: {} ROIs, cohort declares {}",
            row.subject_id,
            values.ncols(),
            m.cohort.rois
        )));
    }
    RoiTimeSeries::new(values, m.cohort.sampling_interval)
}

pub fn read_fa(m: &DatasetManifest, row: &ManifestRow) -> Result<Array3<f64>> {
    let t = read_tensor(m.resolve(&row.fa_path))?;
    t.to_array()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Dimension(format!("{}: FA must be 3D, got {:?}", row.subject_id, t.shape())))
}

pub fn load_subject(m: &DatasetManifest, row: &ManifestRow, features: &FeatureConfig) -> Result<LoadedSubject> {
    let ts = read_timeseries(m, row)?;
    let fa = read_fa(m, row)?;
    Ok(LoadedSubject {
        subject_id: row.subject_id.clone(),
        inputs: SubjectInputs::from_raw(&ts, &fa, &m.cohort.atlas, features, row.label)?,
    })
}

/// Loads every row, in manifest order.
pub fn load_subjects(m: &DatasetManifest, features: &FeatureConfig) -> Result<Vec<LoadedSubject>> {
    m.rows.iter().map(|row| load_subject(m, row, features)).collect()
}
