//! Dataset manifest: `manifest.csv` (`subject_id,label,ts_path,fa_path`)
//! plus a sibling `cohort.json` carrying cohort-level metadata.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::atlas::AtlasLayout;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const COHORT_FILE: &str = "cohort.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortMeta {
    pub class_names: Vec<String>,
    pub rois: usize,
    pub n_timepoints: usize,
    /// Seconds per sample.
    pub sampling_interval: f64,
    pub seed: u64,
    pub atlas: AtlasLayout,
    #[serde(default)]
    pub planted_rois: Vec<usize>,
}

impl CohortMeta {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub label: usize,
    pub ts_path: String,
    pub fa_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub cohort: CohortMeta,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            base_dir: self.base_dir.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            cohort: self.cohort.clone(),
        }
    }

    pub fn find(&self, subject_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.subject_id == subject_id)
    }

    /// Subject counts per class label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cohort.n_classes()];
        for r in &self.rows {
            if r.label < counts.len() {
                counts[r.label] += 1;
            }
        }
        counts
    }

    /// Unique ids, labels below C and (when `check_paths`) existing files.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let c = self.cohort.n_classes();
        if c == 0 {
            return Err(Error::Manifest("cohort has no classes".into()));
        }
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.subject_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate subject_id {:?}", row.subject_id)));
            }
            if row.label >= c {
                return Err(Error::Manifest(format!(
                    "subject {:?} has label {} but only {c} classes",
                    row.subject_id, row.label
                )));
            }
            if check_paths {
                for p in [&row.ts_path, &row.fa_path] {
                    if !self.resolve(p).is_dir() {
                        return Err(Error::Manifest(format!(
                            "subject {:?}: path {:?} does not resolve",
                            row.subject_id, p
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes `manifest.csv` and `cohort.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let cohort = dir.join(COHORT_FILE);
        fs::write(&cohort, serde_json::to_vec_pretty(&self.cohort)?).map_err(|e| Error::io(&cohort, e))?;
        Ok(path)
    }

    /// Reads a manifest CSV; `cohort.json` must sit next to it.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(&path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["subject_id", "label", "ts_path", "fa_path"] {
            return Err(Error::Manifest(format!("unexpected header {headers:?}")));
        }
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let cohort_path = base_dir.join(COHORT_FILE);
        let raw = fs::read(&cohort_path).map_err(|e| Error::io(&cohort_path, e))?;
        let cohort: CohortMeta = serde_json::from_slice(&raw)?;
        let m = Self { base_dir, rows, cohort };
        m.validate(true)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CohortMeta {
        CohortMeta {
            class_names: vec!["HC".into(), "MCI".into()],
            rois: 8,
            n_timepoints: 10,
            sampling_interval: 2.0,
            seed: 1,
            atlas: AtlasLayout::regular([4, 4, 4], [2, 2, 2]).unwrap(),
            planted_rois: vec![],
        }
    }

    #[test]
    fn duplicate_and_label_checks() {
        let row = |id: &str, label| ManifestRow {
            subject_id: id.into(),
            label,
            ts_path: "a".into(),
            fa_path: "b".into(),
        };
        let mut m = DatasetManifest {
            base_dir: PathBuf::new(),
            rows: vec![row("s1", 0), row("s1", 1)],
            cohort: meta(),
        };
        assert!(m.validate(false).is_err());
        m.rows[1].subject_id = "s2".into();
        m.validate(false).unwrap();
        m.rows[1].label = 2;
        assert!(m.validate(false).is_err());
    }

    #[test]
    fn unresolvable_path_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            base_dir: dir.path().into(),
            rows: vec![ManifestRow {
                subject_id: "s".into(),
                label: 0,
                ts_path: "missing".into(),
                fa_path: "missing".into(),
            }],
            cohort: meta(),
        };
        let p = m.write(dir.path()).unwrap();
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("subject_id,label,ts_path,fa_path"));
        assert!(DatasetManifest::read(&p).is_err());
    }
}
