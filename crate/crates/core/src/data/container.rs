//! Minimal on-disk tensor container.
//!
//! A container is a directory holding two files:
//!
//! - `meta.json`: `{"shape": [..], "dtype": "f32le", "layout": "row-major", "meta": {..}}`
//! - `data.bin`: the payload as raw little-endian IEEE-754 single floats, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_TAG: &str = "f32le";
pub const LAYOUT_TAG: &str = "row-major";
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    shape: Vec<usize>,
    payload: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, payload: Vec<f32>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != payload.len() {
            return Err(Error::PayloadShapeMismatch {
                shape,
                expected,
                actual: payload.len(),
            });
        }
        Ok(Self {
            shape,
            payload,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Narrows every element to f32.
    pub fn from_array(array: &ArrayD<f64>) -> Result<Self> {
        let payload = array.iter().map(|&v| v as f32).collect();
        Self::new(array.shape().to_vec(), payload)
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.payload.iter().map(|&v| v as f64).collect(),
        )
        .expect("container invariant: payload matches shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<f32> {
        self.payload
    }
}

pub fn write_tensor(t: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let expected = check_shape(&t.shape)?;
    if expected != t.payload.len() {
        return Err(Error::PayloadShapeMismatch {
            shape: t.shape.clone(),
            expected,
            actual: t.payload.len(),
        });
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let meta = MetaFile {
        shape: t.shape.clone(),
        dtype: DTYPE_TAG.to_string(),
        layout: LAYOUT_TAG.to_string(),
        meta: t.meta.clone(),
    };
    let meta_path = path.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let mut bytes = Vec::with_capacity(t.payload.len() * 4);
    for v in &t.payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let data_path = path.join(DATA_FILE);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let meta_path = path.join(META_FILE);
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile = serde_json::from_slice(&raw)?;
    if meta.dtype != DTYPE_TAG {
        return Err(Error::UnsupportedDtype(meta.dtype));
    }
    if meta.layout != LAYOUT_TAG {
        return Err(Error::UnsupportedLayout(meta.layout));
    }
    let count = check_shape(&meta.shape)?;

    let data_path = path.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() < count * 4 {
        return Err(Error::TruncatedPayload {
            expected: count * 4,
            actual: bytes.len(),
        });
    }
    if bytes.len() > count * 4 {
        return Err(Error::PayloadShapeMismatch {
            shape: meta.shape,
            expected: count,
            actual: bytes.len() / 4,
        });
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(TensorContainer {
        shape: meta.shape,
        payload,
        meta: meta.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_small() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorContainer::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_meta("modality", "test");
        write_tensor(&t, dir.path().join("t")).unwrap();
        assert!(dir.path().join("t/meta.json").exists());
        assert!(dir.path().join("t/data.bin").exists());
        assert_eq!(read_tensor(dir.path().join("t")).unwrap(), t);
    }

    #[test]
    fn single_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorContainer::new(vec![1], vec![0.0]).unwrap();
        write_tensor(&t, dir.path()).unwrap();
        assert_eq!(read_tensor(dir.path()).unwrap(), t);
    }

    #[test]
    fn mismatch_rejected() {
        let err = TensorContainer::new(vec![3, 2], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("payload/shape mismatch"));
        assert!(TensorContainer::new(vec![], vec![]).is_err());
        assert!(TensorContainer::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorContainer::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&t, dir.path()).unwrap();
        let data = dir.path().join(DATA_FILE);
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..12]).unwrap();
        let err = read_tensor(dir.path()).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorContainer::new(vec![1], vec![1.0]).unwrap();
        write_tensor(&t, dir.path()).unwrap();
        let meta = dir.path().join(META_FILE);
        let text = fs::read_to_string(&meta).unwrap().replace("f32le", "f64le");
        fs::write(&meta, text).unwrap();
        let err = read_tensor(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unsupported dtype"), "{err}");
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_tensor(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    fn shape_and_payload() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
        prop::collection::vec(1usize..5, 1..=5).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            (Just(shape), prop::collection::vec(any::<f32>(), n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact((shape, payload) in shape_and_payload()) {
            let dir = tempfile::tempdir().unwrap();
            let t = TensorContainer::new(shape, payload).unwrap().with_meta("seed", "3");
            write_tensor(&t, dir.path()).unwrap();
            let back = read_tensor(dir.path()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(&back.meta, &t.meta);
            let a: Vec<u32> = back.payload().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.payload().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
