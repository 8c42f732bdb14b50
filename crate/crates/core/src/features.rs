//! Model inputs computed from raw per-subject data: static and multi-scale
//! dynamic functional connectivity, ALFF, and ROI-to-volume projection.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::AtlasLayout;
use crate::error::{Error, Result};

/// `N_t x R` preprocessed ROI signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    values: Array2<f64>,
    sampling_interval: f64,
}

impl RoiTimeSeries {
    pub fn new(values: Array2<f64>, sampling_interval: f64) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "time series needs >= 2 samples and >= 1 ROI, got {:?}",
                values.shape()
            )));
        }
        if !(sampling_interval > 0.0) {
            return Err(Error::Config(format!("sampling interval must be positive, got {sampling_interval}")));
        }
        if let Some(roi) = first_constant_column(values.view()) {
            return Err(Error::ConstantColumn(roi));
        }
        Ok(Self {
            values,
            sampling_interval,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_rois(&self) -> usize {
        self.values.ncols()
    }

    pub fn sampling_interval(&self) -> f64 {
        self.sampling_interval
    }
}

/// `R x R x D` stack of correlation frames at temporal scale `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityTensor {
    pub values: Array3<f64>,
    pub scale: usize,
}

impl ConnectivityTensor {
    pub fn frame_count(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    pub fn frame(&self, d: usize) -> ndarray::ArrayView2<'_, f64> {
        self.values.index_axis(Axis(2), d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionalKind {
    #[serde(rename = "ALFF")]
    Alff,
    #[serde(rename = "FA")]
    Fa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalVolume {
    pub values: Array3<f64>,
    pub kind: RegionalKind,
}

fn column_is_constant(col: ndarray::ArrayView1<'_, f64>) -> bool {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
    ss <= (1e-12 * scale).powi(2) * n
}

fn first_constant_column(x: ArrayView2<'_, f64>) -> Option<usize> {
    (0..x.ncols()).find(|&j| column_is_constant(x.column(j)))
}

/// Sample Pearson correlation between every pair of columns of a
/// `T_w x R` window.
pub fn pearson_fc(window: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (t, r) = window.dim();
    if t < 2 {
        return Err(Error::Dimension(format!("correlation window needs >= 2 samples, got {t}")));
    }
    if let Some(roi) = first_constant_column(window) {
        return Err(Error::ConstantColumn(roi));
    }
    // columns centred and scaled to unit norm, stored ROI-major
    let mut z = Array2::<f64>::zeros((r, t));
    for j in 0..r {
        let col = window.column(j);
        let mean = col.sum() / t as f64;
        let mut row = z.row_mut(j);
        let mut ss = 0.0;
        for (dst, &v) in row.iter_mut().zip(col.iter()) {
            *dst = v - mean;
            ss += *dst * *dst;
        }
        let inv = 1.0 / ss.sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    let mut out = Array2::<f64>::eye(r);
    for i in 0..r {
        for j in i + 1..r {
            let c = z.row(i).dot(&z.row(j)).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    Ok(out)
}

/// Single-frame connectivity over the whole series.
pub fn static_fc(ts: &RoiTimeSeries) -> Result<ConnectivityTensor> {
    let fc = pearson_fc(ts.values())?;
    let r = fc.nrows();
    Ok(ConnectivityTensor {
        values: fc.into_shape_with_order((r, r, 1)).expect("r*r elements"),
        scale: 1,
    })
}

/// Equal-interval selection of `frames` indices out of `available`
/// candidates: `j -> round(j (A - 1) / (T - 1))`.
pub fn frame_indices(available: usize, frames: usize) -> Vec<usize> {
    if frames <= 1 {
        return vec![0; frames];
    }
    (0..frames)
        .map(|j| ((j * (available - 1)) as f64 / (frames - 1) as f64).round() as usize)
        .collect()
}

/// Sliding-window connectivity with window length `base_window * scale`,
/// stride 1, reduced to exactly `frames` equally spaced frames.
pub fn dynamic_fc(ts: &RoiTimeSeries, scale: usize, base_window: usize, frames: usize) -> Result<ConnectivityTensor> {
    if scale == 0 || base_window == 0 || frames == 0 {
        return Err(Error::Config("scale, base window and frame count must be positive".into()));
    }
    let window = base_window * scale;
    let n_t = ts.n_samples();
    if window > n_t {
        return Err(Error::WindowExceedsSeries { window, samples: n_t });
    }
    let available = n_t - window + 1;
    let r = ts.n_rois();
    let mut values = Array3::<f64>::zeros((r, r, frames));
    let mut cache: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    for (d, start) in frame_indices(available, frames).into_iter().enumerate() {
        if !cache.contains_key(&start) {
            let fc = pearson_fc(ts.values().slice(s![start..start + window, ..]))?;
            cache.insert(start, fc);
        }
        values.index_axis_mut(Axis(2), d).assign(&cache[&start]);
    }
    Ok(ConnectivityTensor { values, scale })
}

/// Base-scale DFC plus one DFC per encoder level at scale `2^l * delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleDfc {
    pub base: ConnectivityTensor,
    pub levels: BTreeMap<usize, ConnectivityTensor>,
}

pub fn scale_for_level(level: usize, delta: usize) -> usize {
    (1usize << level) * delta
}

pub fn multiscale_dfc(
    ts: &RoiTimeSeries,
    delta: usize,
    levels: usize,
    base_window: usize,
    frames: usize,
) -> Result<MultiScaleDfc> {
    if levels == 0 || delta == 0 {
        return Err(Error::Config("levels and delta must be >= 1".into()));
    }
    let base = dynamic_fc(ts, 1, base_window, frames)?;
    let levels = (1..=levels)
        .map(|l| Ok((l, dynamic_fc(ts, scale_for_level(l, delta), base_window, frames)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MultiScaleDfc { base, levels })
}

/// Mean single-sided DFT amplitude over bins in `[band_low, band_high]` Hz,
/// computed per ROI on the mean-removed signal.
pub fn alff(ts: &RoiTimeSeries, band_low: f64, band_high: f64) -> Result<Vec<f64>> {
    alff_of(ts.values(), ts.sampling_interval(), band_low, band_high)
}

/// [`alff`] on a raw `N_t x R` matrix; constant columns give zero.
pub fn alff_of(values: ArrayView2<'_, f64>, dt: f64, band_low: f64, band_high: f64) -> Result<Vec<f64>> {
    let n = values.nrows();
    if n < 2 || !(dt > 0.0) {
        return Err(Error::Config("ALFF needs >= 2 samples and a positive sampling interval".into()));
    }
    let nyquist = 1.0 / (2.0 * dt);
    if !(band_low >= 0.0 && band_low < band_high && band_high <= nyquist) {
        return Err(Error::Config(format!(
            "band [{band_low}, {band_high}] Hz invalid for Nyquist {nyquist} Hz"
        )));
    }
    let df = 1.0 / (n as f64 * dt);
    let bins: Vec<usize> = (0..=n / 2)
        .filter(|&k| {
            let f = k as f64 * df;
            f >= band_low && f <= band_high
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::EmptyBand {
            low: band_low,
            high: band_high,
        });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(values.ncols());
    for col in values.columns() {
        let mean = col.sum() / n as f64;
        for (b, &v) in buf.iter_mut().zip(col.iter()) {
            *b = Complex::new(v - mean, 0.0);
        }
        fft.process(&mut buf);
        let amp: f64 = bins.iter().map(|&k| buf[k].norm() * 2.0 / n as f64).sum();
        out.push(amp / bins.len() as f64);
    }
    Ok(out)
}

/// Paints `values[k]` into every voxel of atlas block `k`.
pub fn roi_to_volume(values: &[f64], atlas: &AtlasLayout, kind: RegionalKind) -> Result<RegionalVolume> {
    if values.len() != atlas.n_rois() {
        return Err(Error::Dimension(format!(
            "{} ROI values for an atlas of {} blocks",
            values.len(),
            atlas.n_rois()
        )));
    }
    let [nx, ny, nz] = atlas.grid;
    let mut vol = Array3::zeros((nx, ny, nz));
    for (b, &v) in atlas.blocks.iter().zip(values) {
        vol.slice_mut(s![
            b.start[0]..b.start[0] + b.size[0],
            b.start[1]..b.start[1] + b.size[1],
            b.start[2]..b.start[2] + b.size[2]
        ])
        .fill(v);
    }
    Ok(RegionalVolume { values: vol, kind })
}

/// Parameters for turning raw data into model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub base_window: usize,
    pub frames: usize,
    pub delta: usize,
    pub levels: usize,
    pub band_low: f64,
    pub band_high: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            base_window: 7,
            frames: 128,
            delta: 1,
            levels: 4,
            band_low: 0.01,
            band_high: 0.08,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook two-pass correlation of two slices.
    fn oracle_r(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    fn random_series(t: usize, r: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, r), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn two_cols(x: [f64; 4], y: [f64; 4]) -> Array2<f64> {
        Array2::from_shape_fn((4, 2), |(t, c)| if c == 0 { x[t] } else { y[t] })
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = |y| pearson_fc(two_cols(x, y).view()).unwrap()[(0, 1)];
        assert!((r([2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((r([4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let expected = oracle_r(&x, &[1.0, 3.0, 2.0, 4.0]);
        assert!((expected - 0.8).abs() < 1e-12);
        assert!((r([1.0, 3.0, 2.0, 4.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_column_named() {
        let w = array![[1.0, 5.0, 2.0], [2.0, 5.0, 1.0], [3.0, 5.0, 0.0]];
        match pearson_fc(w.view()) {
            Err(Error::ConstantColumn(1)) => {}
            other => panic!("expected constant column 1, got {other:?}"),
        }
        assert!(RoiTimeSeries::new(w, 1.0).is_err());
    }

    #[test]
    fn static_fc_matches_brute_force() {
        let x = random_series(64, 8, 3);
        let ts = RoiTimeSeries::new(x.clone(), 2.0).unwrap();
        let fc = static_fc(&ts).unwrap();
        assert_eq!(fc.frame_count(), 1);
        let mut max_diff: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let o = oracle_r(&x.column(i).to_vec(), &x.column(j).to_vec());
                max_diff = max_diff.max((fc.values[(i, j, 0)] - o).abs());
            }
        }
        assert!(max_diff < 1e-10, "{max_diff}");
    }

    #[test]
    fn identical_columns_correlate_fully() {
        let mut x = random_series(20, 4, 1);
        let c = x.column(1).to_owned();
        x.column_mut(3).assign(&c);
        let fc = static_fc(&RoiTimeSeries::new(x, 1.0).unwrap()).unwrap();
        assert!((fc.values[(1, 3, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_degenerate_selection() {
        let x = random_series(14, 3, 2);
        let ts = RoiTimeSeries::new(x.clone(), 1.0).unwrap();
        let dfc = dynamic_fc(&ts, 2, 7, 4).unwrap();
        let full = pearson_fc(x.view()).unwrap();
        for d in 0..4 {
            assert_eq!(dfc.frame(d), full.view());
        }
    }

    #[test]
    fn dynamic_identity_selection() {
        let x = random_series(20, 3, 4);
        let ts = RoiTimeSeries::new(x.clone(), 1.0).unwrap();
        // A = 20 - 5 + 1 = 16 = T
        let dfc = dynamic_fc(&ts, 1, 5, 16).unwrap();
        for d in 0..16 {
            let w = pearson_fc(x.slice(s![d..d + 5, ..])).unwrap();
            assert_eq!(dfc.frame(d), w.view());
        }
    }

    #[test]
    fn dynamic_selected_indices() {
        // N_t = 283, w = 7, s = 4 -> window 28, A = 256
        let idx = frame_indices(256, 128);
        for (j, &i) in idx.iter().enumerate() {
            assert_eq!(i, (255.0 * j as f64 / 127.0).round() as usize);
        }
        assert_eq!((idx[0], idx[127]), (0, 255));
        let x = random_series(283, 4, 5);
        let ts = RoiTimeSeries::new(x.clone(), 1.0).unwrap();
        let dfc = dynamic_fc(&ts, 4, 7, 128).unwrap();
        let frame0 = pearson_fc(x.slice(s![0..28, ..])).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let o = oracle_r(&x.slice(s![0..28, i]).to_vec(), &x.slice(s![0..28, j]).to_vec());
                assert!((dfc.values[(i, j, 0)] - o).abs() < 1e-10);
                assert!((frame0[(i, j)] - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn window_exceeds_series() {
        let ts = RoiTimeSeries::new(random_series(10, 2, 0), 1.0).unwrap();
        assert!(matches!(dynamic_fc(&ts, 2, 7, 4), Err(Error::WindowExceedsSeries { .. })));
    }

    #[test]
    fn dynamic_at_unit_scale_equals_static() {
        let x = random_series(30, 5, 6);
        let ts = RoiTimeSeries::new(x, 1.0).unwrap();
        let d = dynamic_fc(&ts, 1, 30, 1).unwrap();
        assert_eq!(d.values, static_fc(&ts).unwrap().values);
    }

    #[test]
    fn multiscale_levels() {
        let x = random_series(128, 4, 7);
        let ts = RoiTimeSeries::new(x, 1.0).unwrap();
        let ms = multiscale_dfc(&ts, 1, 4, 7, 16).unwrap();
        assert_eq!(ms.base.scale, 1);
        let scales: Vec<usize> = ms.levels.values().map(|t| t.scale).collect();
        assert_eq!(scales, vec![2, 4, 8, 16]);
        for (&l, t) in &ms.levels {
            assert_eq!(t.frame_count(), 16);
            let direct = dynamic_fc(&ts, scale_for_level(l, 1), 7, 16).unwrap();
            assert_eq!(t.values, direct.values);
            for d in 0..16 {
                let f = t.frame(d);
                for i in 0..4 {
                    assert_eq!(f[(i, i)], 1.0);
                    for j in 0..4 {
                        assert_eq!(f[(i, j)], f[(j, i)]);
                    }
                }
            }
        }
        // too short for 7 * 16 = 112 > 100
        let short = RoiTimeSeries::new(random_series(100, 4, 7), 1.0).unwrap();
        assert!(multiscale_dfc(&short, 1, 4, 7, 16).is_err());
    }

    fn sinusoid(n: usize, dt: f64, freq: f64, amp: f64, offset: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |(t, _)| {
            offset + amp * (2.0 * std::f64::consts::PI * freq * t as f64 * dt).sin()
        })
    }

    #[test]
    fn alff_constant_signal_is_zero() {
        let flat = Array2::from_elem((64, 2), 3.5);
        assert_eq!(alff_of(flat.view(), 1.0, 0.01, 0.08).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn alff_shift_invariant() {
        let x = sinusoid(200, 1.0, 0.05, 1.0, 3.0);
        let base = alff(&RoiTimeSeries::new(x.clone(), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        let shifted = alff(&RoiTimeSeries::new(x.mapv(|v| v + 100.0), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        assert!((base - shifted).abs() < 1e-9 * base);
    }

    #[test]
    fn alff_linear_in_amplitude() {
        let a1 = alff(&RoiTimeSeries::new(sinusoid(200, 1.0, 0.05, 1.0, 0.0), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        let a2 = alff(&RoiTimeSeries::new(sinusoid(200, 1.0, 0.05, 2.0, 0.0), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        assert!(a1 > 0.0);
        assert!((a2 - 2.0 * a1).abs() < 1e-9 * a1);
    }

    #[test]
    fn alff_out_of_band_vanishes() {
        // 0.2 Hz with dt = 1 s: period 5 samples, N_t = 200 is a multiple
        let out = alff(&RoiTimeSeries::new(sinusoid(200, 1.0, 0.2, 1.0, 0.0), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        let inb = alff(&RoiTimeSeries::new(sinusoid(200, 1.0, 0.05, 1.0, 0.0), 1.0).unwrap(), 0.01, 0.08).unwrap()[0];
        assert!(out < 1e-6 * inb, "{out} vs {inb}");
    }

    #[test]
    fn alff_band_errors() {
        let ts = RoiTimeSeries::new(sinusoid(20, 1.0, 0.05, 1.0, 0.0), 1.0).unwrap();
        // bins are 0.05 Hz apart: nothing inside [0.01, 0.04]
        assert!(matches!(alff(&ts, 0.01, 0.04), Err(Error::EmptyBand { .. })));
        assert!(alff(&ts, 0.08, 0.01).is_err());
        assert!(alff(&ts, 0.01, 0.6).is_err());
    }

    #[test]
    fn roi_projection() {
        let atlas = AtlasLayout::regular([4, 4, 4], [2, 2, 2]).unwrap();
        let ones = roi_to_volume(&[1.0; 8], &atlas, RegionalKind::Alff).unwrap();
        assert!(ones.values.iter().all(|&v| v == 1.0));
        let mut hot = [0.0; 8];
        hot[3] = 2.0;
        let v = roi_to_volume(&hot, &atlas, RegionalKind::Alff).unwrap();
        let mask = atlas.mask(&[3]);
        for (x, m) in v.values.iter().zip(mask) {
            assert_eq!(*x != 0.0, m);
        }
        let vals: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let v = roi_to_volume(&vals, &atlas, RegionalKind::Fa).unwrap();
        let weighted: f64 = atlas.blocks.iter().zip(&vals).map(|(b, x)| b.voxels() as f64 * x).sum::<f64>() / 64.0;
        assert!((v.values.mean().unwrap() - weighted).abs() < 1e-12);
        assert!(roi_to_volume(&vals[..7], &atlas, RegionalKind::Fa).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn affine_invariance(seed in any::<u64>(), scale in prop::collection::vec(0.1f64..10.0, 5), shift in prop::collection::vec(-50.0f64..50.0, 5)) {
            let x = random_series(25, 5, seed);
            let mut y = x.clone();
            for j in 0..5 {
                y.column_mut(j).mapv_inplace(|v| scale[j] * v + shift[j]);
            }
            let a = pearson_fc(x.view()).unwrap();
            let b = pearson_fc(y.view()).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }

        #[test]
        fn frames_are_valid_correlations(seed in any::<u64>()) {
            let ts = RoiTimeSeries::new(random_series(40, 6, seed), 1.0).unwrap();
            let d = dynamic_fc(&ts, 2, 4, 8).unwrap();
            for f in 0..8 {
                let m = d.frame(f);
                for i in 0..6 {
                    prop_assert_eq!(m[(i, i)], 1.0);
                    for j in 0..6 {
                        prop_assert_eq!(m[(i, j)], m[(j, i)]);
                        prop_assert!(m[(i, j)].abs() <= 1.0);
                    }
                }
            }
        }
    }
}
