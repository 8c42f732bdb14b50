//! Synergistic activation maps: gradient-free, perturbation-scored
//! importance maps per modality, plus connectivity and ROI rankings.
//!
//! For a modality with high-level maps `F_k`, each `M_k = N(F_k)` is
//! upsampled to the input grid, added to (or multiplied into) that input
//! alone, and scored by the softmax probability of class `c`. The map is
//! `ReLU(sum_k w_k U(M_k))`.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::AtlasLayout;
use crate::ddhi::softmax;
use crate::error::{Error, Result};
use crate::model::{HahiModel, Modality, SubjectInputs};

/// Anything that maps subject inputs to logits and exposes the final
/// encoder maps of each modality. No gradients are required.
pub trait ForwardModel: Sync {
    fn n_classes(&self) -> usize;
    fn logits(&self, x: &SubjectInputs) -> Result<Vec<f64>>;
    /// `[K, x, y, z]` high-level maps feeding the interaction stage.
    fn high_level(&self, x: &SubjectInputs, m: Modality) -> Result<Tensor>;
}

impl ForwardModel for HahiModel {
    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn logits(&self, x: &SubjectInputs) -> Result<Vec<f64>> {
        HahiModel::logits(self, x)
    }

    fn high_level(&self, x: &SubjectInputs, m: Modality) -> Result<Tensor> {
        HahiModel::high_level(self, x, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// `I + U(M)`.
    #[default]
    Add,
    /// `I * U(M)`.
    Hadamard,
}

/// Splits a `[K, x, y, z]` tensor into its `K` maps.
pub fn extract_high_level<M: ForwardModel + ?Sized>(model: &M, x: &SubjectInputs, m: Modality) -> Result<Vec<Array3<f64>>> {
    let t = model.high_level(x, m)?;
    let (k, d) = t.volume_dims();
    let per = d.iter().product::<usize>();
    Ok((0..k)
        .map(|i| Array3::from_shape_vec((d[0], d[1], d[2]), t.data()[i * per..(i + 1) * per].to_vec()).expect("volume"))
        .collect())
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(f: &Array3<f64>) -> Result<Array3<f64>> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature map".into()));
    }
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(Array3::zeros(f.dim()));
    }
    Ok(f.mapv(|v| (v - lo) / (hi - lo)))
}

fn axis_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling with half-pixel centres (`align_corners = false`).
pub fn trilinear_upsample(map: &Array3<f64>, out: [usize; 3]) -> Result<Array3<f64>> {
    let (a, b, c) = map.dim();
    if a == 0 || b == 0 || c == 0 || out.contains(&0) {
        return Err(Error::Dimension(format!("cannot resample {:?} to {out:?}", map.shape())));
    }
    let (tx, ty, tz) = (axis_taps(out[0], a), axis_taps(out[1], b), axis_taps(out[2], c));
    Ok(Array3::from_shape_fn((out[0], out[1], out[2]), |(x, y, z)| {
        let (x0, x1, fx) = tx[x];
        let (y0, y1, fy) = ty[y];
        let (z0, z1, fz) = tz[z];
        let lerp = |p: f64, q: f64, t: f64| p + (q - p) * t;
        let plane = |xi: usize| {
            lerp(
                lerp(map[(xi, y0, z0)], map[(xi, y0, z1)], fz),
                lerp(map[(xi, y1, z0)], map[(xi, y1, z1)], fz),
                fy,
            )
        };
        lerp(plane(x0), plane(x1), fx)
    }))
}

fn input_volume(x: &SubjectInputs, m: Modality) -> Result<Array3<f64>> {
    let t = x
        .get(m)
        .ok_or_else(|| Error::Dimension(format!("subject has no {m} input")))?;
    let (_, d) = t.volume_dims();
    Ok(Array3::from_shape_vec((d[0], d[1], d[2]), t.data().to_vec()).expect("volume"))
}

/// Softmax probability of class `c` after perturbing modality `m` with an
/// already upsampled map.
pub fn score_map<M: ForwardModel + ?Sized>(
    model: &M,
    x: &SubjectInputs,
    m: Modality,
    upsampled: &Array3<f64>,
    c: usize,
    perturbation: Perturbation,
) -> Result<f64> {
    Ok(class_probabilities(model, x, m, upsampled, perturbation)?[c])
}

/// All class probabilities after the perturbation.
pub fn class_probabilities<M: ForwardModel + ?Sized>(
    model: &M,
    x: &SubjectInputs,
    m: Modality,
    upsampled: &Array3<f64>,
    perturbation: Perturbation,
) -> Result<Vec<f64>> {
    let mut xp = x.clone();
    let t = xp
        .get_mut(m)
        .ok_or_else(|| Error::Dimension(format!("subject has no {m} input")))?;
    if t.len() != upsampled.len() {
        return Err(Error::Dimension(format!("map of {} voxels for {m} input {:?}", upsampled.len(), t.shape())));
    }
    for (v, p) in t.data_mut().iter_mut().zip(upsampled.iter()) {
        match perturbation {
            Perturbation::Add => *v += p,
            Perturbation::Hadamard => *v *= p,
        }
    }
    Ok(softmax(&model.logits(&xp)?))
}

/// Result for one perturbed input.
#[derive(Debug, Clone)]
pub struct ModalityMap {
    pub modality: Modality,
    /// `sum_k w_k U(M_k)` before rectification.
    pub weighted_sum: Array3<f64>,
    pub map: Array3<f64>,
    pub weights: Vec<f64>,
}

/// Weights and map for perturbing `target` with the high-level maps of
/// `source` (they differ only for the coarser DFC scales, which reuse the
/// base pathway's maps).
fn modality_map<M: ForwardModel + ?Sized>(
    model: &M,
    x: &SubjectInputs,
    target: Modality,
    normalized: &[Array3<f64>],
    c: usize,
    perturbation: Perturbation,
) -> Result<ModalityMap> {
    let dims = input_volume(x, target)?.dim();
    let ups = normalized
        .iter()
        .map(|mk| trilinear_upsample(mk, [dims.0, dims.1, dims.2]))
        .collect::<Result<Vec<_>>>()?;
    let weights = ups
        .par_iter()
        .map(|u| score_map(model, x, target, u, c, perturbation))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Array3::zeros(dims);
    for (u, w) in ups.iter().zip(&weights) {
        sum.scaled_add(*w, u);
    }
    let map = sum.mapv(|v: f64| v.max(0.0));
    Ok(ModalityMap {
        modality: target,
        weighted_sum: sum,
        map,
        weights,
    })
}

fn check_class<M: ForwardModel + ?Sized>(model: &M, c: usize) -> Result<()> {
    if c >= model.n_classes() {
        return Err(Error::Dimension(format!("class {c} of {}", model.n_classes())));
    }
    Ok(())
}

/// SAM map for a single modality.
pub fn explain_modality<M: ForwardModel + ?Sized>(
    model: &M,
    x: &SubjectInputs,
    m: Modality,
    c: usize,
    perturbation: Perturbation,
) -> Result<ModalityMap> {
    check_class(model, c)?;
    let normalized = extract_high_level(model, x, m)?
        .iter()
        .map(normalize_map)
        .collect::<Result<Vec<_>>>()?;
    modality_map(model, x, m, &normalized, c, perturbation)
}

/// Multi-scale DFC maps: one per scale plus the aggregate
/// `ReLU(sum_scales sum_k w_{s,k} U(M_k))`.
#[derive(Debug, Clone)]
pub struct DfcMaps {
    pub per_scale: Vec<ModalityMap>,
    pub aggregate: Array3<f64>,
}

pub fn explain_dfc<M: ForwardModel + ?Sized>(model: &M, x: &SubjectInputs, c: usize, perturbation: Perturbation) -> Result<DfcMaps> {
    check_class(model, c)?;
    let normalized = extract_high_level(model, x, Modality::Dfc(0))?
        .iter()
        .map(normalize_map)
        .collect::<Result<Vec<_>>>()?;
    let per_scale = (0..=x.dfc_scales.len())
        .map(|s| modality_map(model, x, Modality::Dfc(s), &normalized, c, perturbation))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Array3::zeros(per_scale[0].weighted_sum.dim());
    for p in &per_scale {
        sum += &p.weighted_sum;
    }
    Ok(DfcMaps {
        per_scale,
        aggregate: sum.mapv(|v: f64| v.max(0.0)),
    })
}

fn symmetrized(map: &Array2<f64>) -> Result<Array2<f64>> {
    if map.nrows() != map.ncols() {
        return Err(Error::Dimension(format!("connectivity map {:?} is not square", map.shape())));
    }
    let mut s = (map + &map.t()) / 2.0;
    s.diag_mut().fill(0.0);
    Ok(s)
}

/// The `n` strongest upper-triangle pairs of the symmetrized,
/// zero-diagonal map; ties go to the smaller `(i, j)`.
pub fn top_connectivities(map: &Array2<f64>, n: usize) -> Result<Vec<(usize, usize, f64)>> {
    if n == 0 {
        return Err(Error::Config("need n >= 1 connectivities".into()));
    }
    let s = symmetrized(map)?;
    let r = s.nrows();
    let mut pairs: Vec<(usize, usize, f64)> = (0..r).flat_map(|i| (i + 1..r).map(move |j| (i, j))).map(|(i, j)| (i, j, s[(i, j)])).collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    pairs.truncate(n);
    Ok(pairs)
}

fn rank(scores: Vec<f64>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// ROI scores as row means of the symmetrized, zero-diagonal map.
pub fn roi_importance(map: &Array2<f64>) -> Result<Vec<(usize, f64)>> {
    let s = symmetrized(map)?;
    Ok(rank(s.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect()))
}

/// Depth-mean of an `R x R x D` connectivity map.
pub fn connectivity_matrix(map: &Array3<f64>) -> Array2<f64> {
    map.mean_axis(Axis(2)).expect("non-empty depth")
}

/// Mean map value inside each atlas block.
pub fn block_means(map: &Array3<f64>, atlas: &AtlasLayout) -> Result<Vec<f64>> {
    let d = map.dim();
    if [d.0, d.1, d.2] != atlas.grid {
        return Err(Error::Dimension(format!("map {:?} vs atlas grid {:?}", map.shape(), atlas.grid)));
    }
    Ok(atlas
        .blocks
        .iter()
        .map(|b| {
            let v = map.slice(ndarray::s![
                b.start[0]..b.start[0] + b.size[0],
                b.start[1]..b.start[1] + b.size[1],
                b.start[2]..b.start[2] + b.size[2]
            ]);
            v.mean().unwrap_or(0.0)
        })
        .collect())
}

/// Ratio of the mean inside the selected ROI blocks to the mean outside.
pub fn localization_ratio(map: &Array3<f64>, atlas: &AtlasLayout, rois: &[usize]) -> Result<f64> {
    let d = map.dim();
    if [d.0, d.1, d.2] != atlas.grid {
        return Err(Error::Dimension(format!("map {:?} vs atlas grid {:?}", map.shape(), atlas.grid)));
    }
    let mask = atlas.mask(rois);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in map.iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Config("ROI selection covers none or all of the grid".into()));
    }
    Ok((si / ni as f64) / (so / no as f64))
}

/// Map and rankings of one modality.
#[derive(Debug, Clone)]
pub struct ModalityReport {
    pub modality: Modality,
    pub map: Array3<f64>,
    pub weights: Vec<f64>,
    pub top_connectivities: Option<Vec<(usize, usize, f64)>>,
    pub roi_ranking: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ActivationReport {
    pub class: usize,
    /// DFC aggregate, SFC, ALFF and FA, in that order.
    pub modalities: Vec<ModalityReport>,
    /// Per-scale DFC maps, base scale first.
    pub dfc_scales: Vec<ModalityReport>,
}

fn connectivity_report(m: Modality, map: Array3<f64>, weights: Vec<f64>, top_n: usize) -> Result<ModalityReport> {
    let cm = connectivity_matrix(&map);
    Ok(ModalityReport {
        modality: m,
        top_connectivities: Some(top_connectivities(&cm, top_n)?),
        roi_ranking: roi_importance(&cm)?,
        map,
        weights,
    })
}

/// Maps for every modality with rankings.
pub fn synergistic_activation<M: ForwardModel + ?Sized>(
    model: &M,
    x: &SubjectInputs,
    c: usize,
    atlas: &AtlasLayout,
    perturbation: Perturbation,
    top_n: usize,
) -> Result<ActivationReport> {
    let dfc = explain_dfc(model, x, c, perturbation)?;
    let all_weights: Vec<f64> = dfc.per_scale.iter().flat_map(|p| p.weights.iter().copied()).collect();
    let mut modalities = vec![connectivity_report(Modality::Dfc(0), dfc.aggregate, all_weights, top_n)?];
    let dfc_scales = dfc
        .per_scale
        .into_iter()
        .map(|p| connectivity_report(p.modality, p.map, p.weights, top_n))
        .collect::<Result<Vec<_>>>()?;
    let sfc = explain_modality(model, x, Modality::Sfc, c, perturbation)?;
    modalities.push(connectivity_report(Modality::Sfc, sfc.map, sfc.weights, top_n)?);
    for m in [Modality::Alff, Modality::Fa] {
        let r = explain_modality(model, x, m, c, perturbation)?;
        modalities.push(ModalityReport {
            modality: m,
            roi_ranking: rank(block_means(&r.map, atlas)?),
            top_connectivities: None,
            map: r.map,
            weights: r.weights,
        });
    }
    Ok(ActivationReport {
        class: c,
        modalities,
        dfc_scales,
    })
}
