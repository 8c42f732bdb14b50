//! The assembled network: four encoders with pyramid injection, the two
//! alignment losses, the interaction stack and the classification head.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::data::AtlasLayout;
use crate::ddhi::{
    cross_entropy_node, fi_block_node, Classifier, FiPairing, GlobalInteraction, LambdaMode, LatentVars, ResidualMixer,
};
use crate::dmha::{contrastive_node, Encoder, EncoderConfig, Pathway, TsaInjector, TsaTrace};
use crate::error::{Error, Result};
use crate::features::{alff, multiscale_dfc, roi_to_volume, static_fc, FeatureConfig, RegionalKind, RoiTimeSeries};

/// Sub-blocks that can be bypassed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "GI")]
    Gi,
    #[serde(rename = "FI")]
    Fi,
    #[serde(rename = "FSA")]
    Fsa,
    #[serde(rename = "DSA")]
    Dsa,
    #[serde(rename = "TSA")]
    Tsa,
}

impl Component {
    /// Hierarchical removal order.
    pub const ORDER: [Component; 5] = [Component::Gi, Component::Fi, Component::Fsa, Component::Dsa, Component::Tsa];

    pub fn name(self) -> &'static str {
        match self {
            Component::Gi => "GI",
            Component::Fi => "FI",
            Component::Fsa => "FSA",
            Component::Dsa => "DSA",
            Component::Tsa => "TSA",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ORDER
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Component(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub rois: usize,
    pub grid: [usize; 3],
    pub frames: usize,
    pub filters: Vec<usize>,
    pub emb_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub temperature: f64,
    pub symmetrize_contrastive: bool,
    pub lambda_mode: LambdaMode,
    pub fi_pairing: FiPairing,
    pub n_classes: usize,
    pub disable: BTreeSet<Component>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rois: 32,
            grid: [32, 32, 32],
            frames: 128,
            filters: vec![8, 16, 32, 64],
            emb_dim: 64,
            tokens: 4,
            token_dim: 64,
            heads: 16,
            temperature: 0.5,
            symmetrize_contrastive: true,
            lambda_mode: LambdaMode::Dim,
            fi_pairing: FiPairing::Standard,
            n_classes: 2,
            disable: BTreeSet::new(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        Self {
            rois: 8,
            grid: [8, 8, 8],
            frames: 16,
            filters: vec![2, 4],
            emb_dim: 4,
            tokens: 2,
            token_dim: 4,
            heads: 1,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.filters.len()
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.disable.contains(&c)
    }

    pub fn encoder(&self, pathway: Pathway, input_dims: [usize; 3]) -> EncoderConfig {
        EncoderConfig {
            pathway,
            input_dims,
            filters: self.filters.clone(),
            emb_dim: self.emb_dim,
            tokens: self.tokens,
            token_dim: self.token_dim,
        }
    }

    pub fn dfc_dims(&self) -> [usize; 3] {
        [self.rois, self.rois, self.frames]
    }

    pub fn sfc_dims(&self) -> [usize; 3] {
        [self.rois, self.rois, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Temperature(self.temperature));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        for (p, dims) in [
            (Pathway::Connectivity, self.dfc_dims()),
            (Pathway::Connectivity, self.sfc_dims()),
            (Pathway::Regional, self.grid),
        ] {
            self.encoder(p, dims).validate()?;
        }
        Ok(())
    }
}

/// Which model input a tensor belongs to. `Dfc(0)` is the base-scale DFC,
/// `Dfc(l)` the scale injected after block `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Dfc(usize),
    Sfc,
    Alff,
    Fa,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Dfc(0) => f.write_str("DFC"),
            Modality::Dfc(l) => write!(f, "DFC_s{l}"),
            Modality::Sfc => f.write_str("SFC"),
            Modality::Alff => f.write_str("ALFF"),
            Modality::Fa => f.write_str("FA"),
        }
    }
}

/// Model-ready inputs of one subject, each `[1, X, Y, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInputs {
    pub dfc_base: Tensor,
    pub dfc_scales: Vec<Tensor>,
    pub sfc: Tensor,
    pub alff: Tensor,
    pub fa: Tensor,
    pub label: usize,
}

/// Subtracts the mean and divides by the standard deviation (if nonzero).
pub fn z_score(t: &mut Tensor) {
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    t.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn connectivity_tensor(values: &Array3<f64>) -> Tensor {
    Tensor::from_volume(values)
}

impl SubjectInputs {
    /// Computes every modality from a raw series and FA volume, z-scoring
    /// each tensor separately.
    pub fn from_raw(
        ts: &RoiTimeSeries,
        fa: &Array3<f64>,
        atlas: &AtlasLayout,
        features: &FeatureConfig,
        label: usize,
    ) -> Result<Self> {
        if fa.dim() != (atlas.grid[0], atlas.grid[1], atlas.grid[2]) {
            return Err(Error::Dimension(format!("FA volume {:?} vs atlas grid {:?}", fa.shape(), atlas.grid)));
        }
        let ms = multiscale_dfc(ts, features.delta, features.levels, features.base_window, features.frames)?;
        let sfc = static_fc(ts)?;
        let alff_vol = roi_to_volume(&alff(ts, features.band_low, features.band_high)?, atlas, RegionalKind::Alff)?;
        let mut out = Self {
            dfc_base: connectivity_tensor(&ms.base.values),
            dfc_scales: ms.levels.values().map(|t| connectivity_tensor(&t.values)).collect(),
            sfc: connectivity_tensor(&sfc.values),
            alff: Tensor::from_volume(&alff_vol.values),
            fa: Tensor::from_volume(fa),
            label,
        };
        out.for_each_mut(z_score);
        Ok(out)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        (0..=self.dfc_scales.len())
            .map(Modality::Dfc)
            .chain([Modality::Sfc, Modality::Alff, Modality::Fa])
            .collect()
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        match m {
            Modality::Dfc(0) => Some(&self.dfc_base),
            Modality::Dfc(l) => self.dfc_scales.get(l - 1),
            Modality::Sfc => Some(&self.sfc),
            Modality::Alff => Some(&self.alff),
            Modality::Fa => Some(&self.fa),
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut Tensor> {
        match m {
            Modality::Dfc(0) => Some(&mut self.dfc_base),
            Modality::Dfc(l) => self.dfc_scales.get_mut(l - 1),
            Modality::Sfc => Some(&mut self.sfc),
            Modality::Alff => Some(&mut self.alff),
            Modality::Fa => Some(&mut self.fa),
        }
    }

    fn for_each_mut(&mut self, f: impl Fn(&mut Tensor)) {
        f(&mut self.dfc_base);
        self.dfc_scales.iter_mut().for_each(&f);
        f(&mut self.sfc);
        f(&mut self.alff);
        f(&mut self.fa);
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub z_d: Var,
    pub z_s: Var,
    pub z_f: Var,
    pub z_struct: Var,
    pub latents: LatentVars,
    /// Level maps per encoder in the order DFC, SFC, ALFF, FA.
    pub levels: [Vec<Var>; 4],
    pub tsa: Vec<TsaTrace>,
    /// Fine-grained then global attention matrices.
    pub attention: Vec<Var>,
}

/// Loss of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: f64,
    pub dsa: f64,
    pub fsa: f64,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HahiModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    enc_dfc: Encoder,
    enc_sfc: Encoder,
    enc_alff: Encoder,
    enc_fa: Encoder,
    tsa: Vec<TsaInjector>,
    mix_c: ResidualMixer,
    mix_r: ResidualMixer,
    gi: GlobalInteraction,
    head: Classifier,
}

impl HahiModel {
    /// Builds the network with fan-in scaled uniform weights and zero biases.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dfc_cfg = cfg.encoder(Pathway::Connectivity, cfg.dfc_dims());
        let enc_dfc = Encoder::new(&mut store, &mut rng, "dfc", dfc_cfg.clone())?;
        let enc_sfc = Encoder::new(&mut store, &mut rng, "sfc", cfg.encoder(Pathway::Connectivity, cfg.sfc_dims()))?;
        let enc_alff = Encoder::new(&mut store, &mut rng, "alff", cfg.encoder(Pathway::Regional, cfg.grid))?;
        let enc_fa = Encoder::new(&mut store, &mut rng, "fa", cfg.encoder(Pathway::Regional, cfg.grid))?;
        let tsa = (1..=cfg.levels())
            .map(|l| TsaInjector::new(&mut store, &mut rng, &format!("tsa{l}"), &dfc_cfg, l))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.token_dim;
        let mix_c = ResidualMixer::new(&mut store, &mut rng, "mix_c", d);
        let mix_r = ResidualMixer::new(&mut store, &mut rng, "mix_r", d);
        let gi = GlobalInteraction::new(&mut store, &mut rng, "gi", d, cfg.heads)?;
        let head = Classifier::new(&mut store, &mut rng, "head", d, cfg.n_classes);
        Ok(Self {
            cfg,
            store,
            enc_dfc,
            enc_sfc,
            enc_alff,
            enc_fa,
            tsa,
            mix_c,
            mix_r,
            gi,
            head,
        })
    }

    pub fn head(&self) -> &Classifier {
        &self.head
    }

    pub fn tsa_injectors(&self) -> &[TsaInjector] {
        &self.tsa
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Dfc(_) => &self.enc_dfc,
            Modality::Sfc => &self.enc_sfc,
            Modality::Alff => &self.enc_alff,
            Modality::Fa => &self.enc_fa,
        }
    }

    /// Expected `[1, X, Y, Z]` shape of a modality input.
    pub fn input_shape(&self, m: Modality) -> Vec<usize> {
        let d = match m {
            Modality::Dfc(_) => self.cfg.dfc_dims(),
            Modality::Sfc => self.cfg.sfc_dims(),
            Modality::Alff | Modality::Fa => self.cfg.grid,
        };
        vec![1, d[0], d[1], d[2]]
    }

    pub fn check_inputs(&self, x: &SubjectInputs) -> Result<()> {
        if x.dfc_scales.len() != self.cfg.levels() {
            return Err(Error::Dimension(format!(
                "{} DFC scales for a {}-level model",
                x.dfc_scales.len(),
                self.cfg.levels()
            )));
        }
        for m in x.modalities() {
            let t = x.get(m).expect("listed modality");
            if t.shape() != self.input_shape(m).as_slice() {
                return Err(Error::Dimension(format!("{m} input {:?}, expected {:?}", t.shape(), self.input_shape(m))));
            }
        }
        if x.label >= self.cfg.n_classes {
            return Err(Error::Dimension(format!("label {} with {} classes", x.label, self.cfg.n_classes)));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: &SubjectInputs) -> Result<ForwardVars> {
        self.check_inputs(x)?;
        let store = &self.store;
        let tsa_on = self.cfg.enabled(Component::Tsa);
        let base = g.constant(x.dfc_base.clone());
        let scales: Vec<Var> = if tsa_on {
            x.dfc_scales.iter().map(|t| g.constant(t.clone())).collect()
        } else {
            Vec::new()
        };
        let mut traces = Vec::new();
        let mut failure = None;
        let cd = self.enc_dfc.forward(g, store, base, &mut |g, l, map| {
            if !tsa_on {
                return map;
            }
            match self.tsa[l - 1].trace(g, store, scales[l - 1], map) {
                Ok(t) => {
                    traces.push(t);
                    t.output
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    map
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let plain = |enc: &Encoder, g: &mut Graph, t: &Tensor| {
            let v = g.constant(t.clone());
            enc.forward(g, store, v, &mut |_, _, m| m)
        };
        let cs = plain(&self.enc_sfc, g, &x.sfc);
        let rf = plain(&self.enc_alff, g, &x.alff);
        let rs = plain(&self.enc_fa, g, &x.fa);
        let latents = LatentVars {
            cd: cd.tokens,
            cs: cs.tokens,
            rf: rf.tokens,
            rs: rs.tokens,
        };

        let mut attention = Vec::new();
        let (c1, c2, r1, r2) = if self.cfg.enabled(Component::Fi) {
            let lambda = self.cfg.lambda_mode.resolve(self.cfg.token_dim);
            let fi = fi_block_node(g, &latents, lambda, self.cfg.fi_pairing);
            attention.extend(fi.attention);
            (fi.c1, fi.c2, fi.r1, fi.r2)
        } else {
            (latents.cd, latents.cs, latents.rf, latents.rs)
        };
        let mix_c = self.mix_c.apply(g, store, c1, c2, latents.cd, latents.cs);
        let mix_r = self.mix_r.apply(g, store, r1, r2, latents.rf, latents.rs);
        let (g_c, g_r) = if self.cfg.enabled(Component::Gi) {
            let gv = self.gi.apply(g, store, mix_c, mix_r);
            attention.extend(gv.attention);
            (gv.g_c, gv.g_r)
        } else {
            (mix_c, mix_r)
        };
        let logits = self.head.apply(g, store, g_c, g_r);
        Ok(ForwardVars {
            logits,
            z_d: cd.embedding,
            z_s: cs.embedding,
            z_f: rf.embedding,
            z_struct: rs.embedding,
            latents,
            levels: [cd.levels, cs.levels, rf.levels, rs.levels],
            tsa: traces,
            attention,
        })
    }

    /// Mean cross-entropy plus the enabled alignment losses over a batch.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[&SubjectInputs]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut ce_nodes = Vec::with_capacity(batch.len());
        let mut fwd = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for x in batch {
            let f = self.forward(g, x)?;
            ce_nodes.push(cross_entropy_node(g, f.logits, x.label, weight)?);
            logits.push(g.value(f.logits).data().to_vec());
            fwd.push(f);
        }
        let ce = g.sum(&ce_nodes);
        let mut terms = vec![ce];
        let (tau, sym) = (self.cfg.temperature, self.cfg.symmetrize_contrastive);
        let mut dsa = 0.0;
        if self.cfg.enabled(Component::Dsa) {
            let zd: Vec<Var> = fwd.iter().map(|f| f.z_d).collect();
            let zs: Vec<Var> = fwd.iter().map(|f| f.z_s).collect();
            let node = contrastive_node(g, &zd, &zs, tau, sym)?;
            dsa = g.value(node).item();
            terms.push(node);
        }
        let mut fsa = 0.0;
        if self.cfg.enabled(Component::Fsa) {
            let mut star = Vec::with_capacity(fwd.len());
            let mut plus = Vec::with_capacity(fwd.len());
            for f in &fwd {
                star.push(g.mul(f.z_f, f.z_struct));
                plus.push(g.add(f.z_f, f.z_struct));
            }
            let node = contrastive_node(g, &star, &plus, tau, sym)?;
            fsa = g.value(node).item();
            terms.push(node);
        }
        let total = g.sum(&terms);
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {value}")));
        }
        Ok(BatchLoss {
            total,
            ce: g.value(ce).item(),
            dsa,
            fsa,
            logits,
        })
    }

    pub fn logits(&self, x: &SubjectInputs) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x)?;
        Ok(g.value(f.logits).data().to_vec())
    }

    /// Final encoder map `[K, x, y, z]` of a modality's pathway. All DFC
    /// scales share the base pathway's map.
    pub fn high_level(&self, x: &SubjectInputs, m: Modality) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x)?;
        let idx = match m {
            Modality::Dfc(_) => 0,
            Modality::Sfc => 1,
            Modality::Alff => 2,
            Modality::Fa => 3,
        };
        Ok(g.value(*f.levels[idx].last().expect("at least one level")).clone())
    }
}

/// Token sequences of the four latents as matrices.
pub fn latent_arrays(g: &Graph, f: &ForwardVars) -> [Array2<f64>; 4] {
    let arr = |v: Var| {
        let t = g.value(v);
        Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("token matrix")
    };
    [arr(f.latents.cd), arr(f.latents.cs), arr(f.latents.rf), arr(f.latents.rs)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_inputs(cfg: &ModelConfig, label: usize, seed: u64) -> SubjectInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |d: [usize; 3]| Tensor::new(vec![1, d[0], d[1], d[2]], (0..d.iter().product()).map(|_| rng.random::<f64>() - 0.5).collect());
        SubjectInputs {
            dfc_base: t(cfg.dfc_dims()),
            dfc_scales: (0..cfg.levels()).map(|_| t(cfg.dfc_dims())).collect(),
            sfc: t(cfg.sfc_dims()),
            alff: t(cfg.grid),
            fa: t(cfg.grid),
            label,
        }
    }

    #[test]
    fn component_parsing() {
        assert_eq!("gi".parse::<Component>().unwrap(), Component::Gi);
        assert_eq!(" TSA".parse::<Component>().unwrap(), Component::Tsa);
        assert!(matches!("XYZ".parse::<Component>(), Err(Error::Component(_))));
        assert_eq!(serde_json::to_string(&Component::Fsa).unwrap(), "\"FSA\"");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<ModelConfig>("{\"heads\": 4, \"bogus\": 1}").is_err());
        let c: ModelConfig = serde_json::from_str("{\"heads\": 4}").unwrap();
        assert_eq!(c.heads, 4);
        assert_eq!(c.filters, vec![8, 16, 32, 64]);
    }

    #[test]
    fn tiny_forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let m1 = HahiModel::new(cfg.clone(), 3).unwrap();
        let m2 = HahiModel::new(cfg.clone(), 3).unwrap();
        let x = random_inputs(&cfg, 1, 4);
        let a = m1.logits(&x).unwrap();
        assert_eq!(a, m2.logits(&x).unwrap());
        assert_eq!(a, m1.logits(&x).unwrap());
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn bad_input_shapes_rejected() {
        let cfg = ModelConfig::tiny();
        let m = HahiModel::new(cfg.clone(), 0).unwrap();
        let mut x = random_inputs(&cfg, 0, 1);
        x.fa = Tensor::zeros(&[1, 8, 8, 4]);
        assert!(m.logits(&x).is_err());
        let mut x = random_inputs(&cfg, 0, 1);
        x.dfc_scales.pop();
        assert!(m.logits(&x).is_err());
        let x = random_inputs(&cfg, 5, 1);
        assert!(m.logits(&x).is_err());
    }

    #[test]
    fn z_score_centers() {
        let mut t = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        z_score(&mut t);
        let mean: f64 = t.data().iter().sum::<f64>() / 4.0;
        let var: f64 = t.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut c = Tensor::vector(vec![2.0; 3]);
        z_score(&mut c);
        assert_eq!(c.data(), &[0.0; 3]);
    }

    #[test]
    fn every_ablation_gives_finite_loss() {
        let cfg = ModelConfig::tiny();
        let xs: Vec<SubjectInputs> = (0..3).map(|i| random_inputs(&cfg, i % 2, 10 + i as u64)).collect();
        let refs: Vec<&SubjectInputs> = xs.iter().collect();
        for k in 0..=5 {
            let mut c = cfg.clone();
            c.disable = Component::ORDER[..k].iter().copied().collect();
            let m = HahiModel::new(c, 1).unwrap();
            let mut g = Graph::new();
            let l = m.batch_loss(&mut g, &refs).unwrap();
            assert!(g.value(l.total).item().is_finite());
            let grads = g.backward(l.total);
            assert!(grads.params().count() > 0);
        }
    }
}
