use rand::Rng;

use crate::autograd::{Conv3d, DepthwiseConv3d, Graph, ParamStore, Var};
use crate::error::{Error, Result};

use super::encoder::{EncoderConfig, Pathway};

/// Injection of one coarser-scale DFC into the base pathway after block `l`.
///
/// `f_s` is `l` strided conv stages taking the `R x R x T` input to the
/// level-`l` extent and channel count. The result is interleaved slice by
/// slice with the level map (injected slice first), then `g_s`, a depthwise
/// conv with depth stride 2 followed by a pointwise conv, restores depth.
#[derive(Debug, Clone)]
pub struct TsaInjector {
    pub level: usize,
    stages: Vec<Conv3d>,
    depthwise: DepthwiseConv3d,
    pointwise: Conv3d,
}

/// Intermediate values of one injection, for shape checks.
#[derive(Debug, Clone, Copy)]
pub struct TsaTrace {
    pub adjusted: Var,
    pub merged: Var,
    pub output: Var,
}

impl TsaInjector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &EncoderConfig, level: usize) -> Result<Self> {
        if cfg.pathway != Pathway::Connectivity || level == 0 || level > cfg.levels() {
            return Err(Error::Config(format!("no pyramid injection at level {level} of a {:?} encoder", cfg.pathway)));
        }
        let mut stages = Vec::with_capacity(level);
        let mut in_ch = 1;
        for j in 0..level {
            let out = cfg.filters[j];
            stages.push(Conv3d::new(
                store,
                rng,
                &format!("{name}.f{}", j + 1),
                in_ch,
                out,
                [3; 3],
                Pathway::Connectivity.stride(),
                [1; 3],
            ));
            in_ch = out;
        }
        let depthwise = DepthwiseConv3d::new(store, rng, &format!("{name}.g.depthwise"), in_ch, [3, 3, 2], [1, 1, 2], [1, 1, 0]);
        let pointwise = Conv3d::new(store, rng, &format!("{name}.g.pointwise"), in_ch, in_ch, [1; 3], [1; 3], [0; 3]);
        Ok(Self {
            level,
            stages,
            depthwise,
            pointwise,
        })
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, dfc_s: Var, level_map: Var) -> Result<TsaTrace> {
        let mut x = dfc_s;
        for stage in &self.stages {
            x = stage.apply(g, store, x);
            x = g.relu(x);
        }
        if g.shape(x) != g.shape(level_map) {
            return Err(Error::Dimension(format!(
                "adjusted pyramid features {:?} do not match level-{} map {:?}",
                g.shape(x),
                self.level,
                g.shape(level_map)
            )));
        }
        let merged = g.interleave_depth(x, level_map);
        let y = self.depthwise.apply(g, store, merged);
        let output = self.pointwise.apply(g, store, y);
        Ok(TsaTrace {
            adjusted: x,
            merged,
            output,
        })
    }

    pub fn inject(&self, g: &mut Graph, store: &ParamStore, dfc_s: Var, level_map: Var) -> Result<Var> {
        Ok(self.trace(g, store, dfc_s, level_map)?.output)
    }

    /// Overwrites `g_s` so that it passes the level map through unchanged.
    pub fn set_identity_merge(&self, store: &mut ParamStore) {
        let dw = store.get_mut(self.depthwise.w);
        let c = dw.shape()[0];
        dw.data_mut().fill(0.0);
        for ch in 0..c {
            // kernel [3, 3, 2]: centre in-plane, second depth tap (level-map slice)
            dw.data_mut()[ch * 18 + (1 * 3 + 1) * 2 + 1] = 1.0;
        }
        store.get_mut(self.depthwise.b).data_mut().fill(0.0);
        let pw = store.get_mut(self.pointwise.w);
        pw.data_mut().fill(0.0);
        for ch in 0..c {
            pw.data_mut()[ch * c + ch] = 1.0;
        }
        store.get_mut(self.pointwise.b).data_mut().fill(0.0);
    }
}
