//! Parameter bundles for the layers the model is built from.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), &[out_ch]);
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl DepthwiseConv3d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>();
        let w = store.add_uniform(format!("{name}.w"), &[channels, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let b = store.add_zeros(format!("{name}.b"), &[channels]);
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.depthwise_conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[out_dim]));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}
