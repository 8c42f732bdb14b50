use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Linear, ParamStore, Var};
use crate::error::{Error, Result};

use super::interaction::{to_array, to_tensor};

/// Multi-head attention with queries from one sequence and keys/values from
/// another.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("token width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            heads,
        })
    }

    /// Returns the recombined output and the per-head attention matrices.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, query_src: Var, kv_src: Var) -> (Var, Vec<Var>) {
        let d = g.value(query_src).last_dim();
        let dk = d / self.heads;
        let q = self.q.apply(g, store, query_src);
        let k = self.k.apply(g, store, kv_src);
        let v = self.v.apply(g, store, kv_src);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dk, dk);
            let kh = g.slice_last(k, h * dk, dk);
            let vh = g.slice_last(v, h * dk, dk);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (dk as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
            attn.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs) };
        (self.o.apply(g, store, cat), attn)
    }
}

/// Cross-domain attention in both directions, one parameter set each.
#[derive(Debug, Clone)]
pub struct GlobalInteraction {
    /// Regional queries over connectivity keys/values.
    pub to_connectivity: CrossAttention,
    /// Connectivity queries over regional keys/values.
    pub to_regional: CrossAttention,
}

#[derive(Debug, Clone)]
pub struct GlobalVars {
    pub g_c: Var,
    pub g_r: Var,
    pub attention: Vec<Var>,
}

impl GlobalInteraction {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_connectivity: CrossAttention::new(store, rng, &format!("{name}.c"), d, heads)?,
            to_regional: CrossAttention::new(store, rng, &format!("{name}.r"), d, heads)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, mix_c: Var, mix_r: Var) -> GlobalVars {
        let (g_c, mut attention) = self.to_connectivity.apply(g, store, mix_r, mix_c);
        let (g_r, a2) = self.to_regional.apply(g, store, mix_c, mix_r);
        attention.extend(a2);
        GlobalVars { g_c, g_r, attention }
    }
}

/// Fused domain token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEmbeddings {
    pub g_c: Array2<f64>,
    pub g_r: Array2<f64>,
}

/// Plain-value global interaction; also returns every attention matrix.
pub fn global_interaction(
    gi: &GlobalInteraction,
    store: &ParamStore,
    mix_c: &Array2<f64>,
    mix_r: &Array2<f64>,
) -> Result<(DomainEmbeddings, Vec<Array2<f64>>)> {
    let d = gi.to_connectivity.q.w;
    let width = store.get(d).shape()[1];
    if mix_c.ncols() != width || mix_r.ncols() != width {
        return Err(Error::Dimension(format!(
            "token widths {} / {} for attention of width {width}",
            mix_c.ncols(),
            mix_r.ncols()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(to_tensor(mix_c));
    let r = g.constant(to_tensor(mix_r));
    let out = gi.apply(&mut g, store, c, r);
    Ok((
        DomainEmbeddings {
            g_c: to_array(g.value(out.g_c)),
            g_r: to_array(g.value(out.g_r)),
        },
        out.attention.iter().map(|&a| to_array(g.value(a))).collect(),
    ))
}
