use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Scaling of the fine-grained attention scores, `softmax(S / sqrt(lambda))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum LambdaMode {
    /// `lambda = d`, the token width.
    Dim,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<LambdaRepr> for LambdaMode {
    type Error = String;

    fn try_from(r: LambdaRepr) -> std::result::Result<Self, String> {
        match r {
            LambdaRepr::Name(s) if s == "dim" => Ok(LambdaMode::Dim),
            LambdaRepr::Name(s) => Err(format!("lambda_mode must be \"dim\" or a positive number, got {s:?}")),
            LambdaRepr::Value(v) if v > 0.0 && v.is_finite() => Ok(LambdaMode::Value(v)),
            LambdaRepr::Value(v) => Err(format!("lambda must be positive, got {v}")),
        }
    }
}

impl From<LambdaMode> for LambdaRepr {
    fn from(m: LambdaMode) -> Self {
        match m {
            LambdaMode::Dim => LambdaRepr::Name("dim".into()),
            LambdaMode::Value(v) => LambdaRepr::Value(v),
        }
    }
}

impl LambdaMode {
    pub fn resolve(self, d: usize) -> f64 {
        match self {
            LambdaMode::Dim => d as f64,
            LambdaMode::Value(v) => v,
        }
    }
}

/// Which latent modulates each domain's interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiPairing {
    /// `l_RF` queries the connectivity domain, `l_CS` the regional one.
    #[default]
    Standard,
    /// `l_RS` queries the connectivity domain, `l_CD` the regional one.
    Swapped,
}

/// `softmax(l_star l_o^T / sqrt(lambda)) l_plus`; returns the output tokens
/// and the attention matrix.
pub fn fi_node(g: &mut Graph, l_star: Var, l_o: Var, l_plus: Var, lambda: f64) -> (Var, Var) {
    let s = g.matmul_nt(l_star, l_o);
    let s = g.scale(s, 1.0 / lambda.sqrt());
    let a = g.softmax_rows(s);
    (g.matmul(a, l_plus), a)
}

/// The four latent token sequences of one subject.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub cd: Var,
    pub cs: Var,
    pub rf: Var,
    pub rs: Var,
}

/// Connectivity (`c1`, `c2`) and regional (`r1`, `r2`) interaction outputs.
#[derive(Debug, Clone, Copy)]
pub struct FiVars {
    pub c1: Var,
    pub c2: Var,
    pub r1: Var,
    pub r2: Var,
    pub attention: [Var; 4],
}

pub fn fi_block_node(g: &mut Graph, l: &LatentVars, lambda: f64, pairing: FiPairing) -> FiVars {
    let (qc, qr) = match pairing {
        FiPairing::Standard => (l.rf, l.cs),
        FiPairing::Swapped => (l.rs, l.cd),
    };
    let (c1, a1) = fi_node(g, qc, l.cd, l.cs, lambda);
    let (c2, a2) = fi_node(g, qc, l.cs, l.cd, lambda);
    let (r1, a3) = fi_node(g, qr, l.rf, l.rs, lambda);
    let (r2, a4) = fi_node(g, qr, l.rs, l.rf, lambda);
    FiVars {
        c1,
        c2,
        r1,
        r2,
        attention: [a1, a2, a3, a4],
    }
}

/// `Linear([i_1 | i_2]) + (origin_a + origin_b) / 2`.
#[derive(Debug, Clone)]
pub struct ResidualMixer {
    pub proj: Linear,
}

impl ResidualMixer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), 2 * d, d, true),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, i1: Var, i2: Var, origin_a: Var, origin_b: Var) -> Var {
        let cat = g.concat(&[i1, i2]);
        let p = self.proj.apply(g, store, cat);
        let o = g.add(origin_a, origin_b);
        let o = g.scale(o, 0.5);
        g.add(p, o)
    }
}

fn token_tensor(x: &Array2<f64>) -> Tensor {
    Tensor::matrix(x.nrows(), x.ncols(), x.iter().copied().collect())
}

fn token_array(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("matrix tensor")
}

fn check_same(name: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("{name}: token widths {} and {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

/// Attention matrix and output of one fine-grained interaction.
pub fn fine_grained_attention(
    l_star: &Array2<f64>,
    l_o: &Array2<f64>,
    l_plus: &Array2<f64>,
    lambda: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same("l_star/l_o", l_star, l_o)?;
    if l_o.nrows() != l_plus.nrows() {
        return Err(Error::Dimension(format!("{} keys but {} values", l_o.nrows(), l_plus.nrows())));
    }
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let mut g = Graph::new();
    let s = g.constant(token_tensor(l_star));
    let o = g.constant(token_tensor(l_o));
    let p = g.constant(token_tensor(l_plus));
    let (out, att) = fi_node(&mut g, s, o, p, lambda);
    Ok((token_array(g.value(out)), token_array(g.value(att))))
}

pub fn fine_grained_interaction(l_star: &Array2<f64>, l_o: &Array2<f64>, l_plus: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    Ok(fine_grained_attention(l_star, l_o, l_plus, lambda)?.0)
}

/// Plain-value token sequences of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTokens {
    pub cd: Array2<f64>,
    pub cs: Array2<f64>,
    pub rf: Array2<f64>,
    pub rs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiOutputs {
    pub c1: Array2<f64>,
    pub c2: Array2<f64>,
    pub r1: Array2<f64>,
    pub r2: Array2<f64>,
}

pub fn fi_block(l: &LatentTokens, lambda: f64, pairing: FiPairing) -> Result<FiOutputs> {
    let shape = l.cd.dim();
    if [&l.cs, &l.rf, &l.rs].iter().any(|x| x.dim() != shape) {
        return Err(Error::Dimension("latent token sequences differ in shape".into()));
    }
    let mut g = Graph::new();
    let vars = LatentVars {
        cd: g.constant(token_tensor(&l.cd)),
        cs: g.constant(token_tensor(&l.cs)),
        rf: g.constant(token_tensor(&l.rf)),
        rs: g.constant(token_tensor(&l.rs)),
    };
    let o = fi_block_node(&mut g, &vars, lambda, pairing);
    Ok(FiOutputs {
        c1: token_array(g.value(o.c1)),
        c2: token_array(g.value(o.c2)),
        r1: token_array(g.value(o.r1)),
        r2: token_array(g.value(o.r2)),
    })
}

/// Applies a mixer to plain token sequences.
pub fn residual_mix(
    mixer: &ResidualMixer,
    store: &ParamStore,
    i1: &Array2<f64>,
    i2: &Array2<f64>,
    origin_a: &Array2<f64>,
    origin_b: &Array2<f64>,
) -> Result<Array2<f64>> {
    let shape = i1.dim();
    if [i2, origin_a, origin_b].iter().any(|x| x.dim() != shape) {
        return Err(Error::Dimension("residual mixer inputs differ in shape".into()));
    }
    let mut g = Graph::new();
    let v: Vec<Var> = [i1, i2, origin_a, origin_b].iter().map(|x| g.constant(token_tensor(x))).collect();
    let out = mixer.apply(&mut g, store, v[0], v[1], v[2], v[3]);
    Ok(token_array(g.value(out)))
}

pub(crate) fn to_tensor(x: &Array2<f64>) -> Tensor {
    token_tensor(x)
}

pub(crate) fn to_array(t: &Tensor) -> Array2<f64> {
    token_array(t)
}
