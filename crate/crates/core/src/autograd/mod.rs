//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every node that
//! depends on a parameter. Parameters enter the tape once per graph through
//! [`Graph::param`], so gradients from several samples accumulate on the same
//! node.

pub mod kernels;
mod layers;
mod params;
mod tensor;

use std::collections::HashMap;

pub use kernels::ConvGeom;
pub use layers::{Conv3d, DepthwiseConv3d, Linear};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        out_ch: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        channels: usize,
        dims: [usize; 3],
        factors: [usize; 3],
    },
    Interleave {
        a: Var,
        b: Var,
        channels: usize,
        dims: [usize; 3],
    },
    ChannelMean {
        x: Var,
        positions: usize,
    },
    TokenPool {
        x: Var,
        channels: usize,
        positions: usize,
        tokens: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    MatMulNT {
        a: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    Concat {
        parts: Vec<Var>,
        rows: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        rows: usize,
        width: usize,
        start: usize,
        len: usize,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Stack(Vec<Var>),
    /// Scalar with precomputed local gradients w.r.t. each input.
    ScalarFn {
        inputs: Vec<Var>,
        grads: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar w.r.t. every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients; parameters unused by the loss are absent.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients without being a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * f).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, f), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    /// `x: [C, X, Y, Z]`, `w: [O, C, kx, ky, kz]`, `b: [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let (c, dims) = self.value(x).volume_dims();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 5, "conv weight must be 5D");
        assert_eq!(ws[1], c, "conv input channels {} vs weight {}", c, ws[1]);
        let geom = ConvGeom::new(c, dims, [ws[2], ws[3], ws[4]], stride, pad);
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom, ws[0]);
        let t = Tensor::new(vec![ws[0], geom.out[0], geom.out[1], geom.out[2]], out);
        let ng = self.ng(&[x, w, b]);
        self.push(t, Op::Conv3d { x, w, b, geom, out_ch: ws[0] }, ng)
    }

    /// Per-channel convolution, `w: [C, kx, ky, kz]`, `b: [C]`.
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let (c, dims) = self.value(x).volume_dims();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], c);
        let geom = ConvGeom::new(c, dims, [ws[1], ws[2], ws[3]], stride, pad);
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let t = Tensor::new(vec![c, geom.out[0], geom.out[1], geom.out[2]], out);
        let ng = self.ng(&[x, w, b]);
        self.push(t, Op::Depthwise { x, w, b, geom }, ng)
    }

    pub fn avg_pool3d(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let (c, dims) = self.value(x).volume_dims();
        for a in 0..3 {
            assert!(factors[a] > 0 && dims[a] % factors[a] == 0, "pool {factors:?} does not divide {dims:?}");
        }
        if factors == [1, 1, 1] {
            return x;
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), c, dims, factors);
        let t = Tensor::new(vec![c, dims[0] / factors[0], dims[1] / factors[1], dims[2] / factors[2]], out);
        let ng = self.ng(&[x]);
        self.push(t, Op::AvgPool { x, channels: c, dims, factors }, ng)
    }

    /// Depth-interleaves two equal-shape volumes, `a` slices first.
    pub fn interleave_depth(&mut self, a: Var, b: Var) -> Var {
        let (c, dims) = self.value(a).volume_dims();
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "interleave shape mismatch");
        let out = kernels::interleave_depth(self.value(a).data(), self.value(b).data(), c, dims);
        let t = Tensor::new(vec![c, dims[0], dims[1], 2 * dims[2]], out);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Interleave { a, b, channels: c, dims }, ng)
    }

    /// `[C, ...] -> [C]` mean over all trailing positions.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let c = xs.shape()[0];
        let positions = xs.len() / c;
        let data = xs.data().chunks(positions).map(|ch| ch.iter().sum::<f64>() / positions as f64).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::vector(data), Op::ChannelMean { x, positions }, ng)
    }

    /// `[C, P...] -> [n, C]`: splits the row-major positions into `n`
    /// contiguous chunks and averages each.
    pub fn token_pool(&mut self, x: Var, tokens: usize) -> Var {
        let xs = self.value(x);
        let c = xs.shape()[0];
        let positions = xs.len() / c;
        assert!(tokens > 0 && positions % tokens == 0, "{positions} positions not divisible into {tokens} tokens");
        let chunk = positions / tokens;
        let mut data = vec![0.0; tokens * c];
        for ch in 0..c {
            let row = &xs.data()[ch * positions..(ch + 1) * positions];
            for t in 0..tokens {
                data[t * c + ch] = row[t * chunk..(t + 1) * chunk].iter().sum::<f64>() / chunk as f64;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(tokens, c, data), Op::TokenPool { x, channels: c, positions, tokens }, ng)
    }

    /// Row-wise affine map `x W^T + b` with `w: [out, in]`. `x` may be a
    /// vector `[in]` or a matrix `[n, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (out_dim, in_dim) = (ws.shape()[0], ws.shape()[1]);
        assert_eq!(xs.last_dim(), in_dim, "linear input width {} vs weight {:?}", xs.last_dim(), ws.shape());
        let rows = xs.len() / in_dim;
        let mut data = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xs.data()[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &ws.data()[o * in_dim..(o + 1) * in_dim];
                data[r * out_dim + o] = xr.iter().zip(wr).map(|(p, q)| p * q).sum();
            }
        }
        if let Some(b) = b {
            let bs = self.value(b).data();
            for r in 0..rows {
                for o in 0..out_dim {
                    data[r * out_dim + o] += bs[o];
                }
            }
        }
        let shape = if xs.shape().len() == 1 { vec![out_dim] } else { vec![rows, out_dim] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(shape, data), Op::Linear { x, w, b, rows, in_dim, out_dim }, ng)
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, m) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..m {
                    data[i * m + j] += aip * bv[p * m + j];
                }
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(n, m, data), Op::MatMul { a, b, n, k, m }, ng)
    }

    /// `[n, k] x [m, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (m, k2) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul_nt inner dims");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = (0..k).map(|p| av[i * k + p] * bv[j * k + p]).sum();
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(n, m, data), Op::MatMulNT { a, b, n, k, m }, ng)
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let cols = xs.last_dim();
        let mut data = xs.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = xs.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::SoftmaxRows { x, cols }, ng)
    }

    /// Concatenation along the trailing axis; all parts share leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let lead: Vec<usize> = first.shape()[..first.shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                assert_eq!(v.len(), rows * w, "concat leading shape mismatch");
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec(), rows, widths }, ng)
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.value(x);
        let width = xs.last_dim();
        assert!(start + len <= width);
        let rows = xs.len() / width;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xs.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data), Op::Slice { x, rows, width, start, len }, ng)
    }

    /// `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let cols = xs.last_dim();
        let rows = xs.len() / cols;
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += xs.data()[r * cols + c] / rows as f64;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::vector(data), Op::MeanRows { x, rows, cols }, ng)
    }

    /// Stacks equal-length vectors into `[N, d]`.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(d * parts.len());
        for &p in parts {
            assert_eq!(self.value(p).len(), d, "stack length mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(parts.len(), d, data), Op::Stack(parts.to_vec()), ng)
    }

    /// Records a scalar whose gradient w.r.t. each input was computed by the
    /// caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).len(), g.len(), "local gradient length mismatch");
        }
        let ng = self.ng(inputs);
        self.push(
            Tensor::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        )
    }

    /// Sum of equal-shape tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_unstable_by_key(|(id, _)| *id);
        Gradients { grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(val(*b)).map(|(p, q)| p * q).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(val(*a)).map(|(p, q)| p * q).collect());
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|v| v * f).collect());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let gx = g.iter().zip(out.data()).map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads[a.0], gx);
                }
            }
            Op::Conv3d { x, w, b, geom, out_ch } => {
                let (gx, gw, gb) = kernels::conv3d_backward(val(*x), val(*w), g, geom, *out_ch, self.wants(*x));
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::depthwise_backward(val(*x), val(*w), g, geom);
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::AvgPool { x, channels, dims, factors } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], kernels::avg_pool_backward(g, *channels, *dims, *factors));
                }
            }
            Op::Interleave { a, b, channels, dims } => {
                let (ga, gb) = kernels::deinterleave_depth(g, *channels, *dims);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::ChannelMean { x, positions } => {
                if self.wants(*x) {
                    let inv = 1.0 / *positions as f64;
                    let gx = g.iter().flat_map(|&gc| std::iter::repeat_n(gc * inv, *positions)).collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::TokenPool { x, channels, positions, tokens } => {
                if self.wants(*x) {
                    let chunk = positions / tokens;
                    let inv = 1.0 / chunk as f64;
                    let mut gx = vec![0.0; channels * positions];
                    for ch in 0..*channels {
                        for p in 0..*positions {
                            gx[ch * positions + p] = g[(p / chunk) * channels + ch] * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Linear { x, w, b, rows, in_dim, out_dim } => {
                let (xv, wv) = (val(*x), val(*w));
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * in_dim];
                    for r in 0..*rows {
                        for o in 0..*out_dim {
                            let go = g[r * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * in_dim..(o + 1) * in_dim];
                            for (d, wi) in gx[r * in_dim..(r + 1) * in_dim].iter_mut().zip(wr) {
                                *d += go * wi;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; out_dim * in_dim];
                    for r in 0..*rows {
                        let xr = &xv[r * in_dim..(r + 1) * in_dim];
                        for o in 0..*out_dim {
                            let go = g[r * out_dim + o];
                            for (d, xi) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; *out_dim];
                        for r in 0..*rows {
                            for o in 0..*out_dim {
                                gb[o] += g[r * out_dim + o];
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
            }
            Op::MatMul { a, b, n, k, m } => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    // gA = G B^T
                    let mut ga = vec![0.0; n * k];
                    for i in 0..*n {
                        for p in 0..*k {
                            ga[i * k + p] = (0..*m).map(|j| g[i * m + j] * bv[p * m + j]).sum();
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    // gB = A^T G
                    let mut gb = vec![0.0; k * m];
                    for i in 0..*n {
                        for p in 0..*k {
                            let aip = av[i * k + p];
                            for j in 0..*m {
                                gb[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MatMulNT { a, b, n, k, m } => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    // gA = G B
                    let mut ga = vec![0.0; n * k];
                    for i in 0..*n {
                        for j in 0..*m {
                            let gij = g[i * m + j];
                            for p in 0..*k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    // gB = G^T A
                    let mut gb = vec![0.0; m * k];
                    for i in 0..*n {
                        for j in 0..*m {
                            let gij = g[i * m + j];
                            for p in 0..*k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::SoftmaxRows { x, cols } => {
                if self.wants(*x) {
                    let y = out.data();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for i in row {
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat { parts, rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, rows, width, start, len } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * width];
                    for r in 0..*rows {
                        gx[r * width + start..r * width + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if self.wants(*x) {
                    let inv = 1.0 / *rows as f64;
                    let gx = (0..rows * cols).map(|i| g[i % cols] * inv).collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Stack(parts) => {
                let d = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], g[i * d..(i + 1) * d].to_vec());
                    }
                }
            }
            Op::ScalarFn { inputs, grads: local } => {
                for (&v, lg) in inputs.iter().zip(local) {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], lg.iter().map(|x| x * g[0]).collect());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[i] += delta;
                            }
                            g.input(u)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err < 1e-5, "input {k}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }

    /// Weighted sum to a scalar so every output element matters.
    fn reduce(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..g.value(v).len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let value = g.value(v).data().iter().zip(&w).map(|(a, b)| a * b).sum();
        g.scalar_fn(&[v], value, vec![w])
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 4, 4, 8], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check(vec![x, w, b], |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [2, 2, 4], [1, 1, 1]);
            let y = g.relu(y);
            let y = g.avg_pool3d(y, [2, 2, 2]);
            reduce(g, y, 9)
        });
    }

    #[test]
    fn depthwise_interleave_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[2, 3, 3, 2], &mut rng);
        let b = rand_tensor(&[2, 3, 3, 2], &mut rng);
        let w = rand_tensor(&[2, 3, 3, 2], &mut rng);
        let bias = rand_tensor(&[2], &mut rng);
        check(vec![a, b, w, bias], |g, v| {
            let m = g.interleave_depth(v[0], v[1]);
            let y = g.depthwise_conv3d(m, v[2], v[3], [1, 1, 2], [1, 1, 0]);
            reduce(g, y, 3)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&[3, 4], &mut rng);
        let k = rand_tensor(&[3, 4], &mut rng);
        let v = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[2, 8], &mut rng);
        let bias = rand_tensor(&[2], &mut rng);
        check(vec![q, k, v, w, bias], |g, x| {
            let s = g.matmul_nt(x[0], x[1]);
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s);
            let o = g.matmul(a, x[2]);
            let o2 = g.slice_last(o, 1, 2);
            let c = g.concat(&[o, x[2]]);
            let l = g.linear(c, x[3], Some(x[4]));
            let m = g.mean_rows(l);
            let m2 = g.mean_rows(o2);
            let st = g.stack(&[m, m2]);
            reduce(g, st, 5)
        });
    }

    #[test]
    fn token_and_channel_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
        check(vec![x], |g, v| {
            let t = g.token_pool(v[0], 4);
            let c = g.channel_mean(v[0]);
            let tm = g.mean_rows(t);
            let s = g.add(tm, c);
            let s = g.mul(s, s);
            reduce(g, s, 6)
        });
    }

    #[test]
    fn params_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        let (pid, gv) = grads.params().next().unwrap();
        assert_eq!(pid, id);
        assert_eq!(gv, &[4.0]);
    }
}
