//! Dense kernels on channel-first volumes `[C, X, Y, Z]` stored row-major.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel {k} larger than padded extent {n}+2*{pad}");
    (n + 2 * pad - k) / stride + 1
}

/// Geometry of one 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(channels: usize, dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let out = [
            conv_out_dim(dims[0], kernel[0], stride[0], pad[0]),
            conv_out_dim(dims[1], kernel[1], stride[1], pad[1]),
            conv_out_dim(dims[2], kernel[2], stride[2], pad[2]),
        ];
        Self {
            channels,
            dims,
            kernel,
            stride,
            pad,
            out,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.out.iter().product()
    }

    /// Output index range along `axis` whose input tap `k` falls inside the
    /// unpadded extent.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.stride[axis], self.pad[axis], self.dims[axis], self.out[axis]);
        // need 0 <= o*s + k - p < n
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(o) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Unfolds the input into a `[C * kvol, P_out]` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let kv = g.kernel_volume();
    let p_out = g.out_positions();
    let [_, dy, dz] = g.dims;
    let [_, oy, oz] = g.out;
    let mut cols = Array2::<f64>::zeros((g.channels * kv, p_out));
    let cols_s = cols.as_slice_mut().expect("standard layout");
    for c in 0..g.channels {
        let xc = &x[c * g.in_positions()..(c + 1) * g.in_positions()];
        for kx in 0..g.kernel[0] {
            let (x_lo, x_hi) = g.valid(0, kx);
            for ky in 0..g.kernel[1] {
                let (y_lo, y_hi) = g.valid(1, ky);
                for kz in 0..g.kernel[2] {
                    let (z_lo, z_hi) = g.valid(2, kz);
                    let row = (c * g.kernel[0] + kx) * g.kernel[1] * g.kernel[2] + ky * g.kernel[2] + kz;
                    let dst = &mut cols_s[row * p_out..(row + 1) * p_out];
                    for ox in x_lo..x_hi {
                        let ix = ox * g.stride[0] + kx - g.pad[0];
                        for oy_ in y_lo..y_hi {
                            let iy = oy_ * g.stride[1] + ky - g.pad[1];
                            let src_base = (ix * dy + iy) * dz;
                            let dst_base = (ox * oy + oy_) * oz;
                            if g.stride[2] == 1 {
                                let iz0 = z_lo + kz - g.pad[2];
                                let len = z_hi - z_lo;
                                dst[dst_base + z_lo..dst_base + z_hi]
                                    .copy_from_slice(&xc[src_base + iz0..src_base + iz0 + len]);
                            } else {
                                for oz_ in z_lo..z_hi {
                                    let iz = oz_ * g.stride[2] + kz - g.pad[2];
                                    dst[dst_base + oz_] = xc[src_base + iz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im(cols: ArrayView2<'_, f64>, g: &ConvGeom) -> Vec<f64> {
    let p_out = g.out_positions();
    let [_, dy, dz] = g.dims;
    let [_, oy, oz] = g.out;
    let mut x = vec![0.0; g.channels * g.in_positions()];
    let cols = cols.as_standard_layout();
    let cols_s = cols.as_slice().expect("standard layout");
    for c in 0..g.channels {
        let xc = &mut x[c * g.in_positions()..(c + 1) * g.in_positions()];
        for kx in 0..g.kernel[0] {
            let (x_lo, x_hi) = g.valid(0, kx);
            for ky in 0..g.kernel[1] {
                let (y_lo, y_hi) = g.valid(1, ky);
                for kz in 0..g.kernel[2] {
                    let (z_lo, z_hi) = g.valid(2, kz);
                    let row = (c * g.kernel[0] + kx) * g.kernel[1] * g.kernel[2] + ky * g.kernel[2] + kz;
                    let src = &cols_s[row * p_out..(row + 1) * p_out];
                    for ox in x_lo..x_hi {
                        let ix = ox * g.stride[0] + kx - g.pad[0];
                        for oy_ in y_lo..y_hi {
                            let iy = oy_ * g.stride[1] + ky - g.pad[1];
                            let dst_base = (ix * dy + iy) * dz;
                            let src_base = (ox * oy + oy_) * oz;
                            for oz_ in z_lo..z_hi {
                                let iz = oz_ * g.stride[2] + kz - g.pad[2];
                                xc[dst_base + iz] += src[src_base + oz_];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out[o] = W[o] * patches + b[o]`, weight `[O, C, kx, ky, kz]`.
pub fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, out_ch: usize) -> Vec<f64> {
    let cols = im2col(x, g);
    let wm = ArrayView2::from_shape((out_ch, g.channels * g.kernel_volume()), w).expect("weight shape");
    let p = g.out_positions();
    let mut out = Array2::<f64>::zeros((out_ch, p));
    for (o, mut row) in out.rows_mut().into_iter().enumerate() {
        row.fill(b[o]);
    }
    general_mat_mul(1.0, &wm, &cols, 1.0, &mut out);
    out.into_raw_vec_and_offset().0
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    out_ch: usize,
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let p = g.out_positions();
    let rows = g.channels * g.kernel_volume();
    let cols = im2col(x, g);
    let go = ArrayView2::from_shape((out_ch, p), gout).expect("grad shape");
    let mut gw = Array2::<f64>::zeros((out_ch, rows));
    general_mat_mul(1.0, &go, &cols.t(), 0.0, &mut gw);
    let gb: Vec<f64> = go.rows().into_iter().map(|r| r.sum()).collect();
    let gx = need_x.then(|| {
        let wm = ArrayView2::from_shape((out_ch, rows), w).expect("weight shape");
        let mut gcols = Array2::<f64>::zeros((rows, p));
        general_mat_mul(1.0, &wm.t(), &go, 0.0, &mut gcols);
        col2im(gcols.view(), g)
    });
    (gx, gw.into_raw_vec_and_offset().0, gb)
}

/// Per-channel convolution, weight `[C, kx, ky, kz]`.
pub fn depthwise_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kv = g.kernel_volume();
    let p_in = g.in_positions();
    let p_out = g.out_positions();
    let mut out = vec![0.0; g.channels * p_out];
    for c in 0..g.channels {
        let single = ConvGeom { channels: 1, ..*g };
        let cols = im2col(&x[c * p_in..(c + 1) * p_in], &single);
        let dst = &mut out[c * p_out..(c + 1) * p_out];
        dst.fill(b[c]);
        for k in 0..kv {
            let wk = w[c * kv + k];
            for (d, s) in dst.iter_mut().zip(cols.row(k)) {
                *d += wk * s;
            }
        }
    }
    out
}

pub fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let kv = g.kernel_volume();
    let p_in = g.in_positions();
    let p_out = g.out_positions();
    let mut gx = vec![0.0; g.channels * p_in];
    let mut gw = vec![0.0; g.channels * kv];
    let mut gb = vec![0.0; g.channels];
    let single = ConvGeom { channels: 1, ..*g };
    for c in 0..g.channels {
        let go = &gout[c * p_out..(c + 1) * p_out];
        gb[c] = go.iter().sum();
        let cols = im2col(&x[c * p_in..(c + 1) * p_in], &single);
        let mut gcols = Array2::<f64>::zeros((kv, p_out));
        for k in 0..kv {
            gw[c * kv + k] = cols.row(k).iter().zip(go).map(|(a, b)| a * b).sum();
            let wk = w[c * kv + k];
            for (d, s) in gcols.row_mut(k).iter_mut().zip(go) {
                *d = wk * s;
            }
        }
        let gxc = col2im(gcols.view(), &single);
        gx[c * p_in..(c + 1) * p_in].copy_from_slice(&gxc);
    }
    (gx, gw, gb)
}

/// Non-overlapping average pooling by `f` per axis.
pub fn avg_pool_forward(x: &[f64], channels: usize, dims: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let out = [dims[0] / f[0], dims[1] / f[1], dims[2] / f[2]];
    let p_in: usize = dims.iter().product();
    let p_out: usize = out.iter().product();
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let mut y = vec![0.0; channels * p_out];
    for c in 0..channels {
        let xc = &x[c * p_in..(c + 1) * p_in];
        let yc = &mut y[c * p_out..(c + 1) * p_out];
        for ix in 0..dims[0] {
            for iy in 0..dims[1] {
                for iz in 0..dims[2] {
                    let o = ((ix / f[0]) * out[1] + iy / f[1]) * out[2] + iz / f[2];
                    yc[o] += xc[(ix * dims[1] + iy) * dims[2] + iz];
                }
            }
        }
        yc.iter_mut().for_each(|v| *v *= inv);
    }
    y
}

pub fn avg_pool_backward(gout: &[f64], channels: usize, dims: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let out = [dims[0] / f[0], dims[1] / f[1], dims[2] / f[2]];
    let p_in: usize = dims.iter().product();
    let p_out: usize = out.iter().product();
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let mut gx = vec![0.0; channels * p_in];
    for c in 0..channels {
        let go = &gout[c * p_out..(c + 1) * p_out];
        let gc = &mut gx[c * p_in..(c + 1) * p_in];
        for ix in 0..dims[0] {
            for iy in 0..dims[1] {
                for iz in 0..dims[2] {
                    let o = ((ix / f[0]) * out[1] + iy / f[1]) * out[2] + iz / f[2];
                    gc[(ix * dims[1] + iy) * dims[2] + iz] = go[o] * inv;
                }
            }
        }
    }
    gx
}

/// Alternates depth slices `a0, b0, a1, b1, ...` of two equal-shape volumes.
pub fn interleave_depth(a: &[f64], b: &[f64], channels: usize, dims: [usize; 3]) -> Vec<f64> {
    let d = dims[2];
    let lines = channels * dims[0] * dims[1];
    let mut out = vec![0.0; 2 * a.len()];
    for l in 0..lines {
        for z in 0..d {
            out[l * 2 * d + 2 * z] = a[l * d + z];
            out[l * 2 * d + 2 * z + 1] = b[l * d + z];
        }
    }
    out
}

pub fn deinterleave_depth(g: &[f64], channels: usize, dims: [usize; 3]) -> (Vec<f64>, Vec<f64>) {
    let d = dims[2];
    let lines = channels * dims[0] * dims[1];
    let mut a = vec![0.0; lines * d];
    let mut b = vec![0.0; lines * d];
    for l in 0..lines {
        for z in 0..d {
            a[l * d + z] = g[l * 2 * d + 2 * z];
            b[l * d + z] = g[l * 2 * d + 2 * z + 1];
        }
    }
    (a, b)
}
