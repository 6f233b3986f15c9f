//! Neural network layers with hand-written forward and backward passes.
//!
//! Activations are dense f64 tensors shaped (T, H, W_pano, C) with
//! channels innermost. Spatial layers treat each view's width slab
//! independently (zero padding stops at view borders), so stitching
//! views into a panorama never leaks information except through the
//! dedicated cross-view attention. Every backward here is verified
//! against central finite differences in the unit tests.

use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::threads;

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let d = x.dims();
    assert_eq!(d.len(), 4, "activation must be (T, H, W, C)");
    (d[0], d[1], d[2], d[3])
}

/// 2D convolution with odd kernel k, zero padding k/2, given stride,
/// applied to each view's width slab independently.
/// x: (T, H, W, Cin); w: (Cout, Cin, k, k); b: (Cout).
pub fn conv2d_forward(x: &Tensor, views: usize, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (t_dim, h, wp, cin) = dims4(x);
    let wd = w.dims();
    assert_eq!(wd.len(), 4);
    let (cout, k) = (wd[0], wd[2]);
    assert_eq!(wd[1], cin, "conv input channels");
    assert_eq!(wd[3], k, "square kernel");
    assert_eq!(b.dims(), [cout]);
    assert!(k % 2 == 1, "odd kernels only");
    assert!(wp % views == 0);
    let wv = wp / views;
    let pad = k / 2;
    let h_out = (h + 2 * pad - k) / stride + 1;
    let wv_out = (wv + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[t_dim, h_out, views * wv_out, cout]);

    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let frame_out = h_out * views * wv_out * cout;
    let os = out.data_mut();
    // Frames are independent: parallel over t, bit-identical to serial.
    threads::pool().install(|| {
        os.par_chunks_exact_mut(frame_out)
            .enumerate()
            .for_each(|(t, oframe)| {
                for v in 0..views {
                    for oy in 0..h_out {
                        for ox in 0..wv_out {
                            let obase = (oy * (views * wv_out) + v * wv_out + ox) * cout;
                            for co in 0..cout {
                                let mut acc = bs[co];
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= wv {
                                            continue;
                                        }
                                        let xbase = ((t * h + iy as usize) * wp
                                            + v * wv
                                            + ix as usize)
                                            * cin;
                                        let wbase = ((co * cin) * k + ky) * k + kx;
                                        for ci in 0..cin {
                                            acc += xs[xbase + ci] * ws[wbase + ci * k * k];
                                        }
                                    }
                                }
                                oframe[obase + co] = acc;
                            }
                        }
                    }
                }
            });
    });
    out
}

/// Gradients of [`conv2d_forward`]: returns (dx, dw, db).
pub fn conv2d_backward(
    x: &Tensor,
    views: usize,
    w: &Tensor,
    stride: usize,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t_dim, h, wp, cin) = dims4(x);
    let wd = w.dims();
    let (cout, k) = (wd[0], wd[2]);
    let wv = wp / views;
    let pad = k / 2;
    let (dt, dh, dwp, dco) = dims4(d_out);
    let wv_out = dwp / views;
    assert_eq!(dt, t_dim);
    assert_eq!(dh, (h + 2 * pad - k) / stride + 1);
    assert_eq!(wv_out, (wv + 2 * pad - k) / stride + 1);
    assert_eq!(dco, cout);

    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(&[cout]);
    let xs = x.data();
    let ws = w.data();
    let gs = d_out.data();
    {
        let dxs = dx.data_mut();
        for t in 0..t_dim {
            for v in 0..views {
                for oy in 0..dh {
                    for ox in 0..wv_out {
                        let obase = ((t * dh + oy) * dwp + v * wv_out + ox) * cout;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= wv {
                                    continue;
                                }
                                let xbase =
                                    ((t * h + iy as usize) * wp + v * wv + ix as usize) * cin;
                                for co in 0..cout {
                                    let g = gs[obase + co];
                                    let wbase = ((co * cin) * k + ky) * k + kx;
                                    for ci in 0..cin {
                                        dxs[xbase + ci] += g * ws[wbase + ci * k * k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    {
        let dws = dw.data_mut();
        let dbs = db.data_mut();
        for t in 0..t_dim {
            for v in 0..views {
                for oy in 0..dh {
                    for ox in 0..wv_out {
                        let obase = ((t * dh + oy) * dwp + v * wv_out + ox) * cout;
                        for co in 0..cout {
                            let g = gs[obase + co];
                            dbs[co] += g;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= wv {
                                        continue;
                                    }
                                    let xbase = ((t * h + iy as usize) * wp
                                        + v * wv
                                        + ix as usize)
                                        * cin;
                                    let wbase = ((co * cin) * k + ky) * k + kx;
                                    for ci in 0..cin {
                                        dws[wbase + ci * k * k] += g * xs[xbase + ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Group normalization per (frame, view, channel group): statistics run
/// over that view slab's (H, W_view, C/groups) elements. gamma, beta: (C).
pub fn group_norm_forward(
    x: &Tensor,
    views: usize,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> Tensor {
    let (t_dim, h, wp, c) = dims4(x);
    assert!(c % groups == 0, "channels divisible by groups");
    assert_eq!(gamma.dims(), [c]);
    assert_eq!(beta.dims(), [c]);
    let wv = wp / views;
    let gc = c / groups;
    let n = (h * wv * gc) as f64;
    let mut out = Tensor::zeros(x.dims());
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();
    let os = out.data_mut();
    for t in 0..t_dim {
        for v in 0..views {
            for g in 0..groups {
                let mut mean = 0.0;
                let mut sq = 0.0;
                for y in 0..h {
                    for xw in 0..wv {
                        let base = ((t * h + y) * wp + v * wv + xw) * c + g * gc;
                        for ci in 0..gc {
                            let val = xs[base + ci];
                            mean += val;
                            sq += val * val;
                        }
                    }
                }
                mean /= n;
                let var = (sq / n - mean * mean).max(0.0);
                let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for y in 0..h {
                    for xw in 0..wv {
                        let base = ((t * h + y) * wp + v * wv + xw) * c + g * gc;
                        for ci in 0..gc {
                            let ch = g * gc + ci;
                            let xhat = (xs[base + ci] - mean) * inv_std;
                            os[base + ci] = gs[ch] * xhat + bs[ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`group_norm_forward`]: returns (dx, dgamma, dbeta).
pub fn group_norm_backward(
    x: &Tensor,
    views: usize,
    groups: usize,
    gamma: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t_dim, h, wp, c) = dims4(x);
    let wv = wp / views;
    let gc = c / groups;
    let n = (h * wv * gc) as f64;
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xs = x.data();
    let gs = gamma.data();
    let dos = d_out.data();
    let dxs = dx.data_mut();
    let dgs = dgamma.data_mut();
    let dbs = dbeta.data_mut();
    for t in 0..t_dim {
        for v in 0..views {
            for g in 0..groups {
                let mut mean = 0.0;
                let mut sq = 0.0;
                for y in 0..h {
                    for xw in 0..wv {
                        let base = ((t * h + y) * wp + v * wv + xw) * c + g * gc;
                        for ci in 0..gc {
                            let val = xs[base + ci];
                            mean += val;
                            sq += val * val;
                        }
                    }
                }
                mean /= n;
                let var = (sq / n - mean * mean).max(0.0);
                let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                // Accumulate the two reductions of the normalization
                // backward: mean of dxhat and mean of dxhat * xhat.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for y in 0..h {
                    for xw in 0..wv {
                        let base = ((t * h + y) * wp + v * wv + xw) * c + g * gc;
                        for ci in 0..gc {
                            let ch = g * gc + ci;
                            let xhat = (xs[base + ci] - mean) * inv_std;
                            let dxhat = dos[base + ci] * gs[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgs[ch] += dos[base + ci] * xhat;
                            dbs[ch] += dos[base + ci];
                        }
                    }
                }
                let m_dxhat = sum_dxhat / n;
                let m_dxhat_xhat = sum_dxhat_xhat / n;
                for y in 0..h {
                    for xw in 0..wv {
                        let base = ((t * h + y) * wp + v * wv + xw) * c + g * gc;
                        for ci in 0..gc {
                            let ch = g * gc + ci;
                            let xhat = (xs[base + ci] - mean) * inv_std;
                            let dxhat = dos[base + ci] * gs[ch];
                            dxs[base + ci] = inv_std * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                        }
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x), smooth enough for finite-difference
/// gradient checks.
pub fn silu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.dims());
    for ((d, &xv), &g) in dx
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(d_out.data())
    {
        let s = sigmoid(xv);
        *d = g * (s + xv * s * (1.0 - s));
    }
    dx
}

/// Token-wise affine map: x (..., din) -> (..., dout) with w (dout, din).
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xd = x.dims();
    let din = *xd.last().unwrap();
    let wd = w.dims();
    assert_eq!(wd.len(), 2);
    assert_eq!(wd[1], din, "linear input width");
    let dout = wd[0];
    assert_eq!(b.dims(), [dout]);
    let rows = x.len() / din;
    let mut out_dims = xd.to_vec();
    *out_dims.last_mut().unwrap() = dout;
    let mut out = Tensor::zeros(&out_dims);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let os = out.data_mut();
    for r in 0..rows {
        let xrow = &xs[r * din..(r + 1) * din];
        let orow = &mut os[r * dout..(r + 1) * dout];
        for (o_idx, o) in orow.iter_mut().enumerate() {
            let wrow = &ws[o_idx * din..(o_idx + 1) * din];
            let mut acc = bs[o_idx];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *o = acc;
        }
    }
    out
}

/// Gradients of [`linear_forward`]: returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let din = *x.dims().last().unwrap();
    let dout = w.dims()[0];
    let rows = x.len() / din;
    assert_eq!(d_out.len(), rows * dout);
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut db = Tensor::zeros(&[dout]);
    let xs = x.data();
    let ws = w.data();
    let gs = d_out.data();
    let dxs = dx.data_mut();
    let dws = dw.data_mut();
    let dbs = db.data_mut();
    for r in 0..rows {
        let xrow = &xs[r * din..(r + 1) * din];
        let grow = &gs[r * dout..(r + 1) * dout];
        let dxrow = &mut dxs[r * din..(r + 1) * din];
        for (o_idx, &g) in grow.iter().enumerate() {
            dbs[o_idx] += g;
            let wrow = &ws[o_idx * din..(o_idx + 1) * din];
            let dwrow = &mut dws[o_idx * din..(o_idx + 1) * din];
            for i in 0..din {
                dxrow[i] += g * wrow[i];
                dwrow[i] += g * xrow[i];
            }
        }
    }
    (dx, dw, db)
}

/// Average pooling by an integer factor; window edges never cross view
/// borders because each view's width must divide by the factor.
pub fn avg_pool2d(x: &Tensor, views: usize, factor: usize) -> Tensor {
    let (t_dim, h, wp, c) = dims4(x);
    assert!(factor >= 1);
    assert!(h % factor == 0);
    let wv = wp / views;
    assert!(wv % factor == 0, "pool window would cross view border");
    let (ho, wo) = (h / factor, wp / factor);
    let mut out = Tensor::zeros(&[t_dim, ho, wo, c]);
    let norm = 1.0 / (factor * factor) as f64;
    let xs = x.data();
    let os = out.data_mut();
    for t in 0..t_dim {
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = ((t * ho + oy) * wo + ox) * c;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let xbase = ((t * h + oy * factor + dy) * wp + ox * factor + dx) * c;
                        for ci in 0..c {
                            os[obase + ci] += xs[xbase + ci] * norm;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbor 2x upsampling (per-pixel copy stays within its view).
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (t_dim, h, wp, c) = dims4(x);
    let mut out = Tensor::zeros(&[t_dim, 2 * h, 2 * wp, c]);
    let xs = x.data();
    let os = out.data_mut();
    for t in 0..t_dim {
        for y in 0..2 * h {
            for xw in 0..2 * wp {
                let obase = ((t * 2 * h + y) * 2 * wp + xw) * c;
                let xbase = ((t * h + y / 2) * wp + xw / 2) * c;
                os[obase..obase + c].copy_from_slice(&xs[xbase..xbase + c]);
            }
        }
    }
    out
}

/// Gradient of [`upsample_nearest2`]: sums each 2x2 output block.
pub fn upsample_nearest2_backward(d_out: &Tensor) -> Tensor {
    let (t_dim, h2, wp2, c) = dims4(d_out);
    let (h, wp) = (h2 / 2, wp2 / 2);
    let mut dx = Tensor::zeros(&[t_dim, h, wp, c]);
    let gs = d_out.data();
    let dxs = dx.data_mut();
    for t in 0..t_dim {
        for y in 0..h2 {
            for xw in 0..wp2 {
                let obase = ((t * h2 + y) * wp2 + xw) * c;
                let xbase = ((t * h + y / 2) * wp + xw / 2) * c;
                for ci in 0..c {
                    dxs[xbase + ci] += gs[obase + ci];
                }
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a diffusion step index; dim must be even.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    let os = out.data_mut();
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        os[2 * i] = angle.sin();
        os[2 * i + 1] = angle.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + 1e-6)
    }

    /// Central-difference check of d(loss)/d(param) where loss is the
    /// inner product of the forward output with a fixed random tensor.
    fn fd_scalar(
        forward: impl Fn(&Tensor) -> Tensor,
        analytic: &Tensor,
        at: &Tensor,
        idx: usize,
        g: &Tensor,
    ) {
        let h = 1e-5;
        let mut plus = at.clone();
        plus.data_mut()[idx] += h;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= h;
        let dot = |t: &Tensor| -> f64 {
            t.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let numeric = (dot(&forward(&plus)) - dot(&forward(&minus))) / (2.0 * h);
        assert!(
            rel_err(analytic.data()[idx], numeric) < 1e-4,
            "idx {idx}: analytic {} vs numeric {numeric}",
            analytic.data()[idx]
        );
    }

    #[test]
    fn conv_identity_1x1() {
        let rng = SeededRng::new(1);
        let x = rng.normal_tensor("x", &[2, 3, 4, 2]);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0; // out0 <- in0
        w.data_mut()[3] = 1.0; // out1 <- in1
        let b = Tensor::zeros(&[2]);
        let y = conv2d_forward(&x, 1, &w, &b, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_3x3_hand_case() {
        // 1x3x3x1 input, all-ones 3x3 kernel: center output sums all 9.
        let x = Tensor::from_vec(
            &[1, 3, 3, 1],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv2d_forward(&x, 1, &w, &b, 1);
        assert_eq!(y.dims(), [1, 3, 3, 1]);
        assert_eq!(y.data()[4], 45.0 + 0.5);
        // Top-left output sees the 2x2 corner only.
        assert_eq!(y.data()[0], 1.0 + 2.0 + 4.0 + 5.0 + 0.5);
    }

    #[test]
    fn conv_does_not_leak_across_views() {
        // Two views of width 3; impulse at view 0's rightmost column.
        let mut x = Tensor::zeros(&[1, 3, 6, 1]);
        x.data_mut()[(1 * 6 + 2) * 1] = 5.0; // y=1, x=2 (view 0 border)
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, 2, &w, &b, 1);
        // View 1 (columns 3..6) must stay zero.
        for yy in 0..3 {
            for xx in 3..6 {
                assert_eq!(y.data()[(yy * 6 + xx) * 1], 0.0, "leak at ({yy},{xx})");
            }
        }
        // Panorama treated as one view would leak into column 3.
        let y_one = conv2d_forward(&x, 1, &w, &b, 1);
        assert!(y_one.data()[(1 * 6 + 3) * 1] != 0.0);
    }

    #[test]
    fn conv_stride2_dims() {
        let x = Tensor::zeros(&[2, 8, 12, 3]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d_forward(&x, 2, &w, &b, 2);
        assert_eq!(y.dims(), [2, 4, 6, 5]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let rng = SeededRng::new(3);
        let x = rng.normal_tensor("x", &[1, 4, 6, 2]);
        let w = rng.normal_tensor("w", &[3, 2, 3, 3]);
        let b = rng.normal_tensor("b", &[3]);
        let g = rng.normal_tensor("g", &[1, 4, 6, 3]);
        let (dx, dw, db) = conv2d_backward(&x, 2, &w, 1, &g);
        for idx in [0, 7, 23, 40] {
            fd_scalar(|xx| conv2d_forward(xx, 2, &w, &b, 1), &dx, &x, idx, &g);
        }
        for idx in [0, 5, 17, 53] {
            fd_scalar(|ww| conv2d_forward(&x, 2, ww, &b, 1), &dw, &w, idx, &g);
        }
        for idx in [0, 2] {
            fd_scalar(|bb| conv2d_forward(&x, 2, &w, bb, 1), &db, &b, idx, &g);
        }
    }

    #[test]
    fn conv_stride2_backward_matches_finite_differences() {
        let rng = SeededRng::new(4);
        let x = rng.normal_tensor("x", &[1, 4, 4, 2]);
        let w = rng.normal_tensor("w", &[2, 2, 3, 3]);
        let b = rng.normal_tensor("b", &[2]);
        let g = rng.normal_tensor("g", &[1, 2, 2, 2]);
        let (dx, dw, _db) = conv2d_backward(&x, 1, &w, 2, &g);
        for idx in [0, 9, 31] {
            fd_scalar(|xx| conv2d_forward(xx, 1, &w, &b, 2), &dx, &x, idx, &g);
        }
        for idx in [0, 11, 35] {
            fd_scalar(|ww| conv2d_forward(&x, 1, ww, &b, 2), &dw, &w, idx, &g);
        }
    }

    #[test]
    fn group_norm_normalizes_per_view_group() {
        let rng = SeededRng::new(5);
        let x = rng.normal_tensor("x", &[2, 3, 8, 4]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = group_norm_forward(&x, 2, 2, &gamma, &beta);
        // Check one (t, view, group): mean 0, var 1.
        let (h, wp, c, wv, gc) = (3, 8, 4, 4, 2);
        for (t, v, g) in [(0, 0, 0), (1, 1, 1)] {
            let mut vals = Vec::new();
            for yy in 0..h {
                for xx in 0..wv {
                    for ci in 0..gc {
                        vals.push(y.data()[((t * h + yy) * wp + v * wv + xx) * c + g * gc + ci]);
                    }
                }
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let rng = SeededRng::new(6);
        let x = rng.normal_tensor("x", &[1, 2, 4, 4]);
        let gamma = rng.normal_tensor("gamma", &[4]);
        let beta = rng.normal_tensor("beta", &[4]);
        let g = rng.normal_tensor("g", &[1, 2, 4, 4]);
        let (dx, dgamma, dbeta) = group_norm_backward(&x, 2, 2, &gamma, &g);
        for idx in [0, 3, 13, 27] {
            fd_scalar(
                |xx| group_norm_forward(xx, 2, 2, &gamma, &beta),
                &dx,
                &x,
                idx,
                &g,
            );
        }
        for idx in [0, 3] {
            fd_scalar(
                |gm| group_norm_forward(&x, 2, 2, gm, &beta),
                &dgamma,
                &gamma,
                idx,
                &g,
            );
            fd_scalar(
                |bt| group_norm_forward(&x, 2, 2, &gamma, bt),
                &dbeta,
                &beta,
                idx,
                &g,
            );
        }
    }

    #[test]
    fn silu_reference_values() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = silu_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((y.data()[2] + 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let rng = SeededRng::new(7);
        let x = rng.normal_tensor("x", &[10]);
        let g = rng.normal_tensor("g", &[10]);
        let dx = silu_backward(&x, &g);
        for idx in 0..10 {
            fd_scalar(silu_forward, &dx, &x, idx, &g);
        }
    }

    #[test]
    fn linear_hand_case() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![10.0, 100.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.dims(), [2, 1]);
        assert_eq!(y.data(), &[210.5, 430.5]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let rng = SeededRng::new(8);
        let x = rng.normal_tensor("x", &[3, 4]);
        let w = rng.normal_tensor("w", &[2, 4]);
        let b = rng.normal_tensor("b", &[2]);
        let g = rng.normal_tensor("g", &[3, 2]);
        let (dx, dw, db) = linear_backward(&x, &w, &g);
        for idx in [0, 5, 11] {
            fd_scalar(|xx| linear_forward(xx, &w, &b), &dx, &x, idx, &g);
        }
        for idx in [0, 3, 7] {
            fd_scalar(|ww| linear_forward(&x, ww, &b), &dw, &w, idx, &g);
        }
        for idx in [0, 1] {
            fd_scalar(|bb| linear_forward(&x, &w, bb), &db, &b, idx, &g);
        }
    }

    #[test]
    fn avg_pool_hand_case() {
        let x = Tensor::from_vec(&[1, 2, 4, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = avg_pool2d(&x, 2, 2);
        assert_eq!(y.dims(), [1, 1, 2, 1]);
        assert_eq!(y.data(), &[(1.0 + 2.0 + 5.0 + 6.0) / 4.0, (3.0 + 4.0 + 7.0 + 8.0) / 4.0]);
    }

    #[test]
    fn upsample_and_backward_are_adjoint() {
        let rng = SeededRng::new(9);
        let x = rng.normal_tensor("x", &[1, 2, 3, 2]);
        let y = upsample_nearest2(&x);
        assert_eq!(y.dims(), [1, 4, 6, 2]);
        for t in 0..1 {
            for yy in 0..4 {
                for xx in 0..6 {
                    for c in 0..2 {
                        let o = ((t * 4 + yy) * 6 + xx) * 2 + c;
                        let i = ((t * 2 + yy / 2) * 3 + xx / 2) * 2 + c;
                        assert_eq!(y.data()[o], x.data()[i]);
                    }
                }
            }
        }
        // Adjoint identity: <up(x), g> == <x, up_backward(g)>.
        let g = rng.normal_tensor("g", &[1, 4, 6, 2]);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = upsample_nearest2_backward(&g);
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e0 = time_embedding(0, 8);
        assert_eq!(e0.dims(), [8]);
        // t=0: all sines 0, all cosines 1.
        for i in 0..4 {
            assert_eq!(e0.data()[2 * i], 0.0);
            assert_eq!(e0.data()[2 * i + 1], 1.0);
        }
        let e1 = time_embedding(500, 8);
        assert!(e1.data().iter().all(|v| v.abs() <= 1.0));
        assert!(e0.data() != e1.data());
    }
}
