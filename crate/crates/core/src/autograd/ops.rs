//! Forward and backward kernels for the supported operator set.
//!
//! Every kernel works on whole NCHW batches. Backward kernels take the
//! upstream gradient and return the gradient w.r.t. the op input, plus
//! parameter gradients where the op has parameters.

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape4, Tensor4};

pub const BN_EPS: f64 = 1e-5;

/// Four independent zero-padding amounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding { top: p, bottom: p, left: p, right: p }
    }

    pub const fn is_uniform(&self) -> bool {
        self.top == self.bottom && self.top == self.left && self.top == self.right
    }
}

/// Spatial window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    /// (rows, cols)
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
}

impl Window {
    pub const fn square(k: usize, s: usize, p: usize) -> Self {
        Window { kernel: [k, k], stride: [s, s], padding: Padding::uniform(p) }
    }

    /// Output extent along one axis, `None` if no window fits.
    pub fn out_extent(input: usize, k: usize, s: usize, lo: usize, hi: usize) -> Option<usize> {
        if s == 0 || k == 0 {
            return None;
        }
        let span = input + lo + hi;
        (span >= k).then(|| (span - k) / s + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = self.padding;
        let oh = Self::out_extent(h, self.kernel[0], self.stride[0], p.top, p.bottom)?;
        let ow = Self::out_extent(w, self.kernel[1], self.stride[1], p.left, p.right)?;
        Some((oh, ow))
    }
}

/// `c = a * b + beta * c` for row-major `a` (m×k) and `b` (k×n), with
/// optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above match the strides handed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize, col: &mut [f64]) {
    let [kh, kw] = win.kernel;
    let [sh, sw] = win.stride;
    let (pt, pl) = (win.padding.top as isize, win.padding.left as isize);
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * sh) as isize - pt + ky as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize - pl + kx as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize, dx: &mut [f64]) {
    let [kh, kw] = win.kernel;
    let [sh, sw] = win.stride;
    let (pt, pl) = (win.padding.top as isize, win.padding.left as isize);
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * sh) as isize - pt + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * sw) as isize - pl + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is (out_ch, in_ch, kh, kw).
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: Option<&[f64]>, win: &Window) -> Tensor4 {
    let s = x.shape();
    let ws = weight.shape();
    debug_assert_eq!(ws.c, s.c);
    let (oh, ow) = win.out_hw(s.h, s.w).expect("conv output extent validated by topology");
    let k = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let mut out = Tensor4::zeros([s.n, ws.n, oh, ow]);
    let mut col = vec![0.0; k * p];
    for n in 0..s.n {
        im2col(x.item(n), s.c, s.h, s.w, win, oh, ow, &mut col);
        let y = out.item_mut(n);
        gemm(ws.n, k, p, weight.data(), false, &col, false, 0.0, y);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    has_bias: bool,
    win: &Window,
    dy: &Tensor4,
    want_params: bool,
) -> ConvGrads {
    let s = x.shape();
    let ws = weight.shape();
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    let k = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let mut dx = Tensor4::zeros(s);
    let mut dw = want_params.then(|| vec![0.0; ws.len()]);
    let mut db = (want_params && has_bias).then(|| vec![0.0; ws.n]);
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; k * p];
    for n in 0..s.n {
        let g = dy.item(n);
        if let Some(dw) = dw.as_mut() {
            im2col(x.item(n), s.c, s.h, s.w, win, oh, ow, &mut col);
            gemm(ws.n, p, k, g, false, &col, true, 1.0, dw);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        gemm(k, ws.n, p, weight.data(), true, g, false, 0.0, &mut dcol);
        col2im(&dcol, s.c, s.h, s.w, win, oh, ow, dx.item_mut(n));
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// Max pooling with -inf padding. Returns the output and, per output
/// element, the flat input offset of the selected element. Ties resolve to
/// the first element in row-major window order.
pub fn max_pool(x: &Tensor4, win: &Window) -> (Tensor4, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = win.out_hw(s.h, s.w).expect("pool output extent validated by topology");
    let mut out = Tensor4::zeros([s.n, s.c, oh, ow]);
    let mut arg = Vec::with_capacity(out.len());
    let data = x.data();
    let [kh, kw] = win.kernel;
    let [sh, sw] = win.stride;
    let (pt, pl) = (win.padding.top as isize, win.padding.left as isize);
    let o = out.data_mut();
    let mut idx = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.offset(n, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ky in 0..kh {
                        let iy = (oy * sh) as isize - pt + ky as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw) as isize - pl + kx as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            let off = base + iy as usize * s.w + ix as usize;
                            if best_at == usize::MAX || data[off] > best {
                                best = data[off];
                                best_at = off;
                            }
                        }
                    }
                    o[idx] = best;
                    arg.push(best_at);
                    idx += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(input_shape: Shape4, argmax: &[usize], dy: &Tensor4) -> Tensor4 {
    let mut dx = Tensor4::zeros(input_shape);
    let d = dx.data_mut();
    for (&at, &g) in argmax.iter().zip(dy.data()) {
        if at != usize::MAX {
            d[at] += g;
        }
    }
    dx
}

/// Average pooling; padded positions count as zeros in the divisor.
pub fn avg_pool(x: &Tensor4, win: &Window) -> Tensor4 {
    let s = x.shape();
    let (oh, ow) = win.out_hw(s.h, s.w).expect("pool output extent validated by topology");
    let mut out = Tensor4::zeros([s.n, s.c, oh, ow]);
    let scale = 1.0 / (win.kernel[0] * win.kernel[1]) as f64;
    for_each_window(s, win, oh, ow, |out_idx, in_off| {
        out.data_mut()[out_idx] += x.data()[in_off] * scale;
    });
    out
}

pub fn avg_pool_backward(input_shape: Shape4, win: &Window, dy: &Tensor4) -> Tensor4 {
    let ds = dy.shape();
    let mut dx = Tensor4::zeros(input_shape);
    let scale = 1.0 / (win.kernel[0] * win.kernel[1]) as f64;
    for_each_window(input_shape, win, ds.h, ds.w, |out_idx, in_off| {
        dx.data_mut()[in_off] += dy.data()[out_idx] * scale;
    });
    dx
}

/// Visits every (output element, in-bounds input element) pair of a window op.
fn for_each_window(s: Shape4, win: &Window, oh: usize, ow: usize, mut f: impl FnMut(usize, usize)) {
    let [kh, kw] = win.kernel;
    let [sh, sw] = win.stride;
    let (pt, pl) = (win.padding.top as isize, win.padding.left as isize);
    let mut out_idx = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.offset(n, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..kh {
                        let iy = (oy * sh) as isize - pt + ky as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw) as isize - pl + kx as isize;
                            if ix >= 0 && ix < s.w as isize {
                                f(out_idx, base + iy as usize * s.w + ix as usize);
                            }
                        }
                    }
                    out_idx += 1;
                }
            }
        }
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Batch statistics retained by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnBatch {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

pub fn batch_norm_train(x: &Tensor4, gamma: &[f64], beta: &[f64]) -> (Tensor4, BnBatch) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            mean[c] += x.data()[off..off + s.plane()].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            var[c] += x.data()[off..off + s.plane()].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let var_unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            for i in off..off + s.plane() {
                xhat[i] = (x.data()[i] - mean[c]) * inv_std[c];
                y.data_mut()[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (y, BnBatch { xhat, inv_std, mean, var_unbiased })
}

pub fn batch_norm_eval(x: &Tensor4, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor4 {
    let s = x.shape();
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
            let shift = beta[c] - mean[c] * scale;
            let off = s.offset(n, c, 0, 0);
            for i in off..off + s.plane() {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    y
}

pub struct BnGrads {
    pub input: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batch_norm_train_backward(dy: &Tensor4, gamma: &[f64], batch: &BnBatch) -> BnGrads {
    let s = dy.shape();
    let m = (s.n * s.plane()) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            for i in off..off + s.plane() {
                dgamma[c] += dy.data()[i] * batch.xhat[i];
                dbeta[c] += dy.data()[i];
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * batch.inv_std[c] / m;
            let off = s.offset(n, c, 0, 0);
            for i in off..off + s.plane() {
                dx.data_mut()[i] = k * (m * dy.data()[i] - dbeta[c] - batch.xhat[i] * dgamma[c]);
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

pub fn batch_norm_eval_backward(
    x: &Tensor4,
    dy: &Tensor4,
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
) -> BnGrads {
    let s = dy.shape();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let inv_std = 1.0 / (var[c] + BN_EPS).sqrt();
            let off = s.offset(n, c, 0, 0);
            for i in off..off + s.plane() {
                let g = dy.data()[i];
                dx.data_mut()[i] = g * gamma[c] * inv_std;
                dgamma[c] += g * (x.data()[i] - mean[c]) * inv_std;
                dbeta[c] += g;
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// Fully connected layer over each flattened batch item. `weight` is
/// row-major (out, in).
pub fn linear(x: &Tensor4, weight: &[f64], bias: &[f64]) -> Tensor4 {
    let s = x.shape();
    let k = s.item_len();
    let out_f = bias.len();
    let mut y = Tensor4::zeros([s.n, out_f, 1, 1]);
    // y (n×out) = x (n×k) · Wᵀ (k×out)
    gemm(s.n, k, out_f, x.data(), false, weight, true, 0.0, y.data_mut());
    for n in 0..s.n {
        for (v, b) in y.item_mut(n).iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

pub struct LinearGrads {
    pub input: Tensor4,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn linear_backward(x: &Tensor4, weight: &[f64], dy: &Tensor4, want_params: bool) -> LinearGrads {
    let s = x.shape();
    let k = s.item_len();
    let out_f = dy.shape().c;
    let mut dx = Tensor4::zeros(s);
    gemm(s.n, out_f, k, dy.data(), false, weight, false, 0.0, dx.data_mut());
    let (weight_grad, bias_grad) = if want_params {
        let mut dw = vec![0.0; out_f * k];
        // dW (out×k) = dyᵀ (out×n) · x (n×k)
        gemm(out_f, s.n, k, dy.data(), true, x.data(), false, 0.0, &mut dw);
        let mut db = vec![0.0; out_f];
        for n in 0..s.n {
            for (d, g) in db.iter_mut().zip(dy.item(n)) {
                *d += g;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    LinearGrads { input: dx, weight: weight_grad, bias: bias_grad }
}

pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let mut y = Tensor4::zeros([s.n, s.c, 1, 1]);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            y[[n, c, 0, 0]] = x.data()[off..off + s.plane()].iter().sum::<f64>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward(input_shape: Shape4, dy: &Tensor4) -> Tensor4 {
    let inv = 1.0 / input_shape.plane() as f64;
    let mut dx = Tensor4::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = dy[[n, c, 0, 0]] * inv;
            let off = input_shape.offset(n, c, 0, 0);
            dx.data_mut()[off..off + input_shape.plane()].fill(g);
        }
    }
    dx
}
