//! Layer kernels and their vector-Jacobian products.
//!
//! Forward functions are shared by the plain inference path and by
//! [`Graph`](super::Graph), so both produce bit-identical values.

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Input, weight and bias gradients of a parameterised layer.
pub type ParamGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

/// Zero padding mode for stride-1 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Symmetric zero padding of `(m - 1) / 2`; spatial size is preserved.
    Same,
    /// No padding; each spatial side shrinks by `m - 1`.
    Valid,
}

impl Padding {
    pub fn amount(self, m: usize) -> usize {
        match self {
            Padding::Same => (m - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn output_size(self, input: usize, m: usize) -> usize {
        match self {
            Padding::Same => input,
            Padding::Valid => input + 1 - m,
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    m: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Self> {
        let (c, h, w) = x.chw("conv2d")?;
        let (k, kc, m) = match kernels.shape()[..] {
            [k, kc, m1, m2] if m1 == m2 => (k, kc, m1),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    reason: format!("kernels must be [k, c, m, m], got {:?}", kernels.shape()),
                })
            }
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![k, c, m, m],
                found: kernels.shape().to_vec(),
            });
        }
        if bias.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![k],
                found: bias.shape().to_vec(),
            });
        }
        if m % 2 == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                reason: format!("kernel size {m} must be odd"),
            });
        }
        if padding == Padding::Valid && (m > h || m > w) {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                reason: format!("kernel size {m} exceeds input {h}x{w}"),
            });
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            m,
            oh: padding.output_size(h, m),
            ow: padding.output_size(w, m),
            pad: padding.amount(m),
        })
    }

    /// Output rows `oi` for which input row `oi + di - pad` is in bounds.
    fn rows(&self, di: usize) -> std::ops::Range<usize> {
        span(self.oh, self.h, di, self.pad)
    }

    fn cols(&self, dj: usize) -> std::ops::Range<usize> {
        span(self.ow, self.w, dj, self.pad)
    }
}

fn span(out: usize, input: usize, offset: usize, pad: usize) -> std::ops::Range<usize> {
    // input index = o + offset - pad must lie in [0, input)
    let lo = pad.saturating_sub(offset);
    let hi = (input + pad).saturating_sub(offset).min(out);
    lo..hi.max(lo)
}

/// Stride-1 2-d convolution (cross-correlation) of `x: [c, h, w]` with
/// `kernels: [k, c, m, m]` plus `bias: [k]`.
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(x, kernels, bias, padding)?;
    let (xd, kd) = (x.data(), kernels.data());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.k * plane];
    for kk in 0..g.k {
        let o = &mut out[kk * plane..(kk + 1) * plane];
        o.fill(bias.data()[kk]);
        for c in 0..g.c {
            for di in 0..g.m {
                for dj in 0..g.m {
                    let wv = kd[((kk * g.c + c) * g.m + di) * g.m + dj];
                    let cols = g.cols(dj);
                    for oi in g.rows(di) {
                        let xi = oi + di - g.pad;
                        let xrow = &xd[(c * g.h + xi) * g.w..(c * g.h + xi + 1) * g.w];
                        let orow = &mut o[oi * g.ow..(oi + 1) * g.ow];
                        for oj in cols.clone() {
                            orow[oj] += wv * xrow[oj + dj - g.pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
///
/// Returns `(d input, d kernels, d bias)`; the input and kernel parts are only
/// computed when requested.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
    grad_out: &[f64],
    want_input: bool,
    want_kernels: bool,
) -> Result<ParamGrads> {
    let g = ConvGeometry::new(x, kernels, bias, padding)?;
    let plane = g.oh * g.ow;
    if grad_out.len() != g.k * plane {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            expected: vec![g.k, g.oh, g.ow],
            found: vec![grad_out.len()],
        });
    }
    let (xd, kd) = (x.data(), kernels.data());
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = want_kernels.then(|| vec![0.0; kernels.len()]);
    let gb: Vec<f64> = (0..g.k)
        .map(|kk| grad_out[kk * plane..(kk + 1) * plane].iter().sum())
        .collect();
    for kk in 0..g.k {
        let go = &grad_out[kk * plane..(kk + 1) * plane];
        for c in 0..g.c {
            for di in 0..g.m {
                for dj in 0..g.m {
                    let widx = ((kk * g.c + c) * g.m + di) * g.m + dj;
                    let wv = kd[widx];
                    let cols = g.cols(dj);
                    let mut acc = 0.0;
                    for oi in g.rows(di) {
                        let xi = oi + di - g.pad;
                        let base = (c * g.h + xi) * g.w;
                        let gorow = &go[oi * g.ow..(oi + 1) * g.ow];
                        if let Some(gx) = gx.as_mut() {
                            let gxrow = &mut gx[base..base + g.w];
                            for oj in cols.clone() {
                                gxrow[oj + dj - g.pad] += wv * gorow[oj];
                            }
                        }
                        if gk.is_some() {
                            let xrow = &xd[base..base + g.w];
                            for oj in cols.clone() {
                                acc += gorow[oj] * xrow[oj + dj - g.pad];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

fn pool_dims(x: &Tensor, n: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw(op)?;
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(TensorError::InvalidShape {
            op,
            reason: format!("spatial size {h}x{w} is not divisible by pool size {n}"),
        });
    }
    Ok((c, h, w))
}

/// Non-overlapping `n × n` max pooling with stride `n`.
///
/// Also returns, per output element, the flat input index that supplied the
/// maximum (first in row-major order on ties). Backward routes gradient only
/// to those indices.
pub fn maxpool2d(x: &Tensor, n: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = pool_dims(x, n, "maxpool2d")?;
    let (oh, ow) = (h / n, w / n);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = (ch * h + oi * n) * w + oj * n;
                for di in 0..n {
                    for dj in 0..n {
                        let idx = (ch * h + oi * n + di) * w + oj * n + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&src, &g) in argmax.iter().zip(grad_out) {
        gx[src] += g;
    }
    gx
}

/// Non-overlapping `n × n` average pooling with stride `n`.
pub fn meanpool2d(x: &Tensor, n: usize) -> Result<Tensor> {
    let (c, h, w) = pool_dims(x, n, "meanpool2d")?;
    let (oh, ow) = (h / n, w / n);
    let xd = x.data();
    let scale = 1.0 / (n * n) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut s = 0.0;
                for di in 0..n {
                    for dj in 0..n {
                        s += xd[(ch * h + oi * n + di) * w + oj * n + dj];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn meanpool2d_backward(input_shape: &[usize], n: usize, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h / n, w / n);
    let scale = 1.0 / (n * n) as f64;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[(ch * h + i) * w + j] = grad_out[(ch * oh + i / n) * ow + j / n] * scale;
            }
        }
    }
    gx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Sub-gradient 0 at the kink.
pub fn relu_backward(x: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// `weights · x + bias` for `weights: [u, d]`; `x` may have any shape with
/// `d` elements.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (u, d) = dense_dims(x, weights, bias)?;
    let (xd, wd) = (x.data(), weights.data());
    let out = (0..u)
        .map(|r| {
            let row = &wd[r * d..(r + 1) * d];
            row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>() + bias.data()[r]
        })
        .collect();
    Tensor::new(vec![u], out)
}

fn dense_dims(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let (u, d) = match weights.shape()[..] {
        [u, d] => (u, d),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "dense",
                reason: format!("weights must be [u, d], got {:?}", weights.shape()),
            })
        }
    };
    if x.len() != d {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            expected: vec![d],
            found: x.shape().to_vec(),
        });
    }
    if bias.shape() != [u] {
        return Err(TensorError::ShapeMismatch {
            op: "dense bias",
            expected: vec![u],
            found: bias.shape().to_vec(),
        });
    }
    Ok((u, d))
}

/// Returns `(d x, d weights, d bias)`.
pub fn dense_backward(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &[f64],
    want_input: bool,
    want_weights: bool,
) -> Result<ParamGrads> {
    let (u, d) = dense_dims(x, weights, bias)?;
    let (xd, wd) = (x.data(), weights.data());
    let gx = want_input.then(|| {
        let mut gx = vec![0.0; d];
        for r in 0..u {
            let g = grad_out[r];
            if g != 0.0 {
                for (acc, w) in gx.iter_mut().zip(&wd[r * d..(r + 1) * d]) {
                    *acc += g * w;
                }
            }
        }
        gx
    });
    let gw = want_weights.then(|| {
        let mut gw = vec![0.0; u * d];
        for r in 0..u {
            let g = grad_out[r];
            if g != 0.0 {
                for (acc, xv) in gw[r * d..(r + 1) * d].iter_mut().zip(xd) {
                    *acc = g * xv;
                }
            }
        }
        gw
    });
    Ok((gx, gw, grad_out.to_vec()))
}

/// Mean over all elements of `(a - b)²`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape("mse", b)?;
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse`] with respect to `a`; the gradient for `b` is its
/// negation.
pub fn mse_grad(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let scale = 2.0 / a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| scale * (x - y))
        .collect()
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` together with the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    let classes = logits.len();
    if classes < 2 {
        return Err(TensorError::InvalidShape {
            op: "softmax_cross_entropy",
            reason: format!("need at least 2 classes, got {classes}"),
        });
    }
    if label >= classes {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok((log_total - z[label], softmax(z)))
}
