//! Softmax and single-head scaled dot-product self-attention.

use serde::{Deserialize, Serialize};

use super::gemm;
use crate::tensor::Tensor;

/// Axis a softmax normalises over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    /// Across channels at each spatial position.
    #[default]
    Channel,
    /// Across all spatial positions of each channel.
    Spatial,
}

pub fn softmax(x: &Tensor, axis: SoftmaxAxis) -> Tensor {
    let s = x.shape();
    let mut y = x.clone();
    match axis {
        SoftmaxAxis::Spatial => {
            for n in 0..s.n {
                for c in 0..s.c {
                    softmax_in_place(y.plane_mut(n, c));
                }
            }
        }
        SoftmaxAxis::Channel => {
            let hw = s.hw();
            let mut buf = vec![0.0; s.c];
            let data = y.data_mut();
            for n in 0..s.n {
                let base = n * s.c * hw;
                for p in 0..hw {
                    for (c, b) in buf.iter_mut().enumerate() {
                        *b = data[base + c * hw + p];
                    }
                    softmax_in_place(&mut buf);
                    for (c, b) in buf.iter().enumerate() {
                        data[base + c * hw + p] = *b;
                    }
                }
            }
        }
    }
    y
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `dx = y ⊙ (dy − Σ dy ⊙ y)` along the softmax axis.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: SoftmaxAxis) -> Tensor {
    let s = y.shape();
    let mut dx = Tensor::zeros(s);
    match axis {
        SoftmaxAxis::Spatial => {
            for n in 0..s.n {
                for c in 0..s.c {
                    let yp = y.plane(n, c);
                    let gp = dy.plane(n, c);
                    let dot: f64 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
                    for (i, o) in dx.plane_mut(n, c).iter_mut().enumerate() {
                        *o = yp[i] * (gp[i] - dot);
                    }
                }
            }
        }
        SoftmaxAxis::Channel => {
            let hw = s.hw();
            let (yd, gd) = (y.data(), dy.data());
            let out = dx.data_mut();
            for n in 0..s.n {
                let base = n * s.c * hw;
                for p in 0..hw {
                    let dot: f64 = (0..s.c)
                        .map(|c| yd[base + c * hw + p] * gd[base + c * hw + p])
                        .sum();
                    for c in 0..s.c {
                        let i = base + c * hw + p;
                        out[i] = yd[i] * (gd[i] - dot);
                    }
                }
            }
        }
    }
    dx
}

/// Self-attention over spatial tokens with `Q = K = V = x`.
///
/// With `x` viewed per sample as a `C×T` matrix (`T = H·W`), the scores are
/// `S = xᵀx/√C`, `A = softmax_rows(S)` and the output is `x·Aᵀ`, i.e. each
/// output token is the attention-weighted mix of input tokens. Returns the
/// output and the per-sample `T×T` attention matrices.
pub fn sdpa(x: &Tensor) -> (Tensor, Vec<f64>) {
    let s = x.shape();
    let t = s.hw();
    let d = s.c;
    let scale = 1.0 / (d as f64).sqrt();
    let mut y = Tensor::zeros(s);
    let mut attn = vec![0.0; s.n * t * t];
    for n in 0..s.n {
        let xs = &x.data()[n * d * t..(n + 1) * d * t];
        let a = &mut attn[n * t * t..(n + 1) * t * t];
        gemm(t, d, t, xs, true, xs, false, 0.0, a);
        for row in a.chunks_mut(t) {
            row.iter_mut().for_each(|v| *v *= scale);
            softmax_in_place(row);
        }
        let out = &mut y.data_mut()[n * d * t..(n + 1) * d * t];
        gemm(d, t, t, xs, false, a, true, 0.0, out);
    }
    (y, attn)
}

pub fn sdpa_backward(x: &Tensor, attn: &[f64], dy: &Tensor) -> Tensor {
    let s = x.shape();
    let t = s.hw();
    let d = s.c;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = Tensor::zeros(s);
    let mut da = vec![0.0; t * t];
    for n in 0..s.n {
        let xs = &x.data()[n * d * t..(n + 1) * d * t];
        let g = &dy.data()[n * d * t..(n + 1) * d * t];
        let a = &attn[n * t * t..(n + 1) * t * t];
        let out = &mut dx.data_mut()[n * d * t..(n + 1) * d * t];
        // Through the value path: y = x·Aᵀ.
        gemm(d, t, t, g, false, a, false, 0.0, out);
        // dA = dyᵀ·x
        gemm(t, d, t, g, true, xs, false, 0.0, &mut da);
        for (arow, grow) in a.chunks(t).zip(da.chunks_mut(t)) {
            let dot: f64 = arow.iter().zip(grow.iter()).map(|(p, q)| p * q).sum();
            for (p, q) in arow.iter().zip(grow.iter_mut()) {
                *q = p * (*q - dot) * scale;
            }
        }
        // Scores are symmetric in x: dx += x·(dS + dSᵀ).
        gemm(d, t, t, xs, false, &da, false, 1.0, out);
        gemm(d, t, t, xs, false, &da, true, 1.0, out);
    }
    dx
}
