//! Per-channel batch normalisation.

use crate::tensor::Tensor;

/// Forward result of a normalisation step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnForward {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch mean per channel (train mode only).
    pub mean: Vec<f64>,
    /// Biased batch variance per channel (train mode only).
    pub var: Vec<f64>,
}

fn channel_planes(x: &Tensor) -> impl Iterator<Item = (usize, usize)> + '_ {
    let s = x.shape();
    (0..s.n).flat_map(move |n| (0..s.c).map(move |c| (n, c)))
}

/// Normalises by batch statistics over `(n, h, w)`.
pub fn batch_norm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> BnForward {
    let s = x.shape();
    let count = (s.n * s.hw()) as f64;
    let mut mean = vec![0.0; s.c];
    for (n, c) in channel_planes(x) {
        mean[c] += x.plane(n, c).iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; s.c];
    for (n, c) in channel_planes(x) {
        let m = mean[c];
        var[c] += x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = affine(x, &mean, &inv_std, gamma, beta);
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Normalises by stored running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> BnForward {
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = affine(x, running_mean, &inv_std, gamma, beta);
    BnForward {
        y,
        xhat,
        inv_std,
        mean: Vec::new(),
        var: Vec::new(),
    }
}

fn affine(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor, Tensor) {
    let mut xhat = x.clone();
    let mut y = x.clone();
    let s = x.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (h, v) in xhat.plane_mut(n, c).iter_mut().zip(y.plane_mut(n, c)) {
                *h = (*h - m) * is;
                *v = g * *h + b;
            }
        }
    }
    (y, xhat)
}

/// Gradients `(dx, dgamma, dbeta)`.
///
/// In train mode the batch statistics depend on `x`, which adds the two
/// centering terms; in eval mode the map is affine per channel.
pub fn batch_norm_backward(
    dy: &Tensor,
    fwd: &BnForward,
    gamma: &[f64],
    train: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = dy.shape();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (g, h) in dy.plane(n, c).iter().zip(fwd.xhat.plane(n, c)) {
                dgamma[c] += g * h;
                dbeta[c] += g;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let count = (s.n * s.hw()) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * fwd.inv_std[c];
            let xh = fwd.xhat.plane(n, c);
            let g = dy.plane(n, c);
            let out = dx.plane_mut(n, c);
            if train {
                let mean_dy = dbeta[c] / count;
                let mean_dy_xh = dgamma[c] / count;
                for i in 0..out.len() {
                    out[i] = k * (g[i] - mean_dy - xh[i] * mean_dy_xh);
                }
            } else {
                for i in 0..out.len() {
                    out[i] = k * g[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
