//! Bilinear upsampling and spatial/channel pooling.

use crate::tensor::{Shape, Tensor};

/// Interpolation taps `(i0, i1, w0, w1)` for half-pixel-centred resampling.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear resize with corner alignment disabled.
pub fn upsample_bilinear(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    if s.h == h && s.w == w {
        return x.clone();
    }
    let ty = taps(s.h, h);
    let tx = taps(s.w, w);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = y.plane_mut(n, c);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * w + ox] = wy0 * (wx0 * src[y0 * s.w + x0] + wx1 * src[y0 * s.w + x1])
                        + wy1 * (wx0 * src[y1 * s.w + x0] + wx1 * src[y1 * s.w + x1]);
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward(dy: &Tensor, input: Shape) -> Tensor {
    let s = dy.shape();
    if s == input {
        return dy.clone();
    }
    let ty = taps(input.h, s.h);
    let tx = taps(input.w, s.w);
    let mut dx = Tensor::zeros(input);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = g[oy * s.w + ox];
                    dst[y0 * input.w + x0] += wy0 * wx0 * v;
                    dst[y0 * input.w + x1] += wy0 * wx1 * v;
                    dst[y1 * input.w + x0] += wy1 * wx0 * v;
                    dst[y1 * input.w + x1] += wy1 * wx1 * v;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (half-pixel centres), used for label grids.
pub fn resize_nearest_index(input: usize, output: usize) -> Vec<usize> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * ratio) as usize).min(input - 1))
        .collect()
}

/// Spatial mean per channel, `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.hw() as f64;
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().sum::<f64>() / hw
    })
}

pub fn global_avg_pool_backward(dy: &Tensor, input: Shape) -> Tensor {
    let inv = 1.0 / input.hw() as f64;
    Tensor::from_fn(input, |n, c, _, _| dy.at(n, c, 0, 0) * inv)
}

/// Mean across channels, `(n, 1, h, w)`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut y = Tensor::zeros(s.with_c(1));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            for (o, v) in y.plane_mut(n, 0).iter_mut().zip(src) {
                *o += v;
            }
        }
        y.plane_mut(n, 0).iter_mut().for_each(|v| *v /= s.c as f64);
    }
    y
}

pub fn channel_mean_backward(dy: &Tensor, input: Shape) -> Tensor {
    let inv = 1.0 / input.c as f64;
    Tensor::from_fn(input, |n, _, y, x| dy.at(n, 0, y, x) * inv)
}

/// Max across channels, `(n, 1, h, w)`, with the winning channel per pixel
/// (first maximum on ties).
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let hw = s.hw();
    let mut y = Tensor::full(s.with_c(1), f64::NEG_INFINITY);
    let mut arg = vec![0u32; s.n * hw];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            let dst = y.plane_mut(n, 0);
            for (p, v) in src.into_iter().enumerate() {
                if v > dst[p] {
                    dst[p] = v;
                    arg[n * hw + p] = c as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn channel_max_backward(dy: &Tensor, arg: &[u32], input: Shape) -> Tensor {
    let hw = input.hw();
    let mut dx = Tensor::zeros(input);
    for n in 0..input.n {
        for p in 0..hw {
            let c = arg[n * hw + p] as usize;
            dx.plane_mut(n, c)[p] += dy.plane(n, 0)[p];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_bilinear_row() {
        // Half-pixel centres: output columns sample source x = -0.25 (clamped
        // to 0), 0.25, 0.75, 1.25 (clamped to the last column).
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 2, 4);
        for row in 0..2 {
            let r: Vec<f64> = (0..4).map(|c| y.at(0, 0, row, c)).collect();
            assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
            // The midpoint of the row interpolates to 0.5.
            assert_eq!((r[1] + r[2]) / 2.0, 0.5);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 2), |_, c, y, x| (c * 7 + y * 3 + x) as f64 * 0.3 - 1.0);
        let dy = Tensor::from_fn(Shape::new(1, 2, 6, 5), |_, c, y, x| ((c + y * 5 + x * 3) % 7) as f64 - 3.0);
        let y = upsample_bilinear(&x, 6, 5);
        let dx = upsample_bilinear_backward(&dy, x.shape());
        let a: f64 = y.data().iter().zip(dy.data()).map(|(p, q)| p * q).sum();
        let b: f64 = x.data().iter().zip(dx.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn nearest_index_covers_range() {
        assert_eq!(resize_nearest_index(4, 8), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(resize_nearest_index(8, 4), vec![1, 3, 5, 7]);
    }
}
