//! Bias-free 2-D convolution with reflection padding.

use super::{gemm, reflect};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Same-size `k×k` convolution (odd `k`).
    pub const fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub const fn pointwise() -> Self {
        Self::same(1)
    }

    pub const fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub const fn grouped(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self, x: Shape, out_channels: usize) -> Shape {
        Shape::new(x.n, out_channels, self.out_dim(x.h), self.out_dim(x.w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Reflected source index for each `(output position, kernel tap)` pair.
fn tap_table(out: usize, input: usize, g: &ConvGeom) -> Vec<usize> {
    let mut t = Vec::with_capacity(out * g.kernel);
    for o in 0..out {
        for k in 0..g.kernel {
            let i = (o * g.stride + k) as isize - g.pad as isize;
            t.push(reflect(i, input));
        }
    }
    t
}

struct Plan {
    cin_g: usize,
    cout_g: usize,
    kk: usize,
    ho: usize,
    wo: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Plan {
    fn new(x: Shape, w: Shape, g: &ConvGeom) -> Self {
        assert_eq!(w.h, g.kernel, "kernel height");
        assert_eq!(w.w, g.kernel, "kernel width");
        assert_eq!(x.c % g.groups, 0, "input channels not divisible by groups");
        assert_eq!(w.n % g.groups, 0, "output channels not divisible by groups");
        assert_eq!(w.c, x.c / g.groups, "weight input channels");
        let ho = g.out_dim(x.h);
        let wo = g.out_dim(x.w);
        Self {
            cin_g: x.c / g.groups,
            cout_g: w.n / g.groups,
            kk: g.kernel * g.kernel,
            ho,
            wo,
            rows: tap_table(ho, x.h, g),
            cols: tap_table(wo, x.w, g),
        }
    }

    fn im2col(&self, src: &[f64], h: usize, w: usize, k: usize, out: &mut [f64]) {
        let hwo = self.ho * self.wo;
        for ci in 0..self.cin_g {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * self.kk + ky * k + kx) * hwo;
                    let dst = &mut out[row..row + hwo];
                    for oy in 0..self.ho {
                        let sy = self.rows[oy * k + ky] * w;
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = plane[sy + self.cols[ox * k + kx]];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, k: usize, dst: &mut [f64]) {
        let hwo = self.ho * self.wo;
        for ci in 0..self.cin_g {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * self.kk + ky * k + kx) * hwo;
                    let src = &cols[row..row + hwo];
                    for oy in 0..self.ho {
                        let sy = self.rows[oy * k + ky] * w;
                        let s = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, v) in s.iter().enumerate() {
                            plane[sy + self.cols[ox * k + kx]] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)` with weight layout `[out, in/groups, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let p = Plan::new(xs, ws, g);
    let out_shape = Shape::new(xs.n, ws.n, p.ho, p.wo);
    let mut y = Tensor::zeros(out_shape);
    let hwo = p.ho * p.wo;
    let kdim = p.cin_g * p.kk;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * hwo]
    };
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for grp in 0..g.groups {
            let xo = (n * xs.c + grp * p.cin_g) * xs.hw();
            let src = &xd[xo..xo + p.cin_g * xs.hw()];
            let b: &[f64] = if g.is_pointwise() {
                src
            } else {
                p.im2col(src, xs.h, xs.w, g.kernel, &mut cols);
                &cols
            };
            let wg = &wd[grp * p.cout_g * kdim..(grp + 1) * p.cout_g * kdim];
            let yo = (n * ws.n + grp * p.cout_g) * hwo;
            let out = &mut y.data_mut()[yo..yo + p.cout_g * hwo];
            gemm(p.cout_g, kdim, hwo, wg, false, b, false, 0.0, out);
        }
    }
    y
}

/// Gradients of [`conv2d`] with respect to the input and the weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let xs = x.shape();
    let ws = w.shape();
    let p = Plan::new(xs, ws, g);
    let hwo = p.ho * p.wo;
    let kdim = p.cin_g * p.kk;
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(ws));
    let mut cols = vec![0.0; kdim * hwo];
    let mut dcols = vec![0.0; kdim * hwo];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    for n in 0..xs.n {
        for grp in 0..g.groups {
            let xo = (n * xs.c + grp * p.cin_g) * xs.hw();
            let yo = (n * ws.n + grp * p.cout_g) * hwo;
            let dyg = &dyd[yo..yo + p.cout_g * hwo];
            let wg_range = grp * p.cout_g * kdim..(grp + 1) * p.cout_g * kdim;
            if let Some(dw) = dw.as_mut() {
                let src = &xd[xo..xo + p.cin_g * xs.hw()];
                let b: &[f64] = if g.is_pointwise() {
                    src
                } else {
                    p.im2col(src, xs.h, xs.w, g.kernel, &mut cols);
                    &cols
                };
                let dwg = &mut dw.data_mut()[wg_range.clone()];
                gemm(p.cout_g, hwo, kdim, dyg, false, b, true, 1.0, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &wd[wg_range];
                let dst = &mut dx.data_mut()[xo..xo + p.cin_g * xs.hw()];
                if g.is_pointwise() {
                    gemm(kdim, p.cout_g, hwo, wg, true, dyg, false, 1.0, dst);
                } else {
                    gemm(kdim, p.cout_g, hwo, wg, true, dyg, false, 0.0, &mut dcols);
                    p.col2im(&dcols, xs.h, xs.w, g.kernel, dst);
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle.
    fn naive(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let out = g.out_shape(xs, ws.n);
        let cin_g = xs.c / g.groups;
        let cout_g = ws.n / g.groups;
        Tensor::from_fn(out, |n, o, oy, ox| {
            let grp = o / cout_g;
            let mut acc = 0.0;
            for ci in 0..cin_g {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = reflect((oy * g.stride + ky) as isize - g.pad as isize, xs.h);
                        let ix = reflect((ox * g.stride + kx) as isize - g.pad as isize, xs.w);
                        acc += w.at(o, ci, ky, kx) * x.at(n, grp * cin_g + ci, iy, ix);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matches_naive_for_several_geometries() {
        let cases = [
            (ConvGeom::same(3), 4, 4, 5, 6),
            (ConvGeom::same(1), 4, 6, 3, 3),
            (ConvGeom::strided(3, 2), 3, 5, 8, 6),
            (ConvGeom::strided(1, 2).grouped(1), 2, 2, 4, 4),
            (ConvGeom::same(3).grouped(4), 8, 8, 4, 5),
            (ConvGeom::same(7), 2, 1, 2, 2),
        ];
        for (i, (g, cin, cout, h, w)) in cases.into_iter().enumerate() {
            let g = if g.kernel == 1 && g.stride == 2 {
                ConvGeom { pad: 0, ..g }
            } else {
                g
            };
            let x = pseudo(Shape::new(2, cin, h, w), i as u64 + 1);
            let wt = pseudo(Shape::new(cout, cin / g.groups, g.kernel, g.kernel), i as u64 + 50);
            let fast = conv2d(&x, &wt, &g);
            let slow = naive(&x, &wt, &g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, dx> for the input gradient and likewise for w.
        let g = ConvGeom::same(3).grouped(2);
        let x = pseudo(Shape::new(2, 4, 5, 3), 3);
        let w = pseudo(Shape::new(6, 2, 3, 3), 4);
        let dy = pseudo(Shape::new(2, 6, 5, 3), 5);
        let y = conv2d(&x, &w, &g);
        let (dx, dw) = conv2d_backward(&x, &w, &g, &dy, true, true);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn constant_map_stays_constant_under_reflection() {
        let x = Tensor::full(Shape::new(1, 2, 5, 5), 1.5);
        let w = pseudo(Shape::new(3, 2, 3, 3), 9);
        let y = conv2d(&x, &w, &ConvGeom::same(3));
        for c in 0..3 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-12));
        }
    }
}
