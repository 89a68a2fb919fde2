//! Text difference enhancement.
//!
//! Given the text maps of the two dates at one scale, with `d = t1 − t2`
//! and `u = UP(d)`:
//!
//! ```text
//! T1 = ReLU(BN(Conv3(u)))          branch a
//! T2 = ReLU(BN(Conv3(u)))          branch b (separate weights)
//! T3 = SDPA(u)
//! T4 = ReLU(BN(Conv3(T1 − T2)))
//! T5 = Conv3(Cat(T1 + T1·T4, T2 + T2·T4))     2C → C
//! out = ReLU(BN(Conv3(T5 · T3)))
//! ```
//!
//! Attention runs on the upsampled difference so that `T3` and `T5` share
//! a grid. Everything downstream of `d` is bias-free, so a zero difference
//! stays zero under identity normalisation.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, ConvBn, Ctx, Mode};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Tde {
    branch_a: ConvBn,
    branch_b: ConvBn,
    contrast: ConvBn,
    merge: Conv2d,
    out: ConvBn,
    channels: usize,
}

impl Tde {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let c = channels;
        let g = ConvGeom::same(3);
        Self {
            branch_a: ConvBn::new(&mut pb, "branch_a", c, c, g),
            branch_b: ConvBn::new(&mut pb, "branch_b", c, c, g),
            contrast: ConvBn::new(&mut pb, "contrast", c, c, g),
            merge: Conv2d::new(&mut pb, "merge", 2 * c, c, g),
            out: ConvBn::new(&mut pb, "out", c, c, g),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Output grid is twice the input grid.
    pub fn forward(&self, ctx: &mut Ctx<'_>, t1: Var, t2: Var) -> Result<Var> {
        let s = ctx.tape.shape(t1);
        self.forward_to(ctx, t1, t2, 2 * s.h, 2 * s.w)
    }

    /// Same as [`Tde::forward`] with an explicit output grid (at least the
    /// input grid); used where a level is too small to halve.
    pub fn forward_to(&self, ctx: &mut Ctx<'_>, t1: Var, t2: Var, h: usize, w: usize) -> Result<Var> {
        let (s1, s2) = (ctx.tape.shape(t1), ctx.tape.shape(t2));
        if s1 != s2 {
            return Err(Error::Shape(format!("TDE inputs differ: {s1} vs {s2}")));
        }
        if s1.c != self.channels {
            return Err(Error::Shape(format!(
                "TDE built for {} channels, got {}",
                self.channels, s1.c
            )));
        }
        if h < s1.h || w < s1.w {
            return Err(Error::Shape(format!("TDE target {h}x{w} smaller than input {s1}")));
        }
        let tape = &mut ctx.tape;
        let d = tape.sub(t1, t2);
        let u = tape.upsample(d, h, w);
        let a = self.branch_a.forward_relu(ctx, u);
        let b = self.branch_b.forward_relu(ctx, u);
        let attended = ctx.tape.sdpa(u);
        let ab = ctx.tape.sub(a, b);
        let t4 = self.contrast.forward_relu(ctx, ab);
        let tape = &mut ctx.tape;
        let a4 = tape.mul(a, t4);
        let a_enh = tape.add(a, a4);
        let b4 = tape.mul(b, t4);
        let b_enh = tape.add(b, b4);
        let cat = tape.concat(a_enh, b_enh);
        let t5 = self.merge.forward(ctx, cat);
        let gated = ctx.tape.mul(t5, attended);
        Ok(self.out.forward_relu(ctx, gated))
    }

    /// Eval-mode forward on two `1×C×H×W` maps.
    pub fn apply(&self, store: &ParamStore, t1: &Tensor, t2: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (a, b) = (ctx.input(t1.clone()), ctx.input(t2.clone()));
        let y = self.forward(&mut ctx, a, b)?;
        Ok(ctx.value(y).clone())
    }
}
