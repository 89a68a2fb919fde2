//! Image feature refinement.
//!
//! With `d = f1 − f2`:
//!
//! ```text
//! F1  = ReLU(BN(Conv3(d)))
//! F2  = Cat(F1, d)                                  2C
//! F3  = BN(Conv3(d))
//! A   = softmax_c(Conv1(F2) · F3)
//! F4  = ReLU(BN(GroupConv3(A; 4 groups))) + F1
//! F_R = sigmoid(GAP(F4)) ⊙ F4
//! ```

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::attention::SoftmaxAxis;
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, ConvBn, Ctx, Mode};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const IFR_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct Ifr {
    first: ConvBn,
    third: ConvBn,
    mix: Conv2d,
    grouped: ConvBn,
    softmax_axis: SoftmaxAxis,
    channels: usize,
}

/// Output and the pre-gate feature `F4`.
#[derive(Clone, Copy, Debug)]
pub struct IfrOutput {
    pub refined: Var,
    pub pre_gate: Var,
}

impl Ifr {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        Self::with_axis(pb, name, channels, SoftmaxAxis::Channel)
    }

    pub fn with_axis(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        softmax_axis: SoftmaxAxis,
    ) -> Result<Self> {
        if channels == 0 || channels % IFR_GROUPS != 0 {
            return Err(Error::Config(format!(
                "IFR needs channels divisible by {IFR_GROUPS}, got {channels}"
            )));
        }
        let mut pb = pb.scope(name);
        let c = channels;
        Ok(Self {
            first: ConvBn::new(&mut pb, "first", c, c, ConvGeom::same(3)),
            third: ConvBn::new(&mut pb, "third", c, c, ConvGeom::same(3)),
            mix: Conv2d::new(&mut pb, "mix", 2 * c, c, ConvGeom::pointwise()),
            grouped: ConvBn::new(&mut pb, "grouped", c, c, ConvGeom::same(3).grouped(IFR_GROUPS)),
            softmax_axis,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, f1: Var, f2: Var) -> Result<Var> {
        Ok(self.forward_parts(ctx, f1, f2)?.refined)
    }

    pub fn forward_parts(&self, ctx: &mut Ctx<'_>, f1: Var, f2: Var) -> Result<IfrOutput> {
        let (s1, s2) = (ctx.tape.shape(f1), ctx.tape.shape(f2));
        if s1 != s2 {
            return Err(Error::Shape(format!("IFR inputs differ: {s1} vs {s2}")));
        }
        if s1.c != self.channels {
            return Err(Error::Shape(format!(
                "IFR built for {} channels, got {}",
                self.channels, s1.c
            )));
        }
        let d = ctx.tape.sub(f1, f2);
        let first = self.first.forward_relu(ctx, d);
        let cat = ctx.tape.concat(first, d);
        let third = self.third.forward(ctx, d);
        let mixed = self.mix.forward(ctx, cat);
        let prod = ctx.tape.mul(mixed, third);
        let attn = ctx.tape.softmax(prod, self.softmax_axis);
        let g = self.grouped.forward_relu(ctx, attn);
        let pre_gate = ctx.tape.add(g, first);
        let pooled = ctx.tape.global_avg_pool(pre_gate);
        let gate = ctx.tape.sigmoid(pooled);
        let gate = ctx.tape.expand(gate, s1);
        let refined = ctx.tape.mul(gate, pre_gate);
        Ok(IfrOutput { refined, pre_gate })
    }

    pub fn apply(&self, store: &ParamStore, f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
        Ok(self.apply_parts(store, f1, f2)?.0)
    }

    /// Eval-mode `(F_R, F4)`.
    pub fn apply_parts(&self, store: &ParamStore, f1: &Tensor, f2: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (a, b) = (ctx.input(f1.clone()), ctx.input(f2.clone()));
        let out = self.forward_parts(&mut ctx, a, b)?;
        Ok((ctx.value(out.refined).clone(), ctx.value(out.pre_gate).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize) -> (Ifr, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = Ifr::new(&mut ParamBuilder::new(&mut store, &mut rng), "ifr", c).unwrap();
        (m, store)
    }

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn channels_must_divide_into_groups() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(Ifr::new(&mut ParamBuilder::new(&mut store, &mut rng), "ifr", 6).is_err());
    }

    #[test]
    fn gate_attenuates_and_shape_is_preserved() {
        let (m, store) = build(8);
        let s = Shape::new(1, 8, 5, 4);
        let (out, f4) = m.apply_parts(&store, &random(s, 1), &random(s, 2)).unwrap();
        assert_eq!(out.shape(), s);
        for (r, p) in out.data().iter().zip(f4.data()) {
            assert!(r.abs() <= p.abs());
            if *p != 0.0 {
                assert!(r.abs() < p.abs());
            }
        }
    }

    #[test]
    fn equal_inputs_collapse_to_one_value() {
        let (m, store) = build(4);
        let s = Shape::new(1, 4, 3, 3);
        let a = m.apply(&store, &random(s, 3), &random(s, 3)).unwrap();
        let b = m.apply(&store, &random(s, 4), &random(s, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grouped_conv_keeps_groups_isolated() {
        // Zero input in one group gives zero pre-residual output for that
        // group under identity normalisation.
        let (m, store) = build(8);
        let mut x = random(Shape::new(1, 8, 4, 4), 9);
        for c in 2..4 {
            x.plane_mut(0, c).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.input(x);
        let y = m.grouped.forward_relu(&mut ctx, xv);
        let y = ctx.value(y);
        for c in 2..4 {
            assert!(y.plane(0, c).iter().all(|&v| v == 0.0));
        }
        assert!((0..2).chain(4..8).any(|c| y.plane(0, c).iter().any(|&v| v != 0.0)));
    }
}
