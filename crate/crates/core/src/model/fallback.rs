use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, Ctx, Mode};
use crate::params::{ParamBuilder, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Stand-in for a disabled module: `Conv1×1(a) + Conv1×1(b)`.
#[derive(Clone, Debug)]
pub struct Fallback {
    pub left: Conv2d,
    pub right: Conv2d,
    channels: usize,
}

impl Fallback {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            left: Conv2d::new(&mut pb, "left", channels, channels, ConvGeom::pointwise()),
            right: Conv2d::new(&mut pb, "right", channels, channels, ConvGeom::pointwise()),
            channels,
        }
    }

    /// Fallback over the two dates of one modality, initialised as a
    /// difference: `right = −left`, so the output starts as `W·(a − b)`.
    /// Both kernels train independently afterwards.
    pub fn temporal(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let left = Conv2d::new(&mut pb, "left", channels, channels, ConvGeom::pointwise());
        let negated = pb.value(left.weight).scale(-1.0);
        let right = Conv2d {
            weight: pb.add("right", negated, ParamKind::Trainable),
            ..left.clone()
        };
        Self { left, right, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (ctx.tape.shape(a), ctx.tape.shape(b));
        if sa != sb || sa.c != self.channels {
            return Err(Error::Shape(format!(
                "fallback over {} channels got {sa} and {sb}",
                self.channels
            )));
        }
        let l = self.left.forward(ctx, a);
        let r = self.right.forward(ctx, b);
        Ok(ctx.tape.add(l, r))
    }

    pub fn apply(&self, store: &ParamStore, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (va, vb) = (ctx.input(a.clone()), ctx.input(b.clone()));
        let y = self.forward(&mut ctx, va, vb)?;
        Ok(ctx.value(y).clone())
    }

    /// Overwrites both kernels with the identity, so the output is `a + b`.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let c = self.channels;
        let eye = Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| f64::from(u8::from(o == i)));
        *store.get_mut(self.left.weight) = eye.clone();
        *store.get_mut(self.right.weight) = eye;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernels_add_and_zero_stays_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fb = Fallback::new(&mut ParamBuilder::new(&mut store, &mut rng), "fb", 3);
        let s = Shape::new(1, 3, 4, 5);
        let zero = fb.apply(&store, &Tensor::zeros(s), &Tensor::zeros(s)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        fb.set_identity(&mut store);
        let a = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0));
        let y = fb.apply(&store, &a, &b).unwrap();
        assert!(y.max_abs_diff(&a.add(&b).unwrap()) < 1e-15);
        assert!(fb.apply(&store, &a, &Tensor::zeros(Shape::new(1, 3, 4, 4))).is_err());
    }
}
