//! Reduced-width residual image encoder.
//!
//! Stem of two stride-2 3×3 convolutions (stride 4), then four basic
//! residual stages; stages 2–4 halve the resolution. Weights are shared
//! between the two temporal images.

use super::{level_dims, FeaturePyramid};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{ConvBn, Ctx, Mode};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut pb = pb.scope(name);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let geom = ConvGeom {
                kernel: 1,
                stride,
                pad: 0,
                groups: 1,
            };
            ConvBn::new(&mut pb, "shortcut", cin, cout, geom)
        });
        Self {
            conv1: ConvBn::new(&mut pb, "conv1", cin, cout, ConvGeom::strided(3, stride)),
            conv2: ConvBn::new(&mut pb, "conv2", cout, cout, ConvGeom::same(3)),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let h = self.conv1.forward_relu(ctx, x);
        let h = self.conv2.forward(ctx, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        let sum = ctx.tape.add(h, skip);
        ctx.tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stem1: ConvBn,
    stem2: ConvBn,
    stages: [BasicBlock; 4],
    widths: [usize; 4],
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, widths: [usize; 4]) -> Self {
        let mut pb = pb.scope("image_encoder");
        let w = widths;
        Self {
            stem1: ConvBn::new(&mut pb, "stem1", 3, w[0], ConvGeom::strided(3, 2)),
            stem2: ConvBn::new(&mut pb, "stem2", w[0], w[0], ConvGeom::strided(3, 2)),
            stages: [
                BasicBlock::new(&mut pb, "stage1", w[0], w[0], 1),
                BasicBlock::new(&mut pb, "stage2", w[0], w[1], 2),
                BasicBlock::new(&mut pb, "stage3", w[1], w[2], 2),
                BasicBlock::new(&mut pb, "stage4", w[2], w[3], 2),
            ],
            widths,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// `images` is `(n, 3, H, W)` with `H` and `W` divisible by 32.
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<[Var; 4]> {
        let s = ctx.tape.shape(images);
        check_input(s.c, s.h, s.w)?;
        let x = self.stem1.forward_relu(ctx, images);
        let x = self.stem2.forward_relu(ctx, x);
        let f1 = self.stages[0].forward(ctx, x);
        let f2 = self.stages[1].forward(ctx, f1);
        let f3 = self.stages[2].forward(ctx, f2);
        let f4 = self.stages[3].forward(ctx, f3);
        let out = [f1, f2, f3, f4];
        for (i, v) in out.iter().enumerate() {
            debug_assert_eq!(
                (ctx.tape.shape(*v).h, ctx.tape.shape(*v).w),
                level_dims(s.h, s.w, i)
            );
        }
        Ok(out)
    }

    /// Eval-mode pyramid of a single `1×3×H×W` image.
    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.input(image.clone());
        let levels = self.forward(&mut ctx, x)?;
        Ok(FeaturePyramid {
            levels: levels.map(|v| ctx.value(v).clone()),
        })
    }
}

fn check_input(c: usize, h: usize, w: usize) -> Result<()> {
    if c != 3 {
        return Err(Error::Shape(format!("image encoder expects 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "image dims {h}x{w} must be positive multiples of 32"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder(widths: [usize; 4]) -> (ImageEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), widths);
        (enc, store)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random())
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let (enc, store) = encoder([16, 32, 64, 128]);
        let p = enc.encode(&store, &image(64, 64, 1)).unwrap();
        let got: Vec<_> = p.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(
            got,
            vec![
                Shape::new(1, 16, 16, 16),
                Shape::new(1, 32, 8, 8),
                Shape::new(1, 64, 4, 4),
                Shape::new(1, 128, 2, 2)
            ]
        );
    }

    #[test]
    fn deterministic_and_rejects_bad_dims() {
        let (enc, store) = encoder([4, 4, 8, 8]);
        let img = image(32, 64, 2);
        assert_eq!(enc.encode(&store, &img).unwrap(), enc.encode(&store, &img).unwrap());
        assert!(enc.encode(&store, &image(48, 64, 2)).is_err());
    }
}
