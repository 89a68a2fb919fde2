use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, ConvBn, Ctx};
use crate::params::{ParamBuilder, ParamId, ParamKind};
use crate::tensor::{Shape, Tensor};

/// Initial scale of the logit head weights.
pub const HEAD_GAIN: f64 = 0.1;

/// Changed-pixel rate the head bias starts at. Change is rare, and with
/// Adam's bounded step size the class prior is otherwise slow to learn.
pub const CHANGE_PRIOR: f64 = 0.1;

/// Top-down merge of the fused pyramid followed by a two-logit head at
/// full input resolution.
///
/// For each level from the deepest up: project the deeper map 1×1 to the
/// shallower width, resize it to the shallower grid, add, and smooth with
/// a 3×3 conv block. Projection before resizing is equivalent to the
/// reverse order (both are linear per channel) and cheaper.
#[derive(Clone, Debug)]
pub struct Decoder {
    lateral: [Conv2d; 3],
    smooth: [ConvBn; 3],
    head: Conv2d,
    /// Per-class logit offset; nothing normalises after the head.
    head_bias: ParamId,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder<'_>, widths: [usize; 4]) -> Self {
        let mut pb = pb.scope("decoder");
        let lateral = std::array::from_fn(|l| {
            Conv2d::new(&mut pb, &format!("lateral{}", l + 1), widths[l + 1], widths[l], ConvGeom::pointwise())
        });
        let smooth = std::array::from_fn(|l| {
            ConvBn::new(&mut pb, &format!("smooth{}", l + 1), widths[l], widths[l], ConvGeom::same(3))
        });
        let head = Conv2d::with_gain(&mut pb, "head", widths[0], 2, ConvGeom::pointwise(), HEAD_GAIN);
        let odds = (CHANGE_PRIOR / (1.0 - CHANGE_PRIOR)).ln();
        let bias = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, odds]).expect("two entries");
        let head_bias = pb.add("head_bias", bias, ParamKind::Trainable);
        Self {
            lateral,
            smooth,
            head,
            head_bias,
        }
    }

    /// `levels` at strides 4/8/16/32 of an `h×w` input; returns `(n, 2, h, w)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, levels: [Var; 4], h: usize, w: usize) -> Result<Var> {
        let mut p = levels[3];
        for l in (0..3).rev() {
            let target = ctx.tape.shape(levels[l]);
            let proj = self.lateral[l].forward(ctx, p);
            let ps = ctx.tape.shape(proj);
            if ps.c != target.c || ps.n != target.n {
                return Err(Error::Shape(format!("decoder level {l}: {ps} vs {target}")));
            }
            let up = ctx.tape.upsample(proj, target.h, target.w);
            let sum = ctx.tape.add(up, levels[l]);
            p = self.smooth[l].forward_relu(ctx, sum);
        }
        let logits = self.head.forward(ctx, p);
        let b = ctx.param(self.head_bias);
        let b = ctx.tape.expand(b, ctx.tape.shape(logits));
        let logits = ctx.tape.add(logits, b);
        Ok(ctx.tape.upsample(logits, h, w))
    }
}
