//! Image–text feature fusion through channel, spatial and pixel attention.
//!
//! ```text
//! TF   = t + f
//! CA   = sigmoid(Conv1(ReLU(Conv1(GAP(TF)))))          C → C/r → C
//! SA   = sigmoid(Conv7(Cat(mean_c(TF), max_c(TF))))    2 → 1
//! M    = CA ⊕ SA                                       broadcast to C×H×W
//! gate = sigmoid(Conv1(Cat(M, TF)))                    2C → C
//! out  = Conv3(TF ⊙ gate)
//! ```

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, Ctx, Mode};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct Itff {
    spatial: Conv2d,
    squeeze: Conv2d,
    excite: Conv2d,
    pixel: Conv2d,
    out: Conv2d,
    channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ItffOutput {
    pub fused: Var,
    /// Pixel-level attention map, `C×H×W`, in (0, 1).
    pub pixel_gate: Var,
    /// Sum of the broadcast channel gate and spatial map.
    pub combined: Var,
}

impl Itff {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        Self::with_options(pb, name, channels, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL)
    }

    pub fn with_options(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "ITFF needs channels divisible by the reduction {reduction}, got {channels}"
            )));
        }
        if spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd, got {spatial_kernel}"
            )));
        }
        let mut pb = pb.scope(name);
        let c = channels;
        Ok(Self {
            spatial: Conv2d::new(&mut pb, "spatial", 2, 1, ConvGeom::same(spatial_kernel)),
            squeeze: Conv2d::new(&mut pb, "squeeze", c, c / reduction, ConvGeom::pointwise()),
            excite: Conv2d::new(&mut pb, "excite", c / reduction, c, ConvGeom::pointwise()),
            pixel: Conv2d::new(&mut pb, "pixel", 2 * c, c, ConvGeom::pointwise()),
            out: Conv2d::new(&mut pb, "out", c, c, ConvGeom::same(3)),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-channel gate `(n, C, 1, 1)`.
    pub fn channel_attention(&self, ctx: &mut Ctx<'_>, tf: Var) -> Var {
        let pooled = ctx.tape.global_avg_pool(tf);
        let h = self.squeeze.forward(ctx, pooled);
        let h = ctx.tape.relu(h);
        let e = self.excite.forward(ctx, h);
        ctx.tape.sigmoid(e)
    }

    /// Spatial map `(n, 1, H, W)`.
    pub fn spatial_attention(&self, ctx: &mut Ctx<'_>, tf: Var) -> Var {
        let mean = ctx.tape.channel_mean(tf);
        let max = ctx.tape.channel_max(tf);
        let cat = ctx.tape.concat(mean, max);
        let s = self.spatial.forward(ctx, cat);
        ctx.tape.sigmoid(s)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, t: Var, f: Var) -> Result<Var> {
        Ok(self.forward_parts(ctx, t, f)?.fused)
    }

    pub fn forward_parts(&self, ctx: &mut Ctx<'_>, t: Var, f: Var) -> Result<ItffOutput> {
        let (st, sf) = (ctx.tape.shape(t), ctx.tape.shape(f));
        if st != sf {
            return Err(Error::Shape(format!("ITFF inputs differ: {st} vs {sf}")));
        }
        if st.c != self.channels {
            return Err(Error::Shape(format!(
                "ITFF built for {} channels, got {}",
                self.channels, st.c
            )));
        }
        let tf = ctx.tape.add(t, f);
        let ca = self.channel_attention(ctx, tf);
        let sa = self.spatial_attention(ctx, tf);
        let ca = ctx.tape.expand(ca, st);
        let sa = ctx.tape.expand(sa, st);
        let combined = ctx.tape.add(ca, sa);
        let cat = ctx.tape.concat(combined, tf);
        let logits = self.pixel.forward(ctx, cat);
        let pixel_gate = ctx.tape.sigmoid(logits);
        let p4 = ctx.tape.mul(tf, pixel_gate);
        let fused = self.out.forward(ctx, p4);
        Ok(ItffOutput {
            fused,
            pixel_gate,
            combined,
        })
    }

    pub fn apply(&self, store: &ParamStore, t: &Tensor, f: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (a, b) = (ctx.input(t.clone()), ctx.input(f.clone()));
        let y = self.forward(&mut ctx, a, b)?;
        Ok(ctx.value(y).clone())
    }

    /// Eval-mode attention maps for one input `tf`: the channel gate (length
    /// C), the spatial map broadcast to `C×H×W`, and the pixel gate.
    pub fn attention_maps(&self, store: &ParamStore, t: &Tensor, f: &Tensor) -> Result<AttentionMaps> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let (a, b) = (ctx.input(t.clone()), ctx.input(f.clone()));
        let parts = self.forward_parts(&mut ctx, a, b)?;
        let tf = ctx.tape.add(a, b);
        let ca = self.channel_attention(&mut ctx, tf);
        let sa = self.spatial_attention(&mut ctx, tf);
        let sa = ctx.tape.expand(sa, t.shape());
        Ok(AttentionMaps {
            channel: ctx.value(ca).data().to_vec(),
            spatial: ctx.value(sa).clone(),
            pixel: ctx.value(parts.pixel_gate).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub channel: Vec<f64>,
    pub spatial: Tensor,
    pub pixel: Tensor,
}
