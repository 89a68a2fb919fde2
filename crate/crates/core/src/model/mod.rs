//! The full network: shared encoders, per-scale difference and fusion
//! modules, decoder, and the switches that replace modules with 1×1
//! fallbacks.

pub mod checkpoint;
pub mod decoder;
pub mod fallback;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::{level_dims, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::ifr::Ifr;
use crate::itff::{Itff, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::kernels::attention::SoftmaxAxis;
use crate::metrics::ChangeMask;
use crate::nn::{Ctx, Mode};
use crate::params::{ParamBuilder, ParamStore};
use crate::tde::Tde;
use crate::tensor::Tensor;

pub use self::checkpoint::{Checkpoint, LoadOptions};
pub use self::decoder::Decoder;
pub use self::fallback::Fallback;

/// Which modules are active. A disabled module is replaced by a
/// [`Fallback`]; with `use_text` off the text branch is dropped entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_ifr: bool,
    pub use_tde: bool,
    pub use_itff: bool,
    pub use_text: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self {
        use_ifr: true,
        use_tde: true,
        use_itff: true,
        use_text: true,
    };
    pub const IMAGE_ONLY: Self = Self {
        use_ifr: false,
        use_tde: false,
        use_itff: false,
        use_text: false,
    };
    /// Text encoder on, every module replaced by its fallback.
    pub const TEXT_FALLBACK: Self = Self {
        use_ifr: false,
        use_tde: false,
        use_itff: false,
        use_text: true,
    };
    pub const NO_IFR: Self = Self {
        use_ifr: false,
        ..Self::FULL
    };
    pub const NO_TDE: Self = Self {
        use_tde: false,
        ..Self::FULL
    };
    pub const NO_ITFF: Self = Self {
        use_itff: false,
        ..Self::FULL
    };

    /// The six rows of the module ablation table, baseline first.
    pub const TABLE: [Self; 6] = [
        Self::IMAGE_ONLY,
        Self::TEXT_FALLBACK,
        Self::NO_IFR,
        Self::NO_TDE,
        Self::NO_ITFF,
        Self::FULL,
    ];

    pub fn validate(&self) -> Result<()> {
        if !self.use_text && (self.use_tde || self.use_itff) {
            return Err(Error::Config(
                "TDE and ITFF operate on text features and need use_text".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match *self {
            Self::FULL => "full".into(),
            Self::IMAGE_ONLY => "image-only".into(),
            Self::TEXT_FALLBACK => "text-fallback".into(),
            Self::NO_IFR => "no-ifr".into(),
            Self::NO_TDE => "no-tde".into(),
            Self::NO_ITFF => "no-itff".into(),
            f => format!(
                "ifr{}-tde{}-itff{}-text{}",
                u8::from(f.use_ifr),
                u8::from(f.use_tde),
                u8::from(f.use_itff),
                u8::from(f.use_text)
            ),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::TABLE.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel widths of the four pyramid levels.
    pub widths: [usize; 4],
    pub vocab: usize,
    pub text_dim: usize,
    pub flags: AblationFlags,
    pub softmax_axis: SoftmaxAxis,
    pub itff_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            vocab: 512,
            text_dim: 32,
            flags: AblationFlags::FULL,
            softmax_axis: SoftmaxAxis::Channel,
            itff_reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.vocab < 2 || self.text_dim == 0 {
            return Err(Error::Config("vocab must be ≥ 2 and text_dim ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum ImageDiff {
    Ifr(Ifr),
    Fallback(Fallback),
}

#[derive(Clone, Debug)]
enum TextDiff {
    Tde(Tde),
    Fallback(Fallback),
}

#[derive(Clone, Debug)]
enum Fusion {
    Itff(Itff),
    Fallback(Fallback),
}

#[derive(Clone, Debug)]
struct Scale {
    image: ImageDiff,
    text: Option<TextDiff>,
    fusion: Option<Fusion>,
}

/// Images `(n, 3, H, W)` of both dates and, for text-enabled models, one
/// caption per image.
#[derive(Clone, Debug)]
pub struct ModelInput<'a> {
    pub images_a: &'a Tensor,
    pub images_b: &'a Tensor,
    pub captions_a: &'a [String],
    pub captions_b: &'a [String],
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `(n, 2, H, W)`; channel 0 no-change, channel 1 change.
    pub logits: Var,
    /// Pixel gate of the finest fusion module, when ITFF is active.
    pub pixel_gate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MMChange {
    config: ModelConfig,
    image: ImageEncoder,
    text: Option<TextEncoder>,
    scales: Vec<Scale>,
    decoder: Decoder,
}

impl MMChange {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let flags = config.flags;
        let w = config.widths;
        let image = ImageEncoder::new(&mut pb, w);
        let text = flags
            .use_text
            .then(|| TextEncoder::new(&mut pb, config.vocab, config.text_dim, w));
        let mut scales = Vec::with_capacity(4);
        for (l, &c) in w.iter().enumerate() {
            let mut pb = pb.scope(&format!("scale{}", l + 1));
            let image = if flags.use_ifr {
                ImageDiff::Ifr(Ifr::with_axis(&mut pb, "ifr", c, config.softmax_axis)?)
            } else {
                ImageDiff::Fallback(Fallback::temporal(&mut pb, "ifr_fallback", c))
            };
            let (text, fusion) = if flags.use_text {
                let text = if flags.use_tde {
                    TextDiff::Tde(Tde::new(&mut pb, "tde", c))
                } else {
                    TextDiff::Fallback(Fallback::temporal(&mut pb, "tde_fallback", c))
                };
                let fusion = if flags.use_itff {
                    Fusion::Itff(Itff::with_options(
                        &mut pb,
                        "itff",
                        c,
                        config.itff_reduction,
                        config.spatial_kernel,
                    )?)
                } else {
                    Fusion::Fallback(Fallback::new(&mut pb, "itff_fallback", c))
                };
                (Some(text), Some(fusion))
            } else {
                (None, None)
            };
            scales.push(Scale { image, text, fusion });
        }
        let decoder = Decoder::new(&mut pb, w);
        Ok((
            Self {
                config,
                image,
                text,
                scales,
                decoder,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.config.flags
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, input: &ModelInput<'_>) -> Result<ModelOutput> {
        let (sa, sb) = (input.images_a.shape(), input.images_b.shape());
        if sa != sb {
            return Err(Error::Shape(format!("image pair differs: {sa} vs {sb}")));
        }
        let n = sa.n;
        let (h, w) = (sa.h, sa.w);
        let both = Tensor::stack(&[input.images_a, input.images_b])?;
        let both = ctx.input(both);
        let pyramid = self.image.forward(ctx, both)?;

        let text = match &self.text {
            Some(enc) => {
                if input.captions_a.len() != n || input.captions_b.len() != n {
                    return Err(Error::MissingCaption(format!(
                        "text-enabled model needs {n} captions per date, got {} and {}",
                        input.captions_a.len(),
                        input.captions_b.len()
                    )));
                }
                let captions: Vec<&str> = input
                    .captions_a
                    .iter()
                    .chain(input.captions_b)
                    .map(String::as_str)
                    .collect();
                Some(enc.forward(ctx, &captions, h, w)?)
            }
            None => None,
        };

        let mut fused = Vec::with_capacity(4);
        let mut pixel_gate = None;
        for (l, scale) in self.scales.iter().enumerate() {
            let f1 = ctx.tape.slice_batch(pyramid[l], 0, n);
            let f2 = ctx.tape.slice_batch(pyramid[l], n, n);
            let f = match &scale.image {
                ImageDiff::Ifr(m) => m.forward(ctx, f1, f2)?,
                ImageDiff::Fallback(m) => m.forward(ctx, f1, f2)?,
            };
            let (Some(text), Some(tdiff), Some(fusion)) = (&text, &scale.text, &scale.fusion) else {
                fused.push(f);
                continue;
            };
            let t1 = ctx.tape.slice_batch(text[l], 0, n);
            let t2 = ctx.tape.slice_batch(text[l], n, n);
            let (lh, lw) = level_dims(h, w, l);
            let t = match tdiff {
                TextDiff::Tde(m) => m.forward_to(ctx, t1, t2, lh, lw)?,
                TextDiff::Fallback(m) => {
                    let t = m.forward(ctx, t1, t2)?;
                    ctx.tape.upsample(t, lh, lw)
                }
            };
            let out = match fusion {
                Fusion::Itff(m) => {
                    let parts = m.forward_parts(ctx, t, f)?;
                    if l == 0 {
                        pixel_gate = Some(parts.pixel_gate);
                    }
                    parts.fused
                }
                Fusion::Fallback(m) => m.forward(ctx, t, f)?,
            };
            fused.push(out);
        }
        let levels = [fused[0], fused[1], fused[2], fused[3]];
        let logits = self.decoder.forward(ctx, levels, h, w)?;
        Ok(ModelOutput { logits, pixel_gate })
    }

    /// Eval-mode logits.
    pub fn logits(&self, store: &ParamStore, input: &ModelInput<'_>) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let out = self.forward(&mut ctx, input)?;
        Ok(ctx.value(out.logits).clone())
    }

    /// Eval-mode logits and the finest-scale pixel gate (if ITFF is on).
    pub fn logits_and_gate(
        &self,
        store: &ParamStore,
        input: &ModelInput<'_>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let out = self.forward(&mut ctx, input)?;
        let gate = out.pixel_gate.map(|g| ctx.value(g).clone());
        Ok((ctx.value(out.logits).clone(), gate))
    }

    pub fn predict(&self, store: &ParamStore, input: &ModelInput<'_>) -> Result<Vec<ChangeMask>> {
        Ok(predict_mask(&self.logits(store, input)?))
    }
}

/// Per-pixel argmax over the two logit channels; ties go to no-change.
pub fn predict_mask(logits: &Tensor) -> Vec<ChangeMask> {
    let s = logits.shape();
    assert_eq!(s.c, 2, "predict_mask expects two logit channels");
    (0..s.n)
        .map(|n| {
            let (z0, z1) = (logits.plane(n, 0), logits.plane(n, 1));
            let data = z0.iter().zip(z1).map(|(a, b)| u8::from(b > a)).collect();
            ChangeMask::from_vec(s.h, s.w, data).expect("plane size matches")
        })
        .collect()
}
