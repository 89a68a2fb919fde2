//! Hash-embedding text encoder.
//!
//! Tokens are lowercased alphanumeric runs hashed with 64-bit FNV-1a into
//! `vocab - 1` buckets (id 0 is reserved for the empty caption). A caption
//! embeds as the mean of its token rows; each pyramid level projects that
//! vector to its channel width and tiles it over the level's text grid.

use super::text_grid_dims;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::nn::{Conv2d, Ctx, Mode};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Token id emitted for a caption with no alphanumeric content.
pub const EMPTY_TOKEN: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Splits on non-alphanumerics, lowercases and hashes into `1..vocab`.
pub fn tokenize(caption: &str, vocab: usize) -> Vec<u32> {
    assert!(vocab >= 2, "vocabulary needs at least one non-reserved bucket");
    let buckets = (vocab - 1) as u64;
    let ids: Vec<u32> = caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| 1 + (fnv1a64(t.to_lowercase().as_bytes()) % buckets) as u32)
        .collect();
    if ids.is_empty() {
        vec![EMPTY_TOKEN]
    } else {
        ids
    }
}

/// Text features for the four pyramid levels of one caption.
pub type TextPyramid = [Tensor; 4];

#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: ParamId,
    projections: [Conv2d; 4],
    vocab: usize,
    dim: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, vocab: usize, dim: usize, widths: [usize; 4]) -> Self {
        let mut pb = pb.scope("text_encoder");
        let embedding = pb.uniform("embedding", Shape::new(vocab, dim, 1, 1), 3f64.sqrt());
        let projections = std::array::from_fn(|i| {
            Conv2d::new(&mut pb, &format!("proj{}", i + 1), dim, widths[i], ConvGeom::pointwise())
        });
        Self {
            embedding,
            projections,
            vocab,
            dim,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-level text maps for a batch of captions, tiled over the text grid
    /// of an `image_h×image_w` input.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        captions: &[&str],
        image_h: usize,
        image_w: usize,
    ) -> Result<[Var; 4]> {
        if captions.is_empty() {
            return Err(Error::Shape("text encoder needs at least one caption".into()));
        }
        // Sorted so the pooled sum is bit-identical under word reordering.
        let ids = captions
            .iter()
            .map(|c| {
                let mut ids = tokenize(c, self.vocab);
                ids.sort_unstable();
                ids
            })
            .collect();
        let table = ctx.param(self.embedding);
        let pooled = ctx.tape.embedding_mean(table, ids);
        let n = captions.len();
        let mut out = Vec::with_capacity(4);
        for (level, proj) in self.projections.iter().enumerate() {
            let v = proj.forward(ctx, pooled);
            let (h, w) = text_grid_dims(image_h, image_w, level);
            out.push(ctx.tape.expand(v, Shape::new(n, proj.out_channels, h, w)));
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        caption: &str,
        image_h: usize,
        image_w: usize,
    ) -> Result<TextPyramid> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let levels = self.forward(&mut ctx, &[caption], image_h, image_w)?;
        Ok(levels.map(|v| ctx.value(v).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenize_contract() {
        let a = tokenize("These are buildings", 1024);
        assert_eq!(a.len(), 3);
        assert_eq!(a, tokenize("These are buildings", 1024));
        assert_eq!(a, tokenize("THESE, are... BuIlDiNgS!", 1024));
        assert_eq!(tokenize("", 1024), vec![EMPTY_TOKEN]);
        assert_eq!(tokenize(" .,;", 1024), vec![EMPTY_TOKEN]);
        assert!(a.iter().all(|&id| id >= 1 && id < 1024));
    }

    fn encoder() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), 256, 8, [4, 8, 8, 16]);
        (enc, store)
    }

    #[test]
    fn pyramid_is_tiled_and_order_invariant() {
        let (enc, store) = encoder();
        let a = enc.encode(&store, "These are 3 buildings and 2 roads", 64, 64).unwrap();
        let b = enc.encode(&store, "roads 2 and buildings 3 are These", 64, 64).unwrap();
        assert_eq!(a, b);
        let dims: Vec<_> = a.iter().map(|t| t.shape()).collect();
        assert_eq!(
            dims,
            vec![
                Shape::new(1, 4, 8, 8),
                Shape::new(1, 8, 4, 4),
                Shape::new(1, 8, 2, 2),
                Shape::new(1, 16, 1, 1)
            ]
        );
        for level in &a {
            for c in 0..level.shape().c {
                let p = level.plane(0, c);
                assert!(p.iter().all(|&v| v == p[0]));
            }
        }
        let c = enc.encode(&store, "These are 4 buildings", 64, 64).unwrap();
        assert_ne!(a, c);
    }
}
