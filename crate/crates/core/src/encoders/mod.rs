//! Image and text encoders, caption files and the external captioner client.

pub mod captioner;
pub mod captions;
pub mod image;
pub mod text;

use crate::tensor::Tensor;

/// Output strides of the four pyramid levels, relative to the input image.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Four feature maps at strides 4/8/16/32 produced from one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn strides(&self) -> [usize; 4] {
        STRIDES
    }
}

/// Spatial size of pyramid level `level` for an `h×w` input.
pub fn level_dims(h: usize, w: usize, level: usize) -> (usize, usize) {
    let s = STRIDES[level];
    (h.div_ceil(s), w.div_ceil(s))
}

/// Grid the text features of a level are tiled over: half the level
/// resolution (rounded up), so the difference module's 2× upsample meets
/// the image grid.
pub fn text_grid_dims(h: usize, w: usize, level: usize) -> (usize, usize) {
    let (lh, lw) = level_dims(h, w, level);
    (lh.div_ceil(2), lw.div_ceil(2))
}

pub use self::image::ImageEncoder;
pub use self::text::{tokenize, TextEncoder, TextPyramid, EMPTY_TOKEN};
