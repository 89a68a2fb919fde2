//! Training-time augmentation: joint flips, crop-and-resize, temporal swap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BiTemporalSample;
use crate::error::{Error, Result};
use crate::kernels::resample::{resize_nearest_index, upsample_bilinear};
use crate::metrics::ChangeMask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Side of the random square crop, resized back to the input size.
    pub crop_size: Option<usize>,
    pub crop_prob: f64,
    pub swap_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_size: None,
            crop_prob: 0.5,
            swap_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        flip_prob: 0.0,
        crop_size: None,
        crop_prob: 0.0,
        swap_prob: 0.0,
    };
}

pub fn flip_image(img: &Tensor, horizontal: bool) -> Tensor {
    let s = img.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        if horizontal {
            img.at(n, c, y, s.w - 1 - x)
        } else {
            img.at(n, c, s.h - 1 - y, x)
        }
    })
}

pub fn flip_mask(m: &ChangeMask, horizontal: bool) -> ChangeMask {
    let (h, w) = (m.height(), m.width());
    ChangeMask::from_fn(h, w, |y, x| {
        if horizontal {
            m.get(y, w - 1 - x)
        } else {
            m.get(h - 1 - y, x)
        }
    })
}

fn crop_image(img: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let s = img.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, size, size), |n, c, y, x| img.at(n, c, y0 + y, x0 + x))
}

/// Crops a `size` square at `(y0, x0)` and resizes it back to the original
/// grid: bilinear for images, nearest for the mask.
pub fn crop_resize(sample: &BiTemporalSample, y0: usize, x0: usize, size: usize) -> Result<BiTemporalSample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || y0 + size > h || x0 + size > w {
        return Err(Error::Config(format!(
            "crop {size} at ({y0}, {x0}) does not fit a {h}x{w} image"
        )));
    }
    let resize = |img: &Tensor| upsample_bilinear(&crop_image(img, y0, x0, size), h, w);
    let rows = resize_nearest_index(size, h);
    let cols = resize_nearest_index(size, w);
    let mask = ChangeMask::from_fn(h, w, |y, x| sample.mask.get(y0 + rows[y], x0 + cols[x]));
    Ok(BiTemporalSample {
        id: sample.id.clone(),
        image_a: resize(&sample.image_a),
        image_b: resize(&sample.image_b),
        caption_a: sample.caption_a.clone(),
        caption_b: sample.caption_b.clone(),
        mask,
    })
}

/// Exchanges the two dates; the change mask is symmetric in time.
pub fn temporal_swap(sample: &BiTemporalSample) -> BiTemporalSample {
    BiTemporalSample {
        id: sample.id.clone(),
        image_a: sample.image_b.clone(),
        image_b: sample.image_a.clone(),
        caption_a: sample.caption_b.clone(),
        caption_b: sample.caption_a.clone(),
        mask: sample.mask.clone(),
    }
}

/// Applies each augmentation with its own coin flip, in the order
/// horizontal flip, vertical flip, crop, swap. Every geometric step acts on
/// both images and the mask alike.
pub fn augment(sample: &BiTemporalSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<BiTemporalSample> {
    if let Some(c) = cfg.crop_size {
        if c > sample.height() || c > sample.width() {
            return Err(Error::Config(format!(
                "crop size {c} larger than {}x{} image",
                sample.height(),
                sample.width()
            )));
        }
    }
    let mut s = sample.clone();
    for horizontal in [true, false] {
        if rng.random_bool(cfg.flip_prob) {
            s.image_a = flip_image(&s.image_a, horizontal);
            s.image_b = flip_image(&s.image_b, horizontal);
            s.mask = flip_mask(&s.mask, horizontal);
        }
    }
    if let Some(c) = cfg.crop_size {
        if rng.random_bool(cfg.crop_prob) {
            let y0 = rng.random_range(0..=s.height() - c);
            let x0 = rng.random_range(0..=s.width() - c);
            s = crop_resize(&s, y0, x0, c)?;
        }
    }
    if rng.random_bool(cfg.swap_prob) {
        s = temporal_swap(&s);
    }
    Ok(s)
}
