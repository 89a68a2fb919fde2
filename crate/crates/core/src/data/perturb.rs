//! Test-time noise and illumination changes. Labels and captions are
//! never touched.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::BiTemporalSample;
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const DEFAULT_BRIGHTNESS: f64 = 0.2;
pub const DEFAULT_CONTRAST: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Added after the contrast stretch.
    pub brightness: f64,
    /// Contrast stretch about mid-grey.
    pub contrast: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Perturbation {
    pub const IDENTITY: Self = Self {
        noise_sigma: 0.0,
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Noise first (clipped), then `clip(contrast·(x − 0.5) + 0.5 + brightness)`.
pub fn perturb_image(img: &Tensor, p: &Perturbation, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(p.noise_sigma >= 0.0, "noise sigma must be non-negative");
    let mut out = img.clone();
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("valid sigma");
        for v in out.data_mut() {
            *v = (*v + rng.sample(normal)).clamp(0.0, 1.0);
        }
    }
    if p.contrast != 1.0 || p.brightness != 0.0 {
        for v in out.data_mut() {
            *v = (p.contrast * (*v - 0.5) + 0.5 + p.brightness).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn perturb(sample: &BiTemporalSample, p: &Perturbation, rng: &mut ChaCha8Rng) -> BiTemporalSample {
    BiTemporalSample {
        image_a: perturb_image(&sample.image_a, p, rng),
        image_b: perturb_image(&sample.image_b, p, rng),
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    #[test]
    fn identity_leaves_sample_unchanged() {
        let (s, _) = generate_sample(5, 0, 32).unwrap();
        let out = perturb(&s, &Perturbation::IDENTITY, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, s);
    }

    #[test]
    fn brightness_shifts_mean() {
        let img = Tensor::full(Shape::new(1, 3, 8, 8), 0.4);
        let p = Perturbation {
            brightness: 0.2,
            ..Perturbation::IDENTITY
        };
        let out = perturb_image(&img, &p, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((out.mean() - img.mean() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn mask_and_captions_survive_any_perturbation() {
        let (s, _) = generate_sample(5, 1, 32).unwrap();
        let p = Perturbation {
            noise_sigma: 0.3,
            brightness: -0.4,
            contrast: 2.5,
        };
        let out = perturb(&s, &p, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(out.mask, s.mask);
        assert_eq!((out.caption_a.as_str(), out.caption_b.as_str()), (s.caption_a.as_str(), s.caption_b.as_str()));
        assert!(out.image_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out.image_a, s.image_a);
    }
}
