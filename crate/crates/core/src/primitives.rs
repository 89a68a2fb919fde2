//! Eager versions of the shared differentiable primitives.
//!
//! The same kernels back the tape operations in [`crate::autograd`]; these
//! wrappers exist for direct use on feature maps outside a training pass.

use crate::error::{Error, Result};
use crate::kernels::{attention, norm, resample};
use crate::nn::{Mode, BN_EPS, BN_MOMENTUM};
use crate::tensor::{FeatureMap, Tensor};

pub use crate::kernels::attention::SoftmaxAxis;

pub fn softmax(x: &FeatureMap, axis: SoftmaxAxis) -> FeatureMap {
    attention::softmax(x, axis)
}

/// Single-head self-attention with spatial positions as tokens.
pub fn sdpa(x: &FeatureMap) -> FeatureMap {
    attention::sdpa(x).0
}

pub fn upsample(x: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    let s = x.shape();
    if target_h < s.h || target_w < s.w {
        return Err(Error::Shape(format!(
            "upsample target {target_h}x{target_w} is smaller than source {}x{}",
            s.h, s.w
        )));
    }
    Ok(resample::upsample_bilinear(x, target_h, target_w))
}

/// Spatial mean per channel of the first batch entry.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    resample::global_avg_pool(&x.sample(0)).into_vec()
}

/// Normalisation layer state for eager use.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayerState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mode: Mode,
    pub eps: f64,
    pub momentum: f64,
}

impl NormLayerState {
    pub fn identity(channels: usize, mode: Mode) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            mode,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Normalises `x`; in train mode the running statistics are updated.
pub fn batch_norm(x: &Tensor, state: &mut NormLayerState) -> Result<Tensor> {
    let s = x.shape();
    if state.scale.len() != s.c {
        return Err(Error::Shape(format!(
            "norm state has {} channels, input has {}",
            state.scale.len(),
            s.c
        )));
    }
    match state.mode {
        Mode::Train => {
            let count = s.n * s.hw();
            if count < 2 {
                return Err(Error::Shape(
                    "train-mode normalisation needs at least 2 elements per channel".into(),
                ));
            }
            let fwd = norm::batch_norm_train(x, &state.scale, &state.shift, state.eps);
            let m = state.momentum;
            let corr = count as f64 / (count - 1) as f64;
            for c in 0..s.c {
                state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * fwd.mean[c];
                state.running_var[c] = (1.0 - m) * state.running_var[c] + m * fwd.var[c] * corr;
            }
            Ok(fwd.y)
        }
        Mode::Eval => Ok(norm::batch_norm_eval(
            x,
            &state.scale,
            &state.shift,
            &state.running_mean,
            &state.running_var,
            state.eps,
        )
        .y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax(&Tensor::zeros(Shape::new(1, 4, 3, 3)), SoftmaxAxis::Channel);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_saturates_to_one_hot() {
        let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| if c == 1 { 1e3 } else { 0.0 });
        let y = softmax(&x, SoftmaxAxis::Channel);
        for (i, v) in y.data().iter().enumerate() {
            let expect = if i / 4 == 1 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let x = random(Shape::new(1, 3, 2, 2), 1);
        let yc = softmax(&x, SoftmaxAxis::Channel);
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| yc.plane(0, c)[p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let ys = softmax(&x, SoftmaxAxis::Spatial);
        for c in 0..3 {
            assert!((ys.plane(0, c).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sdpa_of_zeros_is_zero() {
        let y = sdpa(&Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sdpa_matches_explicit_four_token_attention() {
        // C = 2, four tokens, only token 2 nonzero: v = (1, 2).
        let mut x = Tensor::zeros(Shape::new(1, 2, 2, 2));
        x.set(0, 0, 1, 0, 1.0);
        x.set(0, 1, 1, 0, 2.0);
        let y = sdpa(&x);
        // Scores s_ij = <x_i, x_j> / sqrt(2): token 2 scores itself 5/sqrt(2),
        // every other pair scores 0.
        let s = 5.0 / 2f64.sqrt();
        let self_w = s.exp() / (s.exp() + 3.0);
        // Rows of zero tokens attend uniformly: 1/4 weight on token 2.
        for t in 0..4 {
            let w = if t == 2 { self_w } else { 0.25 };
            let (yy, xx) = (t / 2, t % 2);
            assert!((y.at(0, 0, yy, xx) - w * 1.0).abs() < 1e-12);
            assert!((y.at(0, 1, yy, xx) - w * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sdpa_is_permutation_equivariant() {
        let x = random(Shape::new(1, 3, 2, 3), 7);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permute = |t: &Tensor| {
            Tensor::from_fn(t.shape(), |_, c, y, xx| {
                let src = perm[y * 3 + xx];
                t.at(0, c, src / 3, src % 3)
            })
        };
        let a = permute(&sdpa(&x));
        let b = sdpa(&permute(&x));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn eval_identity_norm_maps_zero_to_zero() {
        let mut st = NormLayerState::identity(3, Mode::Eval);
        let y = batch_norm(&Tensor::zeros(Shape::new(1, 3, 2, 2)), &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = random(Shape::new(1, 3, 2, 2), 3);
        let y = batch_norm(&x, &mut st).unwrap();
        // Identity up to the epsilon floor: x / sqrt(1 + eps).
        assert!(y.max_abs_diff(&x) < 2.0 * 1e-5);
    }

    #[test]
    fn train_norm_of_constant_returns_shift() {
        let mut st = NormLayerState::identity(2, Mode::Train);
        st.shift = vec![0.3, -1.2];
        let y = batch_norm(&Tensor::full(Shape::new(2, 2, 3, 3), 4.0), &mut st).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.3));
        assert!(y.plane(1, 1).iter().all(|&v| v == -1.2));
    }

    #[test]
    fn train_norm_output_moments_follow_scale_and_shift() {
        let mut st = NormLayerState::identity(2, Mode::Train);
        st.scale = vec![2.0, 0.5];
        st.shift = vec![1.0, -3.0];
        let x = random(Shape::new(4, 2, 5, 5), 11);
        let y = batch_norm(&x, &mut st).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - st.shift[c]).abs() < 1e-4);
            assert!((var - st.scale[c].powi(2)).abs() < 1e-4);
        }
        // Running stats moved off their identity values.
        assert!(st.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn upsample_contracts() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 3.0);
        let y = upsample(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
        let r = random(Shape::new(1, 2, 3, 3), 5);
        assert_eq!(upsample(&r, 3, 3).unwrap(), r);
        assert!(upsample(&r, 2, 3).is_err());
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x), vec![2.5]);
        assert_eq!(global_avg_pool(&Tensor::full(Shape::new(1, 3, 4, 4), 7.0)), vec![7.0; 3]);
        let r = random(Shape::new(1, 3, 3, 3), 2);
        let a = global_avg_pool(&r.scale(-2.5));
        let b = global_avg_pool(&r);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - (-2.5) * q).abs() < 1e-12);
        }
    }
}
