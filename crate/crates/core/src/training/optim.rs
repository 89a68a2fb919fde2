//! Adam with bias correction and optional decoupled weight decay, plus the
//! polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `true`: subtract `lr·wd·θ` after the Adam update. `false`: add
    /// `wd·θ` to the gradient before the moment updates.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Moment estimates indexed by parameter position, plus the step count used
/// for bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn get(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    fn slot(&mut self, id: ParamId, like: &Tensor) -> &mut Moments {
        let i = id.index();
        if self.moments.len() <= i {
            self.moments.resize(i + 1, None);
        }
        self.moments[i].get_or_insert_with(|| Moments {
            m: Tensor::zeros(like.shape()),
            v: Tensor::zeros(like.shape()),
        })
    }
}

/// `lr0 · (1 − step/max)^power`, with steps past `max` clamped to 0.
pub fn poly_lr(step: u64, max_iteration: u64, lr0: f64, power: f64) -> f64 {
    if max_iteration == 0 || step >= max_iteration {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / max_iteration as f64).powf(power)
}

/// One Adam update of every parameter listed in `grads`. Nothing is
/// modified if any gradient is non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in grads {
        let bad = g.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteGradient {
                name: store.name(*id).to_string(),
                count: bad,
            });
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Shape(format!(
                "gradient {} does not match parameter `{}` {}",
                g.shape(),
                store.name(*id),
                store.get(*id).shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let wd = cfg.weight_decay;
    for (id, g) in grads {
        let p = store.get_mut(*id);
        let mo = state.slot(*id, p);
        let params = p.data_mut();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for i in 0..params.len() {
            let theta = params[i];
            let gi = if cfg.decoupled { g.data()[i] } else { g.data()[i] + wd * theta };
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let mut next = theta - lr * mhat / (vhat.sqrt() + cfg.eps);
            if cfg.decoupled {
                next -= lr * wd * theta;
            }
            params[i] = next;
        }
    }
    Ok(())
}
