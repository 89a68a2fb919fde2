//! Finite-difference verification of the analytic gradients.
//!
//! Each target builds a small graph, reduces its output to a scalar with a
//! fixed random weighting, and compares every (or a random subset of the)
//! input and parameter derivatives against central differences. Layers run
//! with batch normalisation in eval mode, using random running statistics,
//! so that the loss is a smooth function of each coordinate.
//!
//! Two effects make a raw finite difference unreliable, and both are
//! handled explicitly:
//!
//! * A `±ε` step can cross a ReLU or channel-max switch. The tape records
//!   every branch taken; a coordinate whose perturbed evaluations take a
//!   different branch than the base point is reported as skipped.
//! * Rounding in the forward pass adds noise proportional to the loss
//!   magnitude. The relative-error denominator is floored at
//!   `REL_ERR_FLOOR · max(1, Σ|w·y|)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{BnMode, Var};
use crate::error::{Error, Result};
use crate::ifr::Ifr;
use crate::itff::Itff;
use crate::kernels::attention::SoftmaxAxis;
use crate::kernels::conv::ConvGeom;
use crate::model::{AblationFlags, Fallback, MMChange, ModelConfig, ModelInput};
use crate::nn::{Conv2d, Ctx, Mode, BN_EPS};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tde::Tde;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of the relative error per unit of loss magnitude, so
/// that derivatives that are zero up to rounding are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Coordinates checked per target when the caller sets no limit.
pub const DEFAULT_MAX_COORDS: usize = 400;

/// Pass threshold for single layers and modules.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Pass threshold for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Softmax,
    Sdpa,
    BatchNorm,
    Upsample,
    GlobalAvgPool,
    Conv,
    Tde,
    Ifr,
    Itff,
    Fallback,
    Model,
}

impl Target {
    pub const PRIMITIVES: [Target; 6] = [
        Target::Softmax,
        Target::Sdpa,
        Target::BatchNorm,
        Target::Upsample,
        Target::GlobalAvgPool,
        Target::Conv,
    ];

    pub const ALL: [Target; 11] = [
        Target::Softmax,
        Target::Sdpa,
        Target::BatchNorm,
        Target::Upsample,
        Target::GlobalAvgPool,
        Target::Conv,
        Target::Tde,
        Target::Ifr,
        Target::Itff,
        Target::Fallback,
        Target::Model,
    ];

    pub fn tolerance(self) -> f64 {
        match self {
            Target::Model => MODEL_TOLERANCE,
            _ => LAYER_TOLERANCE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Softmax => "softmax",
            Target::Sdpa => "sdpa",
            Target::BatchNorm => "batch_norm",
            Target::Upsample => "upsample",
            Target::GlobalAvgPool => "global_avg_pool",
            Target::Conv => "conv",
            Target::Tde => "tde",
            Target::Ifr => "ifr",
            Target::Itff => "itff",
            Target::Fallback => "fallback",
            Target::Model => "model",
        }
    }

    /// Expands a selector: a target name, `primitives`, `modules` or `all`.
    pub fn select(selector: &str) -> Result<Vec<Target>> {
        match selector {
            "all" => Ok(Self::ALL.to_vec()),
            "primitives" => Ok(Self::PRIMITIVES.to_vec()),
            "modules" => Ok(vec![Target::Tde, Target::Ifr, Target::Itff, Target::Fallback]),
            one => Ok(vec![one.parse()?]),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck target `{s}`")))
    }
}

/// Feature-map size used by the layer targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            batch: 2,
            channels: 4,
            height: 4,
            width: 4,
        }
    }
}

impl FromStr for Dims {
    type Err = Error;

    /// `CxHxW` or `NxCxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("dims `{s}`: expected CxHxW or NxCxHxW")))?;
        let d = match parts[..] {
            [c, h, w] => Self {
                batch: 2,
                channels: c,
                height: h,
                width: w,
            },
            [n, c, h, w] => Self {
                batch: n,
                channels: c,
                height: h,
                width: w,
            },
            _ => return Err(Error::Config(format!("dims `{s}`: expected CxHxW or NxCxHxW"))),
        };
        if parts.contains(&0) {
            return Err(Error::Config(format!("dims `{s}` must be positive")));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub target: Target,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates whose `±ε` step crossed a non-differentiable point.
    pub skipped: usize,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} max_rel_err {:.3e}  ({} coords, {} skipped at kinks, worst {}: analytic {:.6e} numeric {:.6e})",
            self.target.name(),
            self.max_rel_err,
            self.checked,
            self.skipped,
            self.worst,
            self.analytic,
            self.numeric
        )
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'a> = Box<dyn Fn(&mut Ctx<'_>, &[Var]) -> Result<Var> + 'a>;

struct Problem<'a> {
    store: ParamStore,
    inputs: Vec<Tensor>,
    build: Build<'a>,
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Scrambles every parameter and buffer so that identity initialisations do
/// not hide errors: weights keep their scale, normalisation scales land in
/// `[0.5, 1.5]`, shifts and running means in `[-0.5, 0.5]` and running
/// variances in `[0.5, 1.5]`.
fn randomise(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (lo, hi) = if name.ends_with("running_var") || name.ends_with("bn.scale") {
            (0.5, 1.5)
        } else if name.ends_with("running_mean") || name.ends_with("bn.shift") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        let shape = store.get(id).shape();
        *store.get_mut(id) = random_tensor(rng, shape, lo, hi);
    }
}

impl Problem<'_> {
    /// Loss value and branch fingerprint.
    fn loss(&self, weights: &Tensor) -> Result<(f64, u64)> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let vars: Vec<Var> = self.inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
        let out = (self.build)(&mut ctx, &vars)?;
        let l = ctx.tape.weighted_sum(out, weights.clone());
        Ok((ctx.value(l).item(), ctx.tape.branch_signature()))
    }

    fn get(&self, c: Coord) -> f64 {
        match c {
            Coord::Input(t, i) => self.inputs[t].data()[i],
            Coord::Param(id, i) => self.store.get(id).data()[i],
        }
    }

    fn set(&mut self, c: Coord, v: f64) {
        match c {
            Coord::Input(t, i) => self.inputs[t].data_mut()[i] = v,
            Coord::Param(id, i) => self.store.get_mut(id).data_mut()[i] = v,
        }
    }

    fn label(&self, c: Coord) -> String {
        match c {
            Coord::Input(t, i) => format!("input{t}[{i}]"),
            Coord::Param(id, i) => format!("{}[{i}]", self.store.name(id)),
        }
    }

    fn run(mut self, target: Target, eps: f64, max_coords: usize, rng: &mut ChaCha8Rng) -> Result<Report> {
        // Analytic pass.
        let (weights, analytic, signature, floor) = {
            let mut ctx = Ctx::new(&self.store, Mode::Eval);
            let vars: Vec<Var> = self.inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
            let out = (self.build)(&mut ctx, &vars)?;
            let weights = random_tensor(rng, ctx.tape.shape(out), -1.0, 1.0);
            let magnitude: f64 = ctx.value(out).data().iter().zip(weights.data()).map(|(y, w)| (y * w).abs()).sum();
            let l = ctx.tape.weighted_sum(out, weights.clone());
            let signature = ctx.tape.branch_signature();
            let mut g = ctx.tape.backward(l);
            let mut analytic: Vec<(Coord, f64)> = Vec::new();
            for (t, v) in vars.iter().enumerate() {
                let n = self.inputs[t].data().len();
                let grad = g.take(*v).unwrap_or_else(|| Tensor::zeros(self.inputs[t].shape()));
                analytic.extend((0..n).map(|i| (Coord::Input(t, i), grad.data()[i])));
            }
            let mut params: Vec<(ParamId, Tensor)> = ctx.param_grads(&mut g);
            // Trainable parameters the graph never touched must have zero
            // gradient; include them so a missing edge shows up.
            for id in self.store.trainable() {
                if !params.iter().any(|(p, _)| *p == id) {
                    params.push((id, Tensor::zeros(self.store.get(id).shape())));
                }
            }
            for (id, grad) in params {
                analytic.extend(grad.data().iter().enumerate().map(|(i, g)| (Coord::Param(id, i), *g)));
            }
            (weights, analytic, signature, REL_ERR_FLOOR * magnitude.max(1.0))
        };
        let picked: Vec<usize> = if analytic.len() > max_coords {
            let mut idx = sample(rng, analytic.len(), max_coords).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..analytic.len()).collect()
        };
        let mut report = Report {
            target,
            max_rel_err: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in picked {
            let (coord, a) = analytic[k];
            let orig = self.get(coord);
            self.set(coord, orig + eps);
            let (up, sig_up) = self.loss(&weights)?;
            self.set(coord, orig - eps);
            let (down, sig_down) = self.loss(&weights)?;
            self.set(coord, orig);
            if sig_up != signature || sig_down != signature {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric, floor);
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = self.label(coord);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        Ok(report)
    }
}

fn layer_problem<'a>(target: Target, d: Dims, rng: &mut ChaCha8Rng) -> Result<Problem<'a>> {
    let mut store = ParamStore::new();
    let fmap = Shape::new(d.batch, d.channels, d.height, d.width);
    let two = |rng: &mut ChaCha8Rng| vec![random_tensor(rng, fmap, -1.0, 1.0), random_tensor(rng, fmap, -1.0, 1.0)];
    let problem = match target {
        Target::Softmax => Problem {
            store,
            inputs: vec![random_tensor(rng, fmap, -2.0, 2.0)],
            build: Box::new(|ctx, v| {
                let a = ctx.tape.softmax(v[0], SoftmaxAxis::Channel);
                let b = ctx.tape.softmax(v[0], SoftmaxAxis::Spatial);
                Ok(ctx.tape.add(a, b))
            }),
        },
        Target::Sdpa => Problem {
            store,
            inputs: vec![random_tensor(rng, fmap, -1.0, 1.0)],
            build: Box::new(|ctx, v| Ok(ctx.tape.sdpa(v[0]))),
        },
        Target::BatchNorm => {
            let c = Shape::new(1, d.channels, 1, 1);
            let mean: Vec<f64> = (0..d.channels).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..d.channels).map(|_| rng.random_range(0.5..1.5)).collect();
            Problem {
                store,
                inputs: vec![
                    random_tensor(rng, fmap, -1.0, 1.0),
                    random_tensor(rng, c, 0.5, 1.5),
                    random_tensor(rng, c, -0.5, 0.5),
                ],
                // Both the batch-statistics and running-statistics paths.
                build: Box::new(move |ctx, v| {
                    let (a, _) = ctx.tape.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: BN_EPS });
                    let (b, _) = ctx.tape.batch_norm(
                        v[0],
                        v[1],
                        v[2],
                        BnMode::Eval {
                            running_mean: &mean,
                            running_var: &var,
                            eps: BN_EPS,
                        },
                    );
                    let b = ctx.tape.scale(b, 0.5);
                    Ok(ctx.tape.add(a, b))
                }),
            }
        }
        Target::Upsample => {
            let (h, w) = (d.height * 2 + 1, d.width * 2);
            Problem {
                store,
                inputs: vec![random_tensor(rng, fmap, -1.0, 1.0)],
                build: Box::new(move |ctx, v| Ok(ctx.tape.upsample(v[0], h, w))),
            }
        }
        Target::GlobalAvgPool => Problem {
            store,
            inputs: vec![random_tensor(rng, fmap, -1.0, 1.0)],
            build: Box::new(|ctx, v| {
                let g = ctx.tape.global_avg_pool(v[0]);
                let m = ctx.tape.channel_mean(v[0]);
                let x = ctx.tape.channel_max(v[0]);
                let sum = ctx.tape.add(m, x);
                let shape = ctx.tape.shape(v[0]);
                let g = ctx.tape.expand(g, shape);
                let sum = ctx.tape.expand(sum, shape);
                Ok(ctx.tape.mul(g, sum))
            }),
        },
        Target::Conv => {
            let c = d.channels;
            let mut pb = ParamBuilder::new(&mut store, rng);
            let dense = Conv2d::new(&mut pb, "dense", c, c + 1, ConvGeom::same(3));
            let strided = Conv2d::new(&mut pb, "strided", c + 1, c, ConvGeom::strided(3, 2));
            let grouped_geom = ConvGeom {
                groups: if c % 2 == 0 { 2 } else { 1 },
                ..ConvGeom::same(3)
            };
            let grouped = Conv2d::new(&mut pb, "grouped", c, c, grouped_geom);
            Problem {
                store,
                inputs: vec![random_tensor(rng, fmap, -1.0, 1.0)],
                build: Box::new(move |ctx, v| {
                    let a = dense.forward(ctx, v[0]);
                    let a = strided.forward(ctx, a);
                    let b = grouped.forward(ctx, v[0]);
                    let s = ctx.tape.shape(b);
                    let a = ctx.tape.upsample(a, s.h, s.w);
                    Ok(ctx.tape.mul(a, b))
                }),
            }
        }
        Target::Tde => {
            let tde = Tde::new(&mut ParamBuilder::new(&mut store, rng), "tde", d.channels);
            randomise(&mut store, rng);
            Problem {
                store,
                inputs: two(rng),
                build: Box::new(move |ctx, v| tde.forward(ctx, v[0], v[1])),
            }
        }
        Target::Ifr => {
            let ifr = Ifr::new(&mut ParamBuilder::new(&mut store, rng), "ifr", d.channels)?;
            randomise(&mut store, rng);
            Problem {
                store,
                inputs: two(rng),
                build: Box::new(move |ctx, v| ifr.forward(ctx, v[0], v[1])),
            }
        }
        Target::Itff => {
            let itff = Itff::new(&mut ParamBuilder::new(&mut store, rng), "itff", d.channels)?;
            randomise(&mut store, rng);
            Problem {
                store,
                inputs: two(rng),
                build: Box::new(move |ctx, v| itff.forward(ctx, v[0], v[1])),
            }
        }
        Target::Fallback => {
            let fb = Fallback::new(&mut ParamBuilder::new(&mut store, rng), "fallback", d.channels);
            Problem {
                store,
                inputs: two(rng),
                build: Box::new(move |ctx, v| fb.forward(ctx, v[0], v[1])),
            }
        }
        Target::Model => unreachable!("model problems are built separately"),
    };
    Ok(problem)
}

/// Small full model: every module, one batch of two 32×32 pairs.
fn model_problem<'a>(seed: u64, rng: &mut ChaCha8Rng) -> Result<Problem<'a>> {
    let config = ModelConfig {
        widths: [8, 8, 8, 8],
        vocab: 32,
        text_dim: 4,
        flags: AblationFlags::FULL,
        ..ModelConfig::default()
    };
    let (model, mut store) = MMChange::new(config, seed)?;
    randomise(&mut store, rng);
    let shape = Shape::new(2, 3, 32, 32);
    let images_a = random_tensor(rng, shape, 0.0, 1.0);
    let images_b = random_tensor(rng, shape, 0.0, 1.0);
    let captions_a = vec!["These are 3 buildings and 1 road.".to_string(), "These are 2 trees.".to_string()];
    let captions_b = vec!["These are 2 buildings and 1 road.".to_string(), "These are 2 trees and 1 building.".to_string()];
    Ok(Problem {
        store,
        inputs: Vec::new(),
        build: Box::new(move |ctx, _| {
            let input = ModelInput {
                images_a: &images_a,
                images_b: &images_b,
                captions_a: &captions_a,
                captions_b: &captions_b,
            };
            Ok(model.forward(ctx, &input)?.logits)
        }),
    })
}

/// Checks one target. `max_coords` bounds the number of coordinates
/// compared (a seeded random subset when the target has more).
pub fn gradcheck(target: Target, dims: Dims, eps: f64, max_coords: usize, seed: u64) -> Result<Report> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = match target {
        Target::Model => model_problem(seed, &mut rng)?,
        t => {
            if matches!(t, Target::Ifr) && dims.channels % crate::ifr::IFR_GROUPS != 0 {
                return Err(Error::Config(format!(
                    "ifr gradcheck needs channels divisible by {}",
                    crate::ifr::IFR_GROUPS
                )));
            }
            layer_problem(t, dims, &mut rng)?
        }
    };
    problem.run(target, eps, max_coords, &mut rng)
}
