//! Forward context and the basic trainable layers.

use std::collections::HashMap;

use crate::autograd::{BnMode, Gradients, Tape, Var};
use crate::kernels::conv::ConvGeom;
use crate::params::{ParamBuilder, ParamId, ParamKind, ParamStore, StatUpdate};
use crate::tensor::{Shape, Tensor};

/// Train mode normalises with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape plus the parameters bound into it.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    bound: HashMap<ParamId, Var>,
    stats: Vec<StatUpdate>,
    /// Named intermediate values exported for inspection (e.g. heatmaps).
    probes: Vec<(String, Var)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bound: HashMap::new(),
            stats: Vec::new(),
            probes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Binds a stored parameter as a differentiable leaf (once per pass).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), true);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn probe(&mut self, name: impl Into<String>, v: Var) {
        self.probes.push((name.into(), v));
    }

    pub fn probe_value(&self, name: &str) -> Option<&Tensor> {
        self.probes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.tape.value(*v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Extracts the gradient of every bound parameter.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(id, v)| grads.take(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self::with_gain(pb, name, cin, cout, geom, 1.0)
    }

    pub fn with_gain(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        gain: f64,
    ) -> Self {
        assert_eq!(cin % geom.groups, 0);
        assert_eq!(cout % geom.groups, 0);
        let per_group = cin / geom.groups;
        let shape = Shape::new(cout, per_group, geom.kernel, geom.kernel);
        let fan_in = per_group * geom.kernel * geom.kernel;
        let weight = pb.uniform_fan_in(name, shape, fan_in, gain);
        Self {
            weight,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.geom)
    }
}

/// Per-channel normalisation with learnable scale/shift and running stats.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    /// Identity-initialised: scale 1, shift 0, running mean 0, running var 1.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let s = Shape::new(1, channels, 1, 1);
        Self {
            scale: pb.add("scale", Tensor::full(s, 1.0), ParamKind::Trainable),
            shift: pb.add("shift", Tensor::zeros(s), ParamKind::Trainable),
            running_mean: pb.add("running_mean", Tensor::zeros(s), ParamKind::Buffer),
            running_var: pb.add("running_var", Tensor::full(s, 1.0), ParamKind::Buffer),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let gamma = ctx.param(self.scale);
        let beta = ctx.param(self.shift);
        let store = ctx.store;
        let mode = match ctx.mode {
            Mode::Train => BnMode::Train { eps: self.eps },
            Mode::Eval => BnMode::Eval {
                running_mean: store.get(self.running_mean).data(),
                running_var: store.get(self.running_var).data(),
                eps: self.eps,
            },
        };
        let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, mode);
        if let Some(stats) = stats {
            ctx.stats.push(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
        }
        y
    }
}

/// Convolution followed by normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let mut pb = pb.scope(name);
        Self {
            conv: Conv2d::new(&mut pb, "conv", cin, cout, geom),
            bn: BatchNorm2d::new(&mut pb, "bn", cout),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        self.bn.forward(ctx, y)
    }

    /// `ReLU(BN(Conv(x)))`
    pub fn forward_relu(&self, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.forward(ctx, x);
        ctx.tape.relu(y)
    }
}
