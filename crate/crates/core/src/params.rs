//! Named parameter table and deterministic initialisation.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::BatchStats;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// Running statistics; updated from forward passes, never by gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered table of every parameter and buffer of a model.
///
/// Insertion order is the canonical order used by checkpoints and the
/// optimiser, so two stores built from the same config line up entry by entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).data().len()).sum()
    }

    /// Folds batch statistics into running estimates with the given momentum.
    /// The variance estimate is unbiased (`count / (count − 1)`).
    pub fn apply_batch_stats(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            let correction = if u.stats.count > 1 {
                u.stats.count as f64 / (u.stats.count - 1) as f64
            } else {
                1.0
            };
            let rm = self.get_mut(u.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = self.get_mut(u.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&u.stats.var) {
                *r = (1.0 - momentum) * *r + momentum * v * correction;
            }
        }
    }
}

/// Batch statistics waiting to be folded into a layer's running buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor, kind: ParamKind) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value, kind)
    }

    /// Uniform in `±sqrt(6 / fan_in)` scaled by `gain`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: Shape, fan_in: usize, gain: f64) -> ParamId {
        self.uniform(name, shape, gain * (6.0 / fan_in as f64).sqrt())
    }

    /// Uniform in `±bound`.
    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound));
        self.add(name, value, ParamKind::Trainable)
    }

    /// Current value of a parameter created through this builder.
    pub fn value(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}
