//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Each operation appends a node holding its value and enough saved state
//! to run its adjoint. [`Tape::backward`] walks the tape once in reverse.
//! Shape contracts are checked by the callers (the layer modules); the tape
//! itself treats a violation as a programming error and panics.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::kernels::attention::{self, SoftmaxAxis};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, BnForward};
use crate::kernels::{resample, sigmoid};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for a normalisation node.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train { eps: f64 },
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
        eps: f64,
    },
}

/// Batch statistics produced by a train-mode normalisation node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Expand(Var),
    Concat(Var, Var),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnForward,
        train: bool,
    },
    Softmax {
        x: Var,
        axis: SoftmaxAxis,
    },
    Sdpa {
        x: Var,
        attn: Vec<f64>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        arg: Vec<u32>,
    },
    EmbeddingMean {
        table: Var,
        ids: Vec<Vec<u32>>,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<u8>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        debug_assert!(value.is_finite() || parents.is_empty(), "non-finite activation");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).add(self.value(b)).expect("checked");
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).sub(self.value(b)).expect("checked");
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("checked");
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Broadcasts `a` to `shape`; every axis of `a` must be 1 or match.
    pub fn expand(&mut self, a: Var, shape: Shape) -> Var {
        let s = self.shape(a);
        for (from, to) in s.dims().into_iter().zip(shape.dims()) {
            assert!(from == to || from == 1, "cannot expand {s} to {shape}");
        }
        if s == shape {
            return a;
        }
        let src = self.value(a);
        let pick = |i: usize, d: usize| if d == 1 { 0 } else { i };
        let v = Tensor::from_fn(shape, |n, c, y, x| {
            src.at(pick(n, s.n), pick(c, s.c), pick(y, s.h), pick(x, s.w))
        });
        self.push(v, Op::Expand(a), &[a])
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.with_c(1), sb.with_c(1), "concat: spatial/batch dims differ");
        let out = sa.with_c(sa.c + sb.c);
        let (va, vb) = (self.value(a), self.value(b));
        let mut v = Tensor::zeros(out);
        for n in 0..out.n {
            for c in 0..sa.c {
                v.plane_mut(n, c).copy_from_slice(va.plane(n, c));
            }
            for c in 0..sb.c {
                v.plane_mut(n, sa.c + c).copy_from_slice(vb.plane(n, c));
            }
        }
        self.push(v, Op::Concat(a, b), &[a, b])
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).batch_slice(start, len);
        self.push(v, Op::SliceBatch { x, start }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let v = conv::conv2d(self.value(x), self.value(w), &geom);
        self.push(v, Op::Conv { x, w, geom }, &[x, w])
    }

    /// Normalisation node. In train mode also returns the batch statistics
    /// so the caller can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> (Var, Option<BatchStats>) {
        let c = self.shape(x).c;
        assert_eq!(self.value(gamma).data().len(), c, "batch_norm scale length");
        assert_eq!(self.value(beta).data().len(), c, "batch_norm shift length");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (mut saved, train) = match mode {
            BnMode::Train { eps } => (norm::batch_norm_train(self.value(x), g, b, eps), true),
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => (
                norm::batch_norm_eval(self.value(x), g, b, running_mean, running_var, eps),
                false,
            ),
        };
        let s = self.shape(x);
        let stats = train.then(|| BatchStats {
            mean: std::mem::take(&mut saved.mean),
            var: std::mem::take(&mut saved.var),
            count: s.n * s.hw(),
        });
        let y = std::mem::replace(&mut saved.y, Tensor::scalar(0.0));
        let var = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            },
            &[x, gamma, beta],
        );
        (var, stats)
    }

    pub fn softmax(&mut self, x: Var, axis: SoftmaxAxis) -> Var {
        let v = attention::softmax(self.value(x), axis);
        self.push(v, Op::Softmax { x, axis }, &[x])
    }

    pub fn sdpa(&mut self, x: Var) -> Var {
        let (v, attn) = attention::sdpa(self.value(x));
        self.push(v, Op::Sdpa { x, attn }, &[x])
    }

    pub fn upsample(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        assert!(h >= s.h && w >= s.w, "upsample target {h}x{w} smaller than {s}");
        if s.h == h && s.w == w {
            return x;
        }
        let v = resample::upsample_bilinear(self.value(x), h, w);
        self.push(v, Op::Upsample(x), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = resample::global_avg_pool(self.value(x));
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let v = resample::channel_mean(self.value(x));
        self.push(v, Op::ChannelMean(x), &[x])
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let (v, arg) = resample::channel_max(self.value(x));
        self.push(v, Op::ChannelMax { x, arg }, &[x])
    }

    /// Mean of embedding rows per sample: `table` is `(vocab, dim, 1, 1)`,
    /// the result `(batch, dim, 1, 1)`.
    pub fn embedding_mean(&mut self, table: Var, ids: Vec<Vec<u32>>) -> Var {
        let t = self.value(table);
        let ts = t.shape();
        let mut v = Tensor::zeros(Shape::new(ids.len(), ts.c, 1, 1));
        for (n, seq) in ids.iter().enumerate() {
            assert!(!seq.is_empty(), "embedding_mean: empty token sequence");
            let inv = 1.0 / seq.len() as f64;
            for &id in seq {
                let row = &t.data()[id as usize * ts.c..(id as usize + 1) * ts.c];
                for (d, r) in row.iter().enumerate() {
                    let i = v.index(n, d, 0, 0);
                    v.data_mut()[i] += r * inv;
                }
            }
        }
        self.push(v, Op::EmbeddingMean { table, ids }, &[table])
    }

    /// Mean per-pixel two-class cross-entropy; `target` holds 0/1 per pixel
    /// in `(n, h, w)` order.
    pub fn cross_entropy(&mut self, logits: Var, target: Vec<u8>) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.c, 2, "cross_entropy expects two logit channels");
        assert_eq!(target.len(), s.n * s.hw(), "cross_entropy target size");
        let l = self.value(logits);
        let hw = s.hw();
        let mut total = 0.0;
        for n in 0..s.n {
            let (z0, z1) = (l.plane(n, 0), l.plane(n, 1));
            for p in 0..hw {
                let (a, b) = (z0[p], z1[p]);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                let picked = if target[n * hw + p] == 1 { b } else { a };
                total += lse - picked;
            }
        }
        let v = Tensor::scalar(total / (s.n * hw) as f64);
        self.push(v, Op::CrossEntropy { logits, target }, &[logits])
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        assert_eq!(self.shape(x), weights.shape(), "weighted_sum shape");
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(v), Op::WeightedSum { x, weights }, &[x])
    }

    /// Fingerprint of every branch taken on the tape: ReLU input signs and
    /// channel-max winners. Two evaluations with equal fingerprints lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::ChannelMax { arg, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar `root`; returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.scale(-1.0));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })
                    .expect("shape");
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .zip_map(&node.value, |d, y| d * y * (1.0 - y))
                    .expect("shape");
                self.acc(grads, *a, ga);
            }
            Op::Expand(a) => {
                let s = self.shape(*a);
                let mut ga = Tensor::zeros(s);
                let out = g.shape();
                let pick = |i: usize, d: usize| if d == 1 { 0 } else { i };
                for n in 0..out.n {
                    for c in 0..out.c {
                        for y in 0..out.h {
                            for x in 0..out.w {
                                let i = ga.index(pick(n, s.n), pick(c, s.c), pick(y, s.h), pick(x, s.w));
                                ga.data_mut()[i] += g.at(n, c, y, x);
                            }
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                for n in 0..sa.n {
                    for c in 0..sa.c {
                        ga.plane_mut(n, c).copy_from_slice(g.plane(n, c));
                    }
                    for c in 0..sb.c {
                        gb.plane_mut(n, c).copy_from_slice(g.plane(n, sa.c + c));
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SliceBatch { x, start } => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                let per = s.chw();
                gx.data_mut()[start * per..start * per + g.data().len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::Conv { x, w, geom } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    &g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                train,
            } => {
                let gam = self.value(*gamma).data();
                let (dx, dg, db) = norm::batch_norm_backward(&g, saved, gam, *train);
                let ps = self.shape(*gamma);
                self.acc(grads, *gamma, Tensor::from_vec(ps, dg).expect("shape"));
                self.acc(grads, *beta, Tensor::from_vec(ps, db).expect("shape"));
                self.acc(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let gx = attention::softmax_backward(&node.value, &g, *axis);
                self.acc(grads, *x, gx);
            }
            Op::Sdpa { x, attn } => {
                let gx = attention::sdpa_backward(self.value(*x), attn, &g);
                self.acc(grads, *x, gx);
            }
            Op::Upsample(x) => {
                let gx = resample::upsample_bilinear_backward(&g, self.shape(*x));
                self.acc(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let gx = resample::global_avg_pool_backward(&g, self.shape(*x));
                self.acc(grads, *x, gx);
            }
            Op::ChannelMean(x) => {
                let gx = resample::channel_mean_backward(&g, self.shape(*x));
                self.acc(grads, *x, gx);
            }
            Op::ChannelMax { x, arg } => {
                let gx = resample::channel_max_backward(&g, arg, self.shape(*x));
                self.acc(grads, *x, gx);
            }
            Op::EmbeddingMean { table, ids } => {
                let ts = self.shape(*table);
                let mut gt = Tensor::zeros(ts);
                for (n, seq) in ids.iter().enumerate() {
                    let inv = 1.0 / seq.len() as f64;
                    for &id in seq {
                        for d in 0..ts.c {
                            let i = gt.index(id as usize, d, 0, 0);
                            gt.data_mut()[i] += g.at(n, d, 0, 0) * inv;
                        }
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::CrossEntropy { logits, target } => {
                let l = self.value(*logits);
                let s = l.shape();
                let hw = s.hw();
                let k = g.item() / (s.n * hw) as f64;
                let mut gl = Tensor::zeros(s);
                for n in 0..s.n {
                    for p in 0..hw {
                        let (a, b) = (l.plane(n, 0)[p], l.plane(n, 1)[p]);
                        let p1 = sigmoid(b - a);
                        let t = f64::from(target[n * hw + p]);
                        gl.plane_mut(n, 1)[p] = k * (p1 - t);
                        gl.plane_mut(n, 0)[p] = k * (t - p1);
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::WeightedSum { x, weights } => {
                let gx = weights.scale(g.item());
                self.acc(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_shared_node() {
        // f = sum((x*x) * w) with w = 1 gives df/dx = 2x.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap(), true);
        let sq = t.mul(x, x);
        let f = t.weighted_sum(sq, Tensor::full(Shape::new(1, 1, 1, 3), 1.0));
        let g = t.backward(f);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let w = t.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 2.0), true);
        let y = t.mul(x, w);
        let f = t.weighted_sum(y, Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let g = t.backward(f);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(Shape::new(2, 2, 3, 3)), true);
        let loss = t.cross_entropy(l, vec![1; 18]);
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
