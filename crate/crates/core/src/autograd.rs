//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records eagerly evaluated nodes in creation order, which is
//! already a topological order, so the backward pass is a single reverse
//! sweep. Forward values reuse the functions in [`crate::ops`]; this module
//! owns the adjoint formulas. Everything is single-threaded and
//! accumulation order is fixed, so gradients are bit-reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::AttnMask;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Matmul(NodeId, NodeId),
    Gelu(NodeId),
    /// Softmax over the last axis; masking is applied at construction and
    /// the stored probabilities carry everything backward needs.
    MaskedSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    BroadcastTo(NodeId),
    GatherRows {
        table: NodeId,
        ids: Arc<Vec<usize>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        ignore: Option<usize>,
    },
    SumAll(NodeId),
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Parameter leaf; memoized so each parameter appears once per graph.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(
            Op::Leaf { param: Some(id) },
            store.value(id).clone(),
            true,
        );
        self.param_nodes.insert(id, node);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), value, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let value = self.value(x).scale(factor);
        let req = self.requires(x);
        self.push(Op::Scale(x, factor), value, req)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, req))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = ops::gelu(self.value(x));
        let req = self.requires(x);
        self.push(Op::Gelu(x), value, req)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.masked_softmax(x, None)
    }

    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<Arc<AttnMask>>) -> Result<NodeId> {
        let value = ops::masked_softmax(self.value(x), mask.as_deref())?;
        let req = self.requires(x);
        Ok(self.push(Op::MaskedSoftmax(x), value, req))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let value = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value, req))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let req = self.requires(x);
        Ok(self.push(Op::Reshape(x), value, req))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = self.value(x).permute(perm)?;
        let req = self.requires(x);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            value,
            req,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::InvalidDimension {
                op: "transpose",
                detail: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(x).slice_axis(axis, start, len)?;
        let req = self.requires(x);
        Ok(self.push(Op::SliceAxis { x, axis, start }, value, req))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            req,
        ))
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).broadcast_to(shape)?;
        let req = self.requires(x);
        Ok(self.push(Op::BroadcastTo(x), value, req))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Arc<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(table).gather_rows(&ids)?;
        let req = self.requires(table);
        Ok(self.push(Op::GatherRows { table, ids }, value, req))
    }

    /// Mean negative log-likelihood over non-ignored rows; a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<usize>>,
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let loss = ops::cross_entropy(self.value(logits), &targets, ignore)?;
        let req = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            },
            Tensor::scalar(loss),
            req,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let req = self.requires(x);
        self.push(Op::SumAll(x), value, req)
    }

    /// `x W + b`; `b` may be `None` for bias-free projections.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from the scalar node `out`; returns per-parameter
    /// gradients aligned with `store`.
    pub fn backward(&self, out: NodeId, store: &ParamStore<S>) -> Result<Gradients<S>> {
        if self.value(out).numel() != 1 {
            return Err(Error::InvalidDimension {
                op: "backward",
                detail: format!(
                    "backward starts from a scalar, got shape {:?}",
                    self.value(out).shape()
                ),
            });
        }
        let mut adjoints: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[out.0] = Some(Tensor::full(self.value(out).shape(), S::ONE));
        let mut grads = Gradients::zeros_like(store);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                adjoints[i] = None;
                continue;
            }
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            self.backprop_node(i, grad, &mut adjoints, &mut grads)?;
        }
        Ok(grads)
    }

    fn accumulate(&self, adjoints: &mut [Option<Tensor<S>>], node: NodeId, grad: Tensor<S>) {
        if !self.requires(node) {
            return;
        }
        match &mut adjoints[node.0] {
            Some(existing) => {
                *existing = existing.add(&grad).expect("adjoint shape drift");
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        grad: Tensor<S>,
        adjoints: &mut [Option<Tensor<S>>],
        grads: &mut Gradients<S>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    grads.accumulate(*id, &grad);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    let ga = grad.reduce_to_shape(self.value(*a).shape())?;
                    self.accumulate(adjoints, *a, ga);
                }
                if self.requires(*b) {
                    let gb = grad.reduce_to_shape(self.value(*b).shape())?;
                    self.accumulate(adjoints, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let ga = grad
                        .mul(self.value(*b))?
                        .reduce_to_shape(self.value(*a).shape())?;
                    self.accumulate(adjoints, *a, ga);
                }
                if self.requires(*b) {
                    let gb = grad
                        .mul(self.value(*a))?
                        .reduce_to_shape(self.value(*b).shape())?;
                    self.accumulate(adjoints, *b, gb);
                }
            }
            Op::Scale(x, factor) => {
                if self.requires(*x) {
                    self.accumulate(adjoints, *x, grad.scale(*factor));
                }
            }
            Op::Matmul(a, b) => {
                if self.requires(*a) {
                    let ga = grad
                        .matmul_nt(self.value(*b))?
                        .reduce_to_shape(self.value(*a).shape())?;
                    self.accumulate(adjoints, *a, ga);
                }
                if self.requires(*b) {
                    let gb = self
                        .value(*a)
                        .matmul_tn(&grad)?
                        .reduce_to_shape(self.value(*b).shape())?;
                    self.accumulate(adjoints, *b, gb);
                }
            }
            Op::Gelu(x) => {
                if self.requires(*x) {
                    let gx = grad
                        .binop(self.value(*x), "gelu_grad", |g, xv| g * ops::gelu_grad(xv))?;
                    self.accumulate(adjoints, *x, gx);
                }
            }
            Op::MaskedSoftmax(x) => {
                if self.requires(*x) {
                    let y = &self.nodes[i].value;
                    let n_k = *y.shape().last().unwrap();
                    let mut gx = grad.mul(y)?;
                    // per lane: gx = y * (grad - sum(grad * y))
                    for (lane_gx, lane_y) in gx
                        .data_mut()
                        .chunks_exact_mut(n_k)
                        .zip(y.data().chunks_exact(n_k))
                    {
                        let mut dot = S::ZERO;
                        for &v in lane_gx.iter() {
                            dot += v;
                        }
                        for (g_j, &y_j) in lane_gx.iter_mut().zip(lane_y) {
                            *g_j = *g_j - dot * y_j;
                        }
                    }
                    self.accumulate(adjoints, *x, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, ggamma, gbeta) = layer_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    &grad,
                    *eps,
                )?;
                if self.requires(*x) {
                    self.accumulate(adjoints, *x, gx);
                }
                if self.requires(*gamma) {
                    self.accumulate(adjoints, *gamma, ggamma);
                }
                if self.requires(*beta) {
                    self.accumulate(adjoints, *beta, gbeta);
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    self.accumulate(adjoints, *x, grad.reshape(self.value(*x).shape())?);
                }
            }
            Op::Permute { x, perm } => {
                if self.requires(*x) {
                    let mut inverse = vec![0usize; perm.len()];
                    for (to, &from) in perm.iter().enumerate() {
                        inverse[from] = to;
                    }
                    self.accumulate(adjoints, *x, grad.permute(&inverse)?);
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if self.requires(*x) {
                    let src = self.value(*x);
                    let mut gx = Tensor::zeros(src.shape());
                    let dim = src.shape()[*axis];
                    let len = grad.shape()[*axis];
                    let inner: usize = src.shape()[axis + 1..].iter().product();
                    let outer: usize = src.shape()[..*axis].iter().product();
                    for o in 0..outer {
                        let dst_base = o * dim * inner + start * inner;
                        let src_base = o * len * inner;
                        gx.data_mut()[dst_base..dst_base + len * inner]
                            .copy_from_slice(&grad.data()[src_base..src_base + len * inner]);
                    }
                    self.accumulate(adjoints, *x, gx);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.requires(p) {
                        let gp = grad.slice_axis(*axis, offset, len)?;
                        self.accumulate(adjoints, p, gp);
                    }
                    offset += len;
                }
            }
            Op::BroadcastTo(x) => {
                if self.requires(*x) {
                    self.accumulate(adjoints, *x, grad.reduce_to_shape(self.value(*x).shape())?);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.requires(*table) {
                    let tshape = self.value(*table).shape();
                    let d = tshape[1];
                    let mut gt = Tensor::zeros(tshape);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                        let src = &grad.data()[row * d..(row + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    self.accumulate(adjoints, *table, gt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
            } => {
                if self.requires(*logits) {
                    let lv = self.value(*logits);
                    let counted = targets
                        .iter()
                        .filter(|&&t| Some(t) != *ignore)
                        .count();
                    let inv = S::from_f64(1.0 / counted as f64);
                    let upstream = grad.data()[0];
                    let mut gl = ops::softmax(lv, 1)?;
                    let vocab = lv.shape()[1];
                    for (row, &target) in targets.iter().enumerate() {
                        let lane = &mut gl.data_mut()[row * vocab..(row + 1) * vocab];
                        if Some(target) == *ignore {
                            lane.iter_mut().for_each(|v| *v = S::ZERO);
                        } else {
                            lane[target] = lane[target] - S::ONE;
                            lane.iter_mut().for_each(|v| *v = *v * inv * upstream);
                        }
                    }
                    self.accumulate(adjoints, *logits, gl);
                }
            }
            Op::SumAll(x) => {
                if self.requires(*x) {
                    let g = Tensor::full(self.value(*x).shape(), grad.data()[0]);
                    self.accumulate(adjoints, *x, g);
                }
            }
        }
        Ok(())
    }
}

fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    dy: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = *x.shape().last().unwrap();
    let inv_d = S::from_f64(1.0 / d as f64);
    let g = gamma.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for (slice_idx, (xs, dys)) in x
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .enumerate()
    {
        let mut mean = S::ZERO;
        for &v in xs {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = S::ZERO;
        for &v in xs {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let inv_std = S::ONE / (var + eps).sqrt();

        let mut sum_gdy = S::ZERO;
        let mut sum_gdy_xhat = S::ZERO;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv_std;
            let gdy = dys[j] * g[j];
            sum_gdy += gdy;
            sum_gdy_xhat += gdy * xhat;
            dgamma.data_mut()[j] += dys[j] * xhat;
            dbeta.data_mut()[j] += dys[j];
        }
        let mean_gdy = sum_gdy * inv_d;
        let mean_gdy_xhat = sum_gdy_xhat * inv_d;
        let base = slice_idx * d;
        for j in 0..d {
            let xhat = (xs[j] - mean) * inv_std;
            dx.data_mut()[base + j] =
                inv_std * (dys[j] * g[j] - mean_gdy - xhat * mean_gdy_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{finite_difference_gradient, max_rel_err, DEFAULT_H};
    use crate::params::{ParamGroup, ParamRole};
    use crate::rng::Rng;

    /// Checks d(loss)/d(param) for a loss built by `build` against central
    /// differences, where `loss = sum(build(param) * probe)` for a fixed
    /// random probe tensor.
    fn check_param_grad(
        shape: &[usize],
        seed: u64,
        tol: f64,
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
    ) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let init = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let id = store
            .add("x", init, ParamRole::Weight, ParamGroup::EncoderBlock)
            .unwrap();

        // probe fixed across evaluations
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = build(&mut g, x);
        let probe = Tensor::<f64>::randn(g.value(y).shape(), 1.0, &mut rng);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let x = g.param(store, id);
            let y = build(&mut g, x);
            let p = g.input(probe.clone());
            let prod = g.mul(y, p).unwrap();
            let l = g.sum_all(prod);
            g.value(l).data()[0]
        };

        // analytic
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = build(&mut g, x);
        let p = g.input(probe.clone());
        let prod = g.mul(y, p).unwrap();
        let l = g.sum_all(prod);
        let grads = g.backward(l, &store).unwrap();
        let analytic = grads.get(id).unwrap().clone();

        // finite differences over the parameter
        let base = store.value(id).clone();
        let mut probe_store = store.clone();
        let fd = finite_difference_gradient(
            |t: &Tensor<f64>| {
                probe_store.get_mut(id).value = t.clone();
                loss_of(&probe_store)
            },
            &base,
            DEFAULT_H,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &fd, 1e-6);
        assert!(err < tol, "rel err {err} for shape {shape:?} seed {seed}");
    }

    #[test]
    fn grad_add_broadcast() {
        check_param_grad(&[4], 10, 1e-7, |g, x| {
            let mut rng = Rng::new(77);
            let other = g.input(Tensor::randn(&[3, 4], 1.0, &mut rng));
            g.add(other, x).unwrap()
        });
    }

    #[test]
    fn grad_mul_broadcast() {
        check_param_grad(&[3, 1, 5], 11, 1e-6, |g, x| {
            let mut rng = Rng::new(78);
            let other = g.input(Tensor::randn(&[2, 5], 1.0, &mut rng));
            g.mul(x, other).unwrap()
        });
    }

    #[test]
    fn grad_matmul_lhs_and_rhs() {
        check_param_grad(&[4, 3], 12, 1e-6, |g, x| {
            let mut rng = Rng::new(79);
            let rhs = g.input(Tensor::randn(&[3, 5], 1.0, &mut rng));
            g.matmul(x, rhs).unwrap()
        });
        check_param_grad(&[3, 5], 13, 1e-6, |g, x| {
            let mut rng = Rng::new(80);
            let lhs = g.input(Tensor::randn(&[4, 3], 1.0, &mut rng));
            g.matmul(lhs, x).unwrap()
        });
    }

    #[test]
    fn grad_matmul_batched_broadcast() {
        check_param_grad(&[3, 4], 14, 1e-6, |g, x| {
            let mut rng = Rng::new(81);
            let lhs = g.input(Tensor::randn(&[2, 5, 3], 1.0, &mut rng));
            g.matmul(lhs, x).unwrap()
        });
    }

    #[test]
    fn grad_gelu() {
        check_param_grad(&[6], 15, 1e-6, |g, x| g.gelu(x));
    }

    #[test]
    fn grad_softmax() {
        check_param_grad(&[3, 5], 16, 1e-6, |g, x| g.softmax_last(x).unwrap());
    }

    #[test]
    fn grad_masked_softmax_causal() {
        check_param_grad(&[4, 4], 17, 1e-6, |g, x| {
            g.masked_softmax(x, Some(Arc::new(AttnMask::causal(4)))).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm_input_gamma_beta() {
        // input
        check_param_grad(&[3, 6], 18, 1e-5, |g, x| {
            let gamma = g.input(Tensor::from_vec(vec![6], vec![0.5, 1.0, -1.2, 2.0, 0.1, 0.7]).unwrap());
            let beta = g.input(Tensor::from_vec(vec![6], vec![0.1; 6]).unwrap());
            g.layer_norm(x, gamma, beta, 1e-5).unwrap()
        });
        // gamma
        check_param_grad(&[6], 19, 1e-6, |g, x| {
            let mut rng = Rng::new(82);
            let inp = g.input(Tensor::randn(&[3, 6], 1.0, &mut rng));
            let beta = g.input(Tensor::zeros(&[6]));
            g.layer_norm(inp, x, beta, 1e-5).unwrap()
        });
        // beta
        check_param_grad(&[6], 20, 1e-7, |g, x| {
            let mut rng = Rng::new(83);
            let inp = g.input(Tensor::randn(&[3, 6], 1.0, &mut rng));
            let gamma = g.input(Tensor::full(&[6], 1.0));
            g.layer_norm(inp, gamma, x, 1e-5).unwrap()
        });
    }

    #[test]
    fn grad_reshape_permute_slice_concat_broadcast() {
        check_param_grad(&[2, 6], 21, 1e-7, |g, x| {
            let r = g.reshape(x, &[3, 4]).unwrap();
            g.permute(r, &[1, 0]).unwrap()
        });
        check_param_grad(&[4, 5], 22, 1e-7, |g, x| g.slice_axis(x, 1, 1, 3).unwrap());
        check_param_grad(&[2, 3], 23, 1e-7, |g, x| {
            let other = g.input(Tensor::full(&[2, 2], 0.7));
            g.concat(&[x, other], 1).unwrap()
        });
        check_param_grad(&[1, 4], 24, 1e-7, |g, x| g.broadcast_to(x, &[3, 4]).unwrap());
    }

    #[test]
    fn grad_gather_rows() {
        check_param_grad(&[5, 3], 25, 1e-7, |g, x| {
            g.gather_rows(x, Arc::new(vec![1, 1, 4, 0])).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy_with_ignore() {
        let mut rng = Rng::new(26);
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(
                "logits",
                Tensor::randn(&[4, 5], 1.0, &mut rng),
                ParamRole::Weight,
                ParamGroup::EncoderBlock,
            )
            .unwrap();
        let targets = Arc::new(vec![1usize, 9, 3, 0]);

        let mut g = Graph::new();
        let x = g.param(&store, id);
        let loss = g.cross_entropy(x, targets.clone(), Some(9)).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let analytic = grads.get(id).unwrap().clone();

        let base = store.value(id).clone();
        let fd = finite_difference_gradient(
            |t: &Tensor<f64>| crate::ops::cross_entropy(t, &targets, Some(9)).unwrap(),
            &base,
            DEFAULT_H,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &fd, 1e-6) < 1e-6);
        // ignored row gets exactly zero gradient
        for j in 0..5 {
            assert_eq!(analytic.at(&[1, j]), 0.0);
        }
    }

    #[test]
    fn shared_parameter_accumulates_through_both_uses() {
        // y = x W + (x W) W  reuses W twice; FD must agree.
        let mut rng = Rng::new(27);
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(
                "w",
                Tensor::randn(&[3, 3], 0.7, &mut rng),
                ParamRole::Weight,
                ParamGroup::EncoderBlock,
            )
            .unwrap();
        let x_const = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);

        let eval = |store: &ParamStore<f64>| -> (f64, Option<Gradients<f64>>) {
            let mut g = Graph::new();
            let w = g.param(store, id);
            let x = g.input(x_const.clone());
            let once = g.matmul(x, w).unwrap();
            let twice = g.matmul(once, w).unwrap();
            let y = g.add(once, twice).unwrap();
            let p = g.input(probe.clone());
            let prod = g.mul(y, p).unwrap();
            let l = g.sum_all(prod);
            let loss = g.value(l).data()[0];
            let grads = g.backward(l, store).unwrap();
            (loss, Some(grads))
        };

        let (_, grads) = eval(&store);
        let analytic = grads.unwrap().get(id).unwrap().clone();
        let base = store.value(id).clone();
        let mut probe_store = store.clone();
        let fd = finite_difference_gradient(
            |t: &Tensor<f64>| {
                probe_store.get_mut(id).value = t.clone();
                eval(&probe_store).0
            },
            &base,
            DEFAULT_H,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &fd, 1e-6) < 1e-6);
    }

    #[test]
    fn f32_gradients_hold_at_loose_tolerance() {
        // single-precision sweep: h = 5e-3 balances truncation against
        // f32 roundoff; tolerance 1e-3
        let mut rng = Rng::new(404);
        for case in 0..100 {
            let mut store = ParamStore::<f32>::new();
            let shape = vec![1 + rng.below(6), 1 + rng.below(6)];
            let id = store
                .add(
                    "x",
                    Tensor::<f32>::randn(&shape, 1.0, &mut rng),
                    ParamRole::Weight,
                    ParamGroup::EncoderBlock,
                )
                .unwrap();
            let aux = Tensor::<f32>::randn(&[shape[1], 1 + rng.below(6)], 0.5, &mut rng);
            let probe_seed = rng.next_u64();
            let run = |store: &ParamStore<f32>, want: bool| {
                let mut g = Graph::new();
                let x = g.param(store, id);
                let w = g.input(aux.clone());
                let y = g.matmul(x, w).unwrap();
                let act = g.gelu(y);
                let sm = g.softmax_last(act).unwrap();
                let mut probe_rng = Rng::new(probe_seed);
                let shape = g.value(act).shape().to_vec();
                let p1 = g.input(Tensor::<f32>::randn(&shape, 0.5, &mut probe_rng));
                let p2 = g.input(Tensor::<f32>::randn(&shape, 0.5, &mut probe_rng));
                let t1 = g.mul(act, p1).unwrap();
                let t2 = g.mul(sm, p2).unwrap();
                let l1 = g.sum_all(t1);
                let l2 = g.sum_all(t2);
                let total = g.add(l1, l2).unwrap();
                let v = g.value(total).data()[0];
                let grads = want.then(|| g.backward(total, store).unwrap());
                (v, grads)
            };
            let (_, grads) = run(&store, true);
            let analytic = grads.unwrap().get(id).unwrap().clone();
            let base = store.value(id).clone();
            let mut probe_store = store.clone();
            let fd = crate::fd::finite_difference_gradient(
                |t: &Tensor<f32>| {
                    probe_store.get_mut(id).value = t.clone();
                    run(&probe_store, false).0
                },
                &base,
                5e-3,
            )
            .unwrap();
            // normwise error: per-element comparison is dominated by f32
            // roundoff on the smallest components
            let l2 = |t: &Tensor<f32>| {
                t.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
            };
            let diff: f64 = analytic
                .data()
                .iter()
                .zip(fd.data())
                .map(|(a, b)| {
                    let d = (*a as f64) - (*b as f64);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            let err = diff / l2(&analytic).max(l2(&fd)).max(1e-6);
            assert!(err < 1e-3, "case {case}: normwise rel err {err}");
        }
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut store = ParamStore::<f64>::new();
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 2], 2.0));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum_all(c);
        let grads = g.backward(l, &store).unwrap();
        assert!(grads.iter().next().is_none());
        let _ = &mut store;
    }
}
