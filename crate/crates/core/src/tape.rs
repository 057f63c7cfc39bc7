//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! A [`Tape`] records one forward pass as a list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse and accumulates
//! exact gradients through the kernels in [`crate::ops`]. Gradients are
//! only materialized for nodes that can reach a trainable leaf, so frozen
//! subgraphs cost nothing on the way back. The tape is meant to be built,
//! differentiated once, and dropped.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum OpKind<S: Scalar> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Dropout { x: Var, mult: Vec<S> },
    Identity { x: Var },
    Softmax { x: Var },
    CrossEntropy { f: Var, labels: Tensor<S> },
    Reshape { x: Var },
    ConcatCols { xs: Vec<Var>, dims: Vec<usize> },
    MixCombine { gate: Var, posts: Vec<Var> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: OpKind<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last [`Tape::backward`] root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: OpKind<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input or parameter value. `needs_grad` marks trainable
    /// leaves; data leaves should pass `false` so backward prunes them.
    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, OpKind::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::affine(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, needs, OpKind::Affine { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(value, needs, OpKind::Conv2d { x, k, b, stride, pad }))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = ops::maxpool2d_with_argmax(self.value(x), window, stride)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, OpKind::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, needs, OpKind::Relu { x })
    }

    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<Var> {
        let (value, mult) = ops::dropout_with_mask(self.value(x), rate, rng, training)?;
        let needs = self.needs(x);
        let op = match mult {
            Some(mult) => OpKind::Dropout { x, mult },
            None => OpKind::Identity { x },
        };
        Ok(self.push(value, needs, op))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, OpKind::Softmax { x }))
    }

    pub fn cross_entropy(&mut self, f: Var, labels: Tensor<S>) -> Result<Var> {
        let loss = ops::cross_entropy_loss(self.value(f), &labels)?;
        let needs = self.needs(f);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            OpKind::CrossEntropy { f, labels },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, OpKind::Reshape { x }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<S>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_cols(&parts)?;
        let dims = parts.iter().map(|p| p.shape()[1]).collect();
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            needs,
            OpKind::ConcatCols {
                xs: xs.to_vec(),
                dims,
            },
        ))
    }

    pub fn mix_combine(&mut self, gate: Var, posts: &[Var]) -> Result<Var> {
        let post_refs: Vec<&Tensor<S>> = posts.iter().map(|&v| self.value(v)).collect();
        let value = ops::mix_combine(self.value(gate), &post_refs)?;
        let needs = self.needs(gate) || posts.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            needs,
            OpKind::MixCombine {
                gate,
                posts: posts.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, grad: Vec<S>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(grad.len(), node.value.len());
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a = *a + g;
                }
            }
            None => node.grad = Some(grad),
        }
    }

    /// Seeds the scalar `root` with gradient one and propagates gradients
    /// back to every reachable node that needs them. Call once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].needs_grad {
            // Nothing trainable feeds the root; gradients are all zero.
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            let mut pending: Vec<(Var, Vec<S>)> = Vec::new();
            match &self.nodes[i].op {
                OpKind::Leaf => {}
                OpKind::Affine { x, w, b } => {
                    let (dx, dw, db) = ops::affine_backward(
                        &grad,
                        self.value(*x),
                        self.value(*w),
                        (self.needs(*x), self.needs(*w), self.needs(*b)),
                    );
                    if let Some(dx) = dx {
                        pending.push((*x, dx));
                    }
                    if let Some(dw) = dw {
                        pending.push((*w, dw));
                    }
                    if let Some(db) = db {
                        pending.push((*b, db));
                    }
                }
                OpKind::Conv2d { x, k, b, stride, pad } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        &grad,
                        self.value(*x),
                        self.value(*k),
                        *stride,
                        *pad,
                        (self.needs(*x), self.needs(*k), self.needs(*b)),
                    );
                    if let Some(dx) = dx {
                        pending.push((*x, dx));
                    }
                    if let Some(dk) = dk {
                        pending.push((*k, dk));
                    }
                    if let Some(db) = db {
                        pending.push((*b, db));
                    }
                }
                OpKind::MaxPool { x, argmax } => {
                    if self.needs(*x) {
                        let dx = ops::maxpool2d_backward(&grad, argmax, self.value(*x).len());
                        pending.push((*x, dx));
                    }
                }
                OpKind::Relu { x } => {
                    if self.needs(*x) {
                        pending.push((*x, ops::relu_backward(&grad, self.value(*x))));
                    }
                }
                OpKind::Dropout { x, mult } => {
                    if self.needs(*x) {
                        pending.push((*x, ops::dropout_backward(&grad, mult)));
                    }
                }
                OpKind::Identity { x } | OpKind::Reshape { x } => {
                    if self.needs(*x) {
                        pending.push((*x, grad.clone()));
                    }
                }
                OpKind::Softmax { x } => {
                    if self.needs(*x) {
                        pending.push((*x, ops::softmax_backward(&grad, &self.nodes[i].value)));
                    }
                }
                OpKind::CrossEntropy { f, labels } => {
                    if self.needs(*f) {
                        let mut df = ops::cross_entropy_backward(self.value(*f), labels);
                        let upstream = grad[0];
                        if upstream != S::one() {
                            for d in df.iter_mut() {
                                *d = *d * upstream;
                            }
                        }
                        pending.push((*f, df));
                    }
                }
                OpKind::ConcatCols { xs, dims } => {
                    let rows = self.nodes[i].value.shape()[0];
                    let parts = ops::concat_cols_backward(&grad, rows, dims);
                    for (&x, part) in xs.iter().zip(parts) {
                        if self.needs(x) {
                            pending.push((x, part));
                        }
                    }
                }
                OpKind::MixCombine { gate, posts } => {
                    let post_refs: Vec<&Tensor<S>> =
                        posts.iter().map(|&v| self.value(v)).collect();
                    let want_posts = posts.iter().any(|&v| self.needs(v));
                    let (dg, dposts) = ops::mix_combine_backward(
                        &grad,
                        self.value(*gate),
                        &post_refs,
                        self.needs(*gate),
                        want_posts,
                    );
                    if let Some(dg) = dg {
                        pending.push((*gate, dg));
                    }
                    if let Some(dposts) = dposts {
                        for (&p, dp) in posts.iter().zip(dposts) {
                            if self.needs(p) {
                                pending.push((p, dp));
                            }
                        }
                    }
                }
            }
            for (v, g) in pending {
                self.accumulate(v, g);
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn affine_softmax_ce_chain_matches_finite_differences() {
        let x = t(vec![1, 2], vec![0.3, -0.7]);
        let w0 = vec![0.5, -0.2, 0.1, 0.4];
        let b0 = vec![0.05, -0.05];
        let y = t(vec![1, 2], vec![0.0, 1.0]);

        let loss_at = |w: &[f64], b: &[f64]| {
            let z = ops::affine(&x, &t(vec![2, 2], w.to_vec()), &t(vec![2], b.to_vec())).unwrap();
            let s = ops::softmax(&z).unwrap();
            ops::cross_entropy_loss(&s, &y).unwrap()
        };

        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(t(vec![2, 2], w0.clone()), true);
        let bv = tape.leaf(t(vec![2], b0.clone()), true);
        let z = tape.affine(xv, wv, bv).unwrap();
        let s = tape.softmax(z).unwrap();
        let loss = tape.cross_entropy(s, y.clone()).unwrap();
        tape.backward(loss).unwrap();

        let eps = 1e-6;
        let wg = tape.grad(wv).unwrap();
        for i in 0..4 {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[i] += eps;
            wm[i] -= eps;
            let num = (loss_at(&wp, &b0) - loss_at(&wm, &b0)) / (2.0 * eps);
            assert!((wg[i] - num).abs() < 1e-7, "dW[{i}]: {} vs {num}", wg[i]);
        }
        let bg = tape.grad(bv).unwrap();
        for i in 0..2 {
            let mut bp = b0.clone();
            let mut bm = b0.clone();
            bp[i] += eps;
            bm[i] -= eps;
            let num = (loss_at(&w0, &bp) - loss_at(&w0, &bm)) / (2.0 * eps);
            assert!((bg[i] - num).abs() < 1e-7, "dB[{i}]: {} vs {num}", bg[i]);
        }
        // data leaf was pruned
        assert!(tape.grad(xv).is_none());
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        // f = sum over mix of the same posterior used twice via concat path
        let mut tape: Tape<f64> = Tape::new();
        let g = tape.leaf(t(vec![1, 2], vec![0.25, 0.75]), true);
        let p = tape.leaf(t(vec![1, 2], vec![0.4, 0.6]), true);
        let f = tape.mix_combine(g, &[p, p]).unwrap();
        let y = t(vec![1, 2], vec![1.0, 0.0]);
        let loss = tape.cross_entropy(f, y).unwrap();
        tape.backward(loss).unwrap();
        // dL/df = [-1/0.4, 0]; dp = (g0+g1)*dL/df = 1.0 * [-2.5, 0]
        let pg = tape.grad(p).unwrap();
        assert!((pg[0] - (-2.5)).abs() < 1e-12);
        assert!(pg[1].abs() < 1e-12);
    }

    #[test]
    fn frozen_graph_skips_backward_entirely() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![0.3, 0.7]), false);
        let y = t(vec![1, 2], vec![1.0, 0.0]);
        let loss = tape.cross_entropy(x, y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(loss).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn dropout_node_scales_gradient_by_mask() {
        let mut rng = rng_from(9);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t(vec![1, 8], vec![1.0; 8]), true);
        let d = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        let s = tape.softmax(d).unwrap();
        let y = t(vec![1, 8], {
            let mut v = vec![0.0; 8];
            v[0] = 1.0;
            v
        });
        let loss = tape.cross_entropy(s, y).unwrap();
        tape.backward(loss).unwrap();
        let out = tape.value(d).data().to_vec();
        let xg = tape.grad(x).unwrap();
        for (i, &v) in out.iter().enumerate() {
            if v == 0.0 {
                assert_eq!(xg[i], 0.0, "dropped element {i} must get zero gradient");
            }
        }
    }
}
