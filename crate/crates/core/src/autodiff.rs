//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive executed through a [`Var`] handle in
//! execution order, so inputs always precede their consumers. [`Tape::backward`]
//! walks the record once in reverse and accumulates `∂loss/∂leaf` into every
//! leaf created with [`Tape::leaf`]. Repeated calls accumulate; use
//! [`Tape::zero_grad`] to reset.
//!
//! ```
//! use kcm_core::autodiff::Tape;
//! use kcm_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
//! let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = w.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
//! ```

use std::cell::RefCell;

use crate::loss::Surrogate;
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNt(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    ShiftRows {
        x: usize,
        copies: usize,
    },
    BlockMean {
        src: usize,
        blocks: usize,
    },
    Sum(usize),
    Mean(usize),
    MarginLoss {
        pred: usize,
        targets: Vec<f64>,
        surrogate: Surrogate,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, `None` if backward never reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates `∂loss/∂·` back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match grads[id].as_mut() {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, v)| *a += v),
        None => grads[id] = Some(contribution),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        &Op::MatMul(a, b) => {
            let (m, k) = dims(&nodes[a].value);
            let (_, n) = dims(&nodes[b].value);
            if needs(a) {
                accumulate(grads, a, matmul_nt_raw(g, nodes[b].value.data(), m, n, k));
            }
            if needs(b) {
                accumulate(grads, b, matmul_tn_raw(nodes[a].value.data(), g, m, k, n));
            }
        }
        &Op::MatMulNt(a, b) => {
            let (m, k) = dims(&nodes[a].value);
            let (n, _) = dims(&nodes[b].value);
            if needs(a) {
                accumulate(grads, a, matmul_raw(g, nodes[b].value.data(), m, n, k));
            }
            if needs(b) {
                accumulate(grads, b, matmul_tn_raw(g, nodes[a].value.data(), m, n, k));
            }
        }
        &Op::AddRow(a, bias) => {
            if needs(a) {
                accumulate(grads, a, g.to_vec());
            }
            if needs(bias) {
                let n = nodes[bias].value.len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                accumulate(grads, bias, gb);
            }
        }
        &Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, a, g.to_vec());
            }
            if needs(b) {
                accumulate(grads, b, g.to_vec());
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let bv = nodes[b].value.data();
                accumulate(grads, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            }
            if needs(b) {
                let av = nodes[a].value.data();
                accumulate(grads, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
        }
        &Op::Scale(a, c) => {
            if needs(a) {
                accumulate(grads, a, g.iter().map(|v| v * c).collect());
            }
        }
        &Op::Relu(a) => {
            if needs(a) {
                let av = nodes[a].value.data();
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, a, ga);
            }
        }
        &Op::ShiftRows { x, copies } => {
            if needs(x) {
                let len = nodes[x].value.len();
                let mut gx = vec![0.0; len];
                for block in g.chunks(len).take(copies) {
                    gx.iter_mut().zip(block).for_each(|(s, v)| *s += v);
                }
                accumulate(grads, x, gx);
            }
        }
        &Op::BlockMean { src, blocks } => {
            if needs(src) {
                let n = blocks as f64;
                let mut gs = Vec::with_capacity(g.len() * blocks);
                for _ in 0..blocks {
                    gs.extend(g.iter().map(|v| v / n));
                }
                accumulate(grads, src, gs);
            }
        }
        &Op::Sum(a) => {
            if needs(a) {
                accumulate(grads, a, vec![g[0]; nodes[a].value.len()]);
            }
        }
        &Op::Mean(a) => {
            if needs(a) {
                let len = nodes[a].value.len();
                accumulate(grads, a, vec![g[0] / len as f64; len]);
            }
        }
        Op::MarginLoss {
            pred,
            targets,
            surrogate,
        } => {
            let pred = *pred;
            if needs(pred) {
                let n = targets.len() as f64;
                let pv = nodes[pred].value.data();
                let gp = pv
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| g[0] * t * surrogate.derivative(t * p) / n)
                    .collect();
                accumulate(grads, pred, gp);
            }
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let logits = *logits;
            if needs(logits) {
                let lv = &nodes[logits].value;
                let (b, c) = dims(lv);
                let mut gl = vec![0.0; b * c];
                for i in 0..b {
                    let probs = softmax(lv.row(i));
                    let t = targets.row(i);
                    let mass: f64 = t.iter().sum();
                    for j in 0..c {
                        gl[i * c + j] = g[0] * (probs[j] * mass - t[j]) / b as f64;
                    }
                }
                accumulate(grads, logits, gl);
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2("backward").expect("recorded ops are 2-d")
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn record(self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let requires = self.tape.requires(inputs);
        self.tape.push(value, op, requires)
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`, with `other` stored as `n×k`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (m, k) = a.dims2("matmul_t")?;
            let (n, k2) = b.dims2("matmul_t")?;
            if k != k2 {
                return Err(TensorError::Shape {
                    op: "matmul_t",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::matrix(m, n, matmul_nt_raw(a.data(), b.data(), m, k, n))?
        };
        Ok(self.record(value, Op::MatMulNt(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            let (_, n) = a.dims2("add_row")?;
            if b.len() != n {
                return Err(TensorError::Shape {
                    op: "add_row",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
            }
            out
        };
        Ok(self.record(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.record(value, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.record(value, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v * c));
        self.record(value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| if v > 0.0 { v } else { 0.0 }));
        self.record(value, Op::Relu(self.id), &[self.id])
    }

    /// Stacks `x − u` for every offset row `u`.
    ///
    /// `self` is `B×d`. `offsets` is either `N×d` (one offset shared by every
    /// row) or `(N·B)×d` (one offset per row and copy). The result is
    /// `(N·B)×d`, copy-major: row `i·B + j` is `x_j − u_{i,j}`.
    pub fn shift_rows(self, offsets: &Tensor, copies: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (b, d) = x.dims2("shift_rows")?;
            let (rows, od) = offsets.dims2("shift_rows")?;
            let per_example = rows == copies * b && rows != copies;
            if od != d || copies == 0 || !(rows == copies || per_example) {
                return Err(TensorError::Shape {
                    op: "shift_rows",
                    lhs: x.shape().to_vec(),
                    rhs: offsets.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(copies * b * d);
            for i in 0..copies {
                for j in 0..b {
                    let u = if per_example {
                        offsets.row(i * b + j)
                    } else {
                        offsets.row(i)
                    };
                    out.extend(x.row(j).iter().zip(u).map(|(a, u)| a - u));
                }
            }
            Tensor::matrix(copies * b, d, out)?
        };
        Ok(self.record(value, Op::ShiftRows { x: self.id, copies }, &[self.id]))
    }

    /// Averages `blocks` consecutive row-blocks: `(N·B)×c → B×c`.
    pub fn block_mean(self, blocks: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let (rows, c) = src.dims2("block_mean")?;
            if blocks == 0 || rows % blocks != 0 {
                return Err(TensorError::Shape {
                    op: "block_mean",
                    lhs: src.shape().to_vec(),
                    rhs: vec![blocks],
                });
            }
            let b = rows / blocks;
            let n = blocks as f64;
            let mut out = vec![0.0; b * c];
            for block in src.data().chunks(b * c) {
                out.iter_mut().zip(block).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= n);
            Tensor::matrix(b, c, out)?
        };
        Ok(self.record(
            value,
            Op::BlockMean {
                src: self.id,
                blocks,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.data().iter().sum()));
        self.record(value, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64));
        self.record(value, Op::Mean(self.id), &[self.id])
    }

    /// Mean of `φ(t_i · f_i)` over a column of predictions.
    pub fn margin_loss(self, targets: &[f64], surrogate: Surrogate) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let pred = &nodes[self.id].value;
            if pred.len() != targets.len() || pred.cols() != 1 {
                return Err(TensorError::Shape {
                    op: "margin_loss",
                    lhs: pred.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let total: f64 = pred
                .data()
                .iter()
                .zip(targets)
                .map(|(&p, &t)| surrogate.value(t * p))
                .sum();
            Tensor::scalar(total / targets.len() as f64)
        };
        Ok(self.record(
            value,
            Op::MarginLoss {
                pred: self.id,
                targets: targets.to_vec(),
                surrogate,
            },
            &[self.id],
        ))
    }

    /// Mean soft-target cross-entropy `−Σ_c t_c log softmax(z)_c`.
    pub fn softmax_cross_entropy(self, targets: &Tensor) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let logits = &nodes[self.id].value;
            let (b, c) = logits.dims2("softmax_cross_entropy")?;
            if targets.shape() != [b, c] {
                return Err(TensorError::Shape {
                    op: "softmax_cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: targets.shape().to_vec(),
                });
            }
            let mut total = 0.0;
            for i in 0..b {
                let lp = log_softmax(logits.row(i));
                total -= lp.iter().zip(targets.row(i)).map(|(l, t)| l * t).sum::<f64>();
            }
            Tensor::scalar(total / b as f64)
        };
        Ok(self.record(
            value,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                targets: targets.clone(),
            },
            &[self.id],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut plus = at.to_vec();
                let mut minus = at.to_vec();
                plus[i] += step;
                minus[i] -= step;
                (f(&plus) - f(&minus)) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn linear_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = w.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn relu_values_and_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![-1.0, 2.0, 0.0, 3.0, -3.0]));
        let r = a.relu();
        assert_eq!(r.value().data(), &[0.0, 2.0, 0.0, 3.0, 0.0]);
        tape.backward(r.sum()).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn all_negative_relu_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![-1.0, -0.5, -7.0]));
        let r = a.relu();
        assert!(r.value().data().iter().all(|&v| v == 0.0));
        tape.backward(r.sum()).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_blocks_gradient_to_scale_factor() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::vector(vec![4.0]));
        let neg = tape.constant(Tensor::vector(vec![-5.0]));
        let loss = neg.relu().mul(c).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let x = tape.constant(Tensor::vector(vec![2.0, 5.0]));
        let loss = w.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 10.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w.relu()),
            Err(TensorError::NonScalarLoss(_))
        ));
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(c.sum()), Err(TensorError::DetachedLoss));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let w0 = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.25, 3.0, 1.5]).unwrap();
        let tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, w0.clone()).unwrap());
        let xv = tape.constant(x.clone());
        let loss = w.matmul(xv).unwrap().sum();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap();

        let f = |p: &[f64]| {
            let wt = Tensor::matrix(2, 3, p.to_vec()).unwrap();
            wt.matmul(&x).unwrap().data().iter().sum::<f64>()
        };
        let fd = central_diff(f, &w0, 1e-5);
        for (a, n) in analytic.data().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-6 * n.abs().max(1.0), "{a} vs {n}");
        }
        // d/dW_ij sum(W x) = sum_k x_jk, replicated across rows.
        assert_eq!(analytic.data()[0], analytic.data()[3]);
    }

    #[test]
    fn matmul_t_gradient_matches_matmul_with_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let t1 = Tape::new();
        let (a1, b1) = (t1.leaf(a.clone()), t1.leaf(b.clone()));
        let l1 = a1.matmul_t(b1).unwrap().relu().sum();
        t1.backward(l1).unwrap();

        let t2 = Tape::new();
        let (a2, b2) = (t2.leaf(a.clone()), t2.leaf(b.transpose().unwrap()));
        let l2 = a2.matmul(b2).unwrap().relu().sum();
        t2.backward(l2).unwrap();

        assert_eq!(l1.value(), l2.value());
        assert_eq!(t1.grad(a1), t2.grad(a2));
        assert_eq!(t1.grad(b1).unwrap(), t2.grad(b2).unwrap().transpose().unwrap());
    }

    #[test]
    fn shift_and_block_mean_gradients() {
        let x0 = vec![0.3, -0.2, 1.0, 0.5];
        let offsets = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.0, 0.05, -0.1]).unwrap();
        let w = Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap();
        let eval = |xs: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(2, 2, xs.to_vec()).unwrap());
            let wv = tape.constant(w.clone());
            let out = x
                .shift_rows(&offsets, 3)
                .unwrap()
                .matmul_t(wv)
                .unwrap()
                .relu()
                .block_mean(3)
                .unwrap();
            out.margin_loss(&[1.0, -1.0], Surrogate::Logistic)
                .unwrap()
                .value()
                .item()
        };
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, x0.clone()).unwrap());
        let wv = tape.constant(w.clone());
        let loss = x
            .shift_rows(&offsets, 3)
            .unwrap()
            .matmul_t(wv)
            .unwrap()
            .relu()
            .block_mean(3)
            .unwrap()
            .margin_loss(&[1.0, -1.0], Surrogate::Logistic)
            .unwrap();
        tape.backward(loss).unwrap();
        let fd = central_diff(eval, &x0, 1e-6);
        for (a, n) in tape.grad(x).unwrap().data().iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let z0 = vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3];
        let targets = Tensor::matrix(2, 3, vec![0.7, 0.3, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let eval = |z: &[f64]| {
            let tape = Tape::new();
            let l = tape.constant(Tensor::matrix(2, 3, z.to_vec()).unwrap());
            l.softmax_cross_entropy(&targets).unwrap().value().item()
        };
        let tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(2, 3, z0.clone()).unwrap());
        let loss = l.softmax_cross_entropy(&targets).unwrap();
        tape.backward(loss).unwrap();
        let fd = central_diff(eval, &z0, 1e-5);
        for (a, n) in tape.grad(l).unwrap().data().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-5 * n.abs().max(1e-3), "{a} vs {n}");
        }
    }

    #[test]
    fn shift_rows_rejects_mismatched_offsets() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(x.shift_rows(&Tensor::zeros(&[3, 3]), 3).is_err());
        assert!(x.shift_rows(&Tensor::zeros(&[5, 2]), 2).is_err());
        // per-example layout: copies * batch rows
        assert_eq!(
            x.shift_rows(&Tensor::zeros(&[8, 2]), 2).unwrap().shape(),
            vec![8, 2]
        );
    }
}
