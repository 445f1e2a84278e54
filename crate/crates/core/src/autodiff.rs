//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in evaluation
//! order, so the node list is already topologically sorted. [`Tape::backward`]
//! walks it once in reverse. Tapes are meant to be built for one evaluation
//! and dropped; nothing persists between evaluations.
//!
//! Shape errors in `Var` arithmetic are contract violations and panic, in the
//! same way out-of-bounds indexing does.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};
use crate::tensor::{sigmoid, softplus, Tensor, TensorError};
use crate::math;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Log(usize),
    Exp(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Digamma(usize),
    LogGamma(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumAxis(usize),
    Matmul(usize, usize),
    Transpose(usize),
}

impl Op {
    fn inputs(self) -> [Option<usize>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Digamma(a)
            | Op::LogGamma(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a)
            | Op::Transpose(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    // whether any leaf reaches this node
    grad: bool,
}

/// Records operations for one reverse-mode evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Adjoints of every recorded node with respect to a scalar root.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not reach it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.adjoints[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = op.inputs().iter().flatten().any(|&i| nodes[i].grad);
        nodes.push(Node { value, op, grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, grad: true });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value treated as a constant; its gradient reads as zeros.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adj[root.id] = Some(Tensor::full(root_value.shape(), 1.0));

        let acc = |adj: &mut [Option<Tensor>], id: usize, g: Tensor| {
            if !nodes[id].grad {
                return;
            }
            match &mut adj[id] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        };

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].grad;
            let zip = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| a.zip_broadcast(b, f).expect("shape checked on record");
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.sum_to_shape(val(a).shape()));
                    acc(&mut adj, b, g.sum_to_shape(val(b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, a, g.sum_to_shape(val(a).shape()));
                    acc(&mut adj, b, g.map(|v| -v).sum_to_shape(val(b).shape()));
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        acc(&mut adj, a, zip(&g, val(b), |x, y| x * y).sum_to_shape(val(a).shape()));
                    }
                    if wants(b) {
                        acc(&mut adj, b, zip(&g, val(a), |x, y| x * y).sum_to_shape(val(b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if wants(a) {
                        acc(&mut adj, a, zip(&g, val(b), |x, y| x / y).sum_to_shape(val(a).shape()));
                    }
                    if wants(b) {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let gb = zip(&zip(&g, &node.value, |x, y| -x * y), val(b), |x, y| x / y);
                        acc(&mut adj, b, gb.sum_to_shape(val(b).shape()));
                    }
                }
                Op::Neg(a) => acc(&mut adj, a, g.map(|v| -v)),
                Op::Scale(a, k) => acc(&mut adj, a, g.map(|v| v * k)),
                Op::Offset(a) => acc(&mut adj, a, g.clone()),
                Op::Log(a) => acc(&mut adj, a, zip(&g, val(a), |x, y| x / y)),
                Op::Exp(a) => acc(&mut adj, a, zip(&g, &node.value, |x, y| x * y)),
                Op::Softplus(a) => acc(&mut adj, a, zip(&g, val(a), |x, y| x * sigmoid(y))),
                Op::Sigmoid(a) => acc(&mut adj, a, zip(&g, &node.value, |x, s| x * s * (1.0 - s))),
                Op::Tanh(a) => acc(&mut adj, a, zip(&g, &node.value, |x, t| x * (1.0 - t * t))),
                Op::Digamma(a) => acc(&mut adj, a, zip(&g, val(a), |x, y| x * trigamma_unchecked(y))),
                Op::LogGamma(a) => acc(&mut adj, a, zip(&g, val(a), |x, y| x * digamma_unchecked(y))),
                Op::ClampMin(a, lo) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(val(a).data())
                        .map(|(&x, &y)| if y > lo { x } else { 0.0 })
                        .collect();
                    acc(&mut adj, a, Tensor::from_parts(g.shape().to_vec(), ga));
                }
                Op::Sum(a) => acc(&mut adj, a, Tensor::full(val(a).shape(), g.item())),
                Op::SumAxis(a) => {
                    let ga = Tensor::zeros(val(a).shape()).zip_broadcast(&g, |_, y| y).expect("axis kept");
                    acc(&mut adj, a, ga);
                }
                Op::Matmul(a, b) => {
                    if wants(a) {
                        acc(&mut adj, a, g.matmul(&val(b).transpose().expect("rank 2")).expect("matmul shapes"));
                    }
                    if wants(b) {
                        acc(&mut adj, b, val(a).transpose().expect("rank 2").matmul(&g).expect("matmul shapes"));
                    }
                }
                Op::Transpose(a) => acc(&mut adj, a, g.transpose().expect("rank 2")),
            }
            adj[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// The value of a scalar node.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.with_value(|t| t.map(f));
        self.tape.push(out, op)
    }

    fn binary(self, other: Var<'t>, op: Op, f: fn(f64, f64) -> f64) -> Var<'t> {
        assert!(core::ptr::eq(self.tape, other.tape), "operands recorded on different tapes");
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .zip_broadcast(&nodes[other.id].value, f)
                .unwrap_or_else(|e| panic!("contract violation: {e}"))
        };
        self.tape.push(out, op)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + k)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), math::ln)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), math::exp)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), math::tanh)
    }

    /// Elementwise digamma; every entry must be positive.
    pub fn digamma(self) -> Var<'t> {
        self.assert_positive("digamma");
        self.unary(Op::Digamma(self.id), digamma_unchecked)
    }

    /// Elementwise ln Γ; every entry must be positive.
    pub fn log_gamma(self) -> Var<'t> {
        self.assert_positive("log_gamma");
        self.unary(Op::LogGamma(self.id), log_gamma_unchecked)
    }

    fn assert_positive(&self, what: &str) {
        self.with_value(|t| {
            if let Some(v) = t.data().iter().find(|v| !(**v > 0.0)) {
                panic!("contract violation: {what} of non-positive value {v}");
            }
        })
    }

    /// `max(x, lo)`; the gradient is passed only where `x > lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, lo), |v| v.max(lo))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.with_value(|t| t.sum()));
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|t| t.numel()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let out = self.with_value(|t| t.sum_axis(axis)).unwrap_or_else(|e| panic!("contract violation: {e}"));
        self.tape.push(out, Op::SumAxis(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .matmul(&nodes[other.id].value)
                .unwrap_or_else(|e| panic!("contract violation: {e}"))
        };
        self.tape.push(out, Op::Matmul(self.id, other.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.with_value(|t| t.transpose()).unwrap_or_else(|e| panic!("contract violation: {e}"));
        self.tape.push(out, Op::Transpose(self.id))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |x, y| x + y)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |x, y| x - y)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |x, y| x * y)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.with_value(|t| t.data().contains(&0.0)) {
            panic!("contract violation: division by exact zero");
        }
        self.binary(rhs, Op::Div(self.id, rhs.id), |x, y| x / y)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }
}
