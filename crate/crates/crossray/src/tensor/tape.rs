//! Wengert tape: recorded operations, `Var` handles, and reverse-mode
//! backpropagation.
//!
//! A [`Tape`] owns an append-only list of nodes; node ids are topologically
//! ordered by construction (every input id of node k is < k). One training
//! step builds and consumes one tape on one thread. `backward` frees
//! intermediate values and gradients eagerly as it walks the tape, so read
//! any forward values you need *before* calling it; leaf values and leaf
//! gradients survive.

use std::cell::RefCell;
use std::rc::Rc;

use super::ops;
use super::{Scalar, Tensor, TensorError};

#[derive(Clone)]
enum OpKind<S: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { x: usize, c: S },
    Relu { x: usize },
    Softplus { x: usize },
    Sigmoid { x: usize },
    Sin { x: usize },
    Cos { x: usize },
    Exp { x: usize },
    Reduce { x: usize, axes: Vec<usize>, mean: bool },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    AdaptivePool { x: usize },
    SpatialCov { x: usize },
    L1Norm { x: usize },
    SqL2Norm { x: usize },
    BilinearSample { map: usize, rows: Vec<f64>, cols: Vec<f64> },
}

struct Node<S: Scalar> {
    value: Option<Tensor<S>>,
    grad: Option<Tensor<S>>,
    shape: Vec<usize>,
    op: OpKind<S>,
    requires_grad: bool,
}

/// Cheaply cloneable handle to a shared tape.
pub struct Tape<S: Scalar> {
    nodes: Rc<RefCell<Vec<Node<S>>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape { nodes: Rc::clone(&self.nodes) }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value recorded on a tape.
#[derive(Clone)]
pub struct Var<S: Scalar> {
    tape: Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value; gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<S> {
        self.push(value, OpKind::Leaf, requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<S>, op: OpKind<S>, requires_grad: bool) -> Var<S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) {
            for input in op_inputs(&op) {
                debug_assert!(input < id, "tape op inputs must precede the op");
            }
        }
        nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            grad: None,
            op,
            requires_grad,
        });
        Var { tape: self.clone(), id }
    }

    /// Concatenates along `axis`.
    pub fn concat(&self, parts: &[&Var<S>], axis: usize) -> Result<Var<S>, TensorError> {
        for p in parts {
            same_tape(self, &p.tape, "concat")?;
        }
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<S>> = parts.iter().map(|p| node_value(&nodes, p.id, "concat")).collect();
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            (ops::concat(&vals, axis)?, rg)
        };
        ops::ensure_finite("concat", &out)?;
        Ok(self.push(out, OpKind::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg))
    }

    /// Reverse-mode sweep from a scalar loss; returns the loss value.
    ///
    /// Gradients land on every `requires_grad` leaf reachable from the loss
    /// (query them with [`Var::grad`]; unreached leaves report `None`).
    /// Intermediate node values and gradients are freed on the fly.
    pub fn backward(&self, loss: &Var<S>) -> Result<Tensor<S>, TensorError> {
        same_tape(self, &loss.tape, "backward")?;
        let mut nodes = self.nodes.borrow_mut();
        let loss_value = {
            let n = &nodes[loss.id];
            if n.shape.iter().product::<usize>() != 1 {
                return Err(TensorError::NonScalarLoss(n.shape.clone()));
            }
            node_value(&nodes, loss.id, "backward").clone()
        };
        let seed = Tensor::full(loss_value.shape(), S::ONE);
        nodes[loss.id].grad = Some(seed);

        for id in (0..=loss.id).rev() {
            if nodes[id].grad.is_none() || matches!(nodes[id].op, OpKind::Leaf) {
                continue;
            }
            let op = nodes[id].op.clone();
            let g = nodes[id].grad.take().expect("checked above");
            let own = nodes[id].value.take();
            let deltas = vjp(&nodes, &op, &g, own.as_ref());
            for (target, delta) in deltas {
                if nodes[target].requires_grad {
                    accum(&mut nodes[target].grad, delta);
                }
            }
        }
        Ok(loss_value)
    }
}

fn accum<S: Scalar>(slot: &mut Option<Tensor<S>>, delta: Tensor<S>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a = a.addv(*b);
            }
        }
    }
}

fn op_inputs<S: Scalar>(op: &OpKind<S>) -> Vec<usize> {
    use OpKind::*;
    match op {
        Leaf => vec![],
        Matmul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
        Conv2d { x, w } => vec![*x, *w],
        ScalarMul { x, .. } | Relu { x } | Softplus { x } | Sigmoid { x } | Sin { x } | Cos { x }
        | Exp { x } | Reduce { x, .. } | Reshape { x } | AdaptivePool { x } | SpatialCov { x }
        | L1Norm { x } | SqL2Norm { x } => vec![*x],
        Concat { parts, .. } => parts.clone(),
        BilinearSample { map, .. } => vec![*map],
    }
}

fn node_value<'a, S: Scalar>(nodes: &'a [Node<S>], id: usize, op: &'static str) -> &'a Tensor<S> {
    nodes[id]
        .value
        .as_ref()
        .unwrap_or_else(|| panic!("{op}: node value was freed by backward; read values before backward"))
}

/// Vector-Jacobian products: gradient contributions to each input of `op`.
fn vjp<S: Scalar>(
    nodes: &[Node<S>],
    op: &OpKind<S>,
    g: &Tensor<S>,
    own: Option<&Tensor<S>>,
) -> Vec<(usize, Tensor<S>)> {
    use OpKind::*;
    let val = |id: usize| node_value(nodes, id, "backward");
    let rg = |id: usize| nodes[id].requires_grad;
    let mut out = Vec::with_capacity(2);
    match op {
        Leaf => {}
        Matmul { a, b } => {
            if rg(*a) {
                let mut da = Tensor::zeros(&nodes[*a].shape);
                ops::gemm_into(1.0, g, false, val(*b), true, 0.0, &mut da);
                out.push((*a, da));
            }
            if rg(*b) {
                let mut db = Tensor::zeros(&nodes[*b].shape);
                ops::gemm_into(1.0, val(*a), true, g, false, 0.0, &mut db);
                out.push((*b, db));
            }
        }
        Conv2d { x, w } => {
            let (dx, dw) = ops::conv2d_backward(val(*x), val(*w), g);
            if rg(*x) {
                out.push((*x, dx));
            }
            if rg(*w) {
                out.push((*w, dw));
            }
        }
        Add { a, b } => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                out.push((*b, ops::reduce_to_shape(g, &nodes[*b].shape)));
            }
        }
        Sub { a, b } => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                let neg = g.map(|v| S::ZERO.subv(v));
                out.push((*b, ops::reduce_to_shape(&neg, &nodes[*b].shape)));
            }
        }
        Mul { a, b } => {
            if rg(*a) {
                out.push((*a, ops::binary_broadcast("mul-vjp", g, val(*b), |x, y| x.mulv(y)).expect("fwd shapes held")));
            }
            if rg(*b) {
                let ga = ops::binary_broadcast("mul-vjp", g, val(*a), |x, y| x.mulv(y)).expect("fwd shapes held");
                out.push((*b, ops::reduce_to_shape(&ga, &nodes[*b].shape)));
            }
        }
        ScalarMul { x, c } => {
            if rg(*x) {
                out.push((*x, g.map(|v| v.mulv(*c))));
            }
        }
        Relu { x } => {
            if rg(*x) {
                out.push((*x, ops::zip(g, val(*x), |gv, xv| if xv > S::ZERO { gv } else { S::ZERO })));
            }
        }
        Softplus { x } => {
            if rg(*x) {
                out.push((*x, ops::zip(g, val(*x), |gv, xv| gv.mulv(S::from_f64(sigmoid_f64(xv.to_f64()))))));
            }
        }
        Sigmoid { x } => {
            if rg(*x) {
                let y = own.expect("sigmoid keeps its output");
                out.push((*x, ops::zip(g, y, |gv, yv| gv.mulv(yv.mulv(S::ONE.subv(yv))))));
            }
        }
        Sin { x } => {
            if rg(*x) {
                out.push((*x, ops::zip(g, val(*x), |gv, xv| gv.mulv(xv.cos()))));
            }
        }
        Cos { x } => {
            if rg(*x) {
                out.push((*x, ops::zip(g, val(*x), |gv, xv| S::ZERO.subv(gv.mulv(xv.sin())))));
            }
        }
        Exp { x } => {
            if rg(*x) {
                let y = own.expect("exp keeps its output");
                out.push((*x, ops::zip(g, y, |gv, yv| gv.mulv(yv))));
            }
        }
        Reduce { x, axes, mean } => {
            if rg(*x) {
                out.push((*x, ops::reduce_backward(g, &nodes[*x].shape, axes, *mean)));
            }
        }
        Reshape { x } => {
            if rg(*x) {
                out.push((*x, g.clone().reshaped(&nodes[*x].shape).expect("reshape vjp")));
            }
        }
        Concat { parts, axis } => {
            let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| nodes[p].shape.clone()).collect();
            let grads = ops::concat_split(g, &shapes, *axis);
            for (&p, gp) in parts.iter().zip(grads) {
                if rg(p) {
                    out.push((p, gp));
                }
            }
        }
        AdaptivePool { x } => {
            if rg(*x) {
                let s = &nodes[*x].shape;
                out.push((*x, ops::adaptive_avg_pool_backward(g, s[1], s[2])));
            }
        }
        SpatialCov { x } => {
            if rg(*x) {
                out.push((*x, ops::spatial_covariance_backward(val(*x), g)));
            }
        }
        L1Norm { x } => {
            if rg(*x) {
                let gv = g.item();
                out.push((*x, val(*x).map(|v| {
                    if v > S::ZERO {
                        gv
                    } else if v < S::ZERO {
                        S::ZERO.subv(gv)
                    } else {
                        S::ZERO
                    }
                })));
            }
        }
        SqL2Norm { x } => {
            if rg(*x) {
                let gv = g.item();
                let two = S::from_f64(2.0);
                out.push((*x, val(*x).map(|v| gv.mulv(two).mulv(v))));
            }
        }
        BilinearSample { map, rows, cols } => {
            if rg(*map) {
                let s = &nodes[*map].shape;
                out.push((*map, ops::bilinear_sample_backward(g, s[1], s[2], rows, cols)));
            }
        }
    }
    out
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_tape<S: Scalar>(a: &Tape<S>, b: &Tape<S>, op: &'static str) -> Result<(), TensorError> {
    if Rc::ptr_eq(&a.nodes, &b.nodes) {
        Ok(())
    } else {
        Err(TensorError::invalid(op, "operands recorded on different tapes"))
    }
}

impl<S: Scalar> Var<S> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Clones the forward value. Panics if it was freed by `backward`.
    pub fn value(&self) -> Tensor<S> {
        node_value(&self.tape.nodes.borrow(), self.id, "value").clone()
    }

    /// Clones the accumulated gradient (populated by `backward`); `None` for
    /// unreached or non-`requires_grad` nodes.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn unary(
        &self,
        op_name: &'static str,
        op: OpKind<S>,
        f: impl Fn(S) -> S,
    ) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            (node_value(&nodes, self.id, op_name).map(f), nodes[self.id].requires_grad)
        };
        ops::ensure_finite(op_name, &out)?;
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        &self,
        other: &Var<S>,
        op_name: &'static str,
        op: OpKind<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<S>, TensorError> {
        same_tape(&self.tape, &other.tape, op_name)?;
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = node_value(&nodes, self.id, op_name);
            let b = node_value(&nodes, other.id, op_name);
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (ops::binary_broadcast(op_name, a, b, f)?, rg)
        };
        ops::ensure_finite(op_name, &out)?;
        Ok(self.tape.push(out, op, rg))
    }

    /// (M,K)·(K,N) matrix product.
    pub fn matmul(&self, other: &Var<S>) -> Result<Var<S>, TensorError> {
        same_tape(&self.tape, &other.tape, "matmul")?;
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = node_value(&nodes, self.id, "matmul");
            let b = node_value(&nodes, other.id, "matmul");
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (ops::matmul(a, b)?, rg)
        };
        ops::ensure_finite("matmul", &out)?;
        Ok(self.tape.push(out, OpKind::Matmul { a: self.id, b: other.id }, rg))
    }

    /// 3×3 stride-1 zero-padded convolution; `self` is (Cin,H,W), `weight`
    /// is (Cout,Cin,3,3).
    pub fn conv2d(&self, weight: &Var<S>) -> Result<Var<S>, TensorError> {
        same_tape(&self.tape, &weight.tape, "conv2d")?;
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "conv2d");
            let w = node_value(&nodes, weight.id, "conv2d");
            let rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
            (ops::conv2d(x, w)?, rg)
        };
        ops::ensure_finite("conv2d", &out)?;
        Ok(self.tape.push(out, OpKind::Conv2d { x: self.id, w: weight.id }, rg))
    }

    /// Elementwise sum; `other` may broadcast (trailing axes, size-1 stretch).
    pub fn add(&self, other: &Var<S>) -> Result<Var<S>, TensorError> {
        self.binary(other, "add", OpKind::Add { a: self.id, b: other.id }, |x, y| x.addv(y))
    }

    pub fn sub(&self, other: &Var<S>) -> Result<Var<S>, TensorError> {
        self.binary(other, "sub", OpKind::Sub { a: self.id, b: other.id }, |x, y| x.subv(y))
    }

    /// Elementwise (Hadamard) product; `other` may broadcast.
    pub fn mul(&self, other: &Var<S>) -> Result<Var<S>, TensorError> {
        self.binary(other, "elementwise-mul", OpKind::Mul { a: self.id, b: other.id }, |x, y| {
            x.mulv(y)
        })
    }

    pub fn scalar_mul(&self, c: f64) -> Result<Var<S>, TensorError> {
        let cs = S::from_f64(c);
        self.unary("scalar-mul", OpKind::ScalarMul { x: self.id, c: cs }, |v| v.mulv(cs))
    }

    pub fn relu(&self) -> Result<Var<S>, TensorError> {
        self.unary("relu", OpKind::Relu { x: self.id }, |v| v.maxv(S::ZERO))
    }

    pub fn softplus(&self) -> Result<Var<S>, TensorError> {
        self.unary("softplus", OpKind::Softplus { x: self.id }, |v| {
            S::from_f64(softplus_f64(v.to_f64()))
        })
    }

    pub fn sigmoid(&self) -> Result<Var<S>, TensorError> {
        self.unary("sigmoid", OpKind::Sigmoid { x: self.id }, |v| {
            S::from_f64(sigmoid_f64(v.to_f64()))
        })
    }

    pub fn sin(&self) -> Result<Var<S>, TensorError> {
        self.unary("sin", OpKind::Sin { x: self.id }, |v| v.sin())
    }

    pub fn cos(&self) -> Result<Var<S>, TensorError> {
        self.unary("cos", OpKind::Cos { x: self.id }, |v| v.cos())
    }

    pub fn exp(&self) -> Result<Var<S>, TensorError> {
        self.unary("exp", OpKind::Exp { x: self.id }, |v| v.exp())
    }

    /// Sum over `axes`; all axes (→ scalar) when empty.
    pub fn sum(&self, axes: &[usize]) -> Result<Var<S>, TensorError> {
        self.reduction(axes, false)
    }

    /// Mean over `axes`; all axes (→ scalar) when empty.
    pub fn mean(&self, axes: &[usize]) -> Result<Var<S>, TensorError> {
        self.reduction(axes, true)
    }

    fn reduction(&self, axes: &[usize], mean: bool) -> Result<Var<S>, TensorError> {
        let name: &'static str = if mean { "mean" } else { "sum" };
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, name);
            (ops::reduce(x, axes, mean)?, nodes[self.id].requires_grad)
        };
        ops::ensure_finite(name, &out)?;
        Ok(self.tape.push(out, OpKind::Reduce { x: self.id, axes: axes.to_vec(), mean }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "reshape");
            (x.clone().reshaped(shape)?, nodes[self.id].requires_grad)
        };
        Ok(self.tape.push(out, OpKind::Reshape { x: self.id }, rg))
    }

    /// Adaptive average pooling of (C,H,W) to a fixed (C,oh,ow) grid.
    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "adaptive-average-pool");
            (ops::adaptive_avg_pool(x, oh, ow)?, nodes[self.id].requires_grad)
        };
        ops::ensure_finite("adaptive-average-pool", &out)?;
        Ok(self.tape.push(out, OpKind::AdaptivePool { x: self.id }, rg))
    }

    /// Channel covariance over spatial positions, divisor N−1: (C,…) → (C,C).
    pub fn spatial_covariance(&self) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "spatial-covariance");
            (ops::spatial_covariance(x)?, nodes[self.id].requires_grad)
        };
        ops::ensure_finite("spatial-covariance", &out)?;
        Ok(self.tape.push(out, OpKind::SpatialCov { x: self.id }, rg))
    }

    /// Σ|xᵢ| → scalar.
    pub fn l1_norm(&self) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "l1-norm");
            let s = x.data().iter().fold(0.0, |acc, v| acc + v.to_f64().abs());
            (Tensor::scalar(S::from_f64(s)), nodes[self.id].requires_grad)
        };
        ops::ensure_finite("l1-norm", &out)?;
        Ok(self.tape.push(out, OpKind::L1Norm { x: self.id }, rg))
    }

    /// Σxᵢ² → scalar.
    pub fn sq_l2_norm(&self) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "squared-l2-norm");
            let s = x.data().iter().fold(0.0, |acc, v| {
                let f = v.to_f64();
                acc + f * f
            });
            (Tensor::scalar(S::from_f64(s)), nodes[self.id].requires_grad)
        };
        ops::ensure_finite("squared-l2-norm", &out)?;
        Ok(self.tape.push(out, OpKind::SqL2Norm { x: self.id }, rg))
    }

    /// Bilinear interpolation of an (C,H,W) map at (row, col) coordinates
    /// → (C, P). Gradients flow to the map only; coordinates are constants.
    pub fn bilinear_sample(&self, rows: &[f64], cols: &[f64]) -> Result<Var<S>, TensorError> {
        let (out, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = node_value(&nodes, self.id, "bilinear-sample");
            (ops::bilinear_sample(x, rows, cols)?, nodes[self.id].requires_grad)
        };
        ops::ensure_finite("bilinear-sample", &out)?;
        Ok(self.tape.push(
            out,
            OpKind::BilinearSample { map: self.id, rows: rows.to_vec(), cols: cols.to_vec() },
            rg,
        ))
    }
}
