//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough information to route an upstream gradient back to its inputs. Node
//! ids increase in execution order, so the tape is always a topological order
//! of the graph and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::layout::{sum_to, Layout};
use crate::real::Real;
use crate::special;
use crate::tensor::{broadcast_shape, numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Lgamma,
    Digamma,
}

/// Operation selector accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Binary(BinaryOp),
    Unary(UnaryOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Backward rule for an operation implemented outside this crate.
///
/// `backward` receives the input values, the output value and the gradient of
/// the loss with respect to the output, and returns one gradient per input
/// (`None` when the input receives no contribution).
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Affine { a: usize, mul: T },
    ClampMin { a: usize, min: T },
    MatMul(usize, usize),
    Reduce { a: usize, kind: ReduceOp, keep_dims: Vec<usize>, argmax: Vec<usize> },
    Reshape(usize),
    Narrow { a: usize, axis: usize, start: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Affine { a, .. }
            | Op::ClampMin { a, .. }
            | Op::Reduce { a, .. }
            | Op::Reshape(a)
            | Op::Narrow { a, .. } => vec![*a],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Record of one forward pass.
pub struct Tape<T: Real> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("id", &self.id).field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(tape {}, node {})", self.tape.id, self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape_id: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Result<Option<&[T]>> {
        if v.tape.id != self.tape_id {
            return Err(TensorError::Graph(format!(
                "variable from tape {} queried against gradients of tape {}",
                v.tape.id, self.tape_id
            )));
        }
        Ok(self.grads.get(v.id).and_then(|g| g.as_deref()))
    }

    /// Like [`Gradients::get`] but returns zeros for untouched variables.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Result<Vec<T>> {
        let n = v.value().numel();
        Ok(self.get(v)?.map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); n]))
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::domain(op, format!("non-finite result at element {pos}")));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad,
            other => other.parents().iter().any(|&p| nodes[p].requires_grad),
        };
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn own(&self, v: Var<'_, T>) -> Result<usize> {
        if !std::ptr::eq(v.tape, self) {
            return Err(TensorError::Graph(format!(
                "variable belongs to tape {}, not tape {}",
                v.tape.id, self.id
            )));
        }
        Ok(v.id)
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn elementwise<'t>(&'t self, op: ElementwiseOp, a: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        match (op, b) {
            (ElementwiseOp::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseOp::Unary(k), None) => self.unary(k, a),
            (ElementwiseOp::Binary(k), None) => Err(TensorError::shape(format!("{k:?} needs two operands"))),
            (ElementwiseOp::Unary(k), Some(_)) => Err(TensorError::shape(format!("{k:?} takes one operand"))),
        }
    }

    pub fn binary<'t>(&'t self, kind: BinaryOp, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ia, ib) = (self.own(a)?, self.own(b)?);
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let dims = broadcast_shape(va.dims(), vb.dims())?;
            let n = numel(&dims);
            if kind == BinaryOp::Div {
                if let Some(pos) = vb.data().iter().position(|v| *v == T::zero()) {
                    return Err(TensorError::domain("div", format!("zero divisor at element {pos}")));
                }
            }
            let f: fn(T, T) -> T = match kind {
                BinaryOp::Add => |x, y| x + y,
                BinaryOp::Sub => |x, y| x - y,
                BinaryOp::Mul => |x, y| x * y,
                BinaryOp::Div => |x, y| x / y,
            };
            let (xa, xb) = (va.data(), vb.data());
            let data = match (Layout::new(&dims, va.dims()), Layout::new(&dims, vb.dims())) {
                (Layout::Same, Layout::Same) => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
                (Layout::Same, lb) => {
                    let mut out = Vec::with_capacity(n);
                    lb.for_each(n, |i, j| out.push(f(xa[i], xb[j])));
                    out
                }
                (la, Layout::Same) => {
                    let mut out = Vec::with_capacity(n);
                    la.for_each(n, |i, j| out.push(f(xa[j], xb[i])));
                    out
                }
                (la, lb) => {
                    let mut ja = vec![0usize; n];
                    la.for_each(n, |i, j| ja[i] = j);
                    let mut out = Vec::with_capacity(n);
                    lb.for_each(n, |i, j| out.push(f(xa[ja[i]], xb[j])));
                    out
                }
            };
            check_finite(binary_name(kind), &data)?;
            Tensor::new(&dims, data)?
        };
        Ok(self.push(out, Op::Binary(kind, ia, ib)))
    }

    pub fn unary<'t>(&'t self, kind: UnaryOp, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            let x = va.data();
            let name = unary_name(kind);
            let positive_only = matches!(kind, UnaryOp::Log | UnaryOp::Lgamma | UnaryOp::Digamma);
            if positive_only {
                if let Some(pos) = x.iter().position(|v| !(*v > T::zero())) {
                    return Err(TensorError::domain(name, format!("nonpositive input {} at element {pos}", x[pos])));
                }
            }
            if kind == UnaryOp::Sqrt {
                if let Some(pos) = x.iter().position(|v| *v < T::zero()) {
                    return Err(TensorError::domain(name, format!("negative input at element {pos}")));
                }
            }
            let data: Vec<T> = match kind {
                UnaryOp::Neg => x.iter().map(|&v| -v).collect(),
                UnaryOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
                UnaryOp::Tanh => x.iter().map(|&v| v.tanh()).collect(),
                UnaryOp::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
                UnaryOp::Softplus => x.iter().map(|&v| softplus(v)).collect(),
                UnaryOp::Exp => x.iter().map(|&v| v.exp()).collect(),
                UnaryOp::Log => x.iter().map(|&v| v.ln()).collect(),
                UnaryOp::Sqrt => x.iter().map(|&v| v.sqrt()).collect(),
                UnaryOp::Square => x.iter().map(|&v| v * v).collect(),
                UnaryOp::Lgamma => x.iter().map(|&v| T::lit(special::ln_gamma(v.as_f64()))).collect(),
                UnaryOp::Digamma => x.iter().map(|&v| T::lit(special::digamma(v.as_f64()))).collect(),
            };
            check_finite(name, &data)?;
            Tensor::new(va.dims(), data)?
        };
        Ok(self.push(out, Op::Unary(kind, ia)))
    }

    /// `mul * a + add` for constants `mul` and `add`.
    pub fn affine<'t>(&'t self, a: Var<'t, T>, mul: T, add: T) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            let data: Vec<T> = va.data().iter().map(|&v| mul * v + add).collect();
            check_finite("affine", &data)?;
            Tensor::new(va.dims(), data)?
        };
        Ok(self.push(out, Op::Affine { a: ia, mul }))
    }

    /// `max(a, min)`; the gradient passes through where `a >= min`.
    pub fn clamp_min<'t>(&'t self, a: Var<'t, T>, min: T) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            Tensor::new(va.dims(), va.data().iter().map(|&v| v.max(min)).collect())?
        };
        Ok(self.push(out, Op::ClampMin { a: ia, min }))
    }

    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ia, ib) = (self.own(a)?, self.own(b)?);
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let (m, k, n) = match (va.dims(), vb.dims()) {
                ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                (da, db) => {
                    return Err(TensorError::shape(format!("matmul of {da:?} by {db:?}")));
                }
            };
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, va.data(), (k as isize, 1), vb.data(), (n as isize, 1), T::zero(), &mut c);
            check_finite("matmul", &c)?;
            Tensor::new(&[m, n], c)?
        };
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// Reduces over `axes`. With `keep_dims` the reduced axes stay as size 1.
    pub fn reduce<'t>(&'t self, kind: ReduceOp, a: Var<'t, T>, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let (out, keep, argmax) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            let dims = va.dims();
            let mut reduced = vec![false; dims.len()];
            for &ax in axes {
                if ax >= dims.len() {
                    return Err(TensorError::shape(format!("axis {ax} out of range for dims {dims:?}")));
                }
                reduced[ax] = true;
            }
            let keep: Vec<usize> = dims.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
            let count = numel(dims) / numel(&keep).max(1);
            if kind == ReduceOp::Max && count == 0 {
                return Err(TensorError::shape("max over an empty axis"));
            }
            let x = va.data();
            let layout = Layout::new(dims, &keep);
            let mut argmax = Vec::new();
            let data = match kind {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let mut acc = vec![T::zero(); numel(&keep)];
                    layout.for_each(x.len(), |i, j| acc[j] += x[i]);
                    if kind == ReduceOp::Mean && count > 0 {
                        let c = T::lit(count as f64);
                        acc.iter_mut().for_each(|v| *v /= c);
                    }
                    acc
                }
                ReduceOp::Max => {
                    let mut best = vec![T::neg_infinity(); numel(&keep)];
                    argmax = vec![usize::MAX; best.len()];
                    layout.for_each(x.len(), |i, j| {
                        if argmax[j] == usize::MAX || x[i] > best[j] {
                            best[j] = x[i];
                            argmax[j] = i;
                        }
                    });
                    best
                }
            };
            let out_dims: Vec<usize> = if keep_dims {
                keep.clone()
            } else {
                dims.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect()
            };
            (Tensor::new(&out_dims, data)?, keep, argmax)
        };
        Ok(self.push(out, Op::Reduce { a: ia, kind, keep_dims: keep, argmax }))
    }

    pub fn reshape<'t>(&'t self, a: Var<'t, T>, dims: &[usize]) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            nodes[ia].value.clone().reshape(dims)?
        };
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow<'t>(&'t self, a: Var<'t, T>, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let ia = self.own(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let va = &nodes[ia].value;
            let dims = va.dims();
            if axis >= dims.len() || start + len > dims[axis] {
                return Err(TensorError::shape(format!(
                    "narrow({axis}, {start}, {len}) out of range for dims {dims:?}"
                )));
            }
            let outer = numel(&dims[..axis]);
            let inner = numel(&dims[axis + 1..]);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dims[axis] + start) * inner;
                data.extend_from_slice(&va.data()[base..base + len * inner]);
            }
            let mut od = dims.to_vec();
            od[axis] = len;
            Tensor::new(&od, data)?
        };
        Ok(self.push(out, Op::Narrow { a: ia, axis, start }))
    }

    /// Records the result of an externally computed operation.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t, T>], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var<'t, T>> {
        let ids = inputs.iter().map(|&v| self.own(v)).collect::<Result<Vec<_>>>()?;
        check_finite(op.name(), output.data())?;
        Ok(self.push(output, Op::Custom { inputs: ids, op }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let root = self.own(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(TensorError::shape(format!(
                "backward needs a scalar loss, got dims {:?}",
                nodes[root].value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (parent, contrib) in node_backward(&nodes, node, g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut lower[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { tape_id: self.id, grads })
    }
}

fn binary_name(kind: BinaryOp) -> &'static str {
    match kind {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn unary_name(kind: UnaryOp) -> &'static str {
    match kind {
        UnaryOp::Neg => "neg",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Relu => "relu",
        UnaryOp::Softplus => "softplus",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Sqrt => "sqrt",
        UnaryOp::Square => "square",
        UnaryOp::Lgamma => "lgamma",
        UnaryOp::Digamma => "digamma",
    }
}

/// `other` broadcast to `dims` and multiplied into `g`.
fn mul_broadcast<T: Real>(g: &[T], dims: &[usize], other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(g.len());
    let o = other.data();
    Layout::new(dims, other.dims()).for_each(g.len(), |i, j| out.push(f(g[i], o[j])));
    out
}

fn node_backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary(kind, a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let dims = y.dims();
            let mut out = Vec::with_capacity(2);
            let need_a = nodes[*a].requires_grad;
            let need_b = nodes[*b].requires_grad;
            match kind {
                BinaryOp::Add | BinaryOp::Sub => {
                    if need_a {
                        out.push((*a, sum_to(g, dims, va.dims())));
                    }
                    if need_b {
                        let mut gb = sum_to(g, dims, vb.dims());
                        if *kind == BinaryOp::Sub {
                            gb.iter_mut().for_each(|v| *v = -*v);
                        }
                        out.push((*b, gb));
                    }
                }
                BinaryOp::Mul => {
                    if need_a {
                        let ga = mul_broadcast(g, dims, vb, |g, x| g * x);
                        out.push((*a, sum_to(&ga, dims, va.dims())));
                    }
                    if need_b {
                        let gb = mul_broadcast(g, dims, va, |g, x| g * x);
                        out.push((*b, sum_to(&gb, dims, vb.dims())));
                    }
                }
                BinaryOp::Div => {
                    if need_a {
                        let ga = mul_broadcast(g, dims, vb, |g, x| g / x);
                        out.push((*a, sum_to(&ga, dims, va.dims())));
                    }
                    if need_b {
                        // d(a/b)/db = -(a/b)/b = -y/b
                        let gy: Vec<T> = g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                        let gb = mul_broadcast(&gy, dims, vb, |g, x| -g / x);
                        out.push((*b, sum_to(&gb, dims, vb.dims())));
                    }
                }
            }
            out
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let yv = y.data();
            let half = T::lit(0.5);
            let d: Vec<T> = match kind {
                UnaryOp::Neg => g.iter().map(|&g| -g).collect(),
                UnaryOp::Sigmoid => g.iter().zip(yv).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                UnaryOp::Tanh => g.iter().zip(yv).map(|(&g, &t)| g * (T::one() - t * t)).collect(),
                UnaryOp::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
                UnaryOp::Softplus => g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect(),
                UnaryOp::Exp => g.iter().zip(yv).map(|(&g, &e)| g * e).collect(),
                UnaryOp::Log => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
                UnaryOp::Sqrt => g.iter().zip(yv).map(|(&g, &r)| g * half / r).collect(),
                UnaryOp::Square => g.iter().zip(x).map(|(&g, &x)| g * (x + x)).collect(),
                UnaryOp::Lgamma => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * T::lit(special::digamma(x.as_f64())))
                    .collect(),
                UnaryOp::Digamma => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * T::lit(special::trigamma(x.as_f64())))
                    .collect(),
            };
            vec![(*a, d)]
        }
        Op::Affine { a, mul } => vec![(*a, g.iter().map(|&g| g * *mul).collect())],
        Op::ClampMin { a, min } => {
            let x = nodes[*a].value.data();
            vec![(*a, g.iter().zip(x).map(|(&g, &x)| if x >= *min { g } else { T::zero() }).collect())]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.dims()[0], va.dims()[1]);
            let n = vb.dims()[1];
            let mut out = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                // g [m,n] · bᵀ [n,k]
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), T::zero(), &mut ga);
                out.push((*a, ga));
            }
            if nodes[*b].requires_grad {
                // aᵀ [k,m] · g [m,n]
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, va.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb);
                out.push((*b, gb));
            }
            out
        }
        Op::Reduce { a, kind, keep_dims, argmax } => {
            let va = &nodes[*a].value;
            let n = va.numel();
            let mut gin = vec![T::zero(); n];
            match kind {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let scale = if *kind == ReduceOp::Mean {
                        T::one() / T::lit((n / numel(keep_dims).max(1)) as f64)
                    } else {
                        T::one()
                    };
                    Layout::new(va.dims(), keep_dims).for_each(n, |i, j| gin[i] = g[j] * scale);
                }
                ReduceOp::Max => {
                    for (j, &i) in argmax.iter().enumerate() {
                        gin[i] += g[j];
                    }
                }
            }
            vec![(*a, gin)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Narrow { a, axis, start } => {
            let va = &nodes[*a].value;
            let dims = va.dims();
            let len = y.dims()[*axis];
            let outer = numel(&dims[..*axis]);
            let inner = numel(&dims[*axis + 1..]);
            let mut gin = vec![T::zero(); va.numel()];
            for o in 0..outer {
                let dst = (o * dims[*axis] + start) * inner;
                let src = o * len * inner;
                gin[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*a, gin)]
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| &nodes[i].value).collect();
            let grads = op.backward(&vals, y, g);
            inputs
                .iter()
                .zip(grads)
                .filter_map(|(&i, g)| g.map(|g| (i, g)))
                .collect()
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut t = self.value().clone();
        t.requires_grad = false;
        t
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn add(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary(BinaryOp::Add, self, b)
    }

    pub fn sub(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary(BinaryOp::Sub, self, b)
    }

    pub fn mul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary(BinaryOp::Mul, self, b)
    }

    pub fn div(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.binary(BinaryOp::Div, self, b)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Neg, self)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Sigmoid, self)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Tanh, self)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Relu, self)
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Softplus, self)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Exp, self)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Log, self)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Sqrt, self)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Square, self)
    }

    pub fn lgamma(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Lgamma, self)
    }

    pub fn digamma(self) -> Result<Var<'t, T>> {
        self.tape.unary(UnaryOp::Digamma, self)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        self.tape.affine(self, T::lit(c), T::zero())
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.tape.affine(self, T::one(), T::lit(c))
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.tape.affine(self, -T::one(), T::lit(c))
    }

    pub fn clamp_min(self, min: f64) -> Result<Var<'t, T>> {
        self.tape.clamp_min(self, T::lit(min))
    }

    pub fn matmul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.matmul(self, b)
    }

    pub fn sum(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.tape.reduce(ReduceOp::Sum, self, axes, keep_dims)
    }

    pub fn mean(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.tape.reduce(ReduceOp::Mean, self, axes, keep_dims)
    }

    pub fn max(self, axes: &[usize], keep_dims: bool) -> Result<Var<'t, T>> {
        self.tape.reduce(ReduceOp::Max, self, axes, keep_dims)
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.sum(&axes, false)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.mean(&axes, false)
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t, T>> {
        self.tape.reshape(self, dims)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        self.tape.narrow(self, axis, start, len)
    }
}
