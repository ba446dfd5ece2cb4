//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! Every op records itself on a [`GradientTape`] when any operand is
//! tape-bound. Calling [`GradientTape::backward`] on a scalar loss replays
//! the recorded nodes in reverse topological order and returns gradients
//! for every watched leaf. Gradients accumulate additively when a tensor
//! feeds more than one consumer.
//!
//! Forward results are checked for NaN/Inf after every op and rejected
//! with the op name rather than propagated.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{ClodeError, Result};

pub type NodeId = usize;

const LN_2PI: f64 = 1.8378770664093453;

/// Natural log of 2*pi, shared by the Gaussian density code.
pub fn ln_2pi() -> f64 {
    LN_2PI
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    AddConst(NodeId, f64),
    Scale(NodeId, f64),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Node {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// Records ops during the forward pass; replays them for gradients.
///
/// Cloning is cheap (shared handle). Construction and backward are
/// single-threaded by design.
#[derive(Clone)]
pub struct GradientTape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
struct TapeRef {
    tape: GradientTape,
    id: NodeId,
}

/// Dense row-major tensor. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<TapeRef>,
    requires_grad: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        let ellipsis = if self.data.len() > 8 { ", .." } else { "" };
        write!(f, "Tensor{:?} {:?}{}", self.shape, head, ellipsis)
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ClodeError::NonFinite { op: op.to_string() })
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, len, inner) block decomposition of `shape` around `axis`.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(ClodeError::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        check_finite("new", &data)?;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![value]).expect("finite scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(ClodeError::InvalidArgument(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|r| r.id)
    }

    /// Same values, no tape membership.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
            requires_grad: false,
        }
    }

    /// In-place update of an untaped tensor (used by the optimizer).
    pub fn update_data(&mut self, f: impl Fn(usize, f64) -> f64) -> Result<()> {
        if self.node.is_some() {
            return Err(ClodeError::InvalidArgument(
                "cannot mutate a tape-bound tensor".into(),
            ));
        }
        let data = Arc::make_mut(&mut self.data);
        for (i, v) in data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
        check_finite("update_data", &self.data)
    }

    fn active_tape(&self, other: Option<&Tensor>, op: &str) -> Result<Option<GradientTape>> {
        match (&self.node, other.and_then(|t| t.node.as_ref())) {
            (Some(a), Some(b)) => {
                if Rc::ptr_eq(&a.tape.inner, &b.tape.inner) {
                    Ok(Some(a.tape.clone()))
                } else {
                    Err(ClodeError::InvalidArgument(format!(
                        "`{op}`: operands belong to different tapes"
                    )))
                }
            }
            (Some(a), None) => Ok(Some(a.tape.clone())),
            (None, Some(b)) => Ok(Some(b.tape.clone())),
            (None, None) => Ok(None),
        }
    }

    // ── elementwise binary ops ──────────────────────────────────────

    fn binary(
        &self,
        other: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        let out_shape = if self.shape == other.shape {
            self.shape.clone()
        } else if other.is_scalar() {
            self.shape.clone()
        } else if self.is_scalar() {
            other.shape.clone()
        } else {
            return Err(ClodeError::ShapeMismatch {
                op: name.to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        };
        let n: usize = out_shape.iter().product();
        let a_scalar = self.is_scalar() && n != self.numel();
        let b_scalar = other.is_scalar() && n != other.numel();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let a = self.data[if a_scalar { 0 } else { i }];
            let b = other.data[if b_scalar { 0 } else { i }];
            data.push(f(a, b));
        }
        check_finite(name, &data)?;
        match self.active_tape(Some(other), name)? {
            Some(tape) => {
                let a_id = tape.operand_id(self);
                let b_id = tape.operand_id(other);
                Ok(tape.record(make(a_id, b_id), out_shape, data))
            }
            None => Tensor::new(out_shape, data),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    // ── elementwise unary ops ───────────────────────────────────────

    fn unary(&self, name: &str, f: impl Fn(f64) -> f64, make: impl Fn(NodeId) -> Op) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(name, &data)?;
        match self.active_tape(None, name)? {
            Some(tape) => {
                let id = tape.operand_id(self);
                Ok(tape.record(make(id), self.shape.clone(), data))
            }
            None => Tensor::new(self.shape.clone(), data),
        }
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", |v| -v, Op::Neg)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid_scalar, Op::Sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary("softplus", softplus_scalar, Op::Softplus)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |v| v * v, Op::Square)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", |v| v + c, |id| Op::AddConst(id, c))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", |v| v * c, |id| Op::Scale(id, c))
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Matrix product. Supports (m,k)x(k,n), (m,k)x(k,) and (k,)x(k,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || ClodeError::ShapeMismatch {
            op: "matmul".to_string(),
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (m, k, n, out_shape) = match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            _ => return Err(mismatch()),
        };
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..p * n + n];
                let out = &mut data[i * n..i * n + n];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &data)?;
        match self.active_tape(Some(other), "matmul")? {
            Some(tape) => {
                let a_id = tape.operand_id(self);
                let b_id = tape.operand_id(other);
                Ok(tape.record(Op::Matmul(a_id, b_id), out_shape, data))
            }
            None => Tensor::new(out_shape, data),
        }
    }

    // ── reductions ──────────────────────────────────────────────────

    fn reduce(&self, name: &str, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let (out_shape, data) = match axis {
            None => {
                let s: f64 = self.data.iter().sum();
                let v = if mean { s / self.numel() as f64 } else { s };
                (vec![], vec![v])
            }
            Some(a) => {
                if a >= self.ndim() {
                    return Err(ClodeError::InvalidArgument(format!(
                        "{name}: axis {a} out of range for shape {:?}",
                        self.shape
                    )));
                }
                let (outer, len, inner) = axis_blocks(&self.shape, a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += self.data[(o * len + j) * inner + i];
                        }
                    }
                }
                if mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut shape = self.shape.clone();
                shape.remove(a);
                (shape, out)
            }
        };
        check_finite(name, &data)?;
        match self.active_tape(None, name)? {
            Some(tape) => {
                let id = tape.operand_id(self);
                let op = if mean { Op::Mean(id, axis) } else { Op::Sum(id, axis) };
                Ok(tape.record(op, out_shape, data))
            }
            None => Tensor::new(out_shape, data),
        }
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> Result<Tensor> {
        self.reduce("sum", None, false)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce("sum", Some(axis), false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.reduce("mean", None, true)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce("mean", Some(axis), true)
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(ClodeError::InvalidArgument("concat of zero tensors".into()));
        }
        let first = parts[0];
        if axis >= first.ndim() {
            return Err(ClodeError::InvalidArgument(format!(
                "concat: axis {axis} out of range for shape {:?}",
                first.shape
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.ndim() != first.ndim()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(ClodeError::ShapeMismatch {
                    op: "concat".to_string(),
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape[axis];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(&p.data[src..src + len * inner]);
            }
            offset += len;
        }
        check_finite("concat", &data)?;
        let mut tape: Option<GradientTape> = None;
        for p in parts {
            if let Some(r) = &p.node {
                match &tape {
                    Some(t) if !Rc::ptr_eq(&t.inner, &r.tape.inner) => {
                        return Err(ClodeError::InvalidArgument(
                            "`concat`: operands belong to different tapes".into(),
                        ))
                    }
                    None => tape = Some(r.tape.clone()),
                    _ => {}
                }
            }
        }
        match tape {
            Some(tape) => {
                let ids: Vec<NodeId> = parts.iter().map(|p| tape.operand_id(p)).collect();
                Ok(tape.record(Op::Concat(ids, axis), out_shape, data))
            }
            None => Tensor::new(out_shape, data),
        }
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(ClodeError::InvalidArgument(format!(
                "slice [{start}..{}] on axis {axis} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, alen, inner) = axis_blocks(&self.shape, axis);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * alen + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        match self.active_tape(None, "slice")? {
            Some(tape) => {
                let id = tape.operand_id(self);
                Ok(tape.record(Op::Slice { input: id, axis, start, len }, out_shape, data))
            }
            None => Tensor::new(out_shape, data),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(ClodeError::ShapeMismatch {
                op: "reshape".to_string(),
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        match self.active_tape(None, "reshape")? {
            Some(tape) => {
                let id = tape.operand_id(self);
                Ok(tape.record(Op::Reshape(id), shape.to_vec(), self.data.as_ref().clone()))
            }
            None => Tensor::new(shape.to_vec(), self.data.as_ref().clone()),
        }
    }

    /// Stack rank-1 tensors of equal length into a (rows, len) matrix.
    pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
        let reshaped: Vec<Tensor> = rows
            .iter()
            .map(|r| r.reshape(&[1, r.numel()]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = reshaped.iter().collect();
        Tensor::concat(&refs, 0)
    }
}

/// Gradients keyed by the tape node of each watched leaf.
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node_id().and_then(|id| self.grads.get(&id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bind a tensor to this tape as a differentiable leaf.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: true,
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(TapeRef { tape: self.clone(), id }),
            requires_grad: true,
        }
    }

    fn push(&self, node: Node) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Node id for an operand, registering untaped values as constant leaves.
    fn operand_id(&self, t: &Tensor) -> NodeId {
        match &t.node {
            Some(r) => r.id,
            None => self.push(Node {
                op: Op::Leaf,
                shape: t.shape.clone(),
                data: t.data.clone(),
                requires_grad: false,
            }),
        }
    }

    fn record(&self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let arc = Arc::new(data);
        let id = self.push(Node {
            op,
            shape: shape.clone(),
            data: arc.clone(),
            requires_grad: false,
        });
        Tensor {
            shape,
            data: arc,
            node: Some(TapeRef { tape: self.clone(), id }),
            requires_grad: false,
        }
    }

    /// Reverse pass from a scalar loss. Returns a gradient for every
    /// watched leaf on the tape; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        let loss_id = match &loss.node {
            Some(r) if Rc::ptr_eq(&r.tape.inner, &self.inner) => r.id,
            Some(_) => {
                return Err(ClodeError::InvalidArgument(
                    "backward: loss belongs to a different tape".into(),
                ))
            }
            None => {
                return Err(ClodeError::InvalidArgument(
                    "backward: loss is not on the tape".into(),
                ))
            }
        };
        if !loss.is_scalar() {
            return Err(ClodeError::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }

        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if grads[id].is_none() || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            let node = &nodes[id];
            backprop_node(node, &g, nodes, &mut grads);
        }

        let mut out = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad {
                let data = grads[id].take().unwrap_or_else(|| vec![0.0; node.numel()]);
                out.insert(
                    id,
                    Tensor {
                        shape: node.shape.clone(),
                        data: Arc::new(data),
                        node: None,
                        requires_grad: false,
                    },
                );
            }
        }
        Ok(GradientMap { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, add: impl Fn(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].numel()]);
    add(slot);
}

/// Index mapper for scalar-broadcast binary operands.
fn bcast(numel: usize) -> impl Fn(usize) -> usize {
    move |i| if numel == 1 { 0 } else { i }
}

fn backprop_node(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (ia, ib) = (bcast(nodes[*a].numel()), bcast(nodes[*b].numel()));
            accumulate(grads, nodes, *a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[ia(i)] += gv;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[ib(i)] += gv;
                }
            });
        }
        Op::Sub(a, b) => {
            let (ia, ib) = (bcast(nodes[*a].numel()), bcast(nodes[*b].numel()));
            accumulate(grads, nodes, *a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[ia(i)] += gv;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[ib(i)] -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ia, ib) = (bcast(nodes[*a].numel()), bcast(nodes[*b].numel()));
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            accumulate(grads, nodes, *a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[ia(i)] += gv * bv[ib(i)];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    gb[ib(i)] += gv * av[ia(i)];
                }
            });
        }
        Op::Div(a, b) => {
            let (ia, ib) = (bcast(nodes[*a].numel()), bcast(nodes[*b].numel()));
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            accumulate(grads, nodes, *a, |ga| {
                for (i, gv) in g.iter().enumerate() {
                    ga[ia(i)] += gv / bv[ib(i)];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for (i, gv) in g.iter().enumerate() {
                    let b = bv[ib(i)];
                    gb[ib(i)] -= gv * av[ia(i)] / (b * b);
                }
            });
        }
        Op::Matmul(a, b) => {
            let (ash, bsh) = (&nodes[*a].shape, &nodes[*b].shape);
            let (m, k, n) = match (ash.as_slice(), bsh.as_slice()) {
                ([m, k], [_, n]) => (*m, *k, *n),
                ([m, k], [_]) => (*m, *k, 1),
                ([k], [_, n]) => (1, *k, *n),
                _ => unreachable!("validated in forward"),
            };
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            // dA = G @ B^T
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            // dB = A^T @ G
            accumulate(grads, nodes, *b, |gb| {
                for p in 0..k {
                    for i in 0..m {
                        let a = av[i * k + p];
                        if a == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += a * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, |ga| {
            for (gi, gv) in ga.iter_mut().zip(g) {
                *gi -= gv;
            }
        }),
        Op::Tanh(a) => {
            let out = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            });
        }
        Op::Sigmoid(a) => {
            let out = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            });
        }
        Op::Exp(a) => {
            let out = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            });
        }
        Op::Log(a) => {
            let input = &nodes[*a].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] / input[i];
                }
            });
        }
        Op::Softplus(a) => {
            let input = &nodes[*a].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid_scalar(input[i]);
                }
            });
        }
        Op::Square(a) => {
            let input = &nodes[*a].data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * 2.0 * input[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let out = &node.data;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / out[i];
                }
            });
        }
        Op::AddConst(a, _) => accumulate(grads, nodes, *a, |ga| {
            for (gi, gv) in ga.iter_mut().zip(g) {
                *gi += gv;
            }
        }),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, |ga| {
                for (gi, gv) in ga.iter_mut().zip(g) {
                    *gi += c * gv;
                }
            });
        }
        Op::Sum(a, axis) => backprop_reduce(nodes, grads, *a, *axis, g, false),
        Op::Mean(a, axis) => backprop_reduce(nodes, grads, *a, *axis, g, true),
        Op::Concat(ids, axis) => {
            let out_shape = &node.shape;
            let (outer, total, inner) = axis_blocks(out_shape, *axis);
            let mut offset = 0;
            for id in ids {
                let len = nodes[*id].shape[*axis];
                accumulate(grads, nodes, *id, |gi| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gi[dst + i] += g[src + i];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { input, axis, start, len } => {
            let in_shape = &nodes[*input].shape;
            let (outer, alen, inner) = axis_blocks(in_shape, *axis);
            accumulate(grads, nodes, *input, |gi| {
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gi[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |ga| {
            for (gi, gv) in ga.iter_mut().zip(g) {
                *gi += gv;
            }
        }),
    }
}

fn backprop_reduce(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: NodeId,
    axis: Option<usize>,
    g: &[f64],
    mean: bool,
) {
    let in_shape = nodes[a].shape.clone();
    match axis {
        None => {
            let scale = if mean { 1.0 / nodes[a].numel() as f64 } else { 1.0 };
            let gv = g[0] * scale;
            accumulate(grads, nodes, a, |ga| {
                for gi in ga.iter_mut() {
                    *gi += gv;
                }
            });
        }
        Some(ax) => {
            let (outer, len, inner) = axis_blocks(&in_shape, ax);
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            accumulate(grads, nodes, a, |ga| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
    }
}

/// Central-difference gradient of a scalar-valued function.
///
/// Test oracle for [`GradientTape::backward`]; evaluates `f` only on
/// untaped tensors so it cannot share a code path with the tape.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(ClodeError::InvalidArgument("finite_diff_grad: eps must be > 0".into()));
    }
    let base = x.detach();
    let mut grad = vec![0.0; base.numel()];
    for i in 0..base.numel() {
        let mut plus = base.data().to_vec();
        let mut minus = base.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = f(&Tensor::new(base.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(base.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(base.shape().to_vec(), grad)
}
