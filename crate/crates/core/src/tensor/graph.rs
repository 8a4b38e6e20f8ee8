//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Tensor`]s. Node ids
//! are assigned in creation order, so the node list is already topologically
//! sorted and a backward sweep is a single pass over descending ids.
//!
//! Every vector-Jacobian product is itself expressed with graph operations.
//! With `create_graph` the gradient tensors stay differentiable, which is what
//! the generator's path-length penalty needs (the norm of a VJP, differentiated
//! again with respect to the generator weights).

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{self, Array};
use super::param::Param;
use crate::error::{Error, Result};

/// Additive guard inside every log-of-probability site.
pub const EPS_LOG: f64 = 1e-12;

pub(crate) type NodeId = usize;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    RecipOrZero(NodeId),
    SumTo(NodeId),
    BroadcastTo(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    PadCols(NodeId, usize),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Rc<Array>,
    requires_grad: bool,
}

struct Inner {
    uid: u64,
    nodes: Vec<Node>,
    params: HashMap<u64, NodeId>,
    frozen: HashSet<u64>,
    no_grad: usize,
}

/// A differentiation tape. Cheap to clone; clones share the same tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

/// A handle to a node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                uid: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                params: HashMap::new(),
                frozen: HashSet::new(),
                no_grad: 0,
            })),
        }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        let g = Self::new();
        g.inner.borrow_mut().no_grad = 1;
        g
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Run `f` with gradient tracking disabled for newly created nodes.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        self.inner.borrow_mut().no_grad += 1;
        let out = f();
        self.inner.borrow_mut().no_grad -= 1;
        out
    }

    fn push(&self, op: Op, value: Array, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.no_grad == 0;
        inner.nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A leaf that does not require gradients.
    pub fn constant(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, value, false)
    }

    /// A leaf input; `requires_grad` makes it a differentiation target
    /// (inputs to adversarial attacks, latent codes, gradient checks).
    pub fn input(&self, value: Array, requires_grad: bool) -> Tensor {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Array::scalar(v))
    }

    /// Bind a parameter as a leaf. Binding the same parameter twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&self, p: &Param) -> Tensor {
        if let Some(&id) = self.inner.borrow().params.get(&p.uid()) {
            return Tensor {
                graph: self.clone(),
                id,
            };
        }
        let trainable = !self.inner.borrow().frozen.contains(&p.uid());
        let t = self.push(Op::Leaf, p.value().clone(), trainable);
        self.inner.borrow_mut().params.insert(p.uid(), t.id);
        t
    }

    /// Mark parameters as frozen on this graph: they bind as constants and
    /// never receive gradients. Must be called before they are bound.
    pub fn freeze<'a>(&self, params: impl IntoIterator<Item = &'a Param>) {
        let mut inner = self.inner.borrow_mut();
        for p in params {
            inner.frozen.insert(p.uid());
        }
    }

    fn value(&self, id: NodeId) -> Rc<Array> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// First-order backward pass from a scalar loss. Gradient values are
    /// returned detached; use [`Gradients::accumulate_into`] to add them to
    /// parameter gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        self.check_root(loss)?;
        let grads = self.no_grad(|| self.backprop(loss.id, None))?;
        let inner = self.inner.borrow();
        let mut values = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(inner.nodes[id].op, Op::Leaf) && inner.nodes[id].requires_grad {
                    values.insert(id, (*inner.nodes[g.id].value).clone());
                }
            }
        }
        // Trainable parameters that the loss does not reach get zero gradients.
        for &id in inner.params.values() {
            if inner.nodes[id].requires_grad && !values.contains_key(&id) {
                values.insert(id, Array::zeros(inner.nodes[id].value.shape()));
            }
        }
        Ok(Gradients {
            graph_uid: inner.uid,
            values,
            params: inner.params.clone(),
        })
    }

    /// Gradients of `output` (a scalar, or any tensor contracted with an
    /// optional `seed`) with respect to `wrt`. With `create_graph` the returned
    /// tensors are differentiable graph nodes.
    pub fn grad(
        &self,
        output: &Tensor,
        wrt: &[&Tensor],
        seed: Option<&Tensor>,
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        if seed.is_none() {
            self.check_root(output)?;
        }
        for w in wrt {
            if !w.graph.same(self) {
                return Err(Error::contract("gradient target belongs to another graph"));
            }
        }
        let seed_id = match seed {
            Some(s) => {
                if s.shape() != output.shape() {
                    return Err(Error::Shape {
                        op: "grad seed",
                        lhs: output.shape(),
                        rhs: s.shape(),
                    });
                }
                Some(s.id)
            }
            None => None,
        };
        let grads = if create_graph {
            self.backprop(output.id, seed_id)?
        } else {
            self.no_grad(|| self.backprop(output.id, seed_id))?
        };
        wrt.iter()
            .map(|w| {
                grads[w.id].clone().ok_or_else(|| {
                    Error::contract(format!(
                        "node {} is not on the differentiable path of node {}",
                        w.id, output.id
                    ))
                })
            })
            .collect()
    }

    fn check_root(&self, loss: &Tensor) -> Result<()> {
        if !loss.graph.same(self) {
            return Err(Error::contract("loss belongs to another graph"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(())
    }

    fn backprop(&self, root: NodeId, seed: Option<NodeId>) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        if !self.requires(root) {
            return Ok(grads);
        }
        grads[root] = Some(match seed {
            Some(s) => self.tensor(s),
            None => self.constant(Array::full(self.value(root).shape(), 1.0)),
        });
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, requires) = {
                let inner = self.inner.borrow();
                (inner.nodes[id].op.clone(), inner.nodes[id].requires_grad)
            };
            if !requires {
                continue;
            }
            for (parent, pg) in self.vjp(&op, id, &g)? {
                if !self.requires(parent) {
                    continue;
                }
                grads[parent] = Some(match grads[parent].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Vector-Jacobian products for node `id` given upstream gradient `g`.
    fn vjp(&self, op: &Op, id: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let t = |i| self.tensor(i);
        let out = t(id);
        let shape_of = |i: NodeId| self.value(i).shape().to_vec();
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g.sum_to(&shape_of(a))?), (b, g.sum_to(&shape_of(b))?)],
            Op::Sub(a, b) => vec![
                (a, g.sum_to(&shape_of(a))?),
                (b, g.neg().sum_to(&shape_of(b))?),
            ],
            Op::Mul(a, b) => vec![
                (a, g.mul(&t(b))?.sum_to(&shape_of(a))?),
                (b, g.mul(&t(a))?.sum_to(&shape_of(b))?),
            ],
            Op::Div(a, b) => vec![
                (a, g.div(&t(b))?.sum_to(&shape_of(a))?),
                (b, g.mul(&out)?.div(&t(b))?.neg().sum_to(&shape_of(b))?),
            ],
            Op::Neg(a) => vec![(a, g.neg())],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::Offset(a) => vec![(a, g.clone())],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(&t(b).transpose()?)?),
                (b, t(a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::Relu(a) => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g.mul(&self.constant(mask))?)]
            }
            Op::Sigmoid(a) => vec![(a, g.mul(&out.sub(&out.mul(&out)?)?)?)],
            Op::Tanh(a) => vec![(a, g.mul(&out.mul(&out)?.neg().offset(1.0))?)],
            Op::Exp(a) => vec![(a, g.mul(&out)?)],
            Op::Log(a) => vec![(a, g.div(&t(a))?)],
            Op::Sqrt(a) => vec![(a, g.mul(&out.recip_or_zero().scale(0.5))?)],
            Op::Abs(a) => {
                let sign = self.value(a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(a, g.mul(&self.constant(sign))?)]
            }
            Op::RecipOrZero(a) => vec![(a, g.mul(&out.mul(&out)?)?.neg())],
            Op::SumTo(a) => vec![(a, g.broadcast_to(&shape_of(a))?)],
            Op::BroadcastTo(a) => vec![(a, g.sum_to(&shape_of(a))?)],
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    v.push((p, g.slice_cols(start, start + w)?));
                    start += w;
                }
                v
            }
            Op::SliceCols(a, start) => {
                let total = self.value(a).cols();
                vec![(a, g.pad_cols(start, total)?)]
            }
            Op::PadCols(a, start) => {
                let w = self.value(a).cols();
                vec![(a, g.slice_cols(start, start + w)?)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(&shape_of(a))?)],
        })
    }
}

/// Detached gradient values produced by [`Graph::backward`].
pub struct Gradients {
    graph_uid: u64,
    values: HashMap<NodeId, Array>,
    params: HashMap<u64, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a leaf tensor.
    pub fn of(&self, t: &Tensor) -> Option<&Array> {
        if t.graph.inner.borrow().uid != self.graph_uid {
            return None;
        }
        self.values.get(&t.id)
    }

    /// Gradient with respect to a parameter bound on the originating graph.
    pub fn param(&self, p: &Param) -> Option<&Array> {
        self.params.get(&p.uid()).and_then(|id| self.values.get(id))
    }

    /// Add gradients into each parameter's `grad` buffer. Parameters that
    /// were not bound as trainable on the graph are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        for p in params {
            if let Some(g) = self.param(p) {
                p.accumulate_grad(g);
            }
        }
    }
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.value(self.id)
    }

    /// Copy of the forward value.
    pub fn array(&self) -> Array {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        self.graph.constant(self.array())
    }

    fn check_graph(&self, other: &Tensor) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands belong to different graphs"))
        }
    }

    fn unary(&self, op: Op, value: Array) -> Tensor {
        self.graph.push(op, value, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = array::binary_shape(name, a.shape(), b.shape())?;
        let value = array::zip_broadcast(&a, &b, &shape, f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(op, value, rg))
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(o, "add", Op::Add(self.id, o.id), |x, y| x + y)
    }

    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(o, "sub", Op::Sub(self.id, o.id), |x, y| x - y)
    }

    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(o, "mul", Op::Mul(self.id, o.id), |x, y| x * y)
    }

    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(o, "div", Op::Div(self.id, o.id), |x, y| x / y)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.id), self.value().map(|v| -v))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.id, c), self.value().map(|v| v * c))
    }

    /// `self + c` for a constant `c`.
    pub fn offset(&self, c: f64) -> Tensor {
        self.unary(Op::Offset(self.id), self.value().map(|v| v + c))
    }

    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        self.check_graph(o)?;
        let value = self.value().matmul(&o.value())?;
        let rg = self.requires_grad() || o.requires_grad();
        Ok(self.graph.push(Op::MatMul(self.id, o.id), value, rg))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let value = self.value().transpose()?;
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.id), self.value().map(|v| v.max(0.0)))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id), self.value().map(stable_sigmoid))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.id), self.value().map(f64::tanh))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), self.value().map(f64::exp))
    }

    /// Natural log. Inputs below [`EPS_LOG`] are a domain error; use
    /// [`Tensor::log_guarded`] at probability sites.
    pub fn log(&self) -> Result<Tensor> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| !(x >= EPS_LOG)) {
            return Err(Error::Domain(format!(
                "log of {bad:e} (below guard {EPS_LOG:e})"
            )));
        }
        Ok(self.unary(Op::Log(self.id), v.map(f64::ln)))
    }

    /// `log(x + EPS_LOG)`, for non-negative probability inputs.
    pub fn log_guarded(&self) -> Tensor {
        let shifted = self.offset(EPS_LOG);
        let v = shifted.value().map(f64::ln);
        shifted.unary(Op::Log(shifted.id), v)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt(self.id), self.value().map(f64::sqrt))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.id), self.value().map(f64::abs))
    }

    /// Elementwise `1/x`, with `0` mapped to `0`.
    pub fn recip_or_zero(&self) -> Tensor {
        let v = self.value().map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.unary(Op::RecipOrZero(self.id), v)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Sum down to a shape this tensor broadcasts from.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.clone());
        }
        if !array::broadcastable(shape, v.shape()) {
            return Err(Error::Shape {
                op: "sum_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.unary(Op::SumTo(self.id), array::sum_to(&v, shape)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.clone());
        }
        if !array::broadcastable(v.shape(), shape) {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.unary(Op::BroadcastTo(self.id), array::broadcast_to(&v, shape)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[1]).expect("everything sums to a scalar")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums of a matrix, shape `[n, 1]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let n = self.value().rows();
        self.sum_to(&[n, 1])
    }

    /// Column sums of a matrix, shape `[1, d]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let d = self.value().cols();
        self.sum_to(&[1, d])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let n = first.value().rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_graph(p)?;
            let v = p.value();
            if v.shape().len() != 2 || v.rows() != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for i in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let value = Array::new(vec![n, total], data)?;
        Ok(first
            .graph
            .push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let v = self.value();
        let (n, c) = (v.rows(), v.cols());
        if v.shape().len() != 2 || start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let value = Array::new(vec![n, end - start], data)?;
        Ok(self.unary(Op::SliceCols(self.id, start), value))
    }

    /// Embed a matrix into `total` zero columns starting at `start`.
    fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor> {
        let v = self.value();
        let (n, w) = (v.rows(), v.cols());
        if start + w > total {
            return Err(Error::Shape {
                op: "pad_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, total],
            });
        }
        let mut data = vec![0.0; n * total];
        for i in 0..n {
            data[i * total + start..i * total + start + w].copy_from_slice(v.row(i));
        }
        let value = Array::new(vec![n, total], data)?;
        Ok(self.unary(Op::PadCols(self.id, start), value))
    }

    /// Row-wise softmax of a `[n, K]` matrix. The row maximum is subtracted
    /// as a constant, which leaves values and gradients unchanged.
    pub fn softmax(&self) -> Result<Tensor> {
        let shifted = self.sub(&self.row_max())?;
        let e = shifted.exp();
        e.div(&e.sum_rows()?)
    }

    /// Row-wise log-softmax of a `[n, K]` matrix.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let shifted = self.sub(&self.row_max())?;
        let lse = shifted.exp().sum_rows()?.log()?;
        shifted.sub(&lse)
    }

    fn row_max(&self) -> Tensor {
        let v = self.value();
        let maxes: Vec<f64> = v
            .iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let n = maxes.len();
        self.graph
            .constant(Array::new(vec![n, 1], maxes).expect("one max per row"))
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of `⟨output, probe⟩` with respect to `latent`, kept on the graph
/// so it can be differentiated again.
pub fn vjp(output: &Tensor, latent: &Tensor, probe: &Tensor) -> Result<Tensor> {
    let g = output.graph();
    if !latent.requires_grad() {
        return Err(Error::contract("vjp target does not require gradients"));
    }
    if probe.shape() != output.shape() {
        return Err(Error::Shape {
            op: "vjp probe",
            lhs: output.shape(),
            rhs: probe.shape(),
        });
    }
    if !output.requires_grad() {
        // Output does not depend on anything differentiable: zero Jacobian,
        // provided the latent lives on this graph at all.
        latent.check_graph(output)?;
        return Ok(g.constant(Array::zeros(&latent.shape())));
    }
    let contracted = output.mul(probe)?.sum();
    let mut v = g.grad(&contracted, &[latent], None, true);
    if let Err(Error::Contract(_)) = v {
        // The latent is on the graph but unreachable from the output.
        latent.check_graph(output)?;
        if latent.id > output.id {
            return Err(Error::contract("latent is not an ancestor of the output"));
        }
        v = Ok(vec![g.constant(Array::zeros(&latent.shape()))]);
    }
    Ok(v?.remove(0))
}

/// `‖Jᵀ probe‖₂` where `J` is the Jacobian of `output` with respect to `latent`.
pub fn vjp_norm(output: &Tensor, latent: &Tensor, probe: &Tensor) -> Result<f64> {
    let v = vjp(output, latent, probe)?;
    Ok(v.value().data().iter().map(|x| x * x).sum::<f64>().sqrt())
}
