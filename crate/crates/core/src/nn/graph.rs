//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node whose
//! value is computed eagerly; [`Graph::grad`] walks the tape backwards once.
//! Shape errors inside individual ops are programming errors and panic;
//! module-level entry points validate their inputs and return [`Error`]s.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op is broadcast against the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[cols]` or `[1, cols]` against `[rows, cols]`.
    Row,
    /// `[rows, 1]` against `[rows, cols]`.
    Col,
    /// one element against anything.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
    LogSigmoid,
    Exp,
    Ln,
    Square,
    Sqrt,
    Erf,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Elu => "elu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Erf => "erf",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Bcast),
    Sub(NodeId, NodeId, Bcast),
    Mul(NodeId, NodeId, Bcast),
    Div(NodeId, NodeId, Bcast),
    Unary(NodeId, Unary),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp(NodeId, f64, f64),
    ClipStraightThrough(NodeId),
    MaxScalar(NodeId, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Unary(_, u) => u.name(),
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::ClipStraightThrough(..) => "clip_st",
            Op::MaxScalar(..) => "max_scalar",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Grads<T = f32> = BTreeMap<String, Tensor<T>>;

/// A read-only view of a parameter set, bound either as trainable leaves or
/// as frozen constants.
#[derive(Clone, Copy)]
pub struct Bind<'a, T: Real = f32> {
    pub set: &'a ParamSet<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Bind<'a, T> {
    pub fn train(set: &'a ParamSet<T>) -> Self {
        Self {
            set,
            trainable: true,
        }
    }

    pub fn frozen(set: &'a ParamSet<T>) -> Self {
        Self {
            set,
            trainable: false,
        }
    }
}

/// Operation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<(String, bool), NodeId>,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, bc: Bcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = a.clone();
    let cols = a.cols();
    let bd = b.data();
    match bc {
        Bcast::Same => {
            for (o, &y) in out.data_mut().iter_mut().zip(bd) {
                *o = f(*o, y);
            }
        }
        Bcast::Row => {
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &y) in row.iter_mut().zip(bd) {
                    *o = f(*o, y);
                }
            }
        }
        Bcast::Col => {
            for (row, &y) in out.data_mut().chunks_mut(cols).zip(bd) {
                for o in row.iter_mut() {
                    *o = f(*o, y);
                }
            }
        }
        Bcast::Scalar => {
            let y = bd[0];
            for o in out.data_mut().iter_mut() {
                *o = f(*o, y);
            }
        }
    }
    out
}

/// Reduces a full-shape gradient to the shape of a broadcast operand.
fn reduce_bcast<T: Real>(g: Tensor<T>, like: &Tensor<T>, bc: Bcast) -> Tensor<T> {
    match bc {
        Bcast::Same => g,
        Bcast::Row => {
            let cols = g.cols();
            let mut out = vec![T::zero(); cols];
            for row in g.data().chunks(cols) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            Tensor::new(like.shape().to_vec(), out).expect("row reduce")
        }
        Bcast::Col => {
            let cols = g.cols();
            let out = g.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
            Tensor::new(like.shape().to_vec(), out).expect("col reduce")
        }
        Bcast::Scalar => Tensor::new(like.shape().to_vec(), vec![g.sum()]).expect("scalar reduce"),
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            bound: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> T {
        self.value(id).item()
    }

    /// First node whose forward value contained NaN/Inf, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    /// Errors if any forward value so far was non-finite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite(format!(
                "{context}: op #{node} ({op}) produced NaN/Inf"
            ))),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Stop-gradient: same value, no backward flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf, false)
    }

    /// Binds a named parameter. Repeated binds of the same name return the
    /// same node, so gradients from every use accumulate on one leaf.
    pub fn bind(&mut self, b: Bind<'_, T>, name: &str) -> Result<NodeId> {
        let key = (name.to_string(), b.trainable);
        if let Some(&id) = self.bound.get(&key) {
            return Ok(id);
        }
        let t = b
            .set
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?
            .clone();
        let id = self.push(t, Op::Leaf, b.trainable);
        self.bound.insert(key, id);
        Ok(id)
    }

    pub fn param(&mut self, set: &ParamSet<T>, name: &str) -> Result<NodeId> {
        self.bind(Bind::train(set), name)
    }

    pub fn frozen(&mut self, set: &ParamSet<T>, name: &str) -> Result<NodeId> {
        self.bind(Bind::frozen(set), name)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D, got {:?}", bv.shape());
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(av.cols(), k, "matmul {:?} x {:?}", av.shape(), bv.shape());
        let m = av.rows();
        let mut out = vec![T::zero(); m * n];
        T::gemm_acc(m, k, n, av.data(), k as isize, 1, bv.data(), n as isize, 1, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out).unwrap(), Op::MatMul(a, b), rg)
    }

    fn bcast_kind(&self, a: NodeId, b: NodeId) -> Bcast {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Bcast::Same
        } else if bv.len() == 1 {
            Bcast::Scalar
        } else if bv.rows() == 1 && bv.cols() == av.cols() {
            Bcast::Row
        } else if bv.cols() == 1 && bv.rows() == av.rows() {
            Bcast::Col
        } else {
            panic!("cannot broadcast {:?} against {:?}", bv.shape(), av.shape())
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.bcast_kind(a, b);
        let v = elementwise(self.value(a), self.value(b), bc, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b, bc), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.bcast_kind(a, b);
        let v = elementwise(self.value(a), self.value(b), bc, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b, bc), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.bcast_kind(a, b);
        let v = elementwise(self.value(a), self.value(b), bc, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b, bc), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bc = self.bcast_kind(a, b);
        let v = elementwise(self.value(a), self.value(b), bc, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b, bc), rg)
    }

    fn unary(&mut self, a: NodeId, u: Unary) -> NodeId {
        let f: fn(T) -> T = match u {
            Unary::Neg => |x| -x,
            Unary::Elu => |x| if x > T::zero() { x } else { x.exp_m1() },
            Unary::Tanh => |x| x.tanh(),
            Unary::Sigmoid => stable_sigmoid,
            Unary::Softplus => stable_softplus,
            Unary::LogSigmoid => |x| -stable_softplus(-x),
            Unary::Exp => |x| x.exp(),
            Unary::Ln => |x| x.ln(),
            Unary::Square => |x| x * x,
            Unary::Sqrt => |x| x.sqrt(),
            Unary::Erf => |x| x.erf(),
        };
        let v = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(v, Op::Unary(a, u), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Neg)
    }
    /// Exponential linear unit: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Elu)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Softplus)
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Ln)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sqrt)
    }
    pub fn erf(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Erf)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = T::c(c);
        let v = self.value(a).map(|x| x * cc);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = T::c(c);
        let v = self.value(a).map(|x| x + cc);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (T::c(lo), T::c(hi));
        let v = self.value(a).map(|x| x.max(l).min(h));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    /// Clamp in the forward pass, identity in the backward pass.
    pub fn clip_straight_through(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (T::c(lo), T::c(hi));
        let v = self.value(a).map(|x| x.max(l).min(h));
        let rg = self.rg(&[a]);
        self.push(v, Op::ClipStraightThrough(a), rg)
    }

    /// `max(x, c)` elementwise; gradient flows only where `x > c`.
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = T::c(c);
        let v = self.value(a).map(|x| x.max(cc));
        let rg = self.rg(&[a]);
        self.push(v, Op::MaxScalar(a, c), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Sum over the last dimension, keeping it as size 1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let cols = av.cols();
        let data: Vec<T> = av.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let v = Tensor::new(vec![data.len(), 1], data).unwrap();
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Concatenation along the last dimension of 2-D nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, total], data).unwrap(),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Columns `[start, end)` of a 2-D node.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        assert!(start < end && end <= av.cols(), "slice {start}..{end} of {:?}", av.shape());
        let rows = av.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![rows, w], data).unwrap(),
            Op::SliceCols(a, start, end),
            rg,
        )
    }

    /// Stacks 2-D nodes with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let v = {
            let views: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::vstack(&views).expect("concat_rows width mismatch")
        };
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `[start, end)` of a 2-D node.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        assert!(start < end && end <= av.rows(), "row slice {start}..{end} of {:?}", av.shape());
        let v = av.slice_rows(start, end);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start, end), rg)
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter in `params`; parameters never bound as trainable in this
    /// graph get zeros.
    pub fn grad(&self, loss: NodeId, params: &ParamSet<T>) -> Result<Grads<T>> {
        let node_grads = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            let g = self
                .bound
                .get(&(name.clone(), true))
                .and_then(|id| node_grads[id.0].clone())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to a differentiable leaf (zeros if it
    /// does not influence the loss). Interior gradients are not retained.
    pub fn grad_of_node(&self, loss: NodeId, wrt: NodeId) -> Result<Tensor<T>> {
        let g = self.backward(loss)?;
        Ok(g[wrt.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shape(wrt))))
    }

    fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contribs = self.node_backward(i, &g);
            for (input, gi) in contribs {
                if !gi.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        node: i,
                        op: node.op.name(),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                if want(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_acc(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, &mut da);
                    out.push((*a, Tensor::new(av.shape().to_vec(), da).unwrap()));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_acc(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, &mut db);
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db).unwrap()));
                }
            }
            Op::Add(a, b, bc) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, reduce_bcast(g.clone(), self.value(*b), *bc)));
                }
            }
            Op::Sub(a, b, bc) => {
                if want(*a) {
                    out.push((*a, g.clone()));
                }
                if want(*b) {
                    out.push((*b, reduce_bcast(g.map(|v| -v), self.value(*b), *bc)));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    out.push((*a, elementwise(g, bv, *bc, |gv, y| gv * y)));
                }
                if want(*b) {
                    let full = elementwise(g, av, Bcast::Same, |gv, x| gv * x);
                    out.push((*b, reduce_bcast(full, bv, *bc)));
                }
            }
            Op::Div(a, b, bc) => {
                let bv = self.value(*b);
                if want(*a) {
                    out.push((*a, elementwise(g, bv, *bc, |gv, y| gv / y)));
                }
                if want(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy = elementwise(g, y, Bcast::Same, |gv, yv| -gv * yv);
                    let full = elementwise(&gy, bv, *bc, |v, bb| v / bb);
                    out.push((*b, reduce_bcast(full, bv, *bc)));
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let two_over_sqrt_pi = T::c(std::f64::consts::FRAC_2_SQRT_PI);
                let gd = g.data();
                let xd = x.data();
                let yd = y.data();
                let data: Vec<T> = (0..gd.len())
                    .map(|j| {
                        let (gv, xv, yv) = (gd[j], xd[j], yd[j]);
                        let d = match u {
                            Unary::Neg => -T::one(),
                            Unary::Elu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    yv + T::one()
                                }
                            }
                            Unary::Tanh => T::one() - yv * yv,
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Softplus => stable_sigmoid(xv),
                            Unary::LogSigmoid => stable_sigmoid(-xv),
                            Unary::Exp => yv,
                            Unary::Ln => T::one() / xv,
                            Unary::Square => T::c(2.0) * xv,
                            Unary::Sqrt => T::c(0.5) / yv,
                            Unary::Erf => two_over_sqrt_pi * (-xv * xv).exp(),
                        };
                        gv * d
                    })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::Scale(a, c) => {
                let cc = T::c(*c);
                out.push((*a, g.map(|v| v * cc)));
            }
            Op::AddScalar(a) | Op::ClipStraightThrough(a) => {
                out.push((*a, g.clone()));
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::c(*lo), T::c(*hi));
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv >= l && xv <= h { gv } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::MaxScalar(a, c) => {
                let cc = T::c(*c);
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > cc { gv } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::SumAll(a) => {
                out.push((*a, Tensor::full(self.shape(*a), g.item())));
            }
            Op::MeanAll(a) => {
                let n = T::c(self.value(*a).len() as f64);
                out.push((*a, Tensor::full(self.shape(*a), g.item() / n)));
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, cols));
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if want(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        out.push((p, Tensor::new(self.shape(p).to_vec(), data).unwrap()));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if want(p) {
                        let data = g.data()[off * cols..(off + r) * cols].to_vec();
                        out.push((p, Tensor::new(self.shape(p).to_vec(), data).unwrap()));
                    }
                    off += r;
                }
            }
            Op::SliceRows(a, start, end) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = vec![T::zero(); x.len()];
                data[start * cols..end * cols].copy_from_slice(g.data());
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let cols = x.cols();
                let w = end - start;
                let mut data = vec![T::zero(); x.len()];
                for r in 0..x.rows() {
                    data[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, Tensor<f64>)]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        for (n, t) in pairs {
            ps.insert(n, t.clone()).unwrap();
        }
        ps
    }

    #[test]
    fn sum_gradient_is_ones() {
        let ps = set(&[("p", Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]))]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        let l = g.sum(p);
        let grads = g.grad(l, &ps).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads["p"].shape(), &[1, 3]);
    }

    #[test]
    fn square_sum_gradient() {
        let ps = set(&[("p", Tensor::from_rows(&[vec![1.0, -2.0]]))]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        let sq = g.square(p);
        let l = g.sum(sq);
        assert_eq!(g.grad(l, &ps).unwrap()["p"].data(), &[2.0, -4.0]);
    }

    #[test]
    fn unbound_parameters_get_zero_gradient() {
        let ps = set(&[
            ("a", Tensor::scalar(1.5)),
            ("b", Tensor::from_rows(&[vec![1.0, 1.0]])),
        ]);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        let l = g.square(a);
        let grads = g.grad(l, &ps).unwrap();
        assert_eq!(grads["a"].item(), 3.0);
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let ps = set(&[("p", Tensor::from_rows(&[vec![1.0, 2.0]]))]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        assert!(matches!(g.grad(p, &ps), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow_exactly() {
        // loss = sum(sg(x) * y): d/dx must be exactly zero.
        let ps = set(&[
            ("x", Tensor::from_rows(&[vec![0.3, -1.2]])),
            ("y", Tensor::from_rows(&[vec![2.0, 5.0]])),
        ]);
        let mut g = Graph::new();
        let x = g.param(&ps, "x").unwrap();
        let y = g.param(&ps, "y").unwrap();
        let sx = g.detach(x);
        let prod = g.mul(sx, y);
        let l = g.sum(prod);
        let grads = g.grad(l, &ps).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 0.0]);
        assert_eq!(grads["y"].data(), &[0.3, -1.2]);
    }

    #[test]
    fn frozen_binding_passes_gradient_through_but_not_to_itself() {
        let ps = set(&[("w", Tensor::from_rows(&[vec![2.0]]))]);
        let xs = set(&[("x", Tensor::from_rows(&[vec![3.0]]))]);
        let mut g = Graph::new();
        let w = g.frozen(&ps, "w").unwrap();
        let x = g.param(&xs, "x").unwrap();
        let y = g.matmul(x, w);
        let l = g.sum(y);
        assert_eq!(g.grad(l, &ps).unwrap()["w"].item(), 0.0);
        assert_eq!(g.grad(l, &xs).unwrap()["x"].item(), 2.0);
    }

    #[test]
    fn repeated_bind_accumulates_on_one_leaf() {
        let ps = set(&[("w", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let a = g.param(&ps, "w").unwrap();
        let b = g.param(&ps, "w").unwrap();
        assert_eq!(a, b);
        let l = g.mul(a, b);
        assert_eq!(g.grad(l, &ps).unwrap()["w"].item(), 6.0);
    }

    #[test]
    fn nonfinite_forward_is_recorded() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_rows(&[vec![-1.0]]));
        let _ = g.ln(x);
        assert!(g.check_finite("test").is_err());
        assert_eq!(g.first_nonfinite().unwrap().1, "ln");
    }

    #[test]
    fn nonfinite_gradient_names_the_op() {
        let ps = set(&[("p", Tensor::scalar(0.0))]);
        let mut g = Graph::new();
        let p = g.param(&ps, "p").unwrap();
        let s = g.sqrt(p);
        let l = g.sum(s);
        match g.grad(l, &ps) {
            Err(Error::NonFiniteGradient { op, .. }) => assert_eq!(op, "sqrt"),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn elu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 2.5, -1.0]]));
        let y = g.elu(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 2.5);
        assert!((v[2] - (-0.632_120_558_828_557_7)).abs() < 1e-12);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let ps = set(&[
            ("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])),
            ("r", Tensor::from_rows(&[vec![10.0, 20.0]])),
            ("c", Tensor::from_rows(&[vec![1.0], vec![2.0]])),
        ]);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        let r = g.param(&ps, "r").unwrap();
        let c = g.param(&ps, "c").unwrap();
        let x = g.add(a, r);
        let y = g.mul(x, c);
        let l = g.sum(y);
        let gr = g.grad(l, &ps).unwrap();
        assert_eq!(gr["r"].data(), &[3.0, 3.0]);
        assert_eq!(gr["c"].data(), &[33.0, 37.0]);
        assert_eq!(gr["a"].data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
