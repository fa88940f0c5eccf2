//! Tape-based reverse-mode differentiation over a flat parameter vector.
//!
//! Every operation evaluates eagerly and appends a record to the [`Graph`].
//! [`Graph::backward`] walks the tape once in reverse order and accumulates
//! adjoints into a [`GradVector`] that has one slot per leaf parameter.
//!
//! Values are 64-bit throughout. Vector operations never broadcast: both
//! operands of an elementwise op must have the same length, and scalars are
//! vectors of length one.

use thiserror::Error;

use crate::risk;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),
    #[error("backward requires a scalar root, got length {0}")]
    NonScalarRoot(usize),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    id: usize,
    len: usize,
}

impl NodeRef {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn len(self) -> usize {
        self.len
    }

    pub fn is_empty(self) -> bool {
        self.len == 0
    }

    pub fn is_scalar(self) -> bool {
        self.len == 1
    }
}

/// Gradient of a scalar root with respect to every leaf parameter, in
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

impl std::ops::Index<usize> for GradVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf { offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    SumScalars(Vec<usize>),
    Dot(usize, usize),
    Scale(usize, f64),
    LogSoftmax(usize),
    LogSumExp(usize),
    Gather(usize, usize),
    Select(usize, Vec<usize>),
    LogSigmoid(usize),
    StopGradient,
    /// Linear in the input with weights frozen at forward time (the CVaR
    /// envelope weights).
    WeightedTailMean(usize, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only tape of eagerly evaluated operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_count: usize,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

/// Max-shifted `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, node: NodeRef) -> &[f64] {
        &self.nodes[node.id].value
    }

    /// Forward value of a scalar node.
    pub fn scalar(&self, node: NodeRef) -> f64 {
        debug_assert!(node.is_scalar());
        self.nodes[node.id].value[0]
    }

    fn resolve(&self, node: NodeRef) -> Result<&Node> {
        self.nodes
            .get(node.id)
            .filter(|n| n.value.len() == node.len)
            .ok_or(DiffError::ForeignNode(node.id))
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> NodeRef {
        let len = value.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeRef {
            id: self.nodes.len() - 1,
            len,
        }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        value: Vec<f64>,
        needs_grad: bool,
    ) -> Result<NodeRef> {
        check_finite(name, &value)?;
        Ok(self.push(op, value, needs_grad))
    }

    /// Registers differentiable parameters. Their gradients occupy the next
    /// `values.len()` slots of the gradient vector.
    pub fn leaf(&mut self, values: &[f64]) -> Result<NodeRef> {
        check_finite("leaf", values)?;
        let offset = self.param_count;
        self.param_count += values.len();
        Ok(self.push(Op::Leaf { offset }, values.to_vec(), true))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, values: &[f64]) -> Result<NodeRef> {
        self.push_checked("constant", Op::Const, values.to_vec(), false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<NodeRef> {
        self.constant(&[value])
    }

    fn binary_inputs(
        &self,
        name: &'static str,
        a: NodeRef,
        b: NodeRef,
    ) -> Result<(&Node, &Node)> {
        let na = self.resolve(a)?;
        let nb = self.resolve(b)?;
        if na.value.len() != nb.value.len() {
            return Err(DiffError::Shape {
                op: name,
                expected: na.value.len(),
                found: nb.value.len(),
            });
        }
        Ok((na, nb))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeRef,
        b: NodeRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeRef> {
        let (na, nb) = self.binary_inputs(name, a, b)?;
        let value: Vec<f64> = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
        let needs = na.needs_grad || nb.needs_grad;
        self.push_checked(name, op, value, needs)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        if self.resolve(b)?.value.contains(&0.0) {
            return Err(DiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a.id, b.id))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeRef,
        f: impl Fn(&[f64]) -> Vec<f64>,
        op: Op,
    ) -> Result<NodeRef> {
        let na = self.resolve(a)?;
        let value = f(&na.value);
        let needs = na.needs_grad;
        self.push_checked(name, op, value, needs)
    }

    pub fn neg(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary("neg", a, |v| v.iter().map(|x| -x).collect(), Op::Neg(a.id))
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary("exp", a, |v| v.iter().map(|x| x.exp()).collect(), Op::Exp(a.id))
    }

    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        if let Some(bad) = self.resolve(a)?.value.iter().find(|&&x| x <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("log of nonpositive value {bad}"),
            });
        }
        self.unary("log", a, |v| v.iter().map(|x| x.ln()).collect(), Op::Log(a.id))
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary("sum", a, |v| vec![v.iter().sum()], Op::Sum(a.id))
    }

    /// Sum of scalar nodes, in the given order, with compensated summation.
    pub fn sum_scalars(&mut self, terms: &[NodeRef]) -> Result<NodeRef> {
        let mut acc = KahanSum::default();
        let mut needs = false;
        for &t in terms {
            let n = self.resolve(t)?;
            if n.value.len() != 1 {
                return Err(DiffError::Shape {
                    op: "sum_scalars",
                    expected: 1,
                    found: n.value.len(),
                });
            }
            acc.add(n.value[0]);
            needs |= n.needs_grad;
        }
        let ids = terms.iter().map(|t| t.id).collect();
        self.push_checked("sum_scalars", Op::SumScalars(ids), vec![acc.total()], needs)
    }

    pub fn dot(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let (na, nb) = self.binary_inputs("dot", a, b)?;
        let value = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).sum();
        let needs = na.needs_grad || nb.needs_grad;
        self.push_checked("dot", Op::Dot(a.id, b.id), vec![value], needs)
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef> {
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        self.unary("scale", a, |v| v.iter().map(|x| c * x).collect(), Op::Scale(a.id, c))
    }

    /// Max-shifted `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: NodeRef) -> Result<NodeRef> {
        if a.is_empty() {
            return Err(DiffError::Shape {
                op: "log_softmax",
                expected: 1,
                found: 0,
            });
        }
        self.unary(
            "log_softmax",
            a,
            |v| {
                let lse = log_sum_exp(v);
                v.iter().map(|x| x - lse).collect()
            },
            Op::LogSoftmax(a.id),
        )
    }

    pub fn logsumexp(&mut self, a: NodeRef) -> Result<NodeRef> {
        if a.is_empty() {
            return Err(DiffError::Shape {
                op: "logsumexp",
                expected: 1,
                found: 0,
            });
        }
        self.unary("logsumexp", a, |v| vec![log_sum_exp(v)], Op::LogSumExp(a.id))
    }

    pub fn gather(&mut self, a: NodeRef, index: usize) -> Result<NodeRef> {
        if index >= a.len {
            return Err(DiffError::Index {
                op: "gather",
                index,
                len: a.len,
            });
        }
        self.unary("gather", a, |v| vec![v[index]], Op::Gather(a.id, index))
    }

    /// Picks `indices` out of `a`, in order, as a new vector.
    pub fn select(&mut self, a: NodeRef, indices: &[usize]) -> Result<NodeRef> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.len) {
            return Err(DiffError::Index {
                op: "select",
                index: bad,
                len: a.len,
            });
        }
        self.unary(
            "select",
            a,
            |v| indices.iter().map(|&i| v[i]).collect(),
            Op::Select(a.id, indices.to_vec()),
        )
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: NodeRef, start: usize, len: usize) -> Result<NodeRef> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.select(a, &indices)
    }

    pub fn log_sigmoid(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.unary(
            "log_sigmoid",
            a,
            |v| v.iter().map(|&x| log_sigmoid(x)).collect(),
            Op::LogSigmoid(a.id),
        )
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: NodeRef) -> Result<NodeRef> {
        let value = self.resolve(a)?.value.clone();
        Ok(self.push(Op::StopGradient, value, false))
    }

    /// Mean of the largest `mu`-mass of `a` under `probs` (upper-tail CVaR).
    ///
    /// The gradient uses the envelope weights at the optimal threshold: `p/mu`
    /// strictly above it, the fractional remainder on the threshold atom, and
    /// zero below.
    pub fn weighted_tail_mean(&mut self, a: NodeRef, probs: &[f64], mu: f64) -> Result<NodeRef> {
        if probs.len() != a.len {
            return Err(DiffError::Shape {
                op: "weighted_tail_mean",
                expected: a.len,
                found: probs.len(),
            });
        }
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(DiffError::Domain {
                op: "weighted_tail_mean",
                detail: format!("mu must lie in (0, 1], got {mu}"),
            });
        }
        let na = self.resolve(a)?;
        let weights = risk::tail_weights(&na.value, probs, mu);
        let value = weights.iter().zip(&na.value).map(|(w, x)| w * x).sum();
        let needs = na.needs_grad;
        self.push_checked(
            "weighted_tail_mean",
            Op::WeightedTailMean(a.id, weights),
            vec![value],
            needs,
        )
    }

    /// Exact gradient of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: NodeRef) -> Result<GradVector> {
        let root_node = self.resolve(root)?;
        if root_node.value.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_node.value.len()));
        }
        let mut grad = GradVector::zeros(self.param_count);
        if !root_node.needs_grad {
            return Ok(grad);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adj[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, contrib: &dyn Fn(usize) -> f64, len: usize| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                let slot = adj[target].get_or_insert_with(|| vec![0.0; len]);
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += contrib(i);
                }
            };
            match &node.op {
                Op::Const | Op::StopGradient => {}
                Op::Leaf { offset } => {
                    for (i, gi) in g.iter().enumerate() {
                        grad.0[offset + i] += gi;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, &|i| g[i], g.len());
                    send(*b, &|i| g[i], g.len());
                }
                Op::Sub(a, b) => {
                    send(*a, &|i| g[i], g.len());
                    send(*b, &|i| -g[i], g.len());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, &|i| g[i] * vb[i], g.len());
                    send(*b, &|i| g[i] * va[i], g.len());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, &|i| g[i] / vb[i], g.len());
                    send(*b, &|i| -g[i] * va[i] / (vb[i] * vb[i]), g.len());
                }
                Op::Neg(a) => send(*a, &|i| -g[i], g.len()),
                Op::Exp(a) => send(*a, &|i| g[i] * node.value[i], g.len()),
                Op::Log(a) => {
                    let va = &self.nodes[*a].value;
                    send(*a, &|i| g[i] / va[i], g.len());
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    send(*a, &|_| g[0], n);
                }
                Op::SumScalars(terms) => {
                    for &t in terms {
                        send(t, &|_| g[0], 1);
                    }
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, &|i| g[0] * vb[i], va.len());
                    send(*b, &|i| g[0] * va[i], vb.len());
                }
                Op::Scale(a, c) => send(*a, &|i| c * g[i], g.len()),
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let out = &node.value;
                    send(*a, &|i| g[i] - out[i].exp() * total, g.len());
                }
                Op::LogSumExp(a) => {
                    let va = &self.nodes[*a].value;
                    let lse = node.value[0];
                    send(*a, &|i| g[0] * (va[i] - lse).exp(), va.len());
                }
                Op::Gather(a, index) => {
                    let n = self.nodes[*a].value.len();
                    send(*a, &|i| if i == *index { g[0] } else { 0.0 }, n);
                }
                Op::Select(a, indices) => {
                    if self.nodes[*a].needs_grad {
                        let n = self.nodes[*a].value.len();
                        let slot = adj[*a].get_or_insert_with(|| vec![0.0; n]);
                        for (k, &i) in indices.iter().enumerate() {
                            slot[i] += g[k];
                        }
                    }
                }
                Op::LogSigmoid(a) => {
                    let va = &self.nodes[*a].value;
                    send(*a, &|i| g[i] * sigmoid(-va[i]), g.len());
                }
                Op::WeightedTailMean(a, weights) => {
                    send(*a, &|i| g[0] * weights[i], weights.len());
                }
            }
        }
        Ok(grad)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph and a leaf holding `point` and must return
/// a scalar node. Returns the maximum over parameters of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(build: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeRef) -> Result<NodeRef>,
{
    let eval = |x: &[f64]| -> Result<(Graph, NodeRef)> {
        let mut g = Graph::new();
        let leaf = g.leaf(x)?;
        let root = build(&mut g, leaf)?;
        Ok((g, root))
    };
    let (g, root) = eval(point)?;
    let analytic = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (gp, rp) = eval(&probe)?;
        probe[i] = point[i] - step;
        let (gm, rm) = eval(&probe)?;
        probe[i] = point[i];
        let numeric = (gp.scalar(rp) - gm.scalar(rm)) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
