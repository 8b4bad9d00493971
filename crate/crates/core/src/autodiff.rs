//! Define-then-run computation graphs with reverse-mode gradients.
//!
//! A [`Graph`] is assembled once with a [`GraphBuilder`] and is immutable
//! afterwards, so it can be shared read-only and evaluated any number of
//! times with different [`Inputs`]. Nodes only reference earlier nodes, which
//! makes the insertion order a valid topological order.
//!
//! The op set is exactly what the next-scale transformer, the Hoyer penalty
//! and the norm-regression router need; there is no general broadcasting
//! beyond a bias add.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Elementwise activations. GELU uses the tanh approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Gelu,
    Abs,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Abs => x.abs(),
        }
    }

    /// Derivative; the subgradient at the ReLU/abs kink is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Abs => "abs",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "abs" => Ok(Activation::Abs),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Row indices for a gather: either read from another node at run time or
/// fixed when the graph is built.
#[derive(Clone, Debug)]
pub enum Indices {
    Node(NodeId),
    Fixed(Arc<[usize]>),
}

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, trainable: bool },
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: f64 },
    Act { x: NodeId, kind: Activation },
    /// Row-wise softmax; entries whose mask bit is false get probability 0.
    Softmax { x: NodeId, mask: Option<Arc<[bool]>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gather { table: NodeId, indices: Indices },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Sum { x: NodeId },
    /// Mean over rows of `-log softmax(logits)[target]`.
    CrossEntropy { logits: NodeId, targets: NodeId },
    /// Mean over rows of `(Σ|h|)² / Σh²`, with all-zero rows contributing 0.
    Hoyer { h: NodeId },
    /// Mean over all entries of `(pred - target)²`.
    MeanSquaredError { pred: NodeId, target: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Act { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Hoyer { .. } => "hoyer",
            Op::MeanSquaredError { .. } => "mse",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Act { x, .. }
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, indices } => match indices {
                Indices::Node(i) => vec![*table, *i],
                Indices::Fixed(_) => vec![*table],
            },
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::CrossEntropy { logits, targets } => vec![*logits, *targets],
            Op::Hoyer { h } => vec![*h],
            Op::MeanSquaredError { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Incrementally assembles a [`Graph`], inferring and checking shapes.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("{what} (node {id})"), format!("expected rank 2, got {s:?}"))),
        }
    }

    fn input_impl(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!("input `{name}` declared twice")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(format!("input `{name}`"), format!("bad shape {shape:?}")));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// A trainable input: gradients are reported for it.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.input_impl(name, shape, true)
    }

    /// A non-trainable input (data, indices, targets).
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.input_impl(name, shape, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (r, c) = self.dims2(b, "matmul rhs")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err(
                format!("matmul (node {})", self.nodes.len()),
                format!("inner dims {k} vs {kb}"),
            ));
        }
        Ok(self.push(Op::MatMul { a, b, trans_b }, vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                format!("add (node {})", self.nodes.len()),
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_bias input")?;
        if self.nodes[bias].shape != [n] {
            return Err(shape_err(
                format!("add_bias (node {})", self.nodes.len()),
                format!("bias {:?} for {n} columns", self.nodes[bias].shape),
            ));
        }
        Ok(self.push(Op::AddBias { x, bias }, vec![m, n]))
    }

    /// `x · wᵀ + b` with `w` stored as `(out × in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul_t(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Scale { x, factor }, shape)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Act { x, kind }, shape)
    }

    pub fn softmax(&mut self, x: NodeId, mask: Option<Arc<[bool]>>) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "softmax")?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(shape_err("softmax mask", format!("{} entries for {m}x{n}", mk.len())));
            }
            if (0..m).any(|r| !mk[r * n..(r + 1) * n].iter().any(|&b| b)) {
                return Err(shape_err("softmax mask", "a row allows no entries"));
            }
        }
        Ok(self.push(Op::Softmax { x, mask }, vec![m, n]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.nodes[gamma].shape != [n] || self.nodes[beta].shape != [n] {
            return Err(shape_err("layer_norm", "gamma/beta must have one entry per column"));
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, vec![m, n]))
    }

    pub fn gather(&mut self, table: NodeId, indices: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims2(table, "gather table")?;
        let n = match self.nodes[indices].shape.as_slice() {
            [n] => *n,
            s => return Err(shape_err("gather indices", format!("expected rank 1, got {s:?}"))),
        };
        Ok(self.push(
            Op::Gather {
                table,
                indices: Indices::Node(indices),
            },
            vec![n, c],
        ))
    }

    pub fn gather_fixed(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.dims2(table, "gather table")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(shape_err("gather_fixed", format!("indices out of range for {r} rows")));
        }
        let n = indices.len();
        Ok(self.push(
            Op::Gather {
                table,
                indices: Indices::Fixed(indices.into()),
            },
            vec![n, c],
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {n}", start + len)));
        }
        Ok(self.push(Op::SliceCols { x, start, len }, vec![m, len]))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut n = 0;
        for &p in &parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", "row counts differ"));
            }
            n += c;
        }
        Ok(self.push(Op::ConcatCols { parts }, vec![m, n]))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut m = 0;
        for &p in &parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(shape_err("concat_rows", "column counts differ"));
            }
            m += r;
        }
        Ok(self.push(Op::ConcatRows { parts }, vec![m, n]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }, vec![1])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (m, _) = self.dims2(logits, "cross_entropy logits")?;
        if self.nodes[targets].shape != [m] {
            return Err(shape_err("cross_entropy", "one target per logits row required"));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }, vec![1]))
    }

    pub fn hoyer(&mut self, h: NodeId) -> Result<NodeId> {
        self.dims2(h, "hoyer")?;
        Ok(self.push(Op::Hoyer { h }, vec![1]))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.nodes[pred].shape != self.nodes[target].shape {
            return Err(shape_err("mse", "prediction and target shapes differ"));
        }
        Ok(self.push(Op::MeanSquaredError { pred, target }, vec![1]))
    }

    /// Names a node so it can be looked up in an [`Evaluation`].
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn build(self) -> Graph {
        let mut requires_grad = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            requires_grad[id] = match &node.op {
                Op::Input { trainable, .. } => *trainable,
                op => op.operands().iter().any(|&p| requires_grad[p]),
            };
        }
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            requires_grad,
        }
    }
}

/// An immutable computation graph.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    requires_grad: Vec<bool>,
}

/// Named tensors bound to a graph's inputs for one evaluation.
#[derive(Default)]
pub struct Inputs<'a> {
    bound: HashMap<String, &'a Tensor>,
}

impl<'a> Inputs<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.bound.insert(name.into(), value);
        self
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.bind(name, value);
        self
    }
}

/// Every node value from one forward pass.
pub struct Evaluation {
    values: Vec<Tensor>,
    outputs: BTreeMap<String, NodeId>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|&id| &self.values[id])
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.output(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no output named `{name}`")))?
            .scalar_value()
    }
}

pub type Gradients = BTreeMap<String, Tensor>;

fn index_values(t: &Tensor, bound: usize, ctx: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!("{ctx}: index {v} outside [0, {bound})")))
            }
        })
        .collect()
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Row-wise layer normalisation of a rank-2 tensor.
pub fn layer_norm_rows(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let n = x.cols();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..x.rows() {
        let row = &src[r * n..(r + 1) * n];
        let (mean, rstd) = layer_norm_stats(row, eps);
        for j in 0..n {
            out[r * n + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_row(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += out[j];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `(Σ|h|)² / Σh²` for one vector; 0 when `h` is all zeros. Entries are
/// divided by `max|h|` first, which leaves the ratio unchanged and makes
/// uniform and one-hot vectors exact.
pub fn hoyer_ratio(h: &[f64]) -> f64 {
    let m = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let l1: f64 = h.iter().map(|v| v.abs() / m).sum();
    let l2: f64 = h.iter().map(|v| (v / m) * (v / m)).sum();
    l1 * l1 / l2
}

impl Graph {
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Names of the trainable inputs, sorted.
    pub fn trainable_inputs(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, trainable: true } => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names
    }

    fn context(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Input { name, .. } => format!("node {id} (input `{name}`)"),
            op => format!("node {id} ({})", op.name()),
        }
    }

    /// Evaluates every node in insertion order.
    pub fn forward(&self, inputs: &Inputs<'_>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = self.eval_node(id, node, &values, inputs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: self.context(id),
                });
            }
            values.push(v);
        }
        Ok(Evaluation {
            values,
            outputs: self.outputs.clone(),
        })
    }

    fn eval_node(&self, id: NodeId, node: &Node, vals: &[Tensor], inputs: &Inputs<'_>) -> Result<Tensor> {
        let shape = node.shape.clone();
        Ok(match &node.op {
            Op::Input { name, .. } => {
                let t = inputs
                    .bound
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(shape_err(
                        self.context(id),
                        format!("declared {:?}, bound {:?}", node.shape, t.shape()),
                    ));
                }
                (*t).clone()
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = (shape[0], shape[1]);
                let k = vals[*a].shape()[1];
                let mut out = vec![0.0; m * n];
                gemm(false, *trans_b, m, n, k, 1.0, vals[*a].data(), vals[*b].data(), 0.0, &mut out);
                Tensor::from_parts(shape, out)
            }
            Op::Add { a, b } => {
                let data = vals[*a].data().iter().zip(vals[*b].data()).map(|(x, y)| x + y).collect();
                Tensor::from_parts(shape, data)
            }
            Op::AddBias { x, bias } => {
                let n = shape[1];
                let b = vals[*bias].data();
                let data = vals[*x].data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
                Tensor::from_parts(shape, data)
            }
            Op::Scale { x, factor } => vals[*x].map(|v| v * factor),
            Op::Act { x, kind } => vals[*x].map(|v| kind.apply(v)),
            Op::Softmax { x, mask } => {
                let n = shape[1];
                let src = vals[*x].data();
                let mut out = vec![0.0; src.len()];
                for r in 0..shape[0] {
                    let m = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
                    softmax_row(&src[r * n..(r + 1) * n], m, &mut out[r * n..(r + 1) * n]);
                }
                Tensor::from_parts(shape, out)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                layer_norm_rows(&vals[*x], vals[*gamma].data(), vals[*beta].data(), *eps)
            }
            Op::Gather { table, indices } => {
                let rows = vals[*table].shape()[0];
                let idx = match indices {
                    Indices::Node(i) => index_values(&vals[*i], rows, &self.context(id))?,
                    Indices::Fixed(ix) => ix.to_vec(),
                };
                vals[*table].gather_rows(&idx)
            }
            Op::SliceCols { x, start, len } => {
                let src = &vals[*x];
                let mut data = Vec::with_capacity(shape[0] * len);
                for r in 0..shape[0] {
                    data.extend_from_slice(&src.row(r)[*start..start + len]);
                }
                Tensor::from_parts(shape, data)
            }
            Op::ConcatCols { parts } => {
                let mut data = Vec::with_capacity(shape[0] * shape[1]);
                for r in 0..shape[0] {
                    for &p in parts {
                        data.extend_from_slice(vals[p].row(r));
                    }
                }
                Tensor::from_parts(shape, data)
            }
            Op::ConcatRows { parts } => {
                let mut data = Vec::with_capacity(shape[0] * shape[1]);
                for &p in parts {
                    data.extend_from_slice(vals[p].data());
                }
                Tensor::from_parts(shape, data)
            }
            Op::Sum { x } => Tensor::scalar(vals[*x].data().iter().sum()),
            Op::CrossEntropy { logits, targets } => {
                let lg = &vals[*logits];
                let v = lg.cols();
                let t = index_values(&vals[*targets], v, &self.context(id))?;
                let mut total = 0.0;
                for (r, &target) in t.iter().enumerate() {
                    total += neg_log_softmax(lg.row(r), target);
                }
                Tensor::scalar(total / t.len() as f64)
            }
            Op::Hoyer { h } => {
                let hv = &vals[*h];
                let total: f64 = (0..hv.rows()).map(|r| hoyer_ratio(hv.row(r))).sum();
                Tensor::scalar(total / hv.rows() as f64)
            }
            Op::MeanSquaredError { pred, target } => {
                let p = vals[*pred].data();
                let t = vals[*target].data();
                let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                Tensor::scalar(s / p.len() as f64)
            }
        })
    }

    /// Reverse-mode pass from a scalar node. Returns one gradient per
    /// trainable input, shaped like that input.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].shape != [1] {
            return Err(Error::NonScalarLoss {
                node: loss,
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let vals = &eval.values;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::new();

        for id in (0..=loss).rev() {
            if !self.requires_grad[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let send = |target: NodeId, contribution: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.requires_grad[target] {
                    return;
                }
                match &mut adj[target] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Input { name, trainable } => {
                    if *trainable {
                        grads.insert(name.clone(), g);
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = vals[*a].shape()[1];
                    if self.requires_grad[*a] {
                        let mut da = vec![0.0; m * k];
                        // dA = dC · op(B)ᵀ
                        gemm(false, !trans_b, m, k, n, 1.0, g.data(), vals[*b].data(), 0.0, &mut da);
                        send(*a, Tensor::from_parts(vec![m, k], da), &mut adj);
                    }
                    if self.requires_grad[*b] {
                        let bshape = vals[*b].shape().to_vec();
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(true, false, n, k, m, 1.0, g.data(), vals[*a].data(), 0.0, &mut db);
                        } else {
                            gemm(true, false, k, n, m, 1.0, vals[*a].data(), g.data(), 0.0, &mut db);
                        }
                        send(*b, Tensor::from_parts(bshape, db), &mut adj);
                    }
                }
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::AddBias { x, bias } => {
                    let n = node.shape[1];
                    if self.requires_grad[*bias] {
                        let mut db = vec![0.0; n];
                        for (i, v) in g.data().iter().enumerate() {
                            db[i % n] += v;
                        }
                        send(*bias, Tensor::vector(db), &mut adj);
                    }
                    send(*x, g, &mut adj);
                }
                Op::Scale { x, factor } => send(*x, g.map(|v| v * factor), &mut adj),
                Op::Act { x, kind } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(vals[*x].data())
                        .map(|(gv, xv)| gv * kind.derivative(*xv))
                        .collect();
                    send(*x, Tensor::from_parts(node.shape.clone(), data), &mut adj);
                }
                Op::Softmax { x, .. } => {
                    let n = node.shape[1];
                    let y = vals[id].data();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..node.shape[0] {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g.data()[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*x, Tensor::from_parts(node.shape.clone(), dx), &mut adj);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let n = node.shape[1];
                    let src = vals[*x].data();
                    let gm = vals[*gamma].data();
                    let mut dx = vec![0.0; src.len()];
                    let mut dg = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for r in 0..node.shape[0] {
                        let row = &src[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let (mean, rstd) = layer_norm_stats(row, *eps);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            xhat[j] = (row[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gm[j];
                            dg[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    send(*gamma, Tensor::vector(dg), &mut adj);
                    send(*beta, Tensor::vector(dbeta), &mut adj);
                    send(*x, Tensor::from_parts(node.shape.clone(), dx), &mut adj);
                }
                Op::Gather { table, indices } => {
                    let tshape = vals[*table].shape().to_vec();
                    let idx = match indices {
                        Indices::Node(i) => index_values(&vals[*i], tshape[0], &self.context(id))?,
                        Indices::Fixed(ix) => ix.to_vec(),
                    };
                    let c = tshape[1];
                    let mut dt = vec![0.0; tshape[0] * c];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dt[i * c + j] += g.data()[r * c + j];
                        }
                    }
                    send(*table, Tensor::from_parts(tshape, dt), &mut adj);
                }
                Op::SliceCols { x, start, len } => {
                    let xshape = vals[*x].shape().to_vec();
                    let n = xshape[1];
                    let mut dx = vec![0.0; xshape[0] * n];
                    for r in 0..xshape[0] {
                        dx[r * n + start..r * n + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    send(*x, Tensor::from_parts(xshape, dx), &mut adj);
                }
                Op::ConcatCols { parts } => {
                    let n = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = vals[p].shape()[1];
                        let mut dp = Vec::with_capacity(node.shape[0] * w);
                        for r in 0..node.shape[0] {
                            dp.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        send(p, Tensor::from_parts(vals[p].shape().to_vec(), dp), &mut adj);
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = vals[p].len();
                        let dp = g.data()[offset..offset + len].to_vec();
                        send(p, Tensor::from_parts(vals[p].shape().to_vec(), dp), &mut adj);
                        offset += len;
                    }
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    send(*x, Tensor::full(vals[*x].shape(), gv), &mut adj);
                }
                Op::CrossEntropy { logits, targets } => {
                    let lg = &vals[*logits];
                    let v = lg.cols();
                    let t = index_values(&vals[*targets], v, &self.context(id))?;
                    let scale = g.data()[0] / t.len() as f64;
                    let mut dl = vec![0.0; lg.len()];
                    for (r, &target) in t.iter().enumerate() {
                        softmax_row(lg.row(r), None, &mut dl[r * v..(r + 1) * v]);
                        dl[r * v + target] -= 1.0;
                        for d in &mut dl[r * v..(r + 1) * v] {
                            *d *= scale;
                        }
                    }
                    send(*logits, Tensor::from_parts(lg.shape().to_vec(), dl), &mut adj);
                }
                Op::Hoyer { h } => {
                    let hv = &vals[*h];
                    let c = hv.cols();
                    let scale = g.data()[0] / hv.rows() as f64;
                    let mut dh = vec![0.0; hv.len()];
                    for r in 0..hv.rows() {
                        let row = hv.row(r);
                        let l1: f64 = row.iter().map(|v| v.abs()).sum();
                        let l2: f64 = row.iter().map(|v| v * v).sum();
                        if l2 == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let sign = Activation::Abs.derivative(row[j]);
                            dh[r * c + j] = scale * (2.0 * l1 * sign / l2 - 2.0 * l1 * l1 * row[j] / (l2 * l2));
                        }
                    }
                    send(*h, Tensor::from_parts(hv.shape().to_vec(), dh), &mut adj);
                }
                Op::MeanSquaredError { pred, target } => {
                    let p = vals[*pred].data();
                    let t = vals[*target].data();
                    let scale = 2.0 * g.data()[0] / p.len() as f64;
                    let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                    send(*pred, Tensor::from_parts(vals[*pred].shape().to_vec(), dp.clone()), &mut adj);
                    send(*target, Tensor::from_parts(vals[*target].shape().to_vec(), dp).map(|v| -v), &mut adj);
                }
            }
        }
        for g in grads.values() {
            g.ensure_finite("backward")?;
        }
        Ok(grads)
    }
}

/// `-log softmax(row)[target]`, computed stably.
pub fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// A differentiable scalar function of one tensor argument.
pub trait ScalarFn {
    fn value(&self, point: &Tensor) -> Result<f64>;
    fn gradient(&self, point: &Tensor) -> Result<Tensor>;
}

/// Adapts a graph to [`ScalarFn`] by varying one input and holding the
/// others fixed.
pub struct GraphFn<'g> {
    graph: &'g Graph,
    loss: NodeId,
    wrt: String,
    fixed: Vec<(String, Tensor)>,
}

impl<'g> GraphFn<'g> {
    pub fn new(graph: &'g Graph, loss: NodeId, wrt: &str, fixed: Vec<(String, Tensor)>) -> Self {
        Self {
            graph,
            loss,
            wrt: wrt.to_string(),
            fixed,
        }
    }

    fn run(&self, point: &Tensor) -> Result<Evaluation> {
        let mut inputs = Inputs::new();
        for (name, t) in &self.fixed {
            inputs.bind(name.clone(), t);
        }
        inputs.bind(self.wrt.clone(), point);
        self.graph.forward(&inputs)
    }
}

impl ScalarFn for GraphFn<'_> {
    fn value(&self, point: &Tensor) -> Result<f64> {
        self.run(point)?.value(self.loss).scalar_value()
    }

    fn gradient(&self, point: &Tensor) -> Result<Tensor> {
        let eval = self.run(point)?;
        let mut grads = self.graph.backward(&eval, self.loss)?;
        grads
            .remove(&self.wrt)
            .ok_or_else(|| Error::InvalidArgument(format!("`{}` is not a trainable input", self.wrt)))
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check(f: &dyn ScalarFn, point: &Tensor, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let analytic = f.gradient(point)?;
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f.value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f.value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_input(shape: &[usize], build: impl FnOnce(&mut GraphBuilder, NodeId) -> NodeId) -> (Graph, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.param("x", shape).unwrap();
        let out = build(&mut b, x);
        b.output("out", out);
        (b.build(), out)
    }

    fn eval1(g: &Graph, x: &Tensor) -> Evaluation {
        g.forward(&Inputs::new().with("x", x)).unwrap()
    }

    #[test]
    fn relu_and_softmax_basics() {
        let (g, out) = single_input(&[3], |b, x| b.activation(x, Activation::Relu));
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(eval1(&g, &x).value(out).data(), &[0.0, 0.0, 2.0]);

        let (g, out) = single_input(&[1, 2], |b, x| b.softmax(x, None).unwrap());
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(eval1(&g, &x).value(out).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_forward() {
        let mut b = GraphBuilder::new();
        let i = b.input("i", &[3, 3]).unwrap();
        let x = b.param("x", &[3, 2]).unwrap();
        let y = b.matmul(i, x).unwrap();
        let g = b.build();
        let xv = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Tensor::identity(3);
        let ev = g.forward(&Inputs::new().with("i", &id).with("x", &xv)).unwrap();
        assert_eq!(ev.value(y), &xv);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (g, out) = single_input(&[2, 3], |b, x| b.sum(x));
        let x = Tensor::full(&[2, 3], 0.3);
        let grads = g.backward(&eval1(&g, &x), out).unwrap();
        assert_eq!(grads["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gradient() {
        // 0.5·x² as 0.5·x·x via (x xᵀ) for a 1×1 matrix
        let (g, out) = single_input(&[1, 1], |b, x| {
            let sq = b.matmul(x, x).unwrap();
            let half = b.scale(sq, 0.5);
            b.sum(half)
        });
        let x = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let grads = g.backward(&eval1(&g, &x), out).unwrap();
        assert!((grads["x"].data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (g, out) = single_input(&[2], |b, x| b.activation(x, Activation::Gelu));
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(g.backward(&eval1(&g, &x), out), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn forward_reports_shape_mismatch_and_unbound() {
        let (g, _) = single_input(&[2, 2], |b, x| b.sum(x));
        let bad = Tensor::zeros(&[2, 3]);
        let err = g.forward(&Inputs::new().with("x", &bad)).err().unwrap();
        assert!(err.to_string().contains("node 0"), "{err}");
        assert!(matches!(g.forward(&Inputs::new()), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let (g, _) = single_input(&[1, 1], |b, x| b.scale(x, f64::INFINITY));
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(matches!(g.forward(&Inputs::new().with("x", &x)), Err(Error::NonFinite { .. })));
    }

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn value(&self, p: &Tensor) -> Result<f64> {
            Ok(p.sq_norm())
        }
        fn gradient(&self, p: &Tensor) -> Result<Tensor> {
            Ok(p.map(|v| 2.0 * v))
        }
    }

    struct Constant;
    impl ScalarFn for Constant {
        fn value(&self, _: &Tensor) -> Result<f64> {
            Ok(4.2)
        }
        fn gradient(&self, p: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(p.shape()))
        }
    }

    #[test]
    fn grad_check_closed_forms() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(grad_check(&SumSquares, &p, 1e-5).unwrap() < 1e-7);
        assert_eq!(grad_check(&Constant, &p, 1e-5).unwrap(), 0.0);
        assert!(grad_check(&Constant, &p, 0.0).is_err());
    }

    /// Points kept away from the ReLU/abs kinks.
    fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.5);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn check_op(shape: &[usize], fixed: Vec<(String, Tensor)>, build: impl FnOnce(&mut GraphBuilder, NodeId) -> NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.param("x", shape).unwrap();
        let mut fixed_ids = Vec::new();
        for (name, t) in &fixed {
            fixed_ids.push(b.input(name, t.shape()).unwrap());
        }
        let out = build(&mut b, x);
        let g = b.build();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = kink_free(shape, &mut rng);
            let f = GraphFn::new(&g, out, "x", fixed.clone());
            let err = grad_check(&f, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w2 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        // matmul + matmul_t + bias + activations + sum
        check_op(&[2, 3], vec![("w".into(), w.clone()), ("w2".into(), w2.clone())], |b, x| {
            let wid = b.input_id_for_test("w");
            let w2id = b.input_id_for_test("w2");
            let y = b.matmul_t(x, wid).unwrap();
            let bias = b.slice_cols(y, 0, 3).unwrap();
            let z = b.matmul(bias, w2id).unwrap();
            let a = b.activation(z, Activation::Gelu);
            let r = b.activation(a, Activation::Abs);
            let s = b.scale(r, 0.7);
            b.sum(s)
        });
        for kind in [Activation::Relu, Activation::Gelu, Activation::Abs] {
            check_op(&[3, 4], vec![], |b, x| {
                let a = b.activation(x, kind);
                b.sum(a)
            });
        }
        // masked softmax feeding cross entropy via concat + layer norm
        let mask: Arc<[bool]> = vec![true, false, true, true, true, false, true, true, true].into();
        let targets = Tensor::vector(vec![2.0, 0.0, 1.0]);
        check_op(&[3, 3], vec![("t".into(), targets)], |b, x| {
            let t = b.input_id_for_test("t");
            let sm = b.softmax(x, Some(mask.clone())).unwrap();
            let both = b.concat_cols(vec![sm, x]).unwrap();
            let rows = b.concat_rows(vec![both, both]).unwrap();
            let half = b.slice_cols(rows, 1, 3).unwrap();
            let first = b.gather_fixed(half, vec![0, 1, 5]).unwrap();
            b.cross_entropy(first, t).unwrap()
        });
    }

    #[test]
    fn layer_norm_and_hoyer_and_mse_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = Tensor::uniform(&[5], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[5], 0.3, &mut rng);
        let target = Tensor::randn(&[2, 5], 1.0, &mut rng);
        check_op(
            &[2, 5],
            vec![("gamma".into(), gamma), ("beta".into(), beta), ("target".into(), target)],
            |b, x| {
                let g = b.input_id_for_test("gamma");
                let be = b.input_id_for_test("beta");
                let t = b.input_id_for_test("target");
                let y = b.layer_norm(x, g, be, 1e-5).unwrap();
                b.mse(y, t).unwrap()
            },
        );
        check_op(&[4, 6], vec![], |b, x| {
            let h = b.activation(x, Activation::Relu);
            b.hoyer(h).unwrap()
        });
    }

    #[test]
    fn gather_by_node_accumulates_repeated_rows() {
        let mut b = GraphBuilder::new();
        let table = b.param("table", &[3, 2]).unwrap();
        let idx = b.input("idx", &[3]).unwrap();
        let rows = b.gather(table, idx).unwrap();
        let s = b.sum(rows);
        let g = b.build();
        let t = Tensor::zeros(&[3, 2]);
        let ix = Tensor::vector(vec![2.0, 2.0, 0.0]);
        let ev = g.forward(&Inputs::new().with("table", &t).with("idx", &ix)).unwrap();
        let grads = g.backward(&ev, s).unwrap();
        assert_eq!(grads["table"].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let bad = Tensor::vector(vec![3.0, 0.0, 0.0]);
        assert!(g.forward(&Inputs::new().with("table", &t).with("idx", &bad)).is_err());
    }

    #[test]
    fn forward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, out) = single_input(&[4, 4], |b, x| {
            let y = b.matmul_t(x, x).unwrap();
            let s = b.softmax(y, None).unwrap();
            b.hoyer(s).unwrap()
        });
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let a = eval1(&g, &x).value(out).clone();
        let bb = eval1(&g, &x).value(out).clone();
        assert_eq!(a.data()[0].to_bits(), bb.data()[0].to_bits());
    }

    impl GraphBuilder {
        fn input_id_for_test(&self, name: &str) -> NodeId {
            self.inputs[name]
        }
    }
}
