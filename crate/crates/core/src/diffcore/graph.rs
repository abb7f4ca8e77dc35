//! Fixed-topology computation graph with reverse-mode gradients.
//!
//! A graph is assembled once with [`GraphBuilder`]; nodes are appended in
//! topological order and every node holds a `[batch, dim]` activation. The
//! batch size is taken from the feeds on each forward pass, so the same graph
//! serves training mini-batches and evaluation batches.

use std::collections::HashMap;

use super::{DiffError, ParamId, ParamStore, Real, Tensor};

/// Lower clamp applied to predictions inside the BCE loss (upper is `1 - BCE_EPS`).
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A batch of binary multi-hot rows stored as index lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseBatch {
    dim: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl SparseBatch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.offsets.clear();
        self.offsets.push(0);
        self.indices.clear();
    }

    /// Appends one row given the positions of its ones.
    pub fn push_row(&mut self, ones: &[u32]) -> Result<(), DiffError> {
        if let Some(&bad) = ones.iter().find(|&&j| j as usize >= self.dim) {
            return Err(DiffError::Shape(format!(
                "sparse index {bad} out of range for dimension {}",
                self.dim
            )));
        }
        self.indices.extend_from_slice(ones);
        self.offsets.push(self.indices.len());
        Ok(())
    }

    pub fn from_rows<R: AsRef<[u32]>>(dim: usize, rows: &[R]) -> Result<Self, DiffError> {
        let mut batch = Self::new(dim);
        for r in rows {
            batch.push_row(r.as_ref())?;
        }
        Ok(batch)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Named values supplied to a forward pass.
#[derive(Default)]
pub struct Feeds<'a, T> {
    dense: HashMap<&'a str, &'a Tensor<T>>,
    sparse: HashMap<&'a str, &'a SparseBatch>,
}

impl<'a, T> Feeds<'a, T> {
    pub fn new() -> Self {
        Self {
            dense: HashMap::new(),
            sparse: HashMap::new(),
        }
    }

    pub fn dense(mut self, name: &'a str, value: &'a Tensor<T>) -> Self {
        self.dense.insert(name, value);
        self
    }

    pub fn sparse(mut self, name: &'a str, value: &'a SparseBatch) -> Self {
        self.sparse.insert(name, value);
        self
    }
}

#[derive(Clone, Debug)]
enum Op {
    DenseInput { name: String },
    SparseInput { name: String },
    EmbeddingBag { input: NodeId, table: ParamId },
    Linear { input: NodeId, weight: ParamId, bias: Option<ParamId> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    BceLoss { pred: NodeId, target: NodeId },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::DenseInput { .. } => "dense-input",
            Op::SparseInput { .. } => "sparse-input",
            Op::EmbeddingBag { .. } => "embedding-bag",
            Op::Linear { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Mul(..) => "elementwise-mul",
            Op::Concat(_) => "concat",
            Op::BceLoss { .. } => "bce-loss",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::DenseInput { .. } | Op::SparseInput { .. } => Vec::new(),
            Op::EmbeddingBag { input, .. } | Op::Linear { input, .. } => vec![*input],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Softmax(x) => vec![*x],
            Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::BceLoss { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    dim: usize,
    needs_grad: bool,
    rows: usize,
    value: Vec<T>,
    grad: Vec<T>,
    sparse: Option<SparseBatch>,
}

/// Incrementally declares a [`DiffGraph`]. Parameter shapes are validated
/// against the store as nodes are added.
pub struct GraphBuilder<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    loss: Option<NodeId>,
}

impl<'p, T: Real> GraphBuilder<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            names: HashMap::new(),
            loss: None,
        }
    }

    fn push(&mut self, op: Op, dim: usize) -> NodeId {
        let needs_grad = match &op {
            Op::DenseInput { .. } | Op::SparseInput { .. } => false,
            Op::EmbeddingBag { .. } | Op::Linear { .. } => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            dim,
            needs_grad,
            rows: 0,
            value: Vec::new(),
            grad: Vec::new(),
            sparse: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_node(&self, id: NodeId, what: &str) -> Result<&Node<T>, DiffError> {
        let node = self
            .nodes
            .get(id.0)
            .ok_or_else(|| DiffError::Graph(format!("{what}: unknown node")))?;
        if matches!(node.op, Op::SparseInput { .. }) {
            return Err(DiffError::Graph(format!(
                "{what}: sparse inputs can only feed an embedding-bag"
            )));
        }
        if matches!(node.op, Op::BceLoss { .. }) {
            return Err(DiffError::Graph(format!("{what}: the loss cannot be an operand")));
        }
        Ok(node)
    }

    pub fn dense_input(&mut self, name: &str, dim: usize) -> Result<NodeId, DiffError> {
        if dim == 0 {
            return Err(DiffError::Shape(format!("input {name} has zero width")));
        }
        let id = self.push(Op::DenseInput { name: name.to_string() }, dim);
        self.name(id, name)?;
        Ok(id)
    }

    pub fn sparse_input(&mut self, name: &str, dim: usize) -> Result<NodeId, DiffError> {
        if dim == 0 {
            return Err(DiffError::Shape(format!("input {name} has zero width")));
        }
        let id = self.push(Op::SparseInput { name: name.to_string() }, dim);
        self.name(id, name)?;
        Ok(id)
    }

    /// Sum of the table rows selected by a multi-hot input (`table^T * x`).
    /// A one-hot row selects exactly one table row.
    pub fn embedding_bag(&mut self, input: NodeId, table: ParamId) -> Result<NodeId, DiffError> {
        let node = self
            .nodes
            .get(input.0)
            .ok_or_else(|| DiffError::Graph("embedding-bag: unknown node".into()))?;
        if !matches!(node.op, Op::SparseInput { .. }) {
            return Err(DiffError::Graph("embedding-bag: input must be a sparse input".into()));
        }
        let shape = self.params.value(table).shape();
        if shape.len() != 2 || shape[0] != node.dim {
            return Err(DiffError::Shape(format!(
                "embedding-bag: table {} has shape {shape:?}, input width {}",
                self.params.get(table).name,
                node.dim
            )));
        }
        let dim = shape[1];
        Ok(self.push(Op::EmbeddingBag { input, table }, dim))
    }

    /// `x * W + b` with `W` stored `[in, out]`, i.e. `W^T x + b` per column vector.
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Result<NodeId, DiffError> {
        let in_dim = self.check_node(input, "dense")?.dim;
        let w = self.params.get(weight);
        let shape = w.value.shape();
        if shape.len() != 2 || shape[0] != in_dim {
            return Err(DiffError::Shape(format!(
                "dense: weight {} has shape {shape:?}, input width {in_dim}",
                w.name
            )));
        }
        let out = shape[1];
        if let Some(b) = bias {
            let b = self.params.get(b);
            if b.value.shape() != [out] {
                return Err(DiffError::Shape(format!(
                    "dense: bias {} has shape {:?}, expected [{out}]",
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(self.push(Op::Linear { input, weight, bias }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let dim = self.check_node(x, "relu")?.dim;
        Ok(self.push(Op::Relu(x), dim))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let dim = self.check_node(x, "sigmoid")?.dim;
        Ok(self.push(Op::Sigmoid(x), dim))
    }

    /// Row-wise softmax over the full width.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let dim = self.check_node(x, "softmax")?.dim;
        Ok(self.push(Op::Softmax(x), dim))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let da = self.check_node(a, "elementwise-mul")?.dim;
        let db = self.check_node(b, "elementwise-mul")?.dim;
        if da != db {
            return Err(DiffError::Shape(format!("elementwise-mul: widths {da} and {db}")));
        }
        Ok(self.push(Op::Mul(a, b), da))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Graph("concat: no operands".into()));
        }
        let mut dim = 0;
        for &p in parts {
            dim += self.check_node(p, "concat")?.dim;
        }
        Ok(self.push(Op::Concat(parts.to_vec()), dim))
    }

    /// Summed binary cross-entropy; the graph's single loss node.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        if self.loss.is_some() {
            return Err(DiffError::Graph("bce-loss: graph already has a loss".into()));
        }
        let dp = self.check_node(pred, "bce-loss")?.dim;
        let target_node = self.check_node(target, "bce-loss")?;
        if !matches!(target_node.op, Op::DenseInput { .. }) {
            return Err(DiffError::Graph("bce-loss: target must be a dense input".into()));
        }
        if target_node.dim != dp {
            return Err(DiffError::Shape(format!(
                "bce-loss: prediction width {dp}, target width {}",
                target_node.dim
            )));
        }
        let id = self.push(Op::BceLoss { pred, target }, 1);
        self.loss = Some(id);
        Ok(id)
    }

    pub fn name(&mut self, id: NodeId, name: &str) -> Result<(), DiffError> {
        if self.names.insert(name.to_string(), id).is_some() {
            return Err(DiffError::Graph(format!("node name {name} used twice")));
        }
        Ok(())
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].dim
    }

    pub fn build(self) -> DiffGraph<T> {
        DiffGraph {
            nodes: self.nodes,
            names: self.names,
            loss: self.loss,
            batch: 0,
            computed: Vec::new(),
            loss_value: None,
        }
    }
}

/// A built graph plus its activation slots. Single-threaded: forward and
/// backward mutate the slots in place.
#[derive(Clone, Debug)]
pub struct DiffGraph<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
    loss: Option<NodeId>,
    batch: usize,
    computed: Vec<bool>,
    loss_value: Option<f64>,
}

impl<T: Real> DiffGraph<T> {
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn lookup(&self, name: &str) -> Result<NodeId, DiffError> {
        self.node(name)
            .ok_or_else(|| DiffError::Graph(format!("no node named {name}")))
    }

    /// Runs the graph for the requested named outputs and returns copies of them.
    pub fn forward(
        &mut self,
        params: &ParamStore<T>,
        feeds: &Feeds<'_, T>,
        outputs: &[&str],
    ) -> Result<Vec<Tensor<T>>, DiffError> {
        self.run(params, feeds, outputs)?;
        outputs.iter().map(|name| self.output(name)).collect()
    }

    /// Like [`forward`](Self::forward) but leaves results in the activation slots.
    pub fn run(
        &mut self,
        params: &ParamStore<T>,
        feeds: &Feeds<'_, T>,
        outputs: &[&str],
    ) -> Result<(), DiffError> {
        let targets = outputs
            .iter()
            .map(|n| self.lookup(n))
            .collect::<Result<Vec<_>, _>>()?;
        let mut needed = vec![false; self.nodes.len()];
        for t in targets {
            needed[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for inp in self.nodes[i].op.inputs() {
                    needed[inp.0] = true;
                }
            }
        }

        self.batch = self.infer_batch(feeds, &needed)?;
        self.computed = vec![false; self.nodes.len()];
        self.loss_value = None;
        for i in 0..self.nodes.len() {
            if needed[i] {
                self.eval_node(i, params, feeds)?;
                self.computed[i] = true;
            }
        }
        Ok(())
    }

    fn infer_batch(&self, feeds: &Feeds<'_, T>, needed: &[bool]) -> Result<usize, DiffError> {
        let mut batch: Option<usize> = None;
        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let (name, rows) = match &node.op {
                Op::DenseInput { name } => {
                    let t = feeds
                        .dense
                        .get(name.as_str())
                        .ok_or_else(|| DiffError::Graph(format!("missing dense feed {name}")))?;
                    if t.cols() != node.dim || t.shape().len() > 2 {
                        return Err(DiffError::Shape(format!(
                            "feed {name} has shape {:?}, expected [batch, {}]",
                            t.shape(),
                            node.dim
                        )));
                    }
                    (name, t.rows())
                }
                Op::SparseInput { name } => {
                    let s = feeds
                        .sparse
                        .get(name.as_str())
                        .ok_or_else(|| DiffError::Graph(format!("missing sparse feed {name}")))?;
                    if s.dim() != node.dim {
                        return Err(DiffError::Shape(format!(
                            "feed {name} has width {}, expected {}",
                            s.dim(),
                            node.dim
                        )));
                    }
                    (name, s.rows())
                }
                _ => continue,
            };
            match batch {
                None => batch = Some(rows),
                Some(b) if b != rows => {
                    return Err(DiffError::Shape(format!(
                        "feed {name} has {rows} rows, other feeds have {b}"
                    )))
                }
                _ => {}
            }
        }
        match batch {
            Some(0) | None => Err(DiffError::Shape("forward needs a non-empty batch".into())),
            Some(b) => Ok(b),
        }
    }

    fn eval_node(&mut self, i: usize, params: &ParamStore<T>, feeds: &Feeds<'_, T>) -> Result<(), DiffError> {
        let batch = self.batch;
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let dim = node.dim;
        node.rows = if matches!(node.op, Op::BceLoss { .. }) { 1 } else { batch };
        node.value.clear();
        node.value.resize(node.rows * dim, T::zero());
        let out = &mut node.value;

        match &node.op {
            Op::DenseInput { name } => {
                let t = feeds.dense[name.as_str()];
                if !t.is_finite() {
                    return Err(DiffError::NonFinite(format!("feed {name}")));
                }
                out.copy_from_slice(t.data());
            }
            Op::SparseInput { name } => {
                let s = feeds.sparse[name.as_str()];
                match &mut node.sparse {
                    Some(slot) => slot.clone_from(s),
                    slot => *slot = Some(s.clone()),
                }
            }
            Op::EmbeddingBag { input, table } => {
                let sparse = before[input.0].sparse.as_ref().expect("sparse feed stored");
                let table = params.value(*table).data();
                for b in 0..batch {
                    let dst = &mut out[b * dim..(b + 1) * dim];
                    for &j in sparse.row(b) {
                        let src = &table[j as usize * dim..(j as usize + 1) * dim];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = &before[input.0];
                let w = params.value(*weight);
                check_param_shape(w, &[x.dim, dim], "dense")?;
                if let Some(b) = bias {
                    let bv = params.value(*b).data();
                    check_param_shape(params.value(*b), &[dim], "dense")?;
                    for row in out.chunks_exact_mut(dim) {
                        row.copy_from_slice(bv);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                T::gemm(
                    batch,
                    x.dim,
                    dim,
                    T::one(),
                    &x.value,
                    (x.dim as isize, 1),
                    w.data(),
                    (dim as isize, 1),
                    beta,
                    out,
                    (dim as isize, 1),
                );
            }
            Op::Relu(x) => {
                for (o, &v) in out.iter_mut().zip(&before[x.0].value) {
                    *o = if v > T::zero() { v } else { T::zero() };
                }
            }
            Op::Sigmoid(x) => {
                for (o, &v) in out.iter_mut().zip(&before[x.0].value) {
                    *o = sigmoid(v);
                }
            }
            Op::Softmax(x) => {
                let src = &before[x.0].value;
                for (o, s) in out.chunks_exact_mut(dim).zip(src.chunks_exact(dim)) {
                    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for (oo, &v) in o.iter_mut().zip(s) {
                        *oo = (v - max).exp();
                        total += *oo;
                    }
                    let inv = T::one() / total;
                    o.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (&before[a.0].value, &before[b.0].value);
                for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                    *o = x * y;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let part = &before[p.0];
                    let w = part.dim;
                    for b in 0..batch {
                        out[b * dim + offset..b * dim + offset + w]
                            .copy_from_slice(&part.value[b * w..(b + 1) * w]);
                    }
                    offset += w;
                }
            }
            Op::BceLoss { pred, target } => {
                let (p, y) = (&before[pred.0].value, &before[target.0].value);
                let mut total = 0.0f64;
                for (&p, &y) in p.iter().zip(y) {
                    total += bce_term(p.as_f64(), y.as_f64())?;
                }
                out[0] = T::of(total);
                self.loss_value = Some(total);
            }
        }
        if node.value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite(format!("output of {} (node {i})", node.op.label())));
        }
        Ok(())
    }

    /// Copy of a named node's activation from the last forward pass.
    pub fn output(&self, name: &str) -> Result<Tensor<T>, DiffError> {
        let id = self.lookup(name)?;
        if !self.computed.get(id.0).copied().unwrap_or(false) {
            return Err(DiffError::State(format!("{name} was not computed by the last forward")));
        }
        let node = &self.nodes[id.0];
        Tensor::new(vec![node.rows, node.dim], node.value.clone())
    }

    /// Borrowed activation of a named node, `[rows, dim]` row-major.
    pub fn values(&self, name: &str) -> Result<&[T], DiffError> {
        let id = self.lookup(name)?;
        if !self.computed.get(id.0).copied().unwrap_or(false) {
            return Err(DiffError::State(format!("{name} was not computed by the last forward")));
        }
        Ok(&self.nodes[id.0].value)
    }

    /// Summed BCE of the last forward pass, accumulated in `f64`.
    pub fn loss_value(&self) -> Option<f64> {
        self.loss_value
    }

    /// Sign pattern of every relu input and clamp state of every BCE term in
    /// the last forward pass. Finite-difference checks use it to detect
    /// perturbations that cross a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !self.computed.get(i).copied().unwrap_or(false) {
                continue;
            }
            match &node.op {
                Op::Relu(x) => pattern.extend(self.nodes[x.0].value.iter().map(|&v| v > T::zero())),
                Op::BceLoss { pred, .. } => pattern.extend(self.nodes[pred.0].value.iter().map(|&p| {
                    let p = p.as_f64();
                    !(BCE_EPS..=1.0 - BCE_EPS).contains(&p)
                })),
                _ => {}
            }
        }
        pattern
    }

    /// Accumulates `loss_grad * d loss / d theta` into every parameter's gradient.
    pub fn backward(&mut self, params: &mut ParamStore<T>, loss_grad: T) -> Result<(), DiffError> {
        let loss = self
            .loss
            .ok_or_else(|| DiffError::Graph("graph has no loss node".into()))?;
        if !self.computed.get(loss.0).copied().unwrap_or(false) {
            return Err(DiffError::State("backward called before forward computed the loss".into()));
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.grad.clear();
            if self.computed[i] && node.needs_grad {
                node.grad.resize(node.rows * node.dim, T::zero());
            }
        }
        self.nodes[loss.0].grad[0] = loss_grad;

        let batch = self.batch;
        for i in (0..=loss.0).rev() {
            if !self.computed[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let dim = node.dim;
            let dy = &node.grad;
            match &node.op {
                Op::DenseInput { .. } | Op::SparseInput { .. } => {}
                Op::EmbeddingBag { input, table } => {
                    let sparse = before[input.0].sparse.as_ref().expect("sparse feed stored");
                    let g = params.get_mut(*table).grad.data_mut();
                    for b in 0..batch {
                        let src = &dy[b * dim..(b + 1) * dim];
                        for &j in sparse.row(b) {
                            let dst = &mut g[j as usize * dim..(j as usize + 1) * dim];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let x = &mut before[input.0];
                    let in_dim = x.dim;
                    {
                        let wg = params.get_mut(*weight).grad.data_mut();
                        T::gemm(
                            in_dim,
                            batch,
                            dim,
                            T::one(),
                            &x.value,
                            (1, in_dim as isize),
                            dy,
                            (dim as isize, 1),
                            T::one(),
                            wg,
                            (dim as isize, 1),
                        );
                    }
                    if let Some(b) = bias {
                        let bg = params.get_mut(*b).grad.data_mut();
                        for row in dy.chunks_exact(dim) {
                            bg.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                        }
                    }
                    if x.needs_grad {
                        let w = params.value(*weight).data();
                        T::gemm(
                            batch,
                            dim,
                            in_dim,
                            T::one(),
                            dy,
                            (dim as isize, 1),
                            w,
                            (1, dim as isize),
                            T::one(),
                            &mut x.grad,
                            (in_dim as isize, 1),
                        );
                    }
                }
                Op::Relu(x) => {
                    let x = &mut before[x.0];
                    if x.needs_grad {
                        for ((g, &d), &v) in x.grad.iter_mut().zip(dy).zip(&x.value) {
                            if v > T::zero() {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let x = &mut before[x.0];
                    if x.needs_grad {
                        for ((g, &d), &y) in x.grad.iter_mut().zip(dy).zip(&node.value) {
                            *g += d * y * (T::one() - y);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = &mut before[x.0];
                    if x.needs_grad {
                        for ((g, d), y) in x
                            .grad
                            .chunks_exact_mut(dim)
                            .zip(dy.chunks_exact(dim))
                            .zip(node.value.chunks_exact(dim))
                        {
                            let dot: T = d.iter().zip(y).map(|(&a, &b)| a * b).sum();
                            for ((gg, &dd), &yy) in g.iter_mut().zip(d).zip(y) {
                                *gg += yy * (dd - dot);
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = before[a.0].value.clone();
                    let bv = before[b.0].value.clone();
                    if before[a.0].needs_grad {
                        for ((g, &d), &y) in before[a.0].grad.iter_mut().zip(dy).zip(&bv) {
                            *g += d * y;
                        }
                    }
                    if before[b.0].needs_grad {
                        for ((g, &d), &x) in before[b.0].grad.iter_mut().zip(dy).zip(&av) {
                            *g += d * x;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let part = &mut before[p.0];
                        let w = part.dim;
                        if part.needs_grad {
                            for b in 0..batch {
                                let src = &dy[b * dim + offset..b * dim + offset + w];
                                part.grad[b * w..(b + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(g, &s)| *g += s);
                            }
                        }
                        offset += w;
                    }
                }
                Op::BceLoss { pred, target } => {
                    let seed = dy[0];
                    let y = before[target.0].value.clone();
                    let p = &mut before[pred.0];
                    if p.needs_grad {
                        for ((g, &pv), &yv) in p.grad.iter_mut().zip(&p.value).zip(&y) {
                            let pc = pv.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
                            let yv = yv.as_f64();
                            *g += seed * T::of(-yv / pc + (1.0 - yv) / (1.0 - pc));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_param_shape<T: Real>(t: &Tensor<T>, expected: &[usize], op: &str) -> Result<(), DiffError> {
    if t.shape() != expected {
        return Err(DiffError::Shape(format!(
            "{op}: parameter shape {:?}, graph expects {expected:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn bce_term(p: f64, y: f64) -> Result<f64, DiffError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DiffError::Domain(format!("prediction {p} outside [0, 1]")));
    }
    if y != 0.0 && y != 1.0 {
        return Err(DiffError::Domain(format!("label {y} is not 0 or 1")));
    }
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// Summed binary cross-entropy with the same clamping the graph uses.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64, DiffError> {
    if pred.shape() != target.shape() {
        return Err(DiffError::Shape(format!(
            "bce: prediction shape {:?}, target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| bce_term(p.as_f64(), y.as_f64()))
        .sum()
}
