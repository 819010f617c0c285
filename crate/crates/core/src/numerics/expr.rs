use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::numel;
use super::{NumericsError, Real, Tensor};

/// Handle to a node inside an [`Expr`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive set. Every variant except `StopGradient` (and the
/// leaves) has an adjoint in [`super::eval`].
#[derive(Debug, Clone)]
pub enum Op {
    /// Named free variable, bound at evaluation time.
    Input { name: String },
    /// Literal data baked into the graph (masks, fixed embeddings).
    Constant { value: Arc<Tensor<f64>> },
    /// Batched matrix product over the last two axes.
    MatMul { trans_a: bool, trans_b: bool },
    /// Elementwise sum with right-aligned broadcasting.
    Add,
    /// Elementwise product with right-aligned broadcasting.
    Mul,
    /// `x[.., i] · w[i, o] + b[o]`.
    Affine,
    /// Row lookup into a 2-D table; output shape is `index_shape ++ [cols]`.
    Gather { indices: Arc<[usize]> },
    /// Softmax over the last axis.
    Softmax,
    /// Softmax over the last axis restricted to `mask`; the mask shape is a
    /// suffix of the input shape and masked entries are exactly zero.
    MaskedSoftmax { mask: Arc<[bool]>, mask_shape: Vec<usize> },
    /// Normalisation over the last axis followed by gain and bias.
    LayerNorm { eps: f64 },
    /// Tanh-approximated GELU.
    Gelu,
    Transpose { dim0: usize, dim1: usize },
    Reshape,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    /// Mean token cross-entropy of logits rows against `targets`, over rows where
    /// `mask` is set. Produces a scalar.
    CrossEntropy { targets: Arc<[usize]>, mask: Arc<[bool]> },
    StopGradient,
    /// Rows scaled to unit Euclidean norm.
    L2Normalize { eps: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant { .. } => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine => "affine",
            Op::Gather { .. } => "gather",
            Op::Softmax => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Transpose { .. } => "transpose",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StopGradient => "stop_gradient",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// A differentiable computation built from the primitive set.
///
/// Nodes are appended in topological order, so the graph is acyclic by
/// construction. Shapes are inferred eagerly; every builder method rejects
/// incompatible operands before anything is evaluated.
#[derive(Debug, Clone, Default)]
pub struct Expr {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Expr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Names of every free input, in declaration order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
        NumericsError::ShapeMismatch { op, node: self.nodes.len(), lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    fn invalid(&self, op: &'static str, reason: impl Into<String>) -> NumericsError {
        NumericsError::InvalidArgument { op, node: self.nodes.len(), reason: reason.into() }
    }

    /// Declares (or re-uses) a named input. Re-declaring a name with a
    /// different shape is an error, so a parameter appears exactly once.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.inputs.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(self.mismatch("input", &self.nodes[id.0].shape, shape));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input { name: name.to_string() }, Vec::new(), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant<T: Real>(&mut self, value: &Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value: Arc::new(value.cast()) }, Vec::new(), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(&Tensor::<f64>::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", &sa, &sb));
        }
        let (ba, ma) = sa.split_at(sa.len() - 2);
        let (bb, mb) = sb.split_at(sb.len() - 2);
        let (m, k) = if trans_a { (ma[1], ma[0]) } else { (ma[0], ma[1]) };
        let (k2, n) = if trans_b { (mb[1], mb[0]) } else { (mb[0], mb[1]) };
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(self.mismatch("matmul", &sa, &sb));
        }
        let mut shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        shape.extend([m, n]);
        Ok(self.push(Op::MatMul { trans_a, trans_b }, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| self.mismatch("add", self.shape(a), self.shape(b)))?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| self.mismatch("mul", self.shape(a), self.shape(b)))?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    /// Multiplication by a literal scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(self.mismatch("affine", &sx, &sw));
        }
        if sb != [sw[1]] {
            return Err(self.mismatch("affine", &sw, &sb));
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = sw[1];
        Ok(self.push(Op::Affine, vec![x, w, b], shape))
    }

    /// Looks up rows of the 2-D `table`. `index_shape` gives the leading
    /// output dimensions.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>, index_shape: &[usize]) -> Result<NodeId, NumericsError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(self.invalid("gather", format!("table must be 2-D, got {st:?}")));
        }
        if numel(index_shape) != indices.len() {
            return Err(self.invalid("gather", format!("{} indices for index shape {index_shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(self.invalid("gather", format!("index {bad} out of range for {} rows", st[0])));
        }
        let mut shape = index_shape.to_vec();
        shape.push(st[1]);
        Ok(self.push(Op::Gather { indices: indices.into() }, vec![table], shape))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a).is_empty() {
            return Err(self.invalid("softmax", "rank-0 input"));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Softmax, vec![a], shape))
    }

    /// Softmax restricted to the `true` entries of `mask`. A row with no
    /// unmasked entry has no defined distribution and is rejected.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>, mask_shape: &[usize]) -> Result<NodeId, NumericsError> {
        let sa = self.shape(a).to_vec();
        if mask_shape.is_empty() || mask_shape.len() > sa.len() || sa[sa.len() - mask_shape.len()..] != *mask_shape {
            return Err(self.mismatch("masked_softmax", &sa, mask_shape));
        }
        if numel(mask_shape) != mask.len() {
            return Err(self.invalid("masked_softmax", "mask length does not match its shape"));
        }
        let cols = *mask_shape.last().unwrap();
        if let Some(row) = mask.chunks(cols).position(|r| !r.iter().any(|&m| m)) {
            return Err(NumericsError::FullyMaskedRow { node: self.nodes.len(), row });
        }
        Ok(self.push(
            Op::MaskedSoftmax { mask: mask.into(), mask_shape: mask_shape.to_vec() },
            vec![a],
            sa,
        ))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, NumericsError> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| self.invalid("layer_norm", "rank-0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(self.mismatch("layer_norm", &sx, self.shape(p)));
            }
        }
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], sx))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Gelu, vec![a], shape))
    }

    pub fn transpose(&mut self, a: NodeId, dim0: usize, dim1: usize) -> Result<NodeId, NumericsError> {
        let mut shape = self.shape(a).to_vec();
        if dim0 >= shape.len() || dim1 >= shape.len() {
            return Err(self.invalid("transpose", format!("axes ({dim0}, {dim1}) for shape {shape:?}")));
        }
        shape.swap(dim0, dim1);
        let (dim0, dim1) = (dim0.min(dim1), dim0.max(dim1));
        Ok(self.push(Op::Transpose { dim0, dim1 }, vec![a], shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(self.mismatch("reshape", self.shape(a), shape));
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let mut shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(self.invalid("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![a], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, NumericsError> {
        let first = self.shape(*parts.first().ok_or_else(|| self.invalid("concat", "no operands"))?).to_vec();
        if axis >= first.len() {
            return Err(self.invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", &first, s));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    /// Mean cross-entropy (natural log) of `logits` rows against `targets`,
    /// counted only where `mask` holds.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<bool>) -> Result<NodeId, NumericsError> {
        let sl = self.shape(logits).to_vec();
        let vocab = *sl.last().ok_or_else(|| self.invalid("cross_entropy", "rank-0 logits"))?;
        let rows = numel(&sl) / vocab.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(self.invalid(
                "cross_entropy",
                format!("{rows} logit rows but {} targets / {} mask entries", targets.len(), mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::AllMasked);
        }
        if let Some((_, &t)) = targets.iter().zip(&mask).find(|(&t, &m)| m && t >= vocab) {
            return Err(self.invalid("cross_entropy", format!("target {t} outside vocabulary of {vocab}")));
        }
        Ok(self.push(
            Op::CrossEntropy { targets: targets.into(), mask: mask.into() },
            vec![logits],
            Vec::new(),
        ))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGradient, vec![a], shape)
    }

    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId, NumericsError> {
        if self.shape(a).is_empty() {
            return Err(self.invalid("l2_normalize", "rank-0 input"));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::L2Normalize { eps }, vec![a], shape))
    }
}
