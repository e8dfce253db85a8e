//! The differentiable operation graph.
//!
//! Nodes are appended in topological order by construction, so every parent
//! id is smaller than its child's. [`Graph::derive`] appends the reverse-mode
//! gradient computation as ordinary nodes; since every derivative rule is
//! written in terms of primitives that have rules of their own, the extended
//! graph can be differentiated again.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{GraphError, Result};
use crate::tensor::{self, broadcast_shape, numel, Tensor};

/// Named leaf values supplied to [`Graph::evaluate`].
pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Constant(Arc<Tensor>),
    Fill(f64),
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Conv2d,
    Conv2dWeightGrad { kh: usize, kw: usize },
    FlipKernel,
    Relu,
    /// `1[x > threshold]`; piecewise constant.
    StepMask(f64),
    Softplus,
    Sigmoid,
    Abs,
    /// Piecewise constant sign (0 at 0).
    Sign,
    Recip,
    Log,
    ClampMin(f64),
    GlobalAvgPool,
    Upsample(usize),
    UpsampleTranspose(usize),
    Sum,
    Mean,
    SumToShape,
    BroadcastTo,
    Reshape,
    Softmax,
    CrossEntropy,
    SquaredError,
    GatherRows(Arc<[usize]>),
    ScatterRows(Arc<[usize]>),
    StopGradient,
    ArgmaxOneHot,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Fill(_) => "fill",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d => "conv2d",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::FlipKernel => "flip_kernel",
            Op::Relu => "relu",
            Op::StepMask(_) => "step_mask",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Sign => "sign",
            Op::Recip => "recip",
            Op::Log => "log",
            Op::ClampMin(_) => "clamp_min",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Upsample(_) => "upsample",
            Op::UpsampleTranspose(_) => "upsample_transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumToShape => "sum_to_shape",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Softmax => "softmax",
            Op::CrossEntropy => "cross_entropy",
            Op::SquaredError => "squared_error",
            Op::GatherRows(_) => "gather_rows",
            Op::ScatterRows(_) => "scatter_rows",
            Op::StopGradient => "stop_gradient",
            Op::ArgmaxOneHot => "argmax_one_hot",
        }
    }

    /// Ops whose output is locally constant in their inputs; gradients stop here.
    fn blocks_gradient(&self) -> bool {
        matches!(self, Op::StepMask(_) | Op::Sign | Op::StopGradient)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id.0))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn inputs(&self) -> &BTreeMap<String, NodeId> {
        &self.inputs
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.node(id)?;
        self.outputs.insert(name.to_string(), id);
        Ok(())
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: &str) -> NodeId {
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    pub fn describe(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match (&n.label, &n.op) {
            (Some(l), _) => format!("#{} `{}` ({})", id.0, l, n.op.name()),
            (None, Op::Input(name)) => format!("#{} input `{}`", id.0, name),
            (None, op) => format!("#{} ({})", id.0, op.name()),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape, label: None });
        id
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        for &id in ids {
            self.node(id)?;
        }
        Ok(())
    }

    fn shape_err(&self, op: &str, ids: &[NodeId], detail: impl Into<String>) -> GraphError {
        let shapes: Vec<_> = ids.iter().map(|&i| self.shape(i).to_vec()).collect();
        GraphError::NodeShape {
            node: format!("new {op} over {}", ids.iter().map(|&i| self.describe(i)).collect::<Vec<_>>().join(", ")),
            detail: format!("{} (operand shapes {:?})", detail.into(), shapes),
        }
    }

    // ---- leaves -------------------------------------------------------------

    /// Declares a named input leaf. Re-declaring a name with the same shape
    /// returns the existing node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.inputs.get(name) {
            if self.shape(id) != shape {
                return Err(GraphError::Shape(format!(
                    "input `{name}` redeclared with shape {shape:?}, was {:?}",
                    self.shape(id)
                )));
            }
            return Ok(id);
        }
        if shape.contains(&0) {
            return Err(GraphError::Shape(format!("input `{name}` has zero extent")));
        }
        let id = self.push(Op::Input(name.to_string()), vec![], shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(Arc::new(value)), vec![], shape)
    }

    pub fn fill(&mut self, shape: &[usize], value: f64) -> NodeId {
        self.push(Op::Fill(value), vec![], shape.to_vec())
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| self.shape_err(op.name(), &[a, b], "shapes do not broadcast"))?;
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("squared_error", &[a, b], "operands must have equal shapes"));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::SquaredError, vec![a, b], shape))
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a], shape))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Op::Scale(c), a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, a)
    }

    pub fn step_mask(&mut self, a: NodeId, threshold: f64) -> Result<NodeId> {
        self.unary(Op::StepMask(threshold), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Abs, a)
    }

    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sign, a)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Recip, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Log, a)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(Op::ClampMin(floor), a)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::StopGradient, a)
    }

    pub fn argmax_one_hot(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        if self.shape(a).is_empty() {
            return Err(self.shape_err("argmax_one_hot", &[a], "needs rank >= 1"));
        }
        self.unary(Op::ArgmaxOneHot, a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        if self.shape(a).is_empty() {
            return Err(self.shape_err("softmax", &[a], "needs rank >= 1"));
        }
        self.unary(Op::Softmax, a)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", &[a, b], "expected [m,k] x [k,n]"));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(self.shape_err("transpose", &[a], "expected rank 2"));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose, vec![a], shape))
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `x`: [n, ci, h, w]; `k`: [co, ci, kh, kw] with odd kernel extents.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        self.check(&[x, k])?;
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(self.shape_err("conv2d", &[x, k], "expected [n,ci,h,w] * [co,ci,odd,odd]"));
        }
        let shape = vec![sx[0], sk[0], sx[2], sx[3]];
        Ok(self.push(Op::Conv2d, vec![x, k], shape))
    }

    pub fn conv2d_weight_grad(&mut self, x: NodeId, g: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        self.check(&[x, g])?;
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] || sx[2..] != sg[2..] || kh % 2 == 0 || kw % 2 == 0 {
            return Err(self.shape_err("conv2d_weight_grad", &[x, g], "expected [n,ci,h,w] and [n,co,h,w]"));
        }
        let shape = vec![sg[1], sx[1], kh, kw];
        Ok(self.push(Op::Conv2dWeightGrad { kh, kw }, vec![x, g], shape))
    }

    pub fn flip_kernel(&mut self, k: NodeId) -> Result<NodeId> {
        self.check(&[k])?;
        let s = self.shape(k);
        if s.len() != 4 {
            return Err(self.shape_err("flip_kernel", &[k], "expected rank 4"));
        }
        let shape = vec![s[1], s[0], s[2], s[3]];
        Ok(self.push(Op::FlipKernel, vec![k], shape))
    }

    /// Mean over every axis after the first two: [n, c, ...] -> [n, c].
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        if s.len() < 3 {
            return Err(self.shape_err("global_avg_pool", &[a], "expected [n,c,spatial...]"));
        }
        let shape = vec![s[0], s[1]];
        Ok(self.push(Op::GlobalAvgPool, vec![a], shape))
    }

    /// Bilinear upsampling of the two trailing axes by `factor`.
    pub fn upsample(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        if s.len() < 2 || factor == 0 {
            return Err(self.shape_err("upsample", &[a], "expected rank >= 2 and factor >= 1"));
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        Ok(self.push(Op::Upsample(factor), vec![a], shape))
    }

    pub fn upsample_transpose(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        let r = s.len();
        if r < 2 || factor == 0 || s[r - 2] % factor != 0 || s[r - 1] % factor != 0 {
            return Err(self.shape_err("upsample_transpose", &[a], "trailing axes must divide by factor"));
        }
        let mut shape = s.to_vec();
        shape[r - 2] /= factor;
        shape[r - 1] /= factor;
        Ok(self.push(Op::UpsampleTranspose(factor), vec![a], shape))
    }

    // ---- reductions and shape ops ------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        Ok(self.push(Op::Sum, vec![a], vec![]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        Ok(self.push(Op::Mean, vec![a], vec![]))
    }

    /// Sums over the axes along which `shape` would be broadcast up to `a`'s shape.
    pub fn sum_to_shape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        if broadcast_shape(shape, self.shape(a)).as_deref() != Some(self.shape(a)) {
            return Err(self.shape_err("sum_to_shape", &[a], format!("{shape:?} does not broadcast to operand")));
        }
        Ok(self.push(Op::SumToShape, vec![a], shape.to_vec()))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        if broadcast_shape(self.shape(a), shape).as_deref() != Some(shape) {
            return Err(self.shape_err("broadcast_to", &[a], format!("operand does not broadcast to {shape:?}")));
        }
        Ok(self.push(Op::BroadcastTo, vec![a], shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        if numel(self.shape(a)) != numel(shape) || shape.contains(&0) {
            return Err(self.shape_err("reshape", &[a], format!("cannot reshape to {shape:?}")));
        }
        if self.shape(a) == shape {
            return Ok(a);
        }
        Ok(self.push(Op::Reshape, vec![a], shape.to_vec()))
    }

    /// Per-row cross-entropy `logsumexp(z) * sum(t) - <t, z>` for [n, k] logits
    /// and target weights; returns [n].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.check(&[logits, targets])?;
        let (sz, st) = (self.shape(logits), self.shape(targets));
        if sz.len() != 2 || sz != st {
            return Err(self.shape_err("cross_entropy", &[logits, targets], "expected equal [n,k] shapes"));
        }
        let shape = vec![sz[0]];
        Ok(self.push(Op::CrossEntropy, vec![logits, targets], shape))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        if s.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(self.shape_err("gather_rows", &[a], "row index out of range"));
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        Ok(self.push(Op::GatherRows(idx.into()), vec![a], shape))
    }

    /// Adds row `r` of `a` into row `idx[r]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, a: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        self.check(&[a])?;
        let s = self.shape(a);
        if s.is_empty() || s[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(self.shape_err("scatter_rows", &[a], "row index out of range"));
        }
        let mut shape = s.to_vec();
        shape[0] = rows;
        Ok(self.push(Op::ScatterRows(idx.into()), vec![a], shape))
    }

    // ---- evaluation --------------------------------------------------------

    /// Evaluates every designated output.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<_> = self.outputs.keys().cloned().collect();
        let ids: Vec<_> = self.outputs.values().copied().collect();
        let vals = self.eval_nodes(bindings, &ids)?;
        Ok(names.into_iter().zip(vals).collect())
    }

    /// Evaluates the requested nodes, computing only their ancestors.
    pub fn eval_nodes(&self, bindings: &Bindings, ids: &[NodeId]) -> Result<Vec<Tensor>> {
        self.check(ids)?;
        let Some(top) = ids.iter().map(|i| i.0).max() else {
            return Ok(Vec::new());
        };
        let mut needed = vec![false; top + 1];
        for &id in ids {
            needed[id.0] = true;
        }
        for i in (0..=top).rev() {
            if needed[i] {
                for p in &self.nodes[i].inputs {
                    needed[p.0] = true;
                }
            }
        }
        let mut vals: Vec<Option<Cow<'_, Tensor>>> = vec![None; top + 1];
        for i in 0..=top {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let v: Cow<'_, Tensor> = match &node.op {
                Op::Input(name) => {
                    let t = bindings.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(GraphError::NodeShape {
                            node: self.describe(NodeId(i)),
                            detail: format!("bound shape {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    Cow::Borrowed(t)
                }
                Op::Constant(t) => Cow::Borrowed(t.as_ref()),
                _ => {
                    let args: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|p| vals[p.0].as_deref().expect("parent evaluated"))
                        .collect();
                    Cow::Owned(compute(node, &args))
                }
            };
            if !v.is_finite() {
                return Err(GraphError::NonFinite { node: self.describe(NodeId(i)) });
            }
            vals[i] = Some(v);
        }
        Ok(ids.iter().map(|id| vals[id.0].as_deref().expect("evaluated").clone()).collect())
    }

    // ---- differentiation ---------------------------------------------------

    /// Appends nodes computing the gradient of scalar node `y` with respect to
    /// each node in `wrt`, returning the new gradient node ids in order.
    /// Nodes in `wrt` that `y` does not depend on get a zero gradient.
    pub fn derive(&mut self, y: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(&[y])?;
        self.check(wrt)?;
        if !self.shape(y).is_empty() {
            return Err(GraphError::NotScalar { node: self.describe(y), shape: self.shape(y).to_vec() });
        }
        let top = y.0;
        let mut depends = vec![false; top + 1];
        for &w in wrt {
            if w.0 <= top {
                depends[w.0] = true;
            }
        }
        for i in 0..=top {
            let node = &self.nodes[i];
            if !depends[i] && !node.op.blocks_gradient() && node.inputs.iter().any(|p| depends[p.0]) {
                depends[i] = true;
            }
        }
        let mut needed = vec![false; top + 1];
        needed[top] = true;
        for i in (0..=top).rev() {
            if needed[i] && depends[i] && !self.nodes[i].op.blocks_gradient() {
                for p in self.nodes[i].inputs.clone() {
                    needed[p.0] = true;
                }
            }
        }
        let mut cot: Vec<Option<NodeId>> = vec![None; top + 1];
        if depends[top] {
            cot[top] = Some(self.fill(&[], 1.0));
        }
        for i in (0..=top).rev() {
            let Some(g) = cot[i] else { continue };
            if !(needed[i] && depends[i]) || self.nodes[i].op.blocks_gradient() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            for (k, p) in inputs.iter().enumerate() {
                if !depends[p.0] {
                    continue;
                }
                let contrib = self.vjp(NodeId(i), k, g)?;
                cot[p.0] = Some(match cot[p.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match cot.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.fill(&shape, 0.0)
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Contribution of output cotangent `g` of node `id` to its `k`-th input.
    fn vjp(&mut self, id: NodeId, k: usize, g: NodeId) -> Result<NodeId> {
        let node = self.nodes[id.0].clone();
        let ins = &node.inputs;
        let in_shape = |s: &Self, j: usize| s.shape(ins[j]).to_vec();
        match &node.op {
            Op::Input(_) | Op::Constant(_) | Op::Fill(_) => unreachable!("leaves have no inputs"),
            Op::Add => {
                let s = in_shape(self, k);
                self.sum_to_shape(g, &s)
            }
            Op::Sub => {
                let s = in_shape(self, k);
                let r = self.sum_to_shape(g, &s)?;
                if k == 0 {
                    Ok(r)
                } else {
                    self.neg(r)
                }
            }
            Op::Mul => {
                let other = ins[1 - k];
                let prod = self.mul(g, other)?;
                let s = in_shape(self, k);
                self.sum_to_shape(prod, &s)
            }
            Op::SquaredError => {
                let d = self.sub(ins[0], ins[1])?;
                let gd = self.mul(g, d)?;
                self.scale(gd, if k == 0 { 2.0 } else { -2.0 })
            }
            Op::Scale(c) => self.scale(g, *c),
            Op::MatMul => {
                if k == 0 {
                    let bt = self.transpose(ins[1])?;
                    self.matmul(g, bt)
                } else {
                    let at = self.transpose(ins[0])?;
                    self.matmul(at, g)
                }
            }
            Op::Transpose => self.transpose(g),
            Op::Conv2d => {
                if k == 0 {
                    let fk = self.flip_kernel(ins[1])?;
                    self.conv2d(g, fk)
                } else {
                    let s = in_shape(self, 1);
                    self.conv2d_weight_grad(ins[0], g, s[2], s[3])
                }
            }
            Op::Conv2dWeightGrad { .. } => {
                if k == 0 {
                    let fg = self.flip_kernel(g)?;
                    self.conv2d(ins[1], fg)
                } else {
                    self.conv2d(ins[0], g)
                }
            }
            Op::FlipKernel => self.flip_kernel(g),
            Op::Relu => {
                let m = self.step_mask(ins[0], 0.0)?;
                self.mul(g, m)
            }
            Op::ClampMin(c) => {
                let m = self.step_mask(ins[0], *c)?;
                self.mul(g, m)
            }
            Op::Softplus => {
                let s = self.sigmoid(ins[0])?;
                self.mul(g, s)
            }
            Op::Sigmoid => {
                let s2 = self.mul(id, id)?;
                let ds = self.sub(id, s2)?;
                self.mul(g, ds)
            }
            Op::Abs => {
                let s = self.sign(ins[0])?;
                self.mul(g, s)
            }
            Op::Recip => {
                let r2 = self.mul(id, id)?;
                let gr = self.mul(g, r2)?;
                self.neg(gr)
            }
            Op::Log => {
                let r = self.recip(ins[0])?;
                self.mul(g, r)
            }
            Op::GlobalAvgPool => {
                let s = in_shape(self, 0);
                let mut keep = vec![s[0], s[1]];
                keep.extend(std::iter::repeat_n(1, s.len() - 2));
                let area: usize = s[2..].iter().product();
                let r = self.reshape(g, &keep)?;
                let b = self.broadcast_to(r, &s)?;
                self.scale(b, 1.0 / area as f64)
            }
            Op::Upsample(f) => self.upsample_transpose(g, *f),
            Op::UpsampleTranspose(f) => self.upsample(g, *f),
            Op::Sum => {
                let s = in_shape(self, 0);
                self.broadcast_to(g, &s)
            }
            Op::Mean => {
                let s = in_shape(self, 0);
                let b = self.broadcast_to(g, &s)?;
                self.scale(b, 1.0 / numel(&s) as f64)
            }
            Op::SumToShape => {
                let s = in_shape(self, 0);
                self.broadcast_to(g, &s)
            }
            Op::BroadcastTo => {
                let s = in_shape(self, 0);
                self.sum_to_shape(g, &s)
            }
            Op::Reshape => {
                let s = in_shape(self, 0);
                self.reshape(g, &s)
            }
            Op::Softmax => {
                let mut row = node.shape.clone();
                *row.last_mut().expect("rank >= 1") = 1;
                let gs = self.mul(g, id)?;
                let dot = self.sum_to_shape(gs, &row)?;
                let centred = self.sub(g, dot)?;
                self.mul(id, centred)
            }
            Op::CrossEntropy => {
                let n = node.shape[0];
                let gcol = self.reshape(g, &[n, 1])?;
                if k == 0 {
                    let sm = self.softmax(ins[0])?;
                    let tsum = self.sum_to_shape(ins[1], &[n, 1])?;
                    let p = self.mul(sm, tsum)?;
                    let d = self.sub(p, ins[1])?;
                    self.mul(gcol, d)
                } else {
                    let sm = self.softmax(ins[0])?;
                    let ls = self.log(sm)?;
                    let nls = self.neg(ls)?;
                    self.mul(gcol, nls)
                }
            }
            Op::GatherRows(idx) => {
                let rows = self.shape(ins[0])[0];
                self.scatter_rows(g, idx, rows)
            }
            Op::ScatterRows(idx) => self.gather_rows(g, idx),
            Op::StepMask(_) | Op::Sign | Op::StopGradient => unreachable!("gradient-blocking ops are skipped"),
            Op::ArgmaxOneHot => Err(GraphError::UnsupportedOp { op: node.op.name() }),
        }
    }
}

/// Functional form of [`Graph::derive`]: returns an extended copy of `graph`.
pub fn derive(graph: &Graph, y: NodeId, wrt: &[NodeId]) -> Result<(Graph, Vec<NodeId>)> {
    let mut g = graph.clone();
    let ids = g.derive(y, wrt)?;
    Ok((g, ids))
}

fn compute(node: &Node, a: &[&Tensor]) -> Tensor {
    let shape = &node.shape;
    match &node.op {
        Op::Input(_) | Op::Constant(_) => unreachable!(),
        Op::Fill(v) => Tensor::full(shape, *v),
        Op::Add => tensor::broadcast_binary(a[0], a[1], shape, |x, y| x + y),
        Op::Sub => tensor::broadcast_binary(a[0], a[1], shape, |x, y| x - y),
        Op::Mul => tensor::broadcast_binary(a[0], a[1], shape, |x, y| x * y),
        Op::SquaredError => tensor::broadcast_binary(a[0], a[1], shape, |x, y| (x - y) * (x - y)),
        Op::Scale(c) => a[0].map(|v| v * c),
        Op::MatMul => tensor::matmul(a[0], a[1]),
        Op::Transpose => tensor::transpose(a[0]),
        Op::Conv2d => tensor::conv2d(a[0], a[1]),
        Op::Conv2dWeightGrad { kh, kw } => tensor::conv2d_weight_grad(a[0], a[1], *kh, *kw),
        Op::FlipKernel => tensor::flip_kernel(a[0]),
        Op::Relu => a[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::StepMask(t) => a[0].map(|v| if v > *t { 1.0 } else { 0.0 }),
        Op::Softplus => a[0].map(tensor::softplus),
        Op::Sigmoid => a[0].map(tensor::sigmoid),
        Op::Abs => a[0].map(f64::abs),
        Op::Sign => a[0].map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Recip => a[0].map(|v| 1.0 / v),
        Op::Log => a[0].map(f64::ln),
        Op::ClampMin(c) => a[0].map(|v| v.max(*c)),
        Op::GlobalAvgPool => tensor::global_avg_pool(a[0]),
        Op::Upsample(f) => tensor::upsample(a[0], *f),
        Op::UpsampleTranspose(f) => tensor::upsample_transpose(a[0], *f),
        Op::Sum => Tensor::scalar(a[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(a[0].data().iter().sum::<f64>() / a[0].len() as f64),
        Op::SumToShape => tensor::sum_to_shape(a[0], shape),
        Op::BroadcastTo => tensor::broadcast_to(a[0], shape),
        Op::Reshape => a[0].reshape(shape).expect("checked at construction"),
        Op::Softmax => tensor::softmax(a[0]),
        Op::CrossEntropy => tensor::cross_entropy(a[0], a[1]),
        Op::GatherRows(idx) => tensor::gather_rows(a[0], idx),
        Op::ScatterRows(idx) => tensor::scatter_rows(a[0], idx, shape[0]),
        Op::StopGradient => a[0].clone(),
        Op::ArgmaxOneHot => tensor::argmax_one_hot(a[0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn add_evaluates() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let b = g.input("b", &[2]).unwrap();
        let out = g.add(a, b).unwrap();
        g.set_output("out", out).unwrap();
        let r = g
            .evaluate(&bind(&[("a", Tensor::vector(vec![1., 2.])), ("b", Tensor::vector(vec![3., 4.]))]))
            .unwrap();
        assert_eq!(r["out"].data(), &[4., 6.]);
    }

    #[test]
    fn relu_evaluates() {
        let mut g = Graph::new();
        let a = g.input("a", &[3]).unwrap();
        let r = g.relu(a).unwrap();
        let v = g.eval_nodes(&bind(&[("a", Tensor::vector(vec![-1., 0., 2.]))]), &[r]).unwrap();
        assert_eq!(v[0].data(), &[0., 0., 2.]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_is_ln3() {
        let mut g = Graph::new();
        let z = g.input("z", &[1, 3]).unwrap();
        let t = g.constant(Tensor::new(&[1, 3], vec![1., 0., 0.]).unwrap());
        let ce = g.cross_entropy(z, t).unwrap();
        let loss = g.mean(ce).unwrap();
        let v = g.eval_nodes(&bind(&[("z", Tensor::zeros(&[1, 3]))]), &[loss]).unwrap();
        assert!((v[0].item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unbound_and_misshaped_inputs_are_named() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]).unwrap();
        let s = g.sum(a).unwrap();
        assert_eq!(g.eval_nodes(&Bindings::new(), &[s]), Err(GraphError::Unbound("a".into())));
        let err = g.eval_nodes(&bind(&[("a", Tensor::vector(vec![1.; 3]))]), &[s]).unwrap_err();
        assert!(matches!(err, GraphError::NodeShape { ref node, .. } if node.contains("`a`")), "{err}");
    }

    #[test]
    fn construction_shape_errors() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        assert!(g.matmul(a, b).is_err());
        let c = g.input("c", &[4]).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[1]).unwrap();
        let l = g.log(a).unwrap();
        g.label(l, "logit");
        let err = g.eval_nodes(&bind(&[("a", Tensor::vector(vec![0.0]))]), &[l]).unwrap_err();
        assert!(matches!(err, GraphError::NonFinite { ref node } if node.contains("logit")));
    }

    #[test]
    fn dot_gradient_is_weight() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let w = g.constant(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let p = g.mul(w, x).unwrap();
        let y = g.sum(p).unwrap();
        let dx = g.derive(y, &[x]).unwrap();
        let v = g.eval_nodes(&bind(&[("x", Tensor::vector(vec![7., 8., 9.]))]), &dx).unwrap();
        assert_eq!(v[0].data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn square_first_and_second_derivative() {
        let mut g = Graph::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.mul(x, x).unwrap();
        let dx = g.derive(y, &[x]).unwrap()[0];
        let ddx = g.derive(dx, &[x]).unwrap()[0];
        let v = g.eval_nodes(&bind(&[("x", Tensor::scalar(3.0))]), &[dx, ddx]).unwrap();
        assert_eq!(v[0].item(), 6.0);
        assert_eq!(v[1].item(), 2.0);
    }

    #[test]
    fn derive_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let r = g.relu(x).unwrap();
        assert!(matches!(g.derive(r, &[x]), Err(GraphError::NotScalar { .. })));
    }

    #[test]
    fn argmax_has_no_rule_but_stop_gradient_hides_it() {
        let mut g = Graph::new();
        let z = g.input("z", &[1, 3]).unwrap();
        let m = g.argmax_one_hot(z).unwrap();
        let p = g.mul(z, m).unwrap();
        let y = g.sum(p).unwrap();
        assert_eq!(g.derive(y, &[z]), Err(GraphError::UnsupportedOp { op: "argmax_one_hot" }));

        let ms = g.stop_gradient(m).unwrap();
        let p = g.mul(z, ms).unwrap();
        let y = g.sum(p).unwrap();
        let dz = g.derive(y, &[z]).unwrap();
        let v = g.eval_nodes(&bind(&[("z", Tensor::new(&[1, 3], vec![0., 5., 1.]).unwrap())]), &dz).unwrap();
        assert_eq!(v[0].data(), &[0., 1., 0.]);
    }

    #[test]
    fn unrelated_wrt_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let z = g.input("z", &[3]).unwrap();
        let y = g.sum(x).unwrap();
        let d = g.derive(y, &[z]).unwrap();
        let b = bind(&[("x", Tensor::vector(vec![1., 2.])), ("z", Tensor::vector(vec![0.; 3]))]);
        assert_eq!(g.eval_nodes(&b, &d).unwrap()[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn relu_second_derivative_vanishes() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let r = g.relu(x).unwrap();
        let y = g.sum(r).unwrap();
        let dx = g.derive(y, &[x]).unwrap()[0];
        let s = g.sum(dx).unwrap();
        let ddx = g.derive(s, &[x]).unwrap()[0];
        let v = g.eval_nodes(&bind(&[("x", Tensor::vector(vec![-1., 0., 2.]))]), &[dx, ddx]).unwrap();
        assert_eq!(v[0].data(), &[0., 0., 1.]);
        assert_eq!(v[1].data(), &[0., 0., 0.]);
    }

    #[test]
    fn evaluation_is_bitwise_repeatable() {
        let mut g = Graph::new();
        let x = g.input("x", &[4, 3]).unwrap();
        let w = g.constant(Tensor::new(&[3, 2], vec![0.1, -0.3, 0.7, 0.2, -1.1, 0.4]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let s = g.softplus(h).unwrap();
        let y = g.mean(s).unwrap();
        let b = bind(&[("x", Tensor::new(&[4, 3], (0..12).map(|i| (i as f64).sin()).collect()).unwrap())]);
        let a = g.eval_nodes(&b, &[y]).unwrap()[0].item().to_bits();
        let c = g.eval_nodes(&b, &[y]).unwrap()[0].item().to_bits();
        assert_eq!(a, c);
    }
}
