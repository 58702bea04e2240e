//! Define-by-run gradient tape.
//!
//! Every forward op appends a node holding its output value and a record
//! of its inputs; node ids are handed out in topological order, so the
//! backward pass is a single reverse sweep. A tape supports exactly one
//! backward pass; build a fresh tape per training step.

use super::{ensure_all_finite, Result, Tensor, TensorError};

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Broadcast(NodeId),
    Reshape(NodeId),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn flows(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value tensor with no gradient participation.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        let t = Tensor::new(data, shape)?;
        Ok(self.constant(&t))
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.push(vec![value], vec![], false, Op::Leaf)
    }

    /// Leaf node mirroring `t`, tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.node(id).data.len()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.flows(id)
    }

    /// Copies a node's value out as a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.data.clone(), n.shape.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of `id`; valid after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        if !self.consumed {
            return Err(TensorError::NoGrad("backward has not run".into()));
        }
        let n = self.node(id);
        if !n.requires_grad {
            return Err(TensorError::NoGrad(
                "node does not participate in gradients".into(),
            ));
        }
        n.grad
            .as_deref()
            .ok_or_else(|| TensorError::NoGrad("node unreachable from loss".into()))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Copies the value and blocks all gradient flow through it.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let (data, shape) = {
            let n = self.node(a);
            (n.data.clone(), n.shape.clone())
        };
        self.push(data, shape, false, Op::StopGradient)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let out = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        ensure_all_finite("matmul", &out)?;
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul(a, b)))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        ensure_all_finite(op_name, &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a) || self.flows(b);
        Ok(self.push(out, shape, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(b).data.contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                reason: "division by zero".into(),
            });
        }
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.node(a).data.iter().map(|&x| f(x)).collect();
        ensure_all_finite(op_name, &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.flows(a);
        Ok(self.push(out, shape, rg, op))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.node(a).data.iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: "log of a non-positive value".into(),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        // Two-branch form keeps the exp argument non-positive.
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    /// Softmax over the last axis, row max subtracted before exponentiation.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: "softmax needs at least one axis".into(),
            });
        }
        let width = *shape.last().unwrap();
        if width == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: "last axis is empty".into(),
            });
        }
        let src = &self.node(a).data;
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks(width).zip(out.chunks_mut(width)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        ensure_all_finite("softmax", &out)?;
        let rg = self.flows(a);
        Ok(self.push(out, shape, rg, Op::Softmax(a)))
    }

    /// Sum over one axis (removing it) or over all elements (`None` -> scalar).
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce("sum", a, axis, false)
    }

    /// Arithmetic mean over one axis or over all elements.
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce("mean", a, axis, true)
    }

    fn reduce(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        axis: Option<usize>,
        average: bool,
    ) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let src = &self.node(a).data;
        let (out, out_shape) = match axis {
            None => {
                let mut s: f64 = src.iter().sum();
                if average {
                    if src.is_empty() {
                        return Err(TensorError::InvalidShape {
                            op: op_name,
                            shape,
                            reason: "mean of an empty tensor".into(),
                        });
                    }
                    s /= src.len() as f64;
                }
                (vec![s], vec![])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::InvalidShape {
                        op: op_name,
                        shape,
                        reason: format!("axis {ax} out of range"),
                    });
                }
                let extent = shape[ax];
                if extent == 0 && average {
                    return Err(TensorError::InvalidShape {
                        op: op_name,
                        shape,
                        reason: "mean over an empty axis".into(),
                    });
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            out[dst + i] += src[base + i];
                        }
                    }
                }
                if average {
                    for v in out.iter_mut() {
                        *v /= extent as f64;
                    }
                }
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (out, out_shape)
            }
        };
        ensure_all_finite(op_name, &out)?;
        let rg = self.flows(a);
        let op = if average {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        Ok(self.push(out, out_shape, rg, op))
    }

    /// Expands size-1 (or missing leading) axes to `target` shape.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let src_shape = self.shape(a).to_vec();
        let strides = broadcast_strides(&src_shape, target).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: src_shape.clone(),
                rhs: target.to_vec(),
            }
        })?;
        let src = &self.node(a).data;
        let numel: usize = target.iter().product();
        let mut out = vec![0.0; numel];
        for_each_mapped(target, &strides, |flat, src_idx| {
            out[flat] = src[src_idx];
        });
        let rg = self.flows(a);
        Ok(self.push(out, target.to_vec(), rg, Op::Broadcast(a)))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(a) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: new_shape,
                reason: format!("element count differs from {:?}", self.shape(a)),
            });
        }
        let data = self.node(a).data.clone();
        let rg = self.flows(a);
        Ok(self.push(data, new_shape, rg, Op::Reshape(a)))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{} out of bounds on axis {axis}", start + len),
            });
        }
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.flows(a);
        Ok(self.push(out, out_shape, rg, Op::Slice { src: a, axis, start }))
    }

    /// Concatenates along `axis`; shapes must match on every other axis.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let extent = self.shape(p)[axis];
            let src = &self.node(p).data;
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let sb = o * extent * inner;
                out[dst..dst + extent * inner].copy_from_slice(&src[sb..sb + extent * inner]);
            }
            offset += extent;
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = parts.iter().any(|&p| self.flows(p));
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; may run once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        // A loss cut off from every tracked leaf (e.g. behind a
        // stop-gradient) leaves all gradients at zero.
        if !self.flows(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::StopGradient => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.flows(a) {
                        // dA = dC . B^T
                        let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.flows(b) {
                        // dB = A^T . dC
                        let at = transpose_raw(&self.nodes[a.0].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accum(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.flows(a) {
                        self.accum(a, &grad);
                    }
                    if self.flows(b) {
                        self.accum(b, &grad);
                    }
                }
                Op::Sub(a, b) => {
                    if self.flows(a) {
                        self.accum(a, &grad);
                    }
                    if self.flows(b) {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        self.accum(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.flows(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.flows(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Div(a, b) => {
                    if self.flows(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(g, y)| g / y)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.flows(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, e)| g * e)
                        .collect();
                    self.accum(a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g / x)
                        .collect();
                    self.accum(a, &da);
                }
                Op::Neg(a) => {
                    let da: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accum(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accum(a, &da);
                }
                Op::Softmax(a) => {
                    let width = *self.nodes[i].shape.last().unwrap();
                    let out = &self.nodes[i].data;
                    let mut da = vec![0.0; out.len()];
                    for ((g_row, s_row), d_row) in grad
                        .chunks(width)
                        .zip(out.chunks(width))
                        .zip(da.chunks_mut(width))
                    {
                        let dot: f64 = g_row.iter().zip(s_row).map(|(g, s)| g * s).sum();
                        for ((d, &g), &s) in d_row.iter_mut().zip(g_row).zip(s_row) {
                            *d = s * (g - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Sum(a, axis) => {
                    let da = spread_reduce_grad(&grad, &self.nodes[a.0].shape, axis, 1.0);
                    self.accum(a, &da);
                }
                Op::Mean(a, axis) => {
                    let src_shape = &self.nodes[a.0].shape;
                    let denom = match axis {
                        None => self.nodes[a.0].data.len() as f64,
                        Some(ax) => src_shape[ax] as f64,
                    };
                    let da = spread_reduce_grad(&grad, src_shape, axis, 1.0 / denom);
                    self.accum(a, &da);
                }
                Op::Broadcast(a) => {
                    let src_shape = self.nodes[a.0].shape.clone();
                    let target = self.nodes[i].shape.clone();
                    let strides =
                        broadcast_strides(&src_shape, &target).expect("validated at forward");
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for_each_mapped(&target, &strides, |flat, src_idx| {
                        da[src_idx] += grad[flat];
                    });
                    self.accum(a, &da);
                }
                Op::Reshape(a) => {
                    self.accum(a, &grad);
                }
                Op::Slice { src, axis, start } => {
                    let src_shape = &self.nodes[src.0].shape;
                    let extent = src_shape[axis];
                    let len = self.nodes[i].shape[axis];
                    let outer: usize = src_shape[..axis].iter().product();
                    let inner: usize = src_shape[axis + 1..].iter().product();
                    let mut da = vec![0.0; self.nodes[src.0].data.len()];
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let gb = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&grad[gb..gb + len * inner]);
                    }
                    self.accum(src, &da);
                }
                Op::Concat { parts, axis } => {
                    let out_shape = &self.nodes[i].shape;
                    let total = out_shape[axis];
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let mut offset = 0usize;
                    for p in parts {
                        let extent = self.nodes[p.0].shape[axis];
                        if self.flows(p) {
                            let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                            for o in 0..outer {
                                let gb = (o * total + offset) * inner;
                                let db = o * extent * inner;
                                dp[db..db + extent * inner]
                                    .copy_from_slice(&grad[gb..gb + extent * inner]);
                            }
                            self.accum(p, &dp);
                        }
                        offset += extent;
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &[f64]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Per-target-axis source strides for a broadcast, or `None` if the
/// shapes are incompatible. Source axes align on the right; only size-1
/// (or missing leading) source axes may expand.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let offset = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1usize;
    for d in (0..src.len()).rev() {
        if src[d] == target[offset + d] {
            strides[offset + d] = acc;
        } else if src[d] == 1 {
            strides[offset + d] = 0;
        } else {
            return None;
        }
        acc *= src[d];
    }
    Some(strides)
}

/// Visits every flat index of `shape` with its mapped source index,
/// advancing odometer-style so no per-element division happens.
fn for_each_mapped(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let ndim = shape.len();
    let mut coords = vec![0usize; ndim];
    let mut src_idx = 0usize;
    for flat in 0..numel {
        f(flat, src_idx);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src_idx += strides[d];
            if coords[d] < shape[d] {
                break;
            }
            src_idx -= strides[d] * shape[d];
            coords[d] = 0;
        }
    }
}

/// Expands a reduced gradient back over the removed axis (or the whole
/// tensor for a full reduction), scaling each copy by `scale`.
fn spread_reduce_grad(
    grad: &[f64],
    src_shape: &[usize],
    axis: Option<usize>,
    scale: f64,
) -> Vec<f64> {
    let numel: usize = src_shape.iter().product();
    match axis {
        None => vec![grad[0] * scale; numel],
        Some(ax) => {
            let extent = src_shape[ax];
            let outer: usize = src_shape[..ax].iter().product();
            let inner: usize = src_shape[ax + 1..].iter().product();
            let mut out = vec![0.0; numel];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    let gb = o * inner;
                    for i in 0..inner {
                        out[base + i] = grad[gb + i] * scale;
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape
            .constant_from(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2])
            .unwrap();
        let b = tape.constant_from(vec![1.0, 1.0], vec![2, 1]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant_from(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar_const(0.0);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = param(vec![1.0, 2.0, 3.0], vec![3]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let sq = tape.mul(xid, xid).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_of_linear() {
        // loss = sigmoid(w * x) at w=0, x=1: dw = sigma'(0) * x = 0.25
        let w = param(vec![0.0], vec![1, 1]);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let x = tape.constant_from(vec![1.0], vec![1, 1]).unwrap();
        let y = tape.matmul(wid, x).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let loss = tape.sum(s, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(wid).unwrap(), &[0.25]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let x = param(vec![1.0, 2.0], vec![2]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let blocked = tape.stop_gradient(xid);
        let sq = tape.mul(blocked, blocked).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        // Graph below the block is constant; leaf grad buffer exists but stays zero.
        assert_eq!(tape.grad(xid).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // loss = sum(x + x) -> dx = 2 everywhere
        let x = param(vec![1.0, 1.0], vec![2]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let doubled = tape.add(xid, xid).unwrap();
        let loss = tape.sum(doubled, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = param(vec![1.0], vec![1]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let loss = tape.sum(xid, None).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::TapeConsumed)
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = param(vec![1.0, 2.0], vec![2]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        assert!(matches!(
            tape.backward(xid),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .constant_from(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![2, 3])
            .unwrap();
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape
            .constant_from(vec![1000.0, 1001.0, 1002.0], vec![1, 3])
            .unwrap();
        let s = tape.softmax(x).unwrap();
        let y = tape.constant_from(vec![0.0, 1.0, 2.0], vec![1, 3]).unwrap();
        let sy = tape.softmax(y).unwrap();
        let (a, b) = (tape.value(s).to_vec(), tape.value(sy).to_vec());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn log_of_non_positive_errors() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1.0, 0.0], vec![2]).unwrap();
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn div_by_zero_errors() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![1.0], vec![1]).unwrap();
        let b = tape.constant_from(vec![0.0], vec![1]).unwrap();
        assert!(matches!(tape.div(a, b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn exp_overflow_errors_not_inf() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1000.0], vec![1]).unwrap();
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn broadcast_bias_row() {
        let mut tape = Tape::new();
        let b = tape.constant_from(vec![1.0, 2.0], vec![2]).unwrap();
        let wide = tape.broadcast(b, &[3, 2]).unwrap();
        assert_eq!(tape.value(wide), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_non_unit_expansion() {
        let mut tape = Tape::new();
        let b = tape.constant_from(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(tape.broadcast(b, &[2, 3]).is_err());
    }

    #[test]
    fn broadcast_backward_sums_over_copies() {
        let b = param(vec![1.0, 2.0], vec![2]);
        let mut tape = Tape::new();
        let bid = tape.leaf(&b);
        let wide = tape.broadcast(bid, &[3, 2]).unwrap();
        let loss = tape.sum(wide, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bid).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]);
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let left = tape.slice(xid, 1, 0, 1).unwrap();
        let right = tape.slice(xid, 1, 1, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back), tape.value(xid));
        let loss = tape.sum(back, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mean_axis_reduces_shape() {
        let mut tape = Tape::new();
        let x = tape
            .constant_from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3])
            .unwrap();
        let m = tape.mean(x, Some(1)).unwrap();
        assert_eq!(tape.shape(m), &[2]);
        assert_eq!(tape.value(m), &[2.0, 5.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .constant_from(vec![0.3, -1.7, 2.9, 0.01], vec![2, 2])
                .unwrap();
            let e = tape.exp(x).unwrap();
            let s = tape.softmax(e).unwrap();
            tape.value(s).to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "identical inputs must give bit-identical outputs");
    }
}
