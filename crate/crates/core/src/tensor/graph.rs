use super::{Result, Tensor, TensorError};

const LAYERNORM_EPS: f32 = 1e-5;
const LOG_FLOOR: f32 = 1e-7;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Gelu,
    Relu,
    Scale(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    SmoothL1,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    trainable: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which is
/// always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visits: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of nodes visited by the reverse sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
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

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, false)
    }

    /// Non-trainable leaf whose gradient is still reported (split-boundary inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, false)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_trainable(&self, var: Var) -> bool {
        self.nodes[var.0].trainable
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, inputs: &[Var], value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        self.nodes
            .get(var.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(var.0))
    }

    fn check2(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        let t = self.check(var)?;
        t.dims2().ok_or_else(|| TensorError::InvalidArgument {
            op,
            reason: format!("expected a rank-2 tensor, got {:?}", t.shape()),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check2("matmul", a)?;
        let (k2, n) = self.check2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", Op::MatMul(a, b), &[a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), &[a, b], value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), &[a, b], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), &[a, b], value)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let value = self.check(a)?.map(|x| x * factor);
        self.push("scale", Op::Scale(a, factor), &[a], value)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f32) -> Result<Var> {
        let value = self.check(a)?.map(|x| x + offset);
        self.push("add_scalar", Op::AddScalar(a), &[a], value)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Unary::Exp)
    }

    /// Natural log with inputs clamped from below at `1e-7`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Unary::Log)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, Unary::Recip)
    }

    /// Huber-style smooth L1 with unit transition point.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary("smooth_l1", a, Unary::SmoothL1)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or(TensorError::InvalidArgument {
                op: "elementwise",
                reason: format!("{op:?} needs a second operand"),
            })
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Gelu => self.gelu(a),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Scale(f) => self.scale(a, f),
        }
    }

    fn unary(&mut self, name: &'static str, a: Var, kind: Unary) -> Result<Var> {
        let value = self.check(a)?.map(|x| unary_forward(kind, x));
        self.push(name, Op::Unary(a, kind), &[a], value)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.check(a)?;
        let (outer, len, inner) = axis_split("softmax", t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", Op::Softmax(a, axis), &[a], value)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let n = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", Op::LogSoftmax(a), &[a], value)
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.check(a)?;
        let n = *t.shape().last().expect("rank >= 1");
        for p in [gain, bias] {
            let pt = self.check(p)?;
            if pt.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    left: t.shape().to_vec(),
                    right: pt.shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / n;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layernorm",
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[a, gain, bias],
            value,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", Op::Transpose(a), &[a], value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(a)?;
        let value = t.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            left: t.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        self.push("reshape", Op::Reshape(a), &[a], value)
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check2("slice_rows", a)?;
        if len == 0 || start + len > r {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", Op::SliceRows(a, start), &[a], value)
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check2("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                reason: format!("cols {start}..{} out of {c}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", Op::SliceCols(a, start), &[a], value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.check2("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, cols.unwrap_or(0)],
                    right: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no parts".into(),
        })?;
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), parts, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check2("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows.unwrap_or(0), widths.iter().sum()],
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let rows = rows.ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no parts".into(),
        })?;
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), parts, value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(a)?.sum());
        self.push("sum", Op::Sum(a), &[a], value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.check(a)?;
        let value = Tensor::scalar(t.sum() / t.numel() as f32);
        self.push("mean", Op::Mean(a), &[a], value)
    }

    fn broadcast_zip(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let period = broadcast_period(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % period]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.check(loss)?;
        if !t.is_scalar() {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_seeded(vec![(loss, Tensor::ones(t.shape()))])
    }

    /// Reverse sweep seeded with explicit upstream gradients, used where an
    /// activation's gradient arrives from another party.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut pending: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (var, grad) in seeds {
            let t = self.check(var)?;
            if t.shape() != grad.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    left: t.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            accumulate(&mut pending, var, grad);
        }
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut visits = 0;
        for idx in (0..n).rev() {
            visits += 1;
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves[idx] = Some(grad);
                continue;
            }
            for (input, g) in self.local_grads(node, &grad)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut pending, input, g);
                }
            }
        }
        Ok(Gradients {
            grads: leaves,
            visits,
        })
    }

    fn local_grads(&self, node: &Node, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let dy = grad.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).shape()[1];
                let da = matmul_nt(dy, self.value(*b).data(), m, n, k);
                let db = matmul_tn(self.value(*a).data(), dy, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], da)?),
                    (*b, Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, grad.clone()),
                (*b, self.reduce_broadcast(*b, grad.clone())),
            ],
            Op::Sub(a, b) => vec![
                (*a, grad.clone()),
                (*b, self.reduce_broadcast(*b, grad.map(|x| -x))),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let period = vb.numel();
                let da: Vec<f32> = dy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * vb.data()[i % period])
                    .collect();
                let db: Vec<f32> = dy.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                let db = Tensor::new(va.shape().to_vec(), db)?;
                vec![
                    (*a, Tensor::new(va.shape().to_vec(), da)?),
                    (*b, self.reduce_broadcast(*b, db)),
                ]
            }
            Op::Scale(a, f) => vec![(*a, grad.map(|g| g * f))],
            Op::AddScalar(a) => vec![(*a, grad.clone())],
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = dy
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * unary_derivative(*kind, x, y))
                    .collect();
                vec![(*a, Tensor::new(grad.shape().to_vec(), d)?)]
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split("softmax", node.value.shape(), *axis)?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f32 = (0..len).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(grad.shape().to_vec(), dx)?)]
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for ((dxr, dyr), yr) in dx.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let total: f32 = dyr.iter().sum();
                    for j in 0..n {
                        dxr[j] = dyr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*a, Tensor::new(grad.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = self.value(*gain);
                let n = g.numel();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (row, r) in rstd.iter().enumerate() {
                    let span = row * n..(row + 1) * n;
                    let (dyr, hr) = (&dy[span.clone()], &xhat[span.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..n {
                        let d = dyr[j] * g.data()[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                        dg[j] += dyr[j] * hr[j];
                        db[j] += dyr[j];
                    }
                    let inv_n = 1.0 / n as f32;
                    for j in 0..n {
                        let d = dyr[j] * g.data()[j];
                        dx[span.start + j] = r * (d - inv_n * sum_d - hr[j] * inv_n * sum_dh);
                    }
                }
                vec![
                    (*x, Tensor::new(grad.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(g.shape().to_vec(), dg)?),
                    (*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?),
                ]
            }
            Op::Transpose(a) => {
                let (c, r) = node.value.dims2().expect("rank 2");
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = dy[i * r + j];
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::Reshape(a) => vec![(*a, grad.reshape(self.value(*a).shape())?)],
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.shape()[1];
                let mut dx = vec![0.0; src.numel()];
                dx[start * c..start * c + dy.len()].copy_from_slice(dy);
                vec![(*a, Tensor::new(src.shape().to_vec(), dx)?)]
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (r, c) = src.dims2().expect("rank 2");
                let len = dy.len() / r;
                let mut dx = vec![0.0; src.numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&dy[i * len..(i + 1) * len]);
                }
                vec![(*a, Tensor::new(vec![r, c], dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).numel();
                    let t = Tensor::new(
                        self.value(p).shape().to_vec(),
                        dy[offset..offset + n].to_vec(),
                    )?;
                    offset += n;
                    out.push((p, t));
                }
                out
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().expect("rank 2");
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        d.extend_from_slice(&dy[i * total + start..i * total + start + w]);
                    }
                    start += w;
                    out.push((p, Tensor::new(vec![rows, w], d)?));
                }
                out
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), dy[0]))],
            Op::Mean(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), dy[0] / t.numel() as f32))]
            }
        };
        Ok(out)
    }

    /// Sums a full-shape gradient down to the shape of a broadcast operand.
    fn reduce_broadcast(&self, b: Var, grad: Tensor) -> Tensor {
        let shape = self.value(b).shape();
        let period: usize = shape.iter().product();
        if period == grad.numel() {
            return grad.reshape(shape).expect("same numel");
        }
        let mut out = vec![0.0; period];
        for (i, g) in grad.data().iter().enumerate() {
            out[i % period] += g;
        }
        Tensor::new(shape.to_vec(), out).expect("valid shape")
    }
}

fn accumulate(pending: &mut [Option<Tensor>], var: Var, grad: Tensor) {
    match &mut pending[var.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(e, g)| *e += g),
        slot => *slot = Some(grad),
    }
}

/// Returns the repeat period of `b` inside `a`: equal shapes, or `b` a vector
/// matching `a`'s trailing dimension.
fn broadcast_period(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape() == b.shape() {
        return Ok(a.numel());
    }
    let last = *a.shape().last().expect("rank >= 1");
    let b_is_row = match b.shape() {
        [n] => *n == last,
        [1, n] => *n == last,
        _ => false,
    };
    if b_is_row && a.numel() % last == 0 {
        Ok(last)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn unary_forward(kind: Unary, x: f32) -> f32 {
    match kind {
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.max(LOG_FLOOR).ln(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
        Unary::SmoothL1 => {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        }
    }
}

fn unary_derivative(kind: Unary, x: f32, y: f32) -> f32 {
    match kind {
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => {
            if x > LOG_FLOOR {
                1.0 / x
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
        Unary::SmoothL1 => x.clamp(-1.0, 1.0),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let z = g.matmul(p, q).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn add_zero_is_identity_and_gelu_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(zero).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, b).is_err());
        let row = g.constant(Tensor::ones(&[1, 3]));
        assert!(g.add(a, row).is_ok());
        assert!(g.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let big = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(big, 0).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!(g.value(y).data()[1].abs() < 1e-6);
        assert!(g.softmax(big, 1).is_err());
    }

    #[test]
    fn layernorm_constant_row_maps_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.0));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layernorm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_of_sum_and_half_square() {
        let mut g = Graph::new();
        let theta = g.param(t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]));
        let s = g.sum(theta).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let theta = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let sq = g.square(theta).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[0.5, -1.0, 2.0]);
        assert_eq!(grads.visits(), g.len());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let theta = g.param(Tensor::ones(&[2]));
        assert!(matches!(
            g.backward(theta),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(100.0));
        assert!(matches!(
            g.exp(x),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let p = g.param(Tensor::ones(&[2]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
