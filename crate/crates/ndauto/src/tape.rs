//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order. [`Tape::backward`] then replays the records in reverse,
//! accumulating gradients additively so a node feeding several
//! consumers receives the sum of its per-use gradients. Each training
//! step builds a fresh tape; persistent parameters are leased in as
//! leaves and their gradients pulled back out afterwards.

use crate::tensor::Tensor;
use crate::TensorError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias { a: NodeId, bias: NodeId },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize, end: usize },
    SliceRows { a: NodeId, start: usize, end: usize },
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    RowSelect { a: NodeId, row: usize },
    MulBroadcastCol { a: NodeId, col: NodeId },
    LayerNorm { x: NodeId, scale: NodeId, offset: NodeId, eps: f64 },
    Gather { table: NodeId, ids: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias { a, bias: b }
            | Op::MulBroadcastCol { a, col: b } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::RowSelect { a, .. }
            | Op::Gather { table: a, .. } => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::LayerNorm { x, scale, offset, .. } => vec![*x, *scale, *offset],
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. Nodes are stored in creation order, which is a
/// valid topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let requires_grad = match &op {
            Op::Leaf => false, // overridden by leaf()
            other => other
                .inputs()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leases a persistent tensor onto the tape, copying its data.
    /// Gradient tracking follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(t.rows(), t.cols(), t.data.clone(), Op::Leaf);
        self.nodes[id.0].requires_grad = t.requires_grad;
        id
    }

    /// Leaf with an explicit trainability override (freeze contracts).
    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        let id = self.push(t.rows(), t.cols(), t.data.clone(), Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.push(1, 1, vec![x], Op::Leaf)
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Copies a node out into a standalone tensor (gradient included).
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        let (r, c) = self.dims(id);
        vec![r, c]
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape_of(a),
                rhs: self.shape_of(b),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let (r, c) = self.dims(a);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        Ok(self.push(r, c, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let (r, c) = self.dims(a);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y);
        Ok(self.push(r, c, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let (r, c) = self.dims(a);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        Ok(self.push(r, c, data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("div", a, b)?;
        let (r, c) = self.dims(a);
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y);
        Ok(self.push(r, c, data, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        self.push(r, c, data, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        self.push(r, c, data, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        self.push(r, c, data, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        self.push(r, c, data, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        self.push(r, c, data, Op::Sqrt(a))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape_of(a),
                rhs: self.shape_of(b),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(m, n, data, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, data, Op::Transpose(a))
    }

    /// Adds a `1×c` bias row to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape_of(a),
                rhs: self.shape_of(bias),
            });
        }
        let bv = &self.nodes[bias.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        Ok(self.push(r, c, data, Op::AddBias { a, bias }))
    }

    /// Multiplies every row `i` of an `r×c` matrix by the scalar in
    /// row `i` of an `r×1` column.
    pub fn mul_broadcast_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        let (cr, cc) = self.dims(col);
        if cr != r || cc != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_broadcast_col",
                lhs: self.shape_of(a),
                rhs: self.shape_of(col),
            });
        }
        let cv = &self.nodes[col.0].data;
        let av = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] * cv[i];
            }
        }
        Ok(self.push(r, c, data, Op::MulBroadcastCol { a, col }))
    }

    // ── Shape surgery ───────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let cols = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape_of(parts[0]),
                    rhs: self.shape_of(p),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(rows, cols, data, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let rows = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape_of(parts[0]),
                    rhs: self.shape_of(p),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let src = &self.nodes[p.0].data;
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(rows, cols, data, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: "a column range within bounds",
                shape: self.shape_of(a),
            });
        }
        let w = end - start;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, data, Op::SliceCols { a, start, end }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if start > end || end > r {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: "a row range within bounds",
                shape: self.shape_of(a),
            });
        }
        let data = self.nodes[a.0].data[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, data, Op::SliceRows { a, start, end }))
    }

    pub fn row_select(&mut self, a: NodeId, row: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if row >= r {
            return Err(TensorError::BadShape {
                op: "row_select",
                expected: "a row index within bounds",
                shape: self.shape_of(a),
            });
        }
        let data = self.nodes[a.0].data[row * c..(row + 1) * c].to_vec();
        Ok(self.push(1, c, data, Op::RowSelect { a, row }))
    }

    /// Embedding lookup: stacks `table` rows selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (v, d) = self.dims(table);
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::BadShape {
                    op: "gather",
                    expected: "indices within the table's rows",
                    shape: self.shape_of(table),
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(ids.len(), d, data, Op::Gather { table, ids: ids.to_vec() }))
    }

    // ── Reductions and row-wise nonlinearities ──────────────────────

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            data[i * c..(i + 1) * c].copy_from_slice(&crate::tensor::softmax_slice(row));
        }
        self.push(r, c, data, Op::SoftmaxRows(a))
    }

    /// Row-wise log-sum-exp, `r×c → r×1`, stabilized by the row max.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            data[i] = m + s.ln();
        }
        self.push(r, 1, data, Op::LogSumExpRows(a))
    }

    /// Sum of all entries, producing a `1×1` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Per-row sums, `r×c → r×1`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let data = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, data, Op::SumRows(a))
    }

    /// Column means over rows, `r×c → 1×c`. Requires `r ≥ 1`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if r == 0 {
            return Err(TensorError::BadShape {
                op: "mean_rows",
                expected: "at least one row",
                shape: self.shape_of(a),
            });
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for x in &mut data {
            *x /= r as f64;
        }
        Ok(self.push(1, c, data, Op::MeanRows(a)))
    }

    /// Per-row layer normalization with learned scale/offset rows.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        offset: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(x);
        for (name, id) in [("scale", scale), ("offset", offset)] {
            let (gr, gc) = self.dims(id);
            if gr != 1 || gc != c {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape_of(x),
                    rhs: self.shape_of(id),
                });
            }
        }
        let xv = &self.nodes[x.0].data;
        let sv = &self.nodes[scale.0].data;
        let ov = &self.nodes[offset.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = sv[j] * (row[j] - mean) * inv + ov[j];
            }
        }
        Ok(self.push(r, c, data, Op::LayerNorm { x, scale, offset, eps }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates `dLoss/dNode` into every node that requires a
    /// gradient, starting from a scalar loss. Previous gradients on
    /// the tape are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape_of(loss),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.apply_backward(idx, &op, &g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = &mut self.nodes[id.0];
        let numel = n.rows * n.cols;
        let grad = n.grad.get_or_insert_with(|| vec![0.0; numel]);
        f(grad);
    }

    fn apply_backward(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |d| add_into(d, g, 1.0));
                self.acc(*b, |d| add_into(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |d| add_into(d, g, 1.0));
                self.acc(*b, |d| add_into(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] * bv[i];
                    }
                });
                self.acc(*b, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] / bv[i];
                    }
                });
                self.acc(*b, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(*a, |d| add_into(d, g, k));
            }
            Op::AddBias { a, bias } => {
                let (r, c) = (self.nodes[out_idx].rows, self.nodes[out_idx].cols);
                self.acc(*a, |d| add_into(d, g, 1.0));
                self.acc(*bias, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                // C = A·B  =>  dA += dC·Bᵀ, dB += Aᵀ·dC
                let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(*a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                self.acc(*b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = self.nodes[out_idx].cols;
                let mut row_offset = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].rows;
                    let start = row_offset * cols;
                    let end = (row_offset + pr) * cols;
                    self.acc(p, |d| add_into(d, &g[start..end], 1.0));
                    row_offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[out_idx].rows;
                let cols = self.nodes[out_idx].cols;
                let mut col_offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    self.acc(p, |d| {
                        for i in 0..rows {
                            for j in 0..pc {
                                d[i * pc + j] += g[i * cols + col_offset + j];
                            }
                        }
                    });
                    col_offset += pc;
                }
            }
            Op::SliceCols { a, start, end } => {
                let c = self.nodes[a.0].cols;
                let w = end - start;
                let r = self.nodes[out_idx].rows;
                let start = *start;
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..w {
                            d[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows { a, start, end } => {
                let c = self.nodes[a.0].cols;
                let (start, end) = (*start, *end);
                self.acc(*a, |d| {
                    d[start * c..end * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(di, gi)| *di += gi);
                });
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (self.nodes[out_idx].rows, self.nodes[out_idx].cols);
                let y = self.nodes[out_idx].data.clone();
                self.acc(*a, |d| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(yj, gj)| yj * gj).sum();
                        for j in 0..c {
                            d[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let xv = self.nodes[a.0].data.clone();
                let out = self.nodes[out_idx].data.clone();
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i] * (xv[i * c + j] - out[i]).exp();
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.nodes[a.0].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        if xv[i] > 0.0 {
                            *di += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[out_idx].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.nodes[a.0].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] * sign(xv[i]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[out_idx].data.clone();
                self.acc(*a, |d| {
                    for (i, di) in d.iter_mut().enumerate() {
                        *di += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |d| {
                    for di in d.iter_mut() {
                        *di += g0;
                    }
                });
            }
            Op::SumRows(a) => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let inv = 1.0 / r as f64;
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::RowSelect { a, row } => {
                let c = self.nodes[a.0].cols;
                let row = *row;
                self.acc(*a, |d| {
                    for (j, gj) in g.iter().enumerate() {
                        d[row * c + j] += gj;
                    }
                });
            }
            Op::MulBroadcastCol { a, col } => {
                let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let av = self.nodes[a.0].data.clone();
                let cv = self.nodes[col.0].data.clone();
                self.acc(*a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] * cv[i];
                        }
                    }
                });
                self.acc(*col, |d| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * av[i * c + j];
                        }
                        d[i] += s;
                    }
                });
            }
            Op::LayerNorm { x, scale, offset, eps } => {
                let (r, c) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let xv = self.nodes[x.0].data.clone();
                let sv = self.nodes[scale.0].data.clone();
                let eps = *eps;
                // Recompute per-row normalization statistics.
                let mut xhat = vec![0.0; r * c];
                let mut inv_std = vec![0.0; r];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[i] = inv;
                    for j in 0..c {
                        xhat[i * c + j] = (row[j] - mean) * inv;
                    }
                }
                self.acc(*x, |d| {
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gs = g[i * c + j] * sv[j];
                            m1 += gs;
                            m2 += gs * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gs = g[i * c + j] * sv[j];
                            d[i * c + j] += (gs - m1 - xhat[i * c + j] * m2) * inv_std[i];
                        }
                    }
                });
                self.acc(*scale, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.acc(*offset, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d_cols = self.nodes[table.0].cols;
                let ids = ids.clone();
                self.acc(*table, |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d_cols {
                            d[id * d_cols + j] += g[i * d_cols + j];
                        }
                    }
                });
            }
        }
    }
}

/// Differentiable cosine similarity between two `1×d` nodes.
/// Rejects zero-norm inputs.
pub fn cosine_sim(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
    let uu = tape.mul(u, u)?;
    let su = tape.sum(uu);
    let nu = tape.sqrt(su);
    let vv = tape.mul(v, v)?;
    let sv = tape.sum(vv);
    let nv = tape.sqrt(sv);
    if tape.value(nu)[0] == 0.0 || tape.value(nv)[0] == 0.0 {
        return Err(TensorError::Domain(
            "cosine similarity of a zero-norm vector is undefined".into(),
        ));
    }
    let uv = tape.mul(u, v)?;
    let dot = tape.sum(uv);
    let denom = tape.mul(nu, nv)?;
    tape.div(dot, denom)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        let t = Tensor::matrix(rows, cols, data).unwrap().trainable();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, 2, 1, vec![5.0, 6.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut tape, 2, 2, vec![3.0, -1.0, 2.5, 7.0]);
        let c = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(c), tape.value(m));
        let z = leaf(&mut tape, 2, 2, vec![0.0; 4]);
        let c = tape.matmul(z, m).unwrap();
        assert_eq!(tape.value(c), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 3, vec![0.0; 6]);
        let b = leaf(&mut tape, 2, 2, vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_identity_and_quadratic() {
        // loss = x (identity): dx = 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 1, vec![3.0]);
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);

        // loss = sum(x ⊙ x): dx = 2x
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, vec![1.0, -2.0, 0.5]);
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn fan_out_gradients_sum() {
        // loss = sum(x) + sum(x ⊙ x): dx = 1 + 2x, i.e. per-use grads add
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 2, vec![3.0, -1.0]);
        let s1 = tape.sum(x);
        let xx = tape.mul(x, x).unwrap();
        let s2 = tape.sum(xx);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let frozen = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let x = tape.leaf(&frozen); // requires_grad = false
        let y = leaf(&mut tape, 1, 2, vec![5.0, 6.0]);
        let m = tape.mul(x, y).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let s = tape.softmax_rows(a);
        for i in 0..2 {
            let row: f64 = tape.value(s)[i * 3..(i + 1) * 3].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 2, vec![1.0, 2.0]);
        let b = leaf(&mut tape, 2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.dims(cat), (3, 2));
        let back = tape.slice_rows(cat, 1, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));

        let cbound = tape.concat_cols(&[a, a]).unwrap();
        assert_eq!(tape.value(cbound), &[1.0, 2.0, 1.0, 2.0]);
        let left = tape.slice_cols(cbound, 0, 2).unwrap();
        assert_eq!(tape.value(left), &[1.0, 2.0]);
    }

    #[test]
    fn concat_rows_with_empty_is_identity() {
        let mut tape = Tape::new();
        let empty = Tensor::matrix(0, 2, vec![]).unwrap();
        let e = tape.leaf(&empty);
        let b = leaf(&mut tape, 2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let cat = tape.concat_rows(&[e, b]).unwrap();
        assert_eq!(tape.dims(cat), (2, 2));
        assert_eq!(tape.value(cat), tape.value(b));
    }

    #[test]
    fn cosine_sim_matches_plain_helper() {
        let mut tape = Tape::new();
        let u = leaf(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let v = leaf(&mut tape, 1, 3, vec![3.0, 2.0, 1.0]);
        let c = cosine_sim(&mut tape, u, v).unwrap();
        assert!((tape.value(c)[0] - 10.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_sim_zero_norm_rejected() {
        let mut tape = Tape::new();
        let u = leaf(&mut tape, 1, 2, vec![0.0, 0.0]);
        let v = leaf(&mut tape, 1, 2, vec![1.0, 0.0]);
        assert!(matches!(
            cosine_sim(&mut tape, u, v),
            Err(TensorError::Domain(_))
        ));
    }

    #[test]
    fn gather_scatter_adds_duplicate_ids() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = tape.gather(table, &[1, 1, 2]).unwrap();
        let loss = tape.sum(rows);
        tape.backward(loss).unwrap();
        // row 1 used twice -> grad 2, row 2 once -> grad 1, row 0 unused
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
