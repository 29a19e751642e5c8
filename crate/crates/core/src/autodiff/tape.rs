//! Define-by-run reverse-mode tape over [`Tensor2`] values.
//!
//! Every op appends a node holding its forward value; node ids are handed
//! back to the caller, so the tape is topologically ordered and acyclic by
//! construction. [`Tape::backward`] walks the nodes in reverse, accumulating
//! exact vector-Jacobian products. A tape is built per minibatch and dropped;
//! nothing is cached across runs.
//!
//! Subgradient conventions are fixed so tests are deterministic: `relu`
//! propagates zero gradient at 0, `clamp` passes gradient only strictly
//! inside `(lo, hi)`.

use super::tensor::Tensor2;
use rayon::prelude::*;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op}) at flat index {index}")]
    NonFinite {
        node: usize,
        op: &'static str,
        index: usize,
    },
    #[error("backward requires a scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

enum OpKind {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `a[m x n] + row[1 x n]`, broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a[m x n] - col[m x 1]`, broadcast over columns.
    SubCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sin(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRow(NodeId),
    LogsumexpRow(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    /// Bilinear read of a `(h*w) x c` grid at per-row grid coordinates.
    GatherBilinear {
        grid: NodeId,
        corners: Vec<[usize; 4]>,
        weights: Vec<[f64; 4]>,
    },
    GatherRows(NodeId, Vec<usize>),
    /// `x - 2π·floor(x / 2π)`; gradient 1 everywhere.
    WrapTwoPi(NodeId),
    /// Elementwise log-sum-exp over same-shaped inputs.
    Lse(Vec<NodeId>),
    MeanAll(NodeId),
}

struct Node {
    op: OpKind,
    value: Tensor2,
}

/// Reverse-mode tape. Single-owner during construction; drop it after
/// [`Tape::backward`] and build a fresh one for the next batch.
pub struct Tape {
    nodes: Vec<Node>,
    boundary_margin: f64,
    subgradient_contact: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            boundary_margin: 0.0,
            subgradient_contact: false,
        }
    }

    /// A tape that flags relu/clamp evaluations within `margin` of their
    /// kink as subgradient contact. Used by gradient checking.
    pub fn with_boundary_margin(margin: f64) -> Self {
        Self {
            boundary_margin: margin,
            ..Self::new()
        }
    }

    /// Whether any relu/clamp input came within the boundary margin during
    /// forward evaluation.
    pub fn subgradient_contact(&self) -> bool {
        self.subgradient_contact
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.index()].value
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.index()].value.shape()
    }

    fn push(
        &mut self,
        op: OpKind,
        value: Tensor2,
        name: &'static str,
    ) -> Result<NodeId, TapeError> {
        if let Some(index) = value.first_non_finite() {
            return Err(TapeError::NonFinite {
                node: self.nodes.len(),
                op: name,
                index,
            });
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor2) -> Result<NodeId, TapeError> {
        self.push(OpKind::Leaf, value, "leaf")
    }

    /// A non-parameter input; gradients are still defined but callers treat
    /// it as data.
    pub fn constant(&mut self, value: Tensor2) -> Result<NodeId, TapeError> {
        self.push(OpKind::Constant, value, "constant")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(TapeError::Shape {
                op: "matmul",
                detail: format!("{m}x{ka} * {kb}x{n}"),
            });
        }
        let value = matmul_forward(self.value(a), self.value(b));
        self.push(OpKind::MatMul(a, b), value, "matmul")
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: OpKind,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, Tensor2::new(r, c, data), name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_same_shape(a, b, "add", OpKind::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_same_shape(a, b, "sub", OpKind::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_same_shape(a, b, "mul", OpKind::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary_same_shape(a, b, "div", OpKind::Div(a, b), |x, y| x / y)
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TapeError> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(TapeError::Shape {
                op: "add_row",
                detail: format!("{m}x{n} + {:?}", self.shape(row)),
            });
        }
        let mut value = self.value(a).clone();
        {
            let rv = self.value(row);
            for r in 0..m {
                let slice = &mut value.data_mut()[r * n..(r + 1) * n];
                for (o, &x) in slice.iter_mut().zip(rv.data()) {
                    *o += x;
                }
            }
        }
        self.push(OpKind::AddRow(a, row), value, "add_row")
    }

    /// Subtracts an `m x 1` column vector from every column of `a`.
    pub fn sub_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, TapeError> {
        let (m, n) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(TapeError::Shape {
                op: "sub_col",
                detail: format!("{m}x{n} - {:?}", self.shape(col)),
            });
        }
        let mut value = self.value(a).clone();
        {
            let cv = self.value(col);
            for r in 0..m {
                let c = cv.data()[r];
                for o in &mut value.data_mut()[r * n..(r + 1) * n] {
                    *o -= c;
                }
            }
        }
        self.push(OpKind::SubCol(a, col), value, "sub_col")
    }

    fn unary(
        &mut self,
        a: NodeId,
        name: &'static str,
        op: OpKind,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(op, Tensor2::new(r, c, data), name)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, TapeError> {
        self.unary(a, "scale", OpKind::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId, TapeError> {
        self.unary(a, "add_scalar", OpKind::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let margin = self.boundary_margin;
        if self.value(a).data().iter().any(|&x| x.abs() <= margin) {
            self.subgradient_contact = true;
        }
        self.unary(a, "relu", OpKind::Relu(a), |x| x.max(0.0))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, "sin", OpKind::Sin(a), f64::sin)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, "tanh", OpKind::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, "exp", OpKind::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, "log", OpKind::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TapeError> {
        assert!(lo < hi, "clamp bounds must satisfy lo < hi");
        let margin = self.boundary_margin;
        if self
            .value(a)
            .data()
            .iter()
            .any(|&x| (x - lo).abs() <= margin || (x - hi).abs() <= margin)
        {
            self.subgradient_contact = true;
        }
        self.unary(a, "clamp", OpKind::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_row(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let (m, n) = self.shape(a);
        let mut value = Tensor2::zeros(m, n);
        for r in 0..m {
            let row = self.value(a).row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut exps = vec![0.0; n];
            for (e, &x) in exps.iter_mut().zip(row) {
                *e = (x - max).exp();
                sum += *e;
            }
            let out = &mut value.data_mut()[r * n..(r + 1) * n];
            for (o, e) in out.iter_mut().zip(exps) {
                *o = e / sum;
            }
        }
        self.push(OpKind::SoftmaxRow(a), value, "softmax_row")
    }

    /// Per-row `log Σ_j exp(a[r, j])`, producing an `m x 1` column.
    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let m = self.shape(a).0;
        let mut value = Tensor2::zeros(m, 1);
        for r in 0..m {
            let row = self.value(a).row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            value.set(r, 0, max + sum.ln());
        }
        self.push(OpKind::LogsumexpRow(a), value, "logsumexp_row")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let m = self.shape(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(TapeError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {m} vs {pm}"),
                });
            }
            n += pn;
        }
        let mut value = Tensor2::zeros(m, n);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let pn = pv.cols();
            for r in 0..m {
                value.data_mut()[r * n + offset..r * n + offset + pn]
                    .copy_from_slice(pv.row_slice(r));
            }
            offset += pn;
        }
        self.push(OpKind::ConcatCols(parts.to_vec()), value, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TapeError> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(TapeError::Shape {
                op: "slice_cols",
                detail: format!("range {start}..{end} of {n} columns"),
            });
        }
        let w = end - start;
        let mut value = Tensor2::zeros(m, w);
        {
            let av = self.value(a);
            for r in 0..m {
                value.data_mut()[r * w..(r + 1) * w]
                    .copy_from_slice(&av.row_slice(r)[start..end]);
            }
        }
        self.push(OpKind::SliceCols(a, start), value, "slice_cols")
    }

    /// Bilinear read of `grid` (shape `(h*w) x c`, row `iy*w + ix`) at
    /// per-sample continuous grid coordinates `(gx, gy)` with
    /// `gx ∈ [0, w-1]`, `gy ∈ [0, h-1]` (clamped). Differentiable w.r.t. the
    /// four surrounding grid rows with the bilinear weights.
    pub fn gather_bilinear(
        &mut self,
        grid: NodeId,
        coords: &[(f64, f64)],
        h: usize,
        w: usize,
    ) -> Result<NodeId, TapeError> {
        let (rows, c) = self.shape(grid);
        if rows != h * w || h < 2 || w < 2 {
            return Err(TapeError::Shape {
                op: "gather_bilinear",
                detail: format!("grid {rows}x{c} vs {h}x{w} cells"),
            });
        }
        let m = coords.len();
        let mut corners = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        let mut value = Tensor2::zeros(m, c);
        {
            let gv = &self.nodes[grid.index()].value;
            for (i, &(gx, gy)) in coords.iter().enumerate() {
                let (idx, wt) = bilinear_corners(gx, gy, h, w);
                let out = &mut value.data_mut()[i * c..(i + 1) * c];
                for (&corner, &weight) in idx.iter().zip(wt.iter()) {
                    for (o, &s) in out.iter_mut().zip(gv.row_slice(corner)) {
                        *o += weight * s;
                    }
                }
                corners.push(idx);
                weights.push(wt);
            }
        }
        self.push(
            OpKind::GatherBilinear {
                grid,
                corners,
                weights,
            },
            value,
            "gather_bilinear",
        )
    }

    /// Row lookup into a table; gradient scatters into the selected rows.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let (rows, c) = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TapeError::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of {rows}"),
            });
        }
        let m = indices.len();
        let mut value = Tensor2::zeros(m, c);
        {
            let tv = self.value(table);
            for (i, &idx) in indices.iter().enumerate() {
                value.data_mut()[i * c..(i + 1) * c].copy_from_slice(tv.row_slice(idx));
            }
        }
        self.push(
            OpKind::GatherRows(table, indices.to_vec()),
            value,
            "gather_rows",
        )
    }

    /// Wraps into `[0, 2π)` by subtracting `2π·floor(x/2π)`; the offset is
    /// locally constant so the gradient passes through unchanged.
    pub fn wrap_two_pi(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, "wrap_two_pi", OpKind::WrapTwoPi(a), |x| {
            let w = x - TAU * (x / TAU).floor();
            if w >= TAU {
                w - TAU
            } else {
                w
            }
        })
    }

    /// Elementwise stable log-sum-exp over same-shaped inputs.
    pub fn lse(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        assert!(!parts.is_empty(), "lse needs at least one input");
        let (m, n) = self.shape(parts[0]);
        for &p in parts {
            if self.shape(p) != (m, n) {
                return Err(TapeError::Shape {
                    op: "lse",
                    detail: format!("{:?} vs {:?}", (m, n), self.shape(p)),
                });
            }
        }
        let mut value = Tensor2::zeros(m, n);
        for i in 0..m * n {
            let mut max = f64::NEG_INFINITY;
            for &p in parts {
                max = max.max(self.value(p).data()[i]);
            }
            value.data_mut()[i] = if max == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let sum: f64 = parts
                    .iter()
                    .map(|&p| (self.value(p).data()[i] - max).exp())
                    .sum();
                max + sum.ln()
            };
        }
        self.push(OpKind::Lse(parts.to_vec()), value, "lse")
    }

    /// Mean over all entries, producing a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(a);
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(OpKind::MeanAll(a), Tensor2::scalar(mean), "mean_all")
    }

    /// Reverse pass from a scalar loss node. Gradients are exact
    /// vector-Jacobian products; leaves never touched by the loss get zeros.
    /// Accumulation order is fixed, so results are bit-deterministic.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                OpKind::Leaf | OpKind::Constant => {}
                OpKind::MatMul(a, b) => {
                    acc_matmul_grad_a(ensure(&mut grads, *a, self.shape(*a)), &g, self.value(*b));
                    acc_matmul_grad_b(ensure(&mut grads, *b, self.shape(*b)), self.value(*a), &g);
                }
                OpKind::Add(a, b) => {
                    acc_scaled(ensure(&mut grads, *a, g.shape()), &g, 1.0);
                    acc_scaled(ensure(&mut grads, *b, g.shape()), &g, 1.0);
                }
                OpKind::Sub(a, b) => {
                    acc_scaled(ensure(&mut grads, *a, g.shape()), &g, 1.0);
                    acc_scaled(ensure(&mut grads, *b, g.shape()), &g, -1.0);
                }
                OpKind::Mul(a, b) => {
                    acc_elementwise(ensure(&mut grads, *a, g.shape()), &g, self.value(*b).data());
                    acc_elementwise(ensure(&mut grads, *b, g.shape()), &g, self.value(*a).data());
                }
                OpKind::Div(a, b) => {
                    let bv = self.value(*b);
                    {
                        let da = ensure(&mut grads, *a, g.shape());
                        for ((o, &gi), &bi) in
                            da.data_mut().iter_mut().zip(g.data()).zip(bv.data())
                        {
                            *o += gi / bi;
                        }
                    }
                    let av = self.value(*a);
                    let db = ensure(&mut grads, *b, g.shape());
                    for (((o, &gi), &ai), &bi) in db
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        *o -= gi * ai / (bi * bi);
                    }
                }
                OpKind::AddRow(a, row) => {
                    let (m, n) = g.shape();
                    acc_scaled(ensure(&mut grads, *a, (m, n)), &g, 1.0);
                    let dr = ensure(&mut grads, *row, (1, n));
                    for r in 0..m {
                        for (o, &gi) in dr.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += gi;
                        }
                    }
                }
                OpKind::SubCol(a, col) => {
                    let (m, n) = g.shape();
                    acc_scaled(ensure(&mut grads, *a, (m, n)), &g, 1.0);
                    let dc = ensure(&mut grads, *col, (m, 1));
                    for r in 0..m {
                        let s: f64 = g.row_slice(r).iter().sum();
                        dc.data_mut()[r] -= s;
                    }
                }
                OpKind::Scale(a, k) => {
                    acc_scaled(ensure(&mut grads, *a, g.shape()), &g, *k);
                }
                OpKind::AddScalar(a) | OpKind::WrapTwoPi(a) => {
                    acc_scaled(ensure(&mut grads, *a, g.shape()), &g, 1.0);
                }
                OpKind::Relu(a) => {
                    let av = self.value(*a);
                    let da = ensure(&mut grads, *a, g.shape());
                    for ((o, &gi), &x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                }
                OpKind::Sin(a) => {
                    let av = self.value(*a);
                    let da = ensure(&mut grads, *a, g.shape());
                    for ((o, &gi), &x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * x.cos();
                    }
                }
                OpKind::Tanh(a) => {
                    let yv = &node.value;
                    let da = ensure(&mut grads, *a, g.shape());
                    for ((o, &gi), &y) in da.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o += gi * (1.0 - y * y);
                    }
                }
                OpKind::Exp(a) => {
                    acc_elementwise(ensure(&mut grads, *a, g.shape()), &g, node.value.data());
                }
                OpKind::Log(a) => {
                    let av = self.value(*a);
                    let da = ensure(&mut grads, *a, g.shape());
                    for ((o, &gi), &x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi / x;
                    }
                }
                OpKind::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let da = ensure(&mut grads, *a, g.shape());
                    for ((o, &gi), &x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if x > *lo && x < *hi {
                            *o += gi;
                        }
                    }
                }
                OpKind::SoftmaxRow(a) => {
                    let yv = &node.value;
                    let (m, n) = yv.shape();
                    let da = ensure(&mut grads, *a, (m, n));
                    for r in 0..m {
                        let yr = yv.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&y, &gi)| y * gi).sum();
                        let out = &mut da.data_mut()[r * n..(r + 1) * n];
                        for ((o, &y), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o += y * (gi - dot);
                        }
                    }
                }
                OpKind::LogsumexpRow(a) => {
                    let av = self.value(*a);
                    let yv = &node.value;
                    let (m, n) = av.shape();
                    let da = ensure(&mut grads, *a, (m, n));
                    for r in 0..m {
                        let gy = g.get(r, 0);
                        if gy == 0.0 {
                            continue;
                        }
                        let y = yv.get(r, 0);
                        let out = &mut da.data_mut()[r * n..(r + 1) * n];
                        for (o, &x) in out.iter_mut().zip(av.row_slice(r)) {
                            *o += gy * (x - y).exp();
                        }
                    }
                }
                OpKind::ConcatCols(parts) => {
                    let (m, n) = g.shape();
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pn) = self.shape(p);
                        let dp = ensure(&mut grads, p, (m, pn));
                        for r in 0..m {
                            let src = &g.data()[r * n + offset..r * n + offset + pn];
                            for (o, &gi) in
                                dp.data_mut()[r * pn..(r + 1) * pn].iter_mut().zip(src)
                            {
                                *o += gi;
                            }
                        }
                        offset += pn;
                    }
                }
                OpKind::SliceCols(a, start) => {
                    let (m, n) = self.shape(*a);
                    let w = g.shape().1;
                    let da = ensure(&mut grads, *a, (m, n));
                    for r in 0..m {
                        let dst = &mut da.data_mut()[r * n + start..r * n + start + w];
                        for (o, &gi) in dst.iter_mut().zip(g.row_slice(r)) {
                            *o += gi;
                        }
                    }
                }
                OpKind::GatherBilinear {
                    grid,
                    corners,
                    weights,
                } => {
                    let shape = self.shape(*grid);
                    let c = shape.1;
                    let dg = ensure(&mut grads, *grid, shape);
                    for (i, (idx, wt)) in corners.iter().zip(weights).enumerate() {
                        let gr = g.row_slice(i);
                        for (&corner, &weight) in idx.iter().zip(wt.iter()) {
                            let dst = &mut dg.data_mut()[corner * c..(corner + 1) * c];
                            for (o, &gi) in dst.iter_mut().zip(gr) {
                                *o += weight * gi;
                            }
                        }
                    }
                }
                OpKind::GatherRows(table, indices) => {
                    let shape = self.shape(*table);
                    let c = shape.1;
                    let dt = ensure(&mut grads, *table, shape);
                    for (i, &idx) in indices.iter().enumerate() {
                        let dst = &mut dt.data_mut()[idx * c..(idx + 1) * c];
                        for (o, &gi) in dst.iter_mut().zip(g.row_slice(i)) {
                            *o += gi;
                        }
                    }
                }
                OpKind::Lse(parts) => {
                    let yv = &node.value;
                    for &p in parts {
                        let pv = self.value(p);
                        let dp = ensure(&mut grads, p, g.shape());
                        for (((o, &gi), &x), &y) in dp
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(pv.data())
                            .zip(yv.data())
                        {
                            if gi != 0.0 {
                                *o += gi * (x - y).exp();
                            }
                        }
                    }
                }
                OpKind::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let scale = g.scalar_value() / (shape.0 * shape.1) as f64;
                    let da = ensure(&mut grads, *a, shape);
                    for o in da.data_mut() {
                        *o += scale;
                    }
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient w.r.t. a node; zeros if the loss never touched it.
    pub fn wrt(&self, id: NodeId) -> Tensor2 {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.index()];
                Tensor2::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, avoiding a copy in the training hot path.
    pub fn take_wrt(&mut self, id: NodeId) -> Tensor2 {
        match self.grads[id.index()].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.index()];
                Tensor2::zeros(r, c)
            }
        }
    }
}

/// Corner indices (row-major `iy*w + ix`) and bilinear weights for grid
/// coordinates `(gx, gy)`, clamped to the grid interior.
pub fn bilinear_corners(gx: f64, gy: f64, h: usize, w: usize) -> ([usize; 4], [f64; 4]) {
    let cx = gx.clamp(0.0, (w - 1) as f64);
    let cy = gy.clamp(0.0, (h - 1) as f64);
    let ix = (cx.floor() as usize).min(w - 2);
    let iy = (cy.floor() as usize).min(h - 2);
    let fx = cx - ix as f64;
    let fy = cy - iy as f64;
    (
        [
            iy * w + ix,
            iy * w + ix + 1,
            (iy + 1) * w + ix,
            (iy + 1) * w + ix + 1,
        ],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

fn ensure(grads: &mut [Option<Tensor2>], id: NodeId, shape: (usize, usize)) -> &mut Tensor2 {
    let slot = &mut grads[id.index()];
    if slot.is_none() {
        *slot = Some(Tensor2::zeros(shape.0, shape.1));
    }
    slot.as_mut().unwrap()
}

fn acc_scaled(out: &mut Tensor2, g: &Tensor2, k: f64) {
    for (o, &gi) in out.data_mut().iter_mut().zip(g.data()) {
        *o += k * gi;
    }
}

fn acc_elementwise(out: &mut Tensor2, g: &Tensor2, other: &[f64]) {
    for ((o, &gi), &x) in out.data_mut().iter_mut().zip(g.data()).zip(other) {
        *o += gi * x;
    }
}

/// Work threshold above which matmul-shaped loops use rayon. Row-partitioned,
/// so results are bit-identical to the sequential path.
const PAR_FLOP_THRESHOLD: usize = 250_000;

pub(crate) fn matmul_forward(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let (m, k) = a.shape();
    let (_, n) = b.shape();
    let mut out = Tensor2::zeros(m, n);
    let body = |(orow, arow): (&mut [f64], &[f64])| {
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for (o, &bj) in orow.iter_mut().zip(brow) {
                *o += aik * bj;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(n)
            .zip(a.data().par_chunks(k))
            .for_each(body);
    } else {
        out.data_mut()
            .chunks_mut(n)
            .zip(a.data().chunks(k))
            .for_each(body);
    }
    out
}

/// `da += g · bᵀ` for `c = a·b`.
fn acc_matmul_grad_a(da: &mut Tensor2, g: &Tensor2, b: &Tensor2) {
    let (m, n) = g.shape();
    let k = b.shape().0;
    let body = |(darow, grow): (&mut [f64], &[f64])| {
        for (kk, o) in darow.iter_mut().enumerate() {
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&gi, &bj) in grow.iter().zip(brow) {
                acc += gi * bj;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        da.data_mut()
            .par_chunks_mut(k)
            .zip(g.data().par_chunks(n))
            .for_each(body);
    } else {
        da.data_mut()
            .chunks_mut(k)
            .zip(g.data().chunks(n))
            .for_each(body);
    }
}

/// `db += aᵀ · g` for `c = a·b`.
fn acc_matmul_grad_b(db: &mut Tensor2, a: &Tensor2, g: &Tensor2) {
    let (m, k) = a.shape();
    let n = g.shape().1;
    if m * k * n >= PAR_FLOP_THRESHOLD {
        let adata = a.data();
        let gdata = g.data();
        db.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, dbrow)| {
                for i in 0..m {
                    let aik = adata[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let grow = &gdata[i * n..(i + 1) * n];
                    for (o, &gi) in dbrow.iter_mut().zip(grow) {
                        *o += aik * gi;
                    }
                }
            });
    } else {
        for i in 0..m {
            let arow = a.row_slice(i);
            let grow = g.row_slice(i);
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let dbrow = &mut db.data_mut()[kk * n..(kk + 1) * n];
                for (o, &gi) in dbrow.iter_mut().zip(grow) {
                    *o += aik * gi;
                }
            }
        }
    }
}
