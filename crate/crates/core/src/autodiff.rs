//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in creation order. Because an
//! operation can only reference nodes that already exist, creation order is
//! a topological order and [`Tape::backward`] simply walks the nodes in
//! reverse. Gradients accumulate additively, so a node consumed by several
//! operations receives the sum of their contributions.
//!
//! The tape is meant to be rebuilt for every training step:
//!
//! ```
//! use ndarray::array;
//! use swg::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[1.0, -2.0, 3.0, 4.0]]);
//! let r = tape.relu(x).unwrap();
//! let loss = tape.mean(r).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x), &array![[0.25, 0.0, 0.25, 0.25]]);
//! ```

use ndarray::{s, Array1, Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

/// Probabilities are clamped to this value before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a 1x1 loss node, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("backward already ran on this tape; reset gradients first")]
    DoubleBackward,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-group normalization constants used by [`Tape::group_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows {
        input: NodeId,
        temperature: f64,
    },
    LogFloor(NodeId),
    Affine {
        input: NodeId,
        scale: f64,
    },
    Mean(NodeId),
    WeightedSum {
        input: NodeId,
        weights: Matrix,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    GradReverse {
        input: NodeId,
        lambda: f64,
    },
    Outer(NodeId, NodeId),
    GroupNorm {
        input: NodeId,
        groups: Vec<usize>,
        inv_std: Vec<Array1<f64>>,
        normalized: Matrix,
        gammas: Vec<NodeId>,
        betas: Vec<NodeId>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Flat, append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn dims(m: &Matrix) -> (usize, usize) {
    m.dim()
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str, requires_grad: bool) -> Result<NodeId> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let grad = Matrix::zeros(value.raw_dim());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input (parameters and anything else whose gradient is wanted).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.try_leaf(value).expect("leaf values must be finite")
    }

    pub fn try_leaf(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Leaf, "leaf", true)
    }

    /// Input that never accumulates a gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.push(value, Op::Leaf, "constant", false)
    }

    /// Copy of `id` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let value = self.value(id).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        let out = va.dot(vb);
        let rg = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), "matmul", rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        let out = va + vb;
        let rg = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), "add", rg)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: dims(va),
                rhs: dims(vr),
            });
        }
        let out = va + vr;
        let rg = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), "add_row", rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), "relu", rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), "sigmoid", rg)
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(AutodiffError::InvalidTemperature(temperature));
        }
        let out = softmax_rows(self.value(a), temperature);
        let rg = self.needs(&[a]);
        self.push(
            out,
            Op::SoftmaxRows {
                input: a,
                temperature,
            },
            "softmax_rows",
            rg,
        )
    }

    /// Elementwise `ln(max(a, LOG_FLOOR))`. Entries at or below the floor get no gradient.
    pub fn log_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).mapv(|v| v.max(LOG_FLOOR).ln());
        let rg = self.needs(&[a]);
        self.push(out, Op::LogFloor(a), "log_rows", rg)
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let out = self.value(a).mapv(|v| scale * v + shift);
        let rg = self.needs(&[a]);
        self.push(out, Op::Affine { input: a, scale }, "affine", rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty input".into(),
            });
        }
        let m = va.sum() / va.len() as f64;
        let rg = self.needs(&[a]);
        self.push(Matrix::from_elem((1, 1), m), Op::Mean(a), "mean", rg)
    }

    /// `sum_ij weights_ij * a_ij` as a 1x1 node; `weights` is a constant.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Matrix) -> Result<NodeId> {
        let va = self.value(a);
        if va.dim() != weights.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "weighted_sum",
                lhs: dims(va),
                rhs: dims(&weights),
            });
        }
        let total = (va * &weights).sum();
        let rg = self.needs(&[a]);
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::WeightedSum { input: a, weights },
            "weighted_sum",
            rg,
        )
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                lhs: dims(va),
                rhs: dims(vb),
            });
        }
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).expect("column counts checked");
        let rg = self.needs(&[a, b]);
        self.push(out, Op::ConcatRows(a, b), "concat_rows", rg)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.nrows() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} outside {} rows", va.nrows()),
            });
        }
        let out = va.slice(s![start..end, ..]).to_owned();
        let rg = self.needs(&[a]);
        self.push(out, Op::SliceRows { input: a, start }, "slice_rows", rg)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `-lambda`.
    pub fn gradient_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gradient_reverse",
                reason: format!("lambda must be a nonnegative finite number, got {lambda}"),
            });
        }
        let out = self.value(a).clone();
        let rg = self.needs(&[a]);
        self.push(out, Op::GradReverse { input: a, lambda }, "gradient_reverse", rg)
    }

    /// Row-wise flattened outer product: row `i` of the result holds
    /// `f[i, a] * p[i, k]` at column `a * K + k`.
    pub fn outer_rows(&mut self, f: NodeId, p: NodeId) -> Result<NodeId> {
        let (vf, vp) = (self.value(f), self.value(p));
        if vf.nrows() != vp.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "outer_rows",
                lhs: dims(vf),
                rhs: dims(vp),
            });
        }
        let out = outer_rows(vf, vp);
        let rg = self.needs(&[f, p]);
        self.push(out, Op::Outer(f, p), "outer_rows", rg)
    }

    /// Normalization with fixed per-group statistics and per-group affine
    /// parameters: row `i` in group `g` maps to
    /// `gamma_g * (x - mean_g) / sqrt(var_g) + beta_g`.
    pub fn group_norm(
        &mut self,
        a: NodeId,
        groups: &[usize],
        stats: &[GroupStats],
        gammas: &[NodeId],
        betas: &[NodeId],
    ) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.dim();
        if groups.len() != rows {
            return Err(AutodiffError::InvalidArgument {
                op: "group_norm",
                reason: format!("{} group tags for {rows} rows", groups.len()),
            });
        }
        if stats.len() != gammas.len() || stats.len() != betas.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "group_norm",
                reason: "stats, gammas and betas must have one entry per group".into(),
            });
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= stats.len()) {
            return Err(AutodiffError::InvalidArgument {
                op: "group_norm",
                reason: format!("group {g} has no statistics"),
            });
        }
        for (g, st) in stats.iter().enumerate() {
            let shapes = [
                (1, st.mean.len()),
                (1, st.var.len()),
                dims(self.value(gammas[g])),
                dims(self.value(betas[g])),
            ];
            if let Some(bad) = shapes.iter().find(|d| **d != (1, cols)) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "group_norm",
                    lhs: (rows, cols),
                    rhs: *bad,
                });
            }
            if st.var.iter().any(|v| !(*v > 0.0)) {
                return Err(AutodiffError::InvalidArgument {
                    op: "group_norm",
                    reason: format!("group {g} has a non-positive variance"),
                });
            }
        }
        let inv_std: Vec<Array1<f64>> = stats.iter().map(|st| st.var.mapv(|v| 1.0 / v.sqrt())).collect();
        let mut normalized = va.clone();
        let mut out = Matrix::zeros((rows, cols));
        for (i, &g) in groups.iter().enumerate() {
            let gamma = self.nodes[gammas[g].0].value.row(0);
            let beta = self.nodes[betas[g].0].value.row(0);
            let mut nrow = normalized.row_mut(i);
            let mut orow = out.row_mut(i);
            for j in 0..cols {
                let xhat = (nrow[j] - stats[g].mean[j]) * inv_std[g][j];
                nrow[j] = xhat;
                orow[j] = gamma[j] * xhat + beta[j];
            }
        }
        let mut parents = vec![a];
        parents.extend_from_slice(gammas);
        parents.extend_from_slice(betas);
        let rg = self.needs(&parents);
        self.push(
            out,
            Op::GroupNorm {
                input: a,
                groups: groups.to_vec(),
                inv_std,
                normalized,
                gammas: gammas.to_vec(),
                betas: betas.to_vec(),
            },
            "group_norm",
            rg,
        )
    }

    /// Zeroes every gradient so that backward may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.backward_done = false;
    }

    /// Propagates `d loss / d value` into every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let (rows, cols) = self.value(loss).dim();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NotScalar { rows, cols });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[[0, 0]] += 1.0;

        let mut reached = vec![false; self.nodes.len()];
        reached[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reached[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let contributions = node_backward(node, head);
            for (p, delta) in contributions {
                let parent = &mut head[p.0];
                if parent.requires_grad {
                    parent.grad += &delta;
                    reached[p.0] = true;
                }
            }
        }
        Ok(())
    }
}

/// Gradient contributions of `node` to its parents. `head` holds every node
/// created before it.
fn node_backward(node: &Node, head: &[Node]) -> Vec<(NodeId, Matrix)> {
    let g = &node.grad;
    let wants = |id: &NodeId| head[id.0].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if wants(a) {
                out.push((*a, g.dot(&head[b.0].value.t())));
            }
            if wants(b) {
                out.push((*b, head[a.0].value.t().dot(g)));
            }
            out
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::AddRow(a, row) => vec![(*a, g.clone()), (*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
        Op::Relu(a) => {
            let mut d = g.clone();
            d.zip_mut_with(&head[a.0].value, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![(*a, d)]
        }
        Op::Sigmoid(a) => {
            let mut d = g.clone();
            d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
            vec![(*a, d)]
        }
        Op::SoftmaxRows { input, temperature } => {
            let mut d = g.clone();
            for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                let dot: f64 = drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                for (dv, &y) in drow.iter_mut().zip(yrow.iter()) {
                    *dv = y * (*dv - dot) / temperature;
                }
            }
            vec![(*input, d)]
        }
        Op::LogFloor(a) => {
            let mut d = g.clone();
            d.zip_mut_with(&head[a.0].value, |d, &x| {
                *d = if x > LOG_FLOOR { *d / x } else { 0.0 };
            });
            vec![(*a, d)]
        }
        Op::Affine { input, scale } => vec![(*input, g * *scale)],
        Op::Mean(a) => {
            let value = &head[a.0].value;
            let n = value.len() as f64;
            vec![(*a, Matrix::from_elem(value.raw_dim(), g[[0, 0]] / n))]
        }
        Op::WeightedSum { input, weights } => vec![(*input, weights * g[[0, 0]])],
        Op::ConcatRows(a, b) => {
            let ra = head[a.0].value.nrows();
            vec![
                (*a, g.slice(s![..ra, ..]).to_owned()),
                (*b, g.slice(s![ra.., ..]).to_owned()),
            ]
        }
        Op::SliceRows { input, start } => {
            let mut d = Matrix::zeros(head[input.0].value.raw_dim());
            d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
            vec![(*input, d)]
        }
        Op::GradReverse { input, lambda } => vec![(*input, g * -*lambda)],
        Op::Outer(f, p) => {
            let (df, dp) = outer_rows_backward(g, &head[f.0].value, &head[p.0].value);
            vec![(*f, df), (*p, dp)]
        }
        Op::GroupNorm {
            input,
            groups,
            inv_std,
            normalized,
            gammas,
            betas,
        } => {
            let cols = g.ncols();
            let mut dx = Matrix::zeros(g.raw_dim());
            let mut dgamma = vec![Matrix::zeros((1, cols)); gammas.len()];
            let mut dbeta = vec![Matrix::zeros((1, cols)); betas.len()];
            for (i, &grp) in groups.iter().enumerate() {
                let gamma = head[gammas[grp].0].value.row(0);
                for j in 0..cols {
                    let gij = g[[i, j]];
                    dx[[i, j]] = gij * gamma[j] * inv_std[grp][j];
                    dgamma[grp][[0, j]] += gij * normalized[[i, j]];
                    dbeta[grp][[0, j]] += gij;
                }
            }
            let mut out = vec![(*input, dx)];
            out.extend(gammas.iter().copied().zip(dgamma));
            out.extend(betas.iter().copied().zip(dbeta));
            out
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `m / temperature` with max subtraction.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) / temperature).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn outer_rows(f: &Matrix, p: &Matrix) -> Matrix {
    let (n, df) = f.dim();
    let k = p.ncols();
    let mut out = Matrix::zeros((n, df * k));
    for i in 0..n {
        for a in 0..df {
            let fa = f[[i, a]];
            for c in 0..k {
                out[[i, a * k + c]] = fa * p[[i, c]];
            }
        }
    }
    out
}

fn outer_rows_backward(g: &Matrix, f: &Matrix, p: &Matrix) -> (Matrix, Matrix) {
    let (n, df) = f.dim();
    let k = p.ncols();
    let mut d_f = Matrix::zeros((n, df));
    let mut d_p = Matrix::zeros((n, k));
    for i in 0..n {
        for a in 0..df {
            let mut acc = 0.0;
            for c in 0..k {
                let gv = g[[i, a * k + c]];
                acc += gv * p[[i, c]];
                d_p[[i, c]] += gv * f[[i, a]];
            }
            d_f[[i, a]] = acc;
        }
    }
    (d_f, d_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_symmetric_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0]]);
        let y = t.softmax_rows(x, 1.0).unwrap();
        assert_eq!(t.value(y), &array![[0.5, 0.5]]);
    }

    #[test]
    fn softmax_of_log_nine() {
        let mut t = Tape::new();
        let x = t.leaf(array![[9f64.ln(), 0.0]]);
        let y = t.softmax_rows(x, 1.0).unwrap();
        assert!((t.value(y)[[0, 0]] - 0.9).abs() < 1e-15);
        assert!((t.value(y)[[0, 1]] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert_eq!(t.softmax_rows(x, 0.0), Err(AutodiffError::InvalidTemperature(0.0)));
        assert!(t.softmax_rows(x, -1.0).is_err());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.leaf(array![[-1.0, 2.0]]);
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &array![[0.0, 2.0]]);
        // upstream [[1, 1]] via a unit-weighted sum
        let loss = t.weighted_sum(r, array![[1.0, 1.0]]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &array![[0.0, 1.0]]);
    }

    #[test]
    fn gradient_reverse_is_identity_forward() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0, -1.0]]);
        let r = t.gradient_reverse(x, 1.0).unwrap();
        assert_eq!(t.value(r), t.value(x));
    }

    #[test]
    fn gradient_reverse_flips_and_scales() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0, -1.0]]);
        let r = t.gradient_reverse(x, 1.0).unwrap();
        let loss = t.weighted_sum(r, array![[1.0, 2.0]]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &array![[-1.0, -2.0]]);

        let mut t = Tape::new();
        let x = t.leaf(array![[7.0]]);
        let r = t.gradient_reverse(x, 0.5).unwrap();
        let loss = t.weighted_sum(r, array![[4.0]]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &array![[-2.0]]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 5.0, -2.0, 0.5]]);
        let m = t.mean(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), &array![[0.25, 0.25, 0.25, 0.25]]);
    }

    #[test]
    fn unrelated_node_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let n = t.leaf(array![[3.0, 4.0]]);
        let _unused = t.relu(n).unwrap();
        let m = t.mean(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(n), &array![[0.0, 0.0]]);
    }

    #[test]
    fn backward_guards() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert_eq!(t.backward(x), Err(AutodiffError::NotScalar { rows: 1, cols: 2 }));
        let m = t.mean(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.backward(m), Err(AutodiffError::DoubleBackward));
        t.reset_grads();
        assert_eq!(t.grad(x), &array![[0.0, 0.0]]);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), &array![[0.5, 0.5]]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), &array![[2.0]]);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros((2, 3)));
        let b = t.leaf(Matrix::zeros((2, 3)));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        let c = t.leaf(Matrix::zeros((1, 2)));
        assert!(matches!(t.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(t.add_row(a, c), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(t.outer_rows(a, c), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1e300]]);
        let y = t.leaf(array![[1e300]]);
        assert_eq!(t.matmul(x, y), Err(AutodiffError::NonFinite { op: "matmul" }));
    }

    #[test]
    fn detached_node_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let d = t.detach(x).unwrap();
        let s = t.add(x, d).unwrap();
        let m = t.mean(s).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), &array![[0.5, 0.5]]);
        assert_eq!(t.grad(d), &array![[0.0, 0.0]]);
    }

    #[test]
    fn outer_rows_layout() {
        let f = array![[1.0, 0.0]];
        let p = array![[0.5, 0.5]];
        assert_eq!(outer_rows(&f, &p), array![[0.5, 0.5, 0.0, 0.0]]);
    }
}
