//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records primitive operations in execution order; every
//! primitive has an exact adjoint rule, and [`Tape::backward`] accumulates
//! gradients in reverse topological order with a fixed accumulation order,
//! so identical tapes produce bitwise-identical gradients. Forward values
//! are NaN/Inf-trapped at every op.

use std::sync::Arc;

use thiserror::Error;

use crate::graph::Csr;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("op #{index} ({op}) produced a non-finite value")]
    NonFinite { op: &'static str, index: usize },
    #[error("kl_rows: input {side} row {row} is not a distribution ({detail})")]
    NotDistribution {
        side: &'static str,
        row: usize,
        detail: String,
    },
    #[error("backward: loss must be a 1x1 scalar, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },
    #[error("handle {0} is not on this tape")]
    InvalidHandle(usize),
    #[error("{op}: index {index} out of range ({bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("grad_check: eps must be positive, got {0}")]
    BadEps(f64),
    #[error("grad_check: non-finite value while perturbing parameter {0}")]
    GradCheckNonFinite(usize),
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Row-broadcast add: `b` is 1 x cols, added to every row of `a`.
    AddRow { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    /// Scale row i of `a` by entry i of the n x 1 tensor `s`.
    RowScale { a: usize, s: usize },
    Relu { a: usize },
    ClampMin { a: usize, c: f64 },
    ClampMax { a: usize, c: f64 },
    Log { a: usize },
    Exp { a: usize },
    Sum { a: usize },
    MeanRows { a: usize },
    SelectRows { a: usize, idx: Vec<usize> },
    SelectCols { a: usize, idx: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    NeighborMeanAgg { a: usize, adj: Arc<Csr> },
    CosineRows { a: usize, b: usize },
    KlRows { p: usize, q: usize },
    SoftmaxRows { a: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::RowScale { .. } => "row_scale",
            Op::Relu { .. } => "relu",
            Op::ClampMin { .. } => "clamp_min",
            Op::ClampMax { .. } => "clamp_max",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Sum { .. } => "sum",
            Op::MeanRows { .. } => "mean_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::NeighborMeanAgg { .. } => "neighbor_mean_aggregate",
            Op::CosineRows { .. } => "cosine_rows",
            Op::KlRows { .. } => "kl_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor handle.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, densified to zeros when the tensor does not
    /// influence the loss.
    pub fn dense(&self, id: TensorId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op) -> Result<TensorId, TapeError> {
        if !value.all_finite() {
            return Err(TapeError::NonFinite {
                op: op.name(),
                index: self.nodes.len(),
            });
        }
        Ok(self.push(value, op))
    }

    fn check(&self, id: TensorId, op: &'static str) -> Result<&Tensor, TapeError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(TapeError::InvalidHandle(id.0))
            .map_err(|e| {
                let _ = op;
                e
            })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "matmul")?, self.check(b, "matmul")?);
        if ta.cols() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let value = matmul(ta, tb);
        self.push_checked(value, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "add")?, self.check(b, "add")?);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        self.push_checked(value, Op::Add { a: a.0, b: b.0 })
    }

    /// `a + b` with `b` a 1 x cols row vector broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "add_row")?, self.check(b, "add_row")?);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = ta.clone();
        let brow = tb.data();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            for j in 0..row.len() {
                row[j] += brow[j];
            }
        }
        self.push_checked(value, Op::AddRow { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "sub")?, self.check(b, "sub")?);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = ta.clone();
        for (x, y) in value.data_mut().iter_mut().zip(tb.data()) {
            *x -= y;
        }
        self.push_checked(value, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "mul")?, self.check(b, "mul")?);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = ta.clone();
        for (x, y) in value.data_mut().iter_mut().zip(tb.data()) {
            *x *= y;
        }
        self.push_checked(value, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "scale")?;
        let mut value = ta.clone();
        value.scale_assign(c);
        self.push_checked(value, Op::Scale { a: a.0, c })
    }

    /// Scale row i of `a` by entry i of the n x 1 tensor `s`.
    pub fn row_scale(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TapeError> {
        let (ta, ts) = (self.check(a, "row_scale")?, self.check(s, "row_scale")?);
        if ts.cols() != 1 || ts.rows() != ta.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "row_scale",
                detail: format!("{:?} scaled by {:?}", ta.shape(), ts.shape()),
            });
        }
        let mut value = ta.clone();
        for i in 0..value.rows() {
            let c = ts.get(i, 0);
            for x in value.row_mut(i) {
                *x *= c;
            }
        }
        self.push_checked(value, Op::RowScale { a: a.0, s: s.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "relu")?;
        let mut value = ta.clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push_checked(value, Op::Relu { a: a.0 })
    }

    pub fn clamp_min(&mut self, a: TensorId, c: f64) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "clamp_min")?;
        let mut value = ta.clone();
        for x in value.data_mut() {
            if *x < c {
                *x = c;
            }
        }
        self.push_checked(value, Op::ClampMin { a: a.0, c })
    }

    pub fn clamp_max(&mut self, a: TensorId, c: f64) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "clamp_max")?;
        let mut value = ta.clone();
        for x in value.data_mut() {
            if *x > c {
                *x = c;
            }
        }
        self.push_checked(value, Op::ClampMax { a: a.0, c })
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "log")?;
        let mut value = ta.clone();
        for x in value.data_mut() {
            *x = x.ln();
        }
        self.push_checked(value, Op::Log { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "exp")?;
        let mut value = ta.clone();
        for x in value.data_mut() {
            *x = x.exp();
        }
        self.push_checked(value, Op::Exp { a: a.0 })
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "sum")?;
        let total: f64 = ta.data().iter().sum();
        self.push_checked(Tensor::scalar(total), Op::Sum { a: a.0 })
    }

    /// Column-wise mean over rows: n x m -> 1 x m.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "mean_rows")?;
        if ta.rows() == 0 {
            return Err(TapeError::ShapeMismatch {
                op: "mean_rows",
                detail: "empty input".into(),
            });
        }
        let n = ta.rows() as f64;
        let mut value = Tensor::zeros(1, ta.cols());
        for i in 0..ta.rows() {
            for (j, &x) in ta.row(i).iter().enumerate() {
                value.data_mut()[j] += x;
            }
        }
        value.scale_assign(1.0 / n);
        self.push_checked(value, Op::MeanRows { a: a.0 })
    }

    /// Gather rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "select_rows")?;
        for &i in idx {
            if i >= ta.rows() {
                return Err(TapeError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    bound: ta.rows(),
                });
            }
        }
        let mut value = Tensor::zeros(idx.len(), ta.cols());
        for (k, &i) in idx.iter().enumerate() {
            value.row_mut(k).copy_from_slice(ta.row(i));
        }
        self.push_checked(
            value,
            Op::SelectRows {
                a: a.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Gather columns by index, restricting the matrix to those dims.
    pub fn select_cols(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "select_cols")?;
        for &j in idx {
            if j >= ta.cols() {
                return Err(TapeError::IndexOutOfRange {
                    op: "select_cols",
                    index: j,
                    bound: ta.cols(),
                });
            }
        }
        let mut value = Tensor::zeros(ta.rows(), idx.len());
        for i in 0..ta.rows() {
            let src = ta.row(i);
            let dst = value.row_mut(i);
            for (k, &j) in idx.iter().enumerate() {
                dst[k] = src[j];
            }
        }
        self.push_checked(
            value,
            Op::SelectCols {
                a: a.0,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "concat_cols")?, self.check(b, "concat_cols")?);
        if ta.rows() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{:?} | {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for i in 0..ta.rows() {
            let dst = value.row_mut(i);
            dst[..ta.cols()].copy_from_slice(ta.row(i));
            dst[ta.cols()..].copy_from_slice(tb.row(i));
        }
        self.push_checked(value, Op::ConcatCols { a: a.0, b: b.0 })
    }

    /// Per-node mean over neighbor rows. Rows with no neighbors come out
    /// zero; the center node is never included.
    pub fn neighbor_mean_aggregate(
        &mut self,
        adj: &Arc<Csr>,
        h: TensorId,
    ) -> Result<TensorId, TapeError> {
        let th = self.check(h, "neighbor_mean_aggregate")?;
        if th.rows() != adj.n_nodes() {
            return Err(TapeError::ShapeMismatch {
                op: "neighbor_mean_aggregate",
                detail: format!(
                    "adjacency over {} nodes, features {:?}",
                    adj.n_nodes(),
                    th.shape()
                ),
            });
        }
        let value = aggregate_forward(adj, th);
        self.push_checked(
            value,
            Op::NeighborMeanAgg {
                a: h.0,
                adj: Arc::clone(adj),
            },
        )
    }

    /// Row-wise cosine similarity between corresponding rows: n x 1 output.
    /// Rows where either side has zero norm yield 0.
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ta, tb) = (self.check(a, "cosine_rows")?, self.check(b, "cosine_rows")?);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "cosine_rows",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut value = Tensor::zeros(ta.rows(), 1);
        for i in 0..ta.rows() {
            value.set(i, 0, cosine(ta.row(i), tb.row(i)));
        }
        self.push_checked(value, Op::CosineRows { a: a.0, b: b.0 })
    }

    /// Row-wise KL divergence KL(p_i || q_i): n x 1 output. Both inputs
    /// must be valid row distributions (entries >= 0, rows summing to 1
    /// within 1e-9); q may not vanish where p is positive.
    pub fn kl_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId, TapeError> {
        let (tp, tq) = (self.check(p, "kl_rows")?, self.check(q, "kl_rows")?);
        if tp.shape() != tq.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "kl_rows",
                detail: format!("{:?} vs {:?}", tp.shape(), tq.shape()),
            });
        }
        validate_distribution(tp, "p")?;
        validate_distribution(tq, "q")?;
        let mut value = Tensor::zeros(tp.rows(), 1);
        for i in 0..tp.rows() {
            let (prow, qrow) = (tp.row(i), tq.row(i));
            let mut acc = 0.0;
            for (j, (&pv, &qv)) in prow.iter().zip(qrow).enumerate() {
                if pv > 0.0 {
                    if qv <= 0.0 {
                        return Err(TapeError::NotDistribution {
                            side: "q",
                            row: i,
                            detail: format!("entry {j} is zero where p is positive"),
                        });
                    }
                    acc += pv * (pv.ln() - qv.ln());
                }
            }
            value.set(i, 0, acc);
        }
        self.push_checked(value, Op::KlRows { p: p.0, q: q.0 })
    }

    /// Numerically stable row softmax; output rows are positive and sum
    /// to 1 up to rounding.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TapeError> {
        let ta = self.check(a, "softmax_rows")?;
        if ta.cols() == 0 {
            return Err(TapeError::ShapeMismatch {
                op: "softmax_rows",
                detail: "zero columns".into(),
            });
        }
        let mut value = ta.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push_checked(value, Op::SoftmaxRows { a: a.0 })
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// tensor that influences the loss; the tape itself is untouched, so
    /// several backward passes can run against one recording.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TapeError> {
        let loss_value = self
            .nodes
            .get(loss.0)
            .map(|n| &n.value)
            .ok_or(TapeError::InvalidHandle(loss.0))?;
        if loss_value.shape() != (1, 1) {
            return Err(TapeError::LossNotScalar {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            self.apply_adjoint(idx, &adj, &mut adjoints);
            adjoints[idx] = Some(adj);
        }
        Ok(Gradients { grads: adjoints })
    }

    fn apply_adjoint(&self, idx: usize, adj: &Tensor, adjoints: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = matmul_nt(adj, &self.nodes[*b].value);
                let db = matmul_tn(&self.nodes[*a].value, adj);
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(adjoints, *a, adj.clone());
                accumulate(adjoints, *b, adj.clone());
            }
            Op::AddRow { a, b } => {
                accumulate(adjoints, *a, adj.clone());
                let mut db = Tensor::zeros(1, adj.cols());
                for i in 0..adj.rows() {
                    for (j, &g) in adj.row(i).iter().enumerate() {
                        db.data_mut()[j] += g;
                    }
                }
                accumulate(adjoints, *b, db);
            }
            Op::Sub { a, b } => {
                accumulate(adjoints, *a, adj.clone());
                let mut db = adj.clone();
                db.scale_assign(-1.0);
                accumulate(adjoints, *b, db);
            }
            Op::Mul { a, b } => {
                let mut da = adj.clone();
                for (x, y) in da.data_mut().iter_mut().zip(self.nodes[*b].value.data()) {
                    *x *= y;
                }
                let mut db = adj.clone();
                for (x, y) in db.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                    *x *= y;
                }
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, db);
            }
            Op::Scale { a, c } => {
                let mut da = adj.clone();
                da.scale_assign(*c);
                accumulate(adjoints, *a, da);
            }
            Op::RowScale { a, s } => {
                let ts = &self.nodes[*s].value;
                let ta = &self.nodes[*a].value;
                let mut da = adj.clone();
                let mut ds = Tensor::zeros(ts.rows(), 1);
                for i in 0..da.rows() {
                    let c = ts.get(i, 0);
                    let mut dot = 0.0;
                    for (x, &orig) in da.row_mut(i).iter_mut().zip(ta.row(i)) {
                        dot += *x * orig;
                        *x *= c;
                    }
                    ds.set(i, 0, dot);
                }
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *s, ds);
            }
            Op::Relu { a } => {
                let ta = &self.nodes[*a].value;
                let mut da = adj.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::ClampMin { a, c } => {
                let ta = &self.nodes[*a].value;
                let mut da = adj.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    if x < *c {
                        *g = 0.0;
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::ClampMax { a, c } => {
                let ta = &self.nodes[*a].value;
                let mut da = adj.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    if x > *c {
                        *g = 0.0;
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::Log { a } => {
                let ta = &self.nodes[*a].value;
                let mut da = adj.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    *g /= x;
                }
                accumulate(adjoints, *a, da);
            }
            Op::Exp { a } => {
                let out = &node.value;
                let mut da = adj.clone();
                for (g, &y) in da.data_mut().iter_mut().zip(out.data()) {
                    *g *= y;
                }
                accumulate(adjoints, *a, da);
            }
            Op::Sum { a } => {
                let ta = &self.nodes[*a].value;
                let da = Tensor::full(ta.rows(), ta.cols(), adj.item());
                accumulate(adjoints, *a, da);
            }
            Op::MeanRows { a } => {
                let ta = &self.nodes[*a].value;
                let inv = 1.0 / ta.rows() as f64;
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for i in 0..ta.rows() {
                    for (j, g) in da.row_mut(i).iter_mut().enumerate() {
                        *g = adj.get(0, j) * inv;
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::SelectRows { a, idx } => {
                let ta = &self.nodes[*a].value;
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in idx.iter().enumerate() {
                    let src = adj.row(k);
                    let dst = da.row_mut(i);
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::SelectCols { a, idx } => {
                let ta = &self.nodes[*a].value;
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for i in 0..adj.rows() {
                    let src = adj.row(i);
                    let dst = da.row_mut(i);
                    for (k, &j) in idx.iter().enumerate() {
                        dst[j] += src[k];
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                let rows = adj.rows();
                let mut da = Tensor::zeros(rows, ca);
                let mut db = Tensor::zeros(rows, cb);
                for i in 0..rows {
                    let src = adj.row(i);
                    da.row_mut(i).copy_from_slice(&src[..ca]);
                    db.row_mut(i).copy_from_slice(&src[ca..]);
                }
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, db);
            }
            Op::NeighborMeanAgg { a, adj: csr } => {
                let ta = &self.nodes[*a].value;
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for v in 0..csr.n_nodes() {
                    let nbrs = csr.neighbors(v);
                    if nbrs.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / nbrs.len() as f64;
                    let g_row = adj.row(v);
                    for &u in nbrs {
                        let dst = da.row_mut(u);
                        for (d, &g) in dst.iter_mut().zip(g_row) {
                            *d += g * inv;
                        }
                    }
                }
                accumulate(adjoints, *a, da);
            }
            Op::CosineRows { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                let mut db = Tensor::zeros(tb.rows(), tb.cols());
                for i in 0..ta.rows() {
                    let g = adj.get(i, 0);
                    if g == 0.0 {
                        continue;
                    }
                    let (ra, rb) = (ta.row(i), tb.row(i));
                    let na = norm(ra);
                    let nb = norm(rb);
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let c = dot / (na * nb);
                    let (dra, drb) = (da.row_mut(i), db.row_mut(i));
                    for j in 0..ra.len() {
                        dra[j] += g * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        drb[j] += g * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                accumulate(adjoints, *a, da);
                accumulate(adjoints, *b, db);
            }
            Op::KlRows { p, q } => {
                let (tp, tq) = (&self.nodes[*p].value, &self.nodes[*q].value);
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                let mut dq = Tensor::zeros(tq.rows(), tq.cols());
                for i in 0..tp.rows() {
                    let g = adj.get(i, 0);
                    if g == 0.0 {
                        continue;
                    }
                    let (rp, rq) = (tp.row(i), tq.row(i));
                    let (drp, drq) = (dp.row_mut(i), dq.row_mut(i));
                    for j in 0..rp.len() {
                        if rp[j] > 0.0 {
                            drp[j] += g * (rp[j].ln() - rq[j].ln() + 1.0);
                            drq[j] += g * (-rp[j] / rq[j]);
                        }
                    }
                }
                accumulate(adjoints, *p, dp);
                accumulate(adjoints, *q, dq);
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), adj.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(adjoints, *a, da);
            }
        }
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut adjoints[id] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn aggregate_forward(adj: &Csr, h: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(h.rows(), h.cols());
    for v in 0..adj.n_nodes() {
        let nbrs = adj.neighbors(v);
        if nbrs.is_empty() {
            continue;
        }
        let inv = 1.0 / nbrs.len() as f64;
        let dst = out.row_mut(v);
        for &u in nbrs {
            for (d, &x) in dst.iter_mut().zip(h.row(u)) {
                *d += x;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Outcome of a finite-difference gradient check for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must register one leaf per entry of `params` (in order) and
/// return the scalar loss. The relative error per entry is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TapeError>,
{
    if eps <= 0.0 {
        return Err(TapeError::BadEps(eps));
    }
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<TensorId>, TensorId), TapeError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).shape() != (1, 1) {
            let (r, c) = tape.value(loss).shape();
            return Err(TapeError::LossNotScalar { rows: r, cols: c });
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(params)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.dense(ids[pi], param.rows(), param.cols());
        let mut max_rel: f64 = 0.0;
        for e in 0..param.len() {
            let orig = param.data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let (tape_p, _, loss_p) = eval(&work)?;
            let f_plus = tape_p.value(loss_p).item();
            work[pi].data_mut()[e] = orig - eps;
            let (tape_m, _, loss_m) = eval(&work)?;
            let f_minus = tape_m.value(loss_m).item();
            work[pi].data_mut()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TapeError::GradCheckNonFinite(pi));
            }
            let rel = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        per_param.push(ParamCheck {
            param: pi,
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error: overall,
        passed: overall < tol,
    })
}

fn validate_distribution(t: &Tensor, side: &'static str) -> Result<(), TapeError> {
    for i in 0..t.rows() {
        let mut sum = 0.0;
        for (j, &x) in t.row(i).iter().enumerate() {
            if x < 0.0 {
                return Err(TapeError::NotDistribution {
                    side,
                    row: i,
                    detail: format!("negative entry {x} at column {j}"),
                });
            }
            sum += x;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TapeError::NotDistribution {
                side,
                row: i,
                detail: format!("row sums to {sum}"),
            });
        }
    }
    Ok(())
}
