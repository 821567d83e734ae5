//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every forward operation appends one node holding its output value and an
//! op record (kind, input ids, whatever the backward rule needs). Node ids
//! are assigned in construction order, so inputs always precede outputs and
//! a single reverse sweep over indices visits each node exactly once.
//! `backward` is non-destructive: it returns the gradient table and leaves
//! the tape reusable for reading forward values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value copied from another node; gradients stop here.
    Detach,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Elementwise product with a fixed tensor (dropout masks, fixed
    /// position-relevance vectors).
    MulConst(VarId, Tensor),
    Scale(VarId, f64),
    OneMinus(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    MatMul(VarId, VarId),
    /// a · bᵀ, with b stored row-major as [m x k].
    MatMulTransB(VarId, VarId),
    /// Matrix [a x b] times vector [b] -> [a].
    MatVec(VarId, VarId),
    /// Row vector [n] times matrix [n x k] -> [k]; a weighted sum of rows.
    VecMat(VarId, VarId),
    /// out[i][j] = u[i] + v[j].
    OuterSum(VarId, VarId),
    Concat(VarId, VarId),
    Slice {
        x: VarId,
        start: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
    },
    Row {
        x: VarId,
        index: usize,
    },
    StackRows(Vec<VarId>),
    /// Add a vector [c] to every row of a matrix [r x c].
    AddRowBroadcast(VarId, VarId),
    /// Add a scalar (shape [1]) to every entry.
    AddScalarBroadcast(VarId, VarId),
    Mean(VarId),
    SumSquares(VarId),
    MeanScalars(Vec<VarId>),
    SqEuclidean(VarId, VarId),
    /// max(0, margin - x) on a scalar; the subgradient at the kink is 0.
    HingeMargin {
        x: VarId,
        margin: f64,
    },
    MaskedSoftmax {
        x: VarId,
        mask: Vec<bool>,
    },
    /// Row-wise masked softmax over columns of a matrix.
    SoftmaxRowsMasked {
        x: VarId,
        mask: Vec<bool>,
    },
    /// Mean over the unmasked rows of a matrix -> vector [cols].
    MeanRowsMasked {
        x: VarId,
        mask: Vec<bool>,
    },
    /// p[i] = sum_j (1 - |i-j|/n) * beta[j], computed in O(n) via prefix
    /// sums. The implied coefficient matrix is symmetric, so the backward
    /// rule reuses the same kernel.
    PositionFromAttention(VarId),
    EmbedRows {
        table: VarId,
        ids: Vec<usize>,
    },
    /// Cross-entropy of a logit vector against one gold index, with
    /// max-subtracted log-sum-exp.
    CrossEntropy {
        logits: VarId,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by `Tape::backward`. Nodes never reached by the
/// sweep (no path to the loss) have no entry.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient for a node, densified to zeros when the node is unreachable.
    pub fn dense(&self, id: VarId, shape: &[usize]) -> Tensor {
        match &self.by_node[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn dim_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn item(&self, id: VarId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters).
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    /// Non-differentiable input. Identical to a leaf except in intent; the
    /// caller simply never reads its gradient.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    /// Copy of a node's value with the gradient path severed.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn mul_const(&mut self, a: VarId, c: &Tensor) -> Result<VarId> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(dim_err("mul_const", ta, c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c.clone())))
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> VarId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| k * x).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, k))
    }

    pub fn one_minus(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| 1.0 - x).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| sigmoid(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let a_il = ta.at(i, l);
                for j in 0..m {
                    data[i * m + j] += a_il * tb.at(l, j);
                }
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_transb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(dim_err("matmul_transb", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += ta.at(i, l) * tb.at(j, l);
                }
                data[i * m + j] = acc;
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(out, Op::MatMulTransB(a, b)))
    }

    pub fn matvec(&mut self, m: VarId, v: VarId) -> Result<VarId> {
        let (tm, tv) = (self.value(m), self.value(v));
        if !tm.is_matrix() || tv.shape().len() != 1 || tm.cols() != tv.len() {
            return Err(dim_err("matvec", tm, tv));
        }
        let rows = tm.rows();
        let mut data = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for (j, x) in tv.data().iter().enumerate() {
                acc += tm.at(i, j) * x;
            }
            data[i] = acc;
        }
        Ok(self.push(Tensor::vector(data), Op::MatVec(m, v)))
    }

    pub fn vecmat(&mut self, v: VarId, m: VarId) -> Result<VarId> {
        let (tv, tm) = (self.value(v), self.value(m));
        if !tm.is_matrix() || tv.shape().len() != 1 || tm.rows() != tv.len() {
            return Err(dim_err("vecmat", tv, tm));
        }
        let cols = tm.cols();
        let mut data = vec![0.0; cols];
        for (i, w) in tv.data().iter().enumerate() {
            for j in 0..cols {
                data[j] += w * tm.at(i, j);
            }
        }
        Ok(self.push(Tensor::vector(data), Op::VecMat(v, m)))
    }

    pub fn outer_sum(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape().len() != 1 || tv.shape().len() != 1 {
            return Err(dim_err("outer_sum", tu, tv));
        }
        let (n, m) = (tu.len(), tv.len());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = tu.data()[i] + tv.data()[j];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(out, Op::OuterSum(u, v)))
    }

    pub fn concat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(dim_err("concat", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        Ok(self.push(Tensor::vector(data), Op::Concat(a, b)))
    }

    pub fn slice(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || start + len > tx.len() {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                size: tx.len(),
            });
        }
        let data = tx.data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice { x, start }))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let tx = self.value(x);
        if !tx.is_matrix() || start + len > tx.cols() {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                size: if tx.is_matrix() { tx.cols() } else { 0 },
            });
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn row(&mut self, x: VarId, index: usize) -> Result<VarId> {
        let tx = self.value(x);
        if !tx.is_matrix() || index >= tx.rows() {
            return Err(Error::Index {
                op: "row",
                index,
                size: if tx.is_matrix() { tx.rows() } else { 0 },
            });
        }
        let data = tx.row(index).to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row { x, index }))
    }

    pub fn stack_rows(&mut self, rows: &[VarId]) -> Result<VarId> {
        if rows.is_empty() {
            return Err(Error::Validation("stack_rows: no rows".into()));
        }
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let tr = self.value(r);
            if tr.shape().len() != 1 || tr.len() != cols {
                return Err(Error::Validation(format!(
                    "stack_rows: row shape {:?} does not match width {cols}",
                    tr.shape()
                )));
            }
            data.extend_from_slice(tr.data());
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    pub fn add_row_broadcast(&mut self, m: VarId, v: VarId) -> Result<VarId> {
        let (tm, tv) = (self.value(m), self.value(v));
        if !tm.is_matrix() || tv.shape().len() != 1 || tm.cols() != tv.len() {
            return Err(dim_err("add_row_broadcast", tm, tv));
        }
        let (rows, cols) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(tm.at(i, j) + tv.data()[j]);
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::AddRowBroadcast(m, v)))
    }

    pub fn add_scalar_broadcast(&mut self, m: VarId, s: VarId) -> Result<VarId> {
        let (tm, ts) = (self.value(m), self.value(s));
        if !ts.is_scalar() {
            return Err(dim_err("add_scalar_broadcast", tm, ts));
        }
        let k = ts.item();
        let data = tm.data().iter().map(|x| x + k).collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddScalarBroadcast(m, s)))
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum_squares(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let s = tx.data().iter().map(|v| v * v).sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn mean_scalars(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Validation("mean_scalars: no inputs".into()));
        }
        let mut acc = 0.0;
        for &x in xs {
            let tx = self.value(x);
            if !tx.is_scalar() {
                return Err(Error::Validation(format!(
                    "mean_scalars: input shape {:?} is not scalar",
                    tx.shape()
                )));
            }
            acc += tx.item();
        }
        let m = acc / xs.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanScalars(xs.to_vec())))
    }

    pub fn sq_euclidean(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape() != tv.shape() {
            return Err(dim_err("sq_euclidean", tu, tv));
        }
        let d = tu
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        Ok(self.push(Tensor::scalar(d), Op::SqEuclidean(u, v)))
    }

    pub fn hinge_margin(&mut self, x: VarId, margin: f64) -> Result<VarId> {
        let tx = self.value(x);
        if !tx.is_scalar() {
            return Err(Error::Validation(format!(
                "hinge_margin: input shape {:?} is not scalar",
                tx.shape()
            )));
        }
        let v = (margin - tx.item()).max(0.0);
        Ok(self.push(Tensor::scalar(v), Op::HingeMargin { x, margin }))
    }

    /// Numerically stable softmax over the unmasked entries of a vector.
    /// Masked entries come out exactly 0; at least one entry must be
    /// unmasked.
    pub fn masked_softmax(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let tx = self.value(x);
        if tx.shape().len() != 1 || tx.len() != mask.len() {
            return Err(Error::Validation(format!(
                "masked_softmax: logits shape {:?} vs mask length {}",
                tx.shape(),
                mask.len()
            )));
        }
        let data = masked_softmax_values(tx.data(), mask)?;
        Ok(self.push(
            Tensor::vector(data),
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Masked softmax applied independently to every row of a matrix. The
    /// column mask is shared across rows.
    pub fn softmax_rows_masked(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let tx = self.value(x);
        if !tx.is_matrix() || tx.cols() != mask.len() {
            return Err(Error::Validation(format!(
                "softmax_rows_masked: matrix shape {:?} vs mask length {}",
                tx.shape(),
                mask.len()
            )));
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&masked_softmax_values(tx.row(i), mask)?);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(
            out,
            Op::SoftmaxRowsMasked {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn mean_rows_masked(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let tx = self.value(x);
        if !tx.is_matrix() || tx.rows() != mask.len() {
            return Err(Error::Validation(format!(
                "mean_rows_masked: matrix shape {:?} vs mask length {}",
                tx.shape(),
                mask.len()
            )));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 {
            return Err(Error::Domain("mean_rows_masked: all rows masked".into()));
        }
        let cols = tx.cols();
        let mut data = vec![0.0; cols];
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                for j in 0..cols {
                    data[j] += tx.at(i, j);
                }
            }
        }
        for d in &mut data {
            *d /= kept as f64;
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::MeanRowsMasked {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Position relevance induced by an attention distribution:
    /// p[i] = sum_j (1 - |i-j|/n) beta[j]. Validates that beta is normalized
    /// (|sum - 1| <= 1e-8). Computed without materializing the n x n
    /// coefficient matrix.
    pub fn position_from_attention(&mut self, beta: VarId) -> Result<VarId> {
        let tb = self.value(beta);
        if tb.shape().len() != 1 {
            return Err(Error::Validation(format!(
                "position_from_attention: expected vector, got {:?}",
                tb.shape()
            )));
        }
        let sum: f64 = tb.data().iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::Validation(format!(
                "position_from_attention: attention weights sum to {sum}, expected 1"
            )));
        }
        let data = distance_discounted_sum(tb.data());
        Ok(self.push(Tensor::vector(data), Op::PositionFromAttention(beta)))
    }

    pub fn embed_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tt = self.value(table);
        if !tt.is_matrix() {
            return Err(Error::Validation(format!(
                "embed_rows: table shape {:?} is not a matrix",
                tt.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Validation("embed_rows: empty id list".into()));
        }
        let (vocab, dim) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embed_rows",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::matrix(ids.len(), dim, data)?;
        Ok(self.push(
            out,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let tl = self.value(logits);
        if tl.shape().len() != 1 {
            return Err(Error::Validation(format!(
                "cross_entropy: logits shape {:?} is not a vector",
                tl.shape()
            )));
        }
        if label >= tl.len() {
            return Err(Error::Index {
                op: "cross_entropy",
                index: label,
                size: tl.len(),
            });
        }
        let x = tl.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = lse - x[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// Reverse sweep seeding d(loss)/d(loss) = 1. The loss must be scalar
    /// and finite.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(Error::Validation(format!(
                "backward: loss shape {:?} is not scalar",
                tl.shape()
            )));
        }
        if !tl.item().is_finite() {
            return Err(Error::Domain(format!(
                "backward: loss is not finite ({})",
                tl.item()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let d_out = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &d_out, &mut grads);
            grads[idx] = Some(d_out);
        }

        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { by_node })
    }

    fn backprop_node(&self, idx: usize, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Vec<f64>>], id: VarId, f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[id.0].value.len()]);
            }
            f(slot.as_mut().unwrap());
        };

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += d;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += d;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += d_out[i] * tb.data()[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += d_out[i] * ta.data()[i];
                    }
                });
            }
            Op::MulConst(a, c) => {
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += d_out[i] * c.data()[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += k * d;
                    }
                });
            }
            Op::OneMinus(a) => {
                acc(grads, *a, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi -= d;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        let yi = y.data()[i];
                        g[i] += d_out[i] * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        let yi = y.data()[i];
                        g[i] += d_out[i] * yi * (1.0 - yi);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(grads, *a, &mut |g| {
                    for i in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += d_out[i * m + j] * tb.at(l, j);
                            }
                            g[i * k + l] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |g| {
                    for l in 0..k {
                        for j in 0..m {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += ta.at(i, l) * d_out[i * m + j];
                            }
                            g[l * m + j] += s;
                        }
                    }
                });
            }
            Op::MatMulTransB(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                acc(grads, *a, &mut |g| {
                    for i in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += d_out[i * m + j] * tb.at(j, l);
                            }
                            g[i * k + l] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |g| {
                    for j in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += d_out[i * m + j] * ta.at(i, l);
                            }
                            g[j * k + l] += s;
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let (rows, cols) = (tm.rows(), tm.cols());
                acc(grads, *m, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] += d_out[i] * tv.data()[j];
                        }
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += tm.at(i, j) * d_out[i];
                        }
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (tv, tm) = (self.value(*v), self.value(*m));
                let (rows, cols) = (tm.rows(), tm.cols());
                acc(grads, *v, &mut |g| {
                    for i in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += tm.at(i, j) * d_out[j];
                        }
                        g[i] += s;
                    }
                });
                acc(grads, *m, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] += tv.data()[i] * d_out[j];
                        }
                    }
                });
            }
            Op::OuterSum(u, v) => {
                let (nu, nv) = (self.value(*u).len(), self.value(*v).len());
                acc(grads, *u, &mut |g| {
                    for i in 0..nu {
                        for j in 0..nv {
                            g[i] += d_out[i * nv + j];
                        }
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..nu {
                        for j in 0..nv {
                            g[j] += d_out[i * nv + j];
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                acc(grads, *a, &mut |g| {
                    for i in 0..na {
                        g[i] += d_out[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += d_out[na + i];
                    }
                });
            }
            Op::Slice { x, start } => {
                acc(grads, *x, &mut |g| {
                    for (i, d) in d_out.iter().enumerate() {
                        g[start + i] += d;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let out_cols = node.value.cols();
                let rows = node.value.rows();
                acc(grads, *x, &mut |g| {
                    for i in 0..rows {
                        for j in 0..out_cols {
                            g[i * cols + start + j] += d_out[i * out_cols + j];
                        }
                    }
                });
            }
            Op::Row { x, index } => {
                let cols = self.value(*x).cols();
                acc(grads, *x, &mut |g| {
                    for (j, d) in d_out.iter().enumerate() {
                        g[index * cols + j] += d;
                    }
                });
            }
            Op::StackRows(rows) => {
                let cols = node.value.cols();
                for (i, &r) in rows.iter().enumerate() {
                    acc(grads, r, &mut |g| {
                        for j in 0..cols {
                            g[j] += d_out[i * cols + j];
                        }
                    });
                }
            }
            Op::AddRowBroadcast(m, v) => {
                let (rows, cols) = {
                    let t = &node.value;
                    (t.rows(), t.cols())
                };
                acc(grads, *m, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += d;
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j] += d_out[i * cols + j];
                        }
                    }
                });
            }
            Op::AddScalarBroadcast(m, s) => {
                acc(grads, *m, &mut |g| {
                    for (gi, d) in g.iter_mut().zip(d_out) {
                        *gi += d;
                    }
                });
                acc(grads, *s, &mut |g| {
                    g[0] += d_out.iter().sum::<f64>();
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(grads, *x, &mut |g| {
                    let d = d_out[0] / n;
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::SumSquares(x) => {
                let tx = self.value(*x);
                acc(grads, *x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * tx.data()[i] * d_out[0];
                    }
                });
            }
            Op::MeanScalars(xs) => {
                let d = d_out[0] / xs.len() as f64;
                for &x in xs {
                    acc(grads, x, &mut |g| {
                        g[0] += d;
                    });
                }
            }
            Op::SqEuclidean(u, v) => {
                let (tu, tv) = (self.value(*u), self.value(*v));
                acc(grads, *u, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * (tu.data()[i] - tv.data()[i]) * d_out[0];
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..g.len() {
                        g[i] -= 2.0 * (tu.data()[i] - tv.data()[i]) * d_out[0];
                    }
                });
            }
            Op::HingeMargin { x, margin } => {
                let active = *margin - self.value(*x).item() > 0.0;
                acc(grads, *x, &mut |g| {
                    if active {
                        g[0] -= d_out[0];
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = node.value.data();
                acc(grads, *x, &mut |g| {
                    softmax_backward_into(y, d_out, mask, g);
                });
            }
            Op::SoftmaxRowsMasked { x, mask } => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                acc(grads, *x, &mut |g| {
                    for i in 0..rows {
                        let lo = i * cols;
                        softmax_backward_into(
                            &y.data()[lo..lo + cols],
                            &d_out[lo..lo + cols],
                            mask,
                            &mut g[lo..lo + cols],
                        );
                    }
                });
            }
            Op::MeanRowsMasked { x, mask } => {
                let kept = mask.iter().filter(|&&m| m).count() as f64;
                let cols = node.value.len();
                acc(grads, *x, &mut |g| {
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            for j in 0..cols {
                                g[i * cols + j] += d_out[j] / kept;
                            }
                        }
                    }
                });
            }
            Op::PositionFromAttention(beta) => {
                // The coefficient matrix is symmetric: apply the same kernel
                // to the incoming gradient.
                let back = distance_discounted_sum(d_out);
                acc(grads, *beta, &mut |g| {
                    for (gi, b) in g.iter_mut().zip(&back) {
                        *gi += b;
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let dim = node.value.cols();
                acc(grads, *table, &mut |g| {
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            g[id * dim + j] += d_out[pos * dim + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, label } => {
                let tl = self.value(*logits);
                let x = tl.data();
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                acc(grads, *logits, &mut |g| {
                    for i in 0..g.len() {
                        let p = exps[i] / z;
                        let onehot = if i == *label { 1.0 } else { 0.0 };
                        g[i] += (p - onehot) * d_out[0];
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax_values(x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in x.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "masked_softmax: every position is masked".into(),
        ));
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            let e = (x[i] - max).exp();
            out[i] = e;
            z += e;
        }
    }
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// dL/dx for softmax output y given dL/dy, written into `g` (accumulating).
fn softmax_backward_into(y: &[f64], d_out: &[f64], mask: &[bool], g: &mut [f64]) {
    let dot: f64 = y
        .iter()
        .zip(d_out)
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|((yi, di), _)| yi * di)
        .sum();
    for i in 0..g.len() {
        if mask[i] {
            g[i] += y[i] * (d_out[i] - dot);
        }
    }
}

/// out[i] = sum_j (1 - |i-j|/n) x[j] in O(n) using prefix sums:
/// sum_j |i-j| x[j] = i*A(i) - B(i) + (C - B(i)... ) split at j <= i.
fn distance_discounted_sum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    // prefix[i] = sum_{j<i} x[j], wprefix[i] = sum_{j<i} j*x[j]
    let mut prefix = vec![0.0; n + 1];
    let mut wprefix = vec![0.0; n + 1];
    for j in 0..n {
        prefix[j + 1] = prefix[j] + x[j];
        wprefix[j + 1] = wprefix[j] + j as f64 * x[j];
    }
    let total = prefix[n];
    let wtotal = wprefix[n];
    let mut out = vec![0.0; n];
    for i in 0..n {
        let fi = i as f64;
        // sum_{j<=i} (i-j) x[j] + sum_{j>i} (j-i) x[j]
        let left = fi * prefix[i + 1] - wprefix[i + 1];
        let right = (wtotal - wprefix[i + 1]) - fi * (total - prefix[i + 1]);
        out[i] = total - (left + right) / nf;
    }
    out
}
