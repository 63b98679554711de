//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation evaluates immediately and records itself, with the
//! metadata its vector-Jacobian product needs, into a growing arena of
//! nodes. [`Tape::backward`] replays the arena once in reverse creation
//! order, which is a valid topological order because an op can only refer
//! to nodes that already existed. All reductions run in fixed index
//! order, so gradients are bit-reproducible across runs.
//!
//! The op set is deliberately small and fused where the fusion buys
//! numerical stability (cross entropy via log-sum-exp, BCE on logits) or
//! avoids materializing large intermediates (layer norm).

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    NeedMatrix {
        op: &'static str,
    },
    NeedScalar {
        op: &'static str,
    },
    SliceOutOfRange {
        op: &'static str,
        lo: usize,
        hi: usize,
        extent: usize,
    },
    RowOutOfRange {
        op: &'static str,
        row: usize,
        rows: usize,
    },
    ClassOutOfRange {
        class: usize,
        classes: usize,
    },
    MaskedRowEmpty {
        row: usize,
    },
    NonFiniteSoftmax {
        row: usize,
    },
    EmptySelection {
        op: &'static str,
    },
    BackwardFromNonScalar,
}

impl core::fmt::Display for TapeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TapeError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TapeError::NeedMatrix { op } => write!(f, "{op}: operand must be rank 2"),
            TapeError::NeedScalar { op } => write!(f, "{op}: operand must be a scalar"),
            TapeError::SliceOutOfRange { op, lo, hi, extent } => {
                write!(f, "{op}: slice {lo}..{hi} exceeds extent {extent}")
            }
            TapeError::RowOutOfRange { op, row, rows } => {
                write!(f, "{op}: row {row} out of range for {rows} rows")
            }
            TapeError::ClassOutOfRange { class, classes } => {
                write!(f, "class index {class} out of range for {classes} classes")
            }
            TapeError::MaskedRowEmpty { row } => {
                write!(f, "softmax mask leaves row {row} with no allowed entries")
            }
            TapeError::NonFiniteSoftmax { row } => {
                write!(f, "softmax over non-finite scores in row {row}")
            }
            TapeError::EmptySelection { op } => write!(f, "{op}: empty selection"),
            TapeError::BackwardFromNonScalar => {
                write!(f, "backward must start from a scalar node")
            }
        }
    }
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

// ─── recorded operations ───

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddConst(TensorId),
    /// Broadcast-add a length-`n` bias to every row of an `m x n` matrix.
    AddBias(TensorId, TensorId),
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a (m x k) . b^T (n x k)` without materializing the transpose.
    MatMulNt {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    /// Clamp to [0, 1]; gradient passes through inside the interval.
    Clamp01(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row-wise softmax; `allowed` (same shape, row-major) zeroes out
    /// disallowed entries as if their logits were negative infinity.
    SoftmaxRows {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        x: TensorId,
        lo: usize,
        cols: usize,
    },
    SliceCols {
        x: TensorId,
        lo: usize,
        taken: usize,
        parent_cols: usize,
        rows: usize,
    },
    ConcatRows {
        parts: Vec<TensorId>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<TensorId>,
        widths: Vec<usize>,
        rows: usize,
    },
    /// Gather rows of `table` by index; backward scatter-adds.
    Embed {
        table: TensorId,
        ids: Vec<usize>,
        cols: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    /// Sum of the elementwise product of two same-shape tensors.
    Dot(TensorId, TensorId),
    DivScalar(TensorId, TensorId),
    /// Weighted sum of scalar nodes.
    WeightedSum {
        parts: Vec<TensorId>,
        weights: Vec<f64>,
    },
    /// Mean cross entropy over selected (row, class) pairs of a logit
    /// matrix, divided by an arbitrary positive divisor. Saves the
    /// softmax of each selected row for the backward pass.
    CeMean {
        logits: TensorId,
        pairs: Vec<(usize, usize)>,
        divisor: f64,
        probs: Vec<f64>,
        cols: usize,
    },
    /// Mean of `max(x,0) - x*y + ln(1 + e^(-|x|))` over all elements.
    BceWithLogitsMean {
        logits: TensorId,
        targets: Vec<f64>,
    },
    /// Mean squared error against a constant target.
    MseVs {
        x: TensorId,
        target: Vec<f64>,
    },
    /// Forward takes the replacement values; backward passes gradients
    /// through to the parent unchanged.
    StraightThrough(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eager autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Record a leaf. Gradients are tracked only if the tensor was marked
    /// with [`Tensor::with_grad`].
    pub fn input(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Record a constant leaf regardless of the tensor's grad flag.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> TapeResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> TapeResult<(usize, usize)> {
        self.nodes[id.0]
            .value
            .dims2()
            .map_err(|_| TapeError::NeedMatrix { op })
    }

    // ─── elementwise and scalar ops ───

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Add(a, b),
            needs,
        ))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Sub(a, b),
            needs,
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Mul(a, b),
            needs,
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::AddConst(a),
            needs,
        )
    }

    /// Add a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, mat: TensorId, bias: TensorId) -> TapeResult<TensorId> {
        let (m, n) = self.dims2("add_bias", mat)?;
        if self.shape(bias) != [n] {
            return Err(TapeError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(mat).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        {
            let md = self.data(mat);
            let bd = self.data(bias);
            for r in 0..m {
                for (x, b) in md[r * n..(r + 1) * n].iter().zip(bd) {
                    data.push(x + b);
                }
            }
        }
        let needs = self.needs(mat) || self.needs(bias);
        Ok(self.push(
            Tensor::from_vec(&[m, n], data).unwrap(),
            Op::AddBias(mat, bias),
            needs,
        ))
    }

    // ─── matrix products ───

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm(self.data(a), self.data(b), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::MatMul { a, b, m, k: ka, n },
            needs,
        ))
    }

    /// `a . b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.data(a), self.data(b), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::MatMulNt { a, b, m, k: ka, n },
            needs,
        ))
    }

    // ─── activations ───

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Sigmoid(a), needs)
    }

    pub fn clamp01(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| fmath::min(fmath::max(x, 0.0), 1.0))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Clamp01(a), needs)
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TapeError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let is = 1.0 / fmath::sqrt(var + eps);
                inv_std[r] = is;
                for c in 0..cols {
                    let xh = (row[c] - mean) * is;
                    xhat[r * cols + c] = xh;
                    out[r * cols + c] = gd[c] * xh + bd[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&[rows, cols], out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Row-wise softmax. With a mask, entries where `allowed` is false are
    /// treated as logits of negative infinity and get probability zero;
    /// each row must keep at least one allowed entry.
    pub fn softmax_rows(
        &mut self,
        x: TensorId,
        allowed: Option<&[bool]>,
    ) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("softmax_rows", x)?;
        if let Some(mask) = allowed {
            if mask.len() != rows * cols {
                return Err(TapeError::ShapeMismatch {
                    op: "softmax_rows",
                    left: vec![rows, cols],
                    right: vec![mask.len()],
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        {
            let xd = self.data(x);
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mrow = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
                let mut mx = f64::NEG_INFINITY;
                let mut any_allowed = false;
                let mut all_finite = true;
                for c in 0..cols {
                    if mrow.is_none_or(|m| m[c]) {
                        any_allowed = true;
                        all_finite &= row[c].is_finite();
                        if row[c] > mx {
                            mx = row[c];
                        }
                    }
                }
                if !any_allowed {
                    return Err(TapeError::MaskedRowEmpty { row: r });
                }
                if !all_finite {
                    return Err(TapeError::NonFiniteSoftmax { row: r });
                }
                let mut sum = 0.0;
                for c in 0..cols {
                    if mrow.is_none_or(|m| m[c]) {
                        let e = fmath::exp(row[c] - mx);
                        out[r * cols + c] = e;
                        sum += e;
                    }
                }
                for c in 0..cols {
                    out[r * cols + c] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[rows, cols], out).unwrap(),
            Op::SoftmaxRows { x, rows, cols },
            needs,
        ))
    }

    // ─── shape surgery ───

    pub fn slice_rows(&mut self, x: TensorId, lo: usize, hi: usize) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("slice_rows", x)?;
        if lo >= hi || hi > rows {
            return Err(TapeError::SliceOutOfRange {
                op: "slice_rows",
                lo,
                hi,
                extent: rows,
            });
        }
        let data = self.data(x)[lo * cols..hi * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[hi - lo, cols], data).unwrap(),
            Op::SliceRows { x, lo, cols },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, lo: usize, hi: usize) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if lo >= hi || hi > cols {
            return Err(TapeError::SliceOutOfRange {
                op: "slice_cols",
                lo,
                hi,
                extent: cols,
            });
        }
        let taken = hi - lo;
        let mut data = Vec::with_capacity(rows * taken);
        {
            let xd = self.data(x);
            for r in 0..rows {
                data.extend_from_slice(&xd[r * cols + lo..r * cols + hi]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[rows, taken], data).unwrap(),
            Op::SliceCols {
                x,
                lo,
                taken,
                parent_cols: cols,
                rows,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TapeResult<TensorId> {
        if parts.is_empty() {
            return Err(TapeError::EmptySelection { op: "concat_rows" });
        }
        let (_, cols) = self.dims2("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&[rows, cols], data).unwrap(),
            Op::ConcatRows {
                parts: parts.to_vec(),
                cols,
            },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TapeResult<TensorId> {
        if parts.is_empty() {
            return Err(TapeError::EmptySelection { op: "concat_cols" });
        }
        let (rows, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (i, &p) in parts.iter().enumerate() {
                let c = widths[i];
                data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&[rows, total], data).unwrap(),
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            needs,
        ))
    }

    /// Gather rows of `table` by id. Backward scatter-adds row gradients,
    /// so repeated ids accumulate.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("embed", table)?;
        if ids.is_empty() {
            return Err(TapeError::EmptySelection { op: "embed" });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TapeError::RowOutOfRange {
                    op: "embed",
                    row: id,
                    rows,
                });
            }
            data.extend_from_slice(&self.data(table)[id * cols..(id + 1) * cols]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), cols], data).unwrap(),
            Op::Embed {
                table,
                ids: ids.to_vec(),
                cols,
            },
            needs,
        ))
    }

    // ─── reductions ───

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(a), needs)
    }

    /// Sum of the elementwise product.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.check_same_shape("dot", a, b)?;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), needs))
    }

    /// Scalar division `a / b`.
    pub fn div_scalar(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        if self.data(a).len() != 1 || self.data(b).len() != 1 {
            return Err(TapeError::NeedScalar { op: "div_scalar" });
        }
        let v = self.data(a)[0] / self.data(b)[0];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(v), Op::DivScalar(a, b), needs))
    }

    /// `sum_i weights[i] * parts[i]` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[TensorId], weights: &[f64]) -> TapeResult<TensorId> {
        if parts.is_empty() || parts.len() != weights.len() {
            return Err(TapeError::EmptySelection { op: "weighted_sum" });
        }
        let mut s = 0.0;
        for (&p, &w) in parts.iter().zip(weights) {
            if self.data(p).len() != 1 {
                return Err(TapeError::NeedScalar { op: "weighted_sum" });
            }
            s += w * self.data(p)[0];
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    // ─── fused losses ───

    /// `(1/divisor) * sum over pairs of CE(logits[row, :], class)`, with the
    /// cross entropy computed through a shifted log-sum-exp.
    pub fn ce_mean(
        &mut self,
        logits: TensorId,
        pairs: &[(usize, usize)],
        divisor: f64,
    ) -> TapeResult<TensorId> {
        let (rows, cols) = self.dims2("ce_mean", logits)?;
        if pairs.is_empty() {
            return Err(TapeError::EmptySelection { op: "ce_mean" });
        }
        let mut probs = vec![0.0; pairs.len() * cols];
        let mut total = 0.0;
        {
            let ld = self.data(logits);
            for (i, &(row, class)) in pairs.iter().enumerate() {
                if row >= rows {
                    return Err(TapeError::RowOutOfRange {
                        op: "ce_mean",
                        row,
                        rows,
                    });
                }
                if class >= cols {
                    return Err(TapeError::ClassOutOfRange {
                        class,
                        classes: cols,
                    });
                }
                let lrow = &ld[row * cols..(row + 1) * cols];
                let mx = lrow.iter().fold(f64::NEG_INFINITY, |a, &b| fmath::max(a, b));
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = fmath::exp(lrow[c] - mx);
                    probs[i * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    probs[i * cols + c] /= sum;
                }
                total += mx + fmath::ln(sum) - lrow[class];
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / divisor),
            Op::CeMean {
                logits,
                pairs: pairs.to_vec(),
                divisor,
                probs,
                cols,
            },
            needs,
        ))
    }

    /// Mean binary cross entropy on logits, computed in the numerically
    /// stable form `max(x,0) - x*y + ln(1 + e^(-|x|))`.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: TensorId,
        targets: &[f64],
    ) -> TapeResult<TensorId> {
        if self.data(logits).len() != targets.len() {
            return Err(TapeError::ShapeMismatch {
                op: "bce_with_logits_mean",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&x, &y) in self.data(logits).iter().zip(targets) {
            total += fmath::max(x, 0.0) - x * y + fmath::ln_1p(fmath::exp(-fmath::abs(x)));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_vs(&mut self, x: TensorId, target: &[f64]) -> TapeResult<TensorId> {
        if self.data(x).len() != target.len() {
            return Err(TapeError::ShapeMismatch {
                op: "mse_vs",
                left: self.shape(x).to_vec(),
                right: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let mut total = 0.0;
        for (&a, &t) in self.data(x).iter().zip(target) {
            total += (a - t) * (a - t);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::MseVs {
                x,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Replace the forward value while passing gradients straight through.
    /// `replacement` must match the parent's shape.
    pub fn straight_through(
        &mut self,
        x: TensorId,
        replacement: Tensor,
    ) -> TapeResult<TensorId> {
        if self.shape(x) != replacement.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "straight_through",
                left: self.shape(x).to_vec(),
                right: replacement.shape().to_vec(),
            });
        }
        let needs = self.needs(x);
        Ok(self.push(replacement, Op::StraightThrough(x), needs))
    }

    // ─── backward ───

    /// Reverse-sweep from a scalar node. Nodes that do not participate in
    /// the loss get no gradient entry at all, so their gradient is exactly
    /// zero.
    pub fn backward(&self, loss: TensorId) -> TapeResult<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(TapeError::BackwardFromNonScalar);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorId,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.needs(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.data(target).len()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv * c;
                    }
                });
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::AddBias(mat, bias) => {
                let n = self.data(*bias).len();
                self.accumulate(grads, *mat, |gm| {
                    for (gi, &gv) in gm.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g, bd, m, n, k, &mut da);
                    self.accumulate(grads, *a, |ga| {
                        for (gi, &dv) in ga.iter_mut().zip(&da) {
                            *gi += dv;
                        }
                    });
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(ad, g, m, k, n, &mut db);
                    self.accumulate(grads, *b, |gb| {
                        for (gi, &dv) in gb.iter_mut().zip(&db) {
                            *gi += dv;
                        }
                    });
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.needs(*a) {
                    // dA = G . B, G: m x n, B: n x k
                    let mut da = vec![0.0; m * k];
                    mm(g, bd, m, n, k, &mut da);
                    self.accumulate(grads, *a, |ga| {
                        for (gi, &dv) in ga.iter_mut().zip(&da) {
                            *gi += dv;
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = G^T . A, result n x k
                    let mut db = vec![0.0; n * k];
                    mm_tn(g, ad, m, n, k, &mut db);
                    self.accumulate(grads, *b, |gb| {
                        for (gi, &dv) in gb.iter_mut().zip(&db) {
                            *gi += dv;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let xd = self.data(*a).to_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if xd[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yd = self.nodes[idx].value.data().to_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                });
            }
            Op::Clamp01(a) => {
                let xd = self.data(*a).to_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if (0.0..=1.0).contains(&xd[i]) {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.data(*gamma).len();
                let rows = inv_std.len();
                let gd = self.data(*gamma);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = g[base + c] * gd[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[base + c];
                        }
                        let nf = cols as f64;
                        for c in 0..cols {
                            let dxh = g[base + c] * gd[c];
                            dx[base + c] = istd / nf
                                * (nf * dxh - sum_dxhat - xhat[base + c] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, |gx| {
                        for (gi, &dv) in gx.iter_mut().zip(&dx) {
                            *gi += dv;
                        }
                    });
                }
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let p = self.nodes[idx].value.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[base + c] * p[base + c];
                    }
                    for c in 0..cols {
                        dx[base + c] = p[base + c] * (g[base + c] - dot);
                    }
                }
                self.accumulate(grads, *x, |gx| {
                    for (gi, &dv) in gx.iter_mut().zip(&dx) {
                        *gi += dv;
                    }
                });
            }
            Op::SliceRows { x, lo, cols } => {
                let offset = lo * cols;
                self.accumulate(grads, *x, |gx| {
                    for (i, &gv) in g.iter().enumerate() {
                        gx[offset + i] += gv;
                    }
                });
            }
            Op::SliceCols {
                x,
                lo,
                taken,
                parent_cols,
                rows,
            } => {
                let (lo, taken, pc, rows) = (*lo, *taken, *parent_cols, *rows);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        for c in 0..taken {
                            gx[r * pc + lo + c] += g[r * taken + c];
                        }
                    }
                });
            }
            Op::ConcatRows { parts, cols } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    let cols = *cols;
                    debug_assert_eq!(len % cols, 0);
                    self.accumulate(grads, p, |gp| {
                        for i in 0..len {
                            gp[i] += g[offset + i];
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols {
                parts,
                widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut col_off = 0;
                for (i, &p) in parts.iter().enumerate() {
                    let w = widths[i];
                    let rows = *rows;
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + col_off + c];
                            }
                        }
                    });
                    col_off += w;
                }
            }
            Op::Embed { table, ids, cols } => {
                let cols = *cols;
                self.accumulate(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[i * cols + c];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.data(*a).len() as f64;
                let gv = g[0] / n;
                self.accumulate(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += gv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                let ad = self.data(*a).to_vec();
                let bd = self.data(*b).to_vec();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gv * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += gv * ad[i];
                    }
                });
            }
            Op::DivScalar(a, b) => {
                let gv = g[0];
                let av = self.data(*a)[0];
                let bv = self.data(*b)[0];
                self.accumulate(grads, *a, |ga| {
                    ga[0] += gv / bv;
                });
                self.accumulate(grads, *b, |gb| {
                    gb[0] -= gv * av / (bv * bv);
                });
            }
            Op::WeightedSum { parts, weights } => {
                let gv = g[0];
                for (&p, &w) in parts.iter().zip(weights) {
                    self.accumulate(grads, p, |gp| {
                        gp[0] += gv * w;
                    });
                }
            }
            Op::CeMean {
                logits,
                pairs,
                divisor,
                probs,
                cols,
            } => {
                let scale = g[0] / divisor;
                let cols = *cols;
                self.accumulate(grads, *logits, |gl| {
                    for (i, &(row, class)) in pairs.iter().enumerate() {
                        let base = row * cols;
                        for c in 0..cols {
                            gl[base + c] += scale * probs[i * cols + c];
                        }
                        gl[base + class] -= scale;
                    }
                });
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let n = targets.len() as f64;
                let scale = g[0] / n;
                let xd = self.data(*logits).to_vec();
                self.accumulate(grads, *logits, |gl| {
                    for i in 0..gl.len() {
                        gl[i] += scale * (sigmoid(xd[i]) - targets[i]);
                    }
                });
            }
            Op::MseVs { x, target } => {
                let n = target.len() as f64;
                let scale = 2.0 * g[0] / n;
                let xd = self.data(*x).to_vec();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += scale * (xd[i] - target[i]);
                    }
                });
            }
            Op::StraightThrough(a) => {
                self.accumulate(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if the node
    /// participated. Non-participating nodes have gradient exactly zero
    /// and return `None`.
    pub fn of(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as an owned vector, zeros when the node did not
    /// participate.
    pub fn of_or_zeros(&self, id: TensorId, len: usize) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fmath::exp(-x))
    } else {
        let e = fmath::exp(x);
        e / (1.0 + e)
    }
}

// ─── matmul kernels ───
//
// Plain f64 loops arranged so the innermost iteration walks contiguous
// slices; zip over subslices lets the compiler elide bounds checks.

/// `out += a . b` with `a: m x k`, `b: k x n`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a . b^T` with `a: m x k`, `b: n x k`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T . b` with `a: m x k`, `b: m x n`, `out: k x n`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
