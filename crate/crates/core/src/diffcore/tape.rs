//! Define-by-run reverse-mode tape.
//!
//! Every value is a dense row-major matrix of `f64` (vectors are `n×1` or
//! `1×n`, scalars `1×1`). Operations append a node to the tape and return a
//! [`Var`] handle; [`Tape::backward`] walks the tape in reverse.
//!
//! Nodes that do not depend on a trainable parameter carry no gradient and are
//! skipped during the reverse sweep, which is also how stop-gradient works: a
//! [`Tape::stop_gradient`] node is a fresh leaf holding a copy of its input.

use std::fmt;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Row/column extent of a node value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub const fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub const fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    StopGrad,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // normalized input and 1/std per row
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ColNormalize {
        x: Var,
        sums: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaxPoolRowGroups {
        x: Var,
        argmax: Vec<usize>,
    },
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    MaskedLogSumExpRows {
        x: Var,
        mask: Vec<bool>,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        rows: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::StopGrad => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ColNormalize { .. } => "col_normalize",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Sum(_) => "sum",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::MaxPoolRowGroups { .. } => "max_pool_row_groups",
            Op::RowMax { .. } => "row_max",
            Op::MaskedLogSumExpRows { .. } => "masked_logsumexp_rows",
            Op::ReplaceRows { .. } => "replace_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// LayerNorm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Norm below which a vector is treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Recording arena for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_vec(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.numel());
        self.nodes.push(Node {
            value,
            shape,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient (zeros before any backward pass).
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.shape.numel()])
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Shape, data: Vec<f64>) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(Error::dim("constant", shape, format!("{} values", data.len())));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    /// Differentiable input that is not a stored parameter (used by gradient checks).
    pub fn variable(&mut self, shape: Shape, data: Vec<f64>) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(Error::dim("variable", shape, format!("{} values", data.len())));
        }
        Ok(self.push(data, shape, Op::Leaf, true))
    }

    /// Loads a stored parameter as a leaf. Non-trainable parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.data.clone(), p.shape, Op::Param(id), p.trainable)
    }

    /// Passes the value forward, blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (value, shape) = (n.value.clone(), n.shape);
        self.push(value, shape, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![0.0; sa.rows * sb.cols];
        matmul_into(self.value(a), self.value(b), &mut out, sa.rows, sa.cols, sb.cols);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Shape::new(sa.rows, sb.cols), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let out = transpose_vec(self.value(a), s.rows, s.cols);
        let rg = self.rg(a);
        self.push(out, Shape::new(s.cols, s.rows), Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(name, sa, sb));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        let s = self.shape(a);
        Ok(self.push(out, s, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        let s = self.shape(a);
        Ok(self.push(out, s, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        let s = self.shape(a);
        Ok(self.push(out, s, Op::Mul(a, b), rg))
    }

    /// Adds a row vector (any node with `cols` entries) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.numel() != sa.cols {
            return Err(Error::dim("add_row", sa, sr));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(sa.cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, sa, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of `a` by entry `i` of `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc.numel() != sa.rows {
            return Err(Error::dim("mul_col", sa, sc));
        }
        let c = self.value(col);
        let out: Vec<f64> = self
            .value(a)
            .chunks(sa.cols)
            .zip(c)
            .flat_map(|(chunk, &w)| chunk.iter().map(move |x| x * w))
            .collect();
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, sa, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (sh, rg) = (self.shape(a), self.rg(a));
        self.push(out, sh, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + s).collect();
        let (sh, rg) = (self.shape(a), self.rg(a));
        self.push(out, sh, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (sh, rg) = (self.shape(a), self.rg(a));
        self.push(out, sh, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax_rows".into()));
        }
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(s.cols).zip(out.chunks_mut(s.cols)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - m).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, s, Op::SoftmaxRows(a), rg))
    }

    /// Per-row normalization followed by the affine `gain`, `bias` (each `c` entries).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.cols < 2 {
            return Err(Error::dim("layer_norm", s, "at least 2 columns"));
        }
        for p in [gain, bias] {
            if self.shape(p).numel() != s.cols {
                return Err(Error::dim("layer_norm", s, self.shape(p)));
            }
        }
        let c = s.cols as f64;
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(s.rows);
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(s.cols).enumerate() {
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..s.cols {
                let h = (row[j] - mean) * rs;
                xhat[r * s.cols + j] = h;
                out[r * s.cols + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            s,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Divides each column by its sum plus `eps`.
    pub fn col_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a);
        let x = self.value(a);
        let mut sums = vec![eps; s.cols];
        for row in x.chunks(s.cols) {
            for (acc, v) in sums.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if let Some(bad) = sums.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Numeric(format!("column sum {bad} cannot normalize")));
        }
        let out = x
            .chunks(s.cols)
            .flat_map(|row| row.iter().zip(&sums).map(|(v, z)| v / z))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(out, s, Op::ColNormalize { x: a, sums }, rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let x = self.value(a);
        let mut norms = Vec::with_capacity(s.rows);
        let mut out = Vec::with_capacity(x.len());
        for (i, row) in x.chunks(s.cols).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > MIN_NORM) {
                return Err(Error::Degenerate(format!("row {i} has norm {n}")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.rg(a);
        Ok(self.push(out, s, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    /// Sum of every entry, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![total], Shape::scalar(), Op::Sum(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if len == 0 || start + len > s.rows {
            return Err(Error::dim("slice_rows", s, format!("rows {start}..{}", start + len)));
        }
        let out = self.value(a)[start * s.cols..(start + len) * s.cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, Shape::new(len, s.cols), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if len == 0 || start + len > s.cols {
            return Err(Error::dim("slice_cols", s, format!("cols {start}..{}", start + len)));
        }
        let out = self
            .value(a)
            .chunks(s.cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(out, Shape::new(s.rows, len), Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(*first).cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.cols != cols {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            rows += s.rows;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Shape::new(rows, cols), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(*first).rows;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rows != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            cols += s.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).cols;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Shape::new(rows, cols), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Element-wise max over `groups` stacked blocks of rows.
    ///
    /// Input rows are laid out as `groups` consecutive blocks of `rows / groups`
    /// rows; output row `r` is the column-wise max of row `r` across blocks.
    /// Ties route the gradient to the earliest block.
    pub fn max_pool_row_groups(&mut self, a: Var, groups: usize) -> Result<Var> {
        let s = self.shape(a);
        if groups == 0 || s.rows % groups != 0 {
            return Err(Error::dim("max_pool_row_groups", s, format!("{groups} groups")));
        }
        let out_rows = s.rows / groups;
        let x = self.value(a);
        let n = out_rows * s.cols;
        let mut out = x[..n].to_vec();
        let mut argmax: Vec<usize> = (0..n).collect();
        for g in 1..groups {
            let block = &x[g * n..(g + 1) * n];
            for (i, &v) in block.iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    argmax[i] = g * n + i;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Shape::new(out_rows, s.cols), Op::MaxPoolRowGroups { x: a, argmax }, rg))
    }

    /// Max over the columns of each row, as an `rows×1` node.
    pub fn row_max(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut out = Vec::with_capacity(s.rows);
        let mut argmax = Vec::with_capacity(s.rows);
        for (r, row) in self.value(a).chunks(s.cols).enumerate() {
            let mut best = 0;
            for j in 1..s.cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(r * s.cols + best);
        }
        let rg = self.rg(a);
        self.push(out, Shape::new(s.rows, 1), Op::RowMax { x: a, argmax }, rg)
    }

    /// `log Σ_j exp(x_ij)` over the entries of each row where `mask` is true.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(a);
        if mask.len() != s.numel() {
            return Err(Error::dim("masked_logsumexp_rows", s, format!("mask of {}", mask.len())));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(s.rows);
        for (r, (row, m)) in x.chunks(s.cols).zip(mask.chunks(s.cols)).enumerate() {
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {r} has no retained entries")));
            }
            let z: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| (v - mx).exp())
                .sum();
            out.push(mx + z.ln());
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Shape::new(s.rows, 1),
            Op::MaskedLogSumExpRows {
                x: a,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Overwrites the listed rows of `a` with `token` (a `cols`-entry node).
    pub fn replace_rows(&mut self, a: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (s, st) = (self.shape(a), self.shape(token));
        if st.numel() != s.cols {
            return Err(Error::dim("replace_rows", s, st));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= s.rows) {
            return Err(Error::dim("replace_rows", s, format!("row index {r}")));
        }
        let mut out = self.value(a).to_vec();
        let t = self.value(token).to_vec();
        for &r in rows {
            out[r * s.cols..(r + 1) * s.cols].copy_from_slice(&t);
        }
        let rg = self.rg(a) || self.rg(token);
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        Ok(self.push(out, s, Op::ReplaceRows { x: a, token, rows }, rg))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let s = self.shape(root);
        if !s.is_scalar() {
            return Err(Error::Contract(format!("backward from non-scalar root {s}")));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep seeded with explicit upstream gradients on several nodes.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; last + 1];
        for (v, g) in seeds {
            let s = self.shape(*v);
            if g.len() != s.numel() {
                return Err(Error::dim("backward seed", s, format!("{} values", g.len())));
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, g),
                slot => *slot = Some(g.clone()),
            }
        }

        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].shape.numel();
        let acc = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(acc);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let shape = node.shape;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_vec(self.value(*b), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_vec(self.value(*a), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let gt = transpose_vec(g, shape.rows, shape.cols);
                self.accumulate(grads, *a, gt);
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |acc| add_into(acc, g));
                self.accumulate_with(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |acc| add_into(acc, g));
                self.accumulate_with(grads, *b, |acc| {
                    for (d, s) in acc.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for ((d, gi), x) in acc.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate_with(grads, *a, |acc| add_into(acc, g));
                self.accumulate_with(grads, *row, |acc| {
                    for grow in g.chunks(shape.cols) {
                        add_into(acc, grow);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                self.accumulate_with(grads, *a, |acc| {
                    for ((drow, grow), w) in acc.chunks_mut(shape.cols).zip(g.chunks(shape.cols)).zip(vc) {
                        for (d, gi) in drow.iter_mut().zip(grow) {
                            *d += gi * w;
                        }
                    }
                });
                self.accumulate_with(grads, *col, |acc| {
                    for ((d, grow), arow) in acc.iter_mut().zip(g.chunks(shape.cols)).zip(va.chunks(shape.cols)) {
                        *d += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate_with(grads, *a, |acc| {
                    for (d, gi) in acc.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accumulate_with(grads, *a, |acc| add_into(acc, g));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(out) {
                        *d += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), y) in acc.iter_mut().zip(g).zip(out) {
                        *d += gi * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate_with(grads, *a, |acc| {
                    for ((d, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                self.accumulate_with(grads, *a, |acc| {
                    for ((drow, grow), yrow) in acc
                        .chunks_mut(shape.cols)
                        .zip(g.chunks(shape.cols))
                        .zip(out.chunks(shape.cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = shape.cols;
                let gv = self.value(*gain);
                self.accumulate_with(grads, *x, |acc| {
                    let cf = c as f64;
                    for r in 0..shape.rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        // dxhat = g * gain
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            acc[r * c + j] += rstd[r] / cf * (cf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
                self.accumulate_with(grads, *gain, |acc| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gi), h) in acc.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * h;
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |acc| {
                    for grow in g.chunks(c) {
                        add_into(acc, grow);
                    }
                });
            }
            Op::ColNormalize { x, sums } => {
                let c = shape.cols;
                // y = x / s_j, s_j = Σ_i x_ij + eps
                // dx_ij = (g_ij - Σ_l g_lj y_lj) / s_j
                let mut col_dot = vec![0.0; c];
                for (grow, yrow) in g.chunks(c).zip(out.chunks(c)) {
                    for j in 0..c {
                        col_dot[j] += grow[j] * yrow[j];
                    }
                }
                self.accumulate_with(grads, *x, |acc| {
                    for (drow, grow) in acc.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            drow[j] += (grow[j] - col_dot[j]) / sums[j];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = shape.cols;
                self.accumulate_with(grads, *x, |acc| {
                    for (((drow, grow), yrow), n) in acc
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.chunks(c))
                        .zip(norms)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gi - y * dot) / n;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.accumulate_with(grads, *a, |acc| {
                    for d in acc.iter_mut() {
                        *d += gs;
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = shape.cols;
                self.accumulate_with(grads, *a, |acc| {
                    add_into(&mut acc[start * c..(start + shape.rows) * c], g);
                });
            }
            Op::SliceCols(a, start) => {
                let full = self.shape(*a).cols;
                self.accumulate_with(grads, *a, |acc| {
                    for (drow, grow) in acc.chunks_mut(full).zip(g.chunks(shape.cols)) {
                        add_into(&mut drow[*start..*start + shape.cols], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p).numel();
                    let piece = &g[offset..offset + n];
                    self.accumulate_with(grads, p, |acc| add_into(acc, piece));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).cols;
                    self.accumulate_with(grads, p, |acc| {
                        for (r, drow) in acc.chunks_mut(pc).enumerate() {
                            let base = r * shape.cols + offset;
                            add_into(drow, &g[base..base + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::MaxPoolRowGroups { x, argmax } | Op::RowMax { x, argmax } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        acc[src] += gi;
                    }
                });
            }
            Op::MaskedLogSumExpRows { x, mask } => {
                let c = self.shape(*x).cols;
                let xv = self.value(*x);
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..shape.rows {
                        let lse = out[r];
                        for j in 0..c {
                            let idx = r * c + j;
                            if mask[idx] {
                                acc[idx] += g[r] * (xv[idx] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows { x, token, rows } => {
                let c = shape.cols;
                self.accumulate_with(grads, *x, |acc| {
                    add_into(acc, g);
                    for &r in rows {
                        let drow = &mut acc[r * c..(r + 1) * c];
                        for (d, gi) in drow.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d -= gi;
                        }
                    }
                });
                self.accumulate_with(grads, *token, |acc| {
                    for &r in rows {
                        add_into(acc, &g[r * c..(r + 1) * c]);
                    }
                });
            }
        }
    }

    /// Gradients of every parameter leaf on this tape, summed per parameter id.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                match &mut out[id.index()] {
                    Some(acc) => add_into(acc, g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
