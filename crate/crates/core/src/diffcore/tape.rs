//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node that
//! holds its output value and the indices of its inputs; [`Tape::gradients`]
//! walks the nodes in reverse and routes gradients to the parameter leaves.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::numel;
use crate::error::{Error, Result};

/// Masked attention logits are set to this value before the softmax.
const MASK_VALUE: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Op identifiers, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    MatMulT,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    CausalMask,
    Embedding,
    SliceCols,
    ConcatCols,
    ConcatRows,
    SelectRows,
    Gather,
    Sum,
    Mean,
    LayerNorm,
    Clamp,
    Minimum,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Gather { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LogSigmoid(_) => OpKind::LogSigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::CausalMask(_) => OpKind::CausalMask,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<String>,
    param_vars: HashMap<String, Var>,
    fault: Option<(OpKind, f64)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_t_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn t_matmul_into(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
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

    /// Scale the backward pass of every op of `kind` by `factor`. Only
    /// useful for verifying that gradient checks catch broken derivatives.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch { op: "constant", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(self.push(shape, data, Op::Constant))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Constant)
    }

    /// Bring a parameter onto the tape. Repeated calls with the same name
    /// return the same node so gradients accumulate once per name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let slot = self.params.len();
        self.params.push(name.to_string());
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(slot));
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![] }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_t", a)?;
        let (n, k2) = self.dims2("matmul_t", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul_t", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("minimum", a, b, f64::min)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Minimum(a, b)))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = rows_cols(self.shape(x));
        if numel(self.shape(r)) != n {
            return Err(Error::ShapeMismatch { op, lhs: self.shape(x).to_vec(), rhs: self.shape(r).to_vec() });
        }
        Ok((m, n))
    }

    /// `x[i, :] + b` for every row `i`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("add_row", x, b)?;
        let bv = self.value(b);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + bv[i % n]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b)))
    }

    /// `x[i, :] ⊙ g` for every row `i`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("mul_row", x, g)?;
        let gv = self.value(g);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * gv[i % n]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, g)))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|v| f(*v)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp { x: a, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let mut out = vec![0.0; m * n];
        let src = self.value(a);
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = rows_cols(self.shape(a));
        let mut out = vec![0.0; m * n];
        let src = self.value(a);
        for i in 0..m {
            log_softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a))
    }

    /// Replace entries above the diagonal of a square matrix with a large
    /// negative constant.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("causal_mask", a)?;
        if m != n {
            return Err(Error::ShapeMismatch { op: "causal_mask", lhs: vec![m, n], rhs: vec![n, m] });
        }
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for v in &mut out[i * n + i + 1..(i + 1) * n] {
                *v = MASK_VALUE;
            }
        }
        Ok(self.push(vec![m, n], out, Op::CausalMask(a)))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding lookup with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::ShapeMismatch { op: "embedding", lhs: vec![v, d], rhs: vec![*bad] });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: vec![m, n], rhs: vec![start, len] });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: self.shape(first).to_vec(), rhs: self.shape(p).to_vec() });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let pn = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (_, n) = rows_cols(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = rows_cols(self.shape(p));
            if pn != n {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: self.shape(first).to_vec(), rhs: self.shape(p).to_vec() });
            }
            rows += pm;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows with no rows".into()));
        }
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::ShapeMismatch { op: "select_rows", lhs: vec![m, n], rhs: vec![*bad] });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(vec![rows.len(), n], out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::ShapeMismatch { op: "gather", lhs: vec![m, n], rhs: vec![cols.len()] });
        }
        let src = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &c)| src[i * n + c]).collect();
        Ok(self.push(vec![m], out, Op::Gather { x, cols: cols.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Row-wise standardization (no affine part; combine with
    /// [`Tape::mul_row`] and [`Tape::add_row`]).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (m, n) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
            inv_std.push(inv);
        }
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, inv_std })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar `loss`; returns the gradient of every
    /// parameter that was brought onto the tape.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        if !loss_node.value[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", loss_node.value[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some((kind, factor)) = self.fault {
                if node.op.kind() == kind {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        for (_, g) in out.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(out)
    }

    /// Backward pass that accumulates into the store's gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shape = |v: Var| self.nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Constant => {}
            Op::Param(slot) => out.add(&self.params[*slot], g),
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(shape(*a));
                let n = shape(*b)[1];
                acc(grads, *a, numel(shape(*a)), |ga| matmul_t_into(g, val(*b), m, n, k, ga));
                acc(grads, *b, numel(shape(*b)), |gb| t_matmul_into(val(*a), g, m, k, n, gb));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = rows_cols(shape(*a));
                let n = shape(*b)[0];
                acc(grads, *a, m * k, |ga| matmul_into(g, val(*b), m, n, k, ga));
                acc(grads, *b, n * k, |gb| t_matmul_into(g, val(*a), m, n, k, gb));
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(shape(*a));
                acc(grads, *a, m * n, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.len(), |ga| add_into(ga, g));
                acc(grads, *b, g.len(), |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.len(), |ga| add_into(ga, g));
                acc(grads, *b, g.len(), |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, g.len(), |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(grads, *b, g.len(), |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Minimum(a, b) => {
                // Ties route to the first argument.
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                });
                acc(grads, *b, g.len(), |gb| {
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = numel(shape(*b));
                acc(grads, *x, g.len(), |gx| add_into(gx, g));
                acc(grads, *b, n, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let n = numel(shape(*r));
                let (xv, rv) = (val(*x), val(*r));
                acc(grads, *x, g.len(), |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[i] += gv * rv[i % n];
                    }
                });
                acc(grads, *r, n, |gr| {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv * xv[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g.len(), |ga| add_into(ga, g)),
            Op::Tanh(a) => acc(grads, *a, g.len(), |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(grads, *a, g.len(), |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::LogSigmoid(a) => {
                let xv = val(*a);
                acc(grads, *a, g.len(), |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid(-x);
                    }
                });
            }
            Op::Exp(a) => acc(grads, *a, g.len(), |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += gv * y;
                }
            }),
            Op::Log(a) => {
                let xv = val(*a);
                acc(grads, *a, g.len(), |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(xv) {
                        *o += gv / x;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(grads, *x, g.len(), |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if v >= lo && v <= hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = rows_cols(&node.shape);
                acc(grads, *a, m * n, |ga| {
                    for i in 0..m {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = rows_cols(&node.shape);
                acc(grads, *a, m * n, |ga| {
                    for i in 0..m {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += gr[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::CausalMask(a) => {
                let (m, n) = rows_cols(&node.shape);
                acc(grads, *a, m * n, |ga| {
                    for i in 0..m {
                        for j in 0..=i.min(n - 1) {
                            ga[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = shape(*table)[1];
                acc(grads, *table, numel(shape(*table)), |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = rows_cols(shape(*x));
                let len = node.shape[1];
                acc(grads, *x, m * n, |gx| {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pn = shape(p)[1];
                    acc(grads, p, m * pn, |gp| {
                        for i in 0..m {
                            add_into(&mut gp[i * pn..(i + 1) * pn], &g[i * total + offset..i * total + offset + pn]);
                        }
                    });
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(shape(p));
                    acc(grads, p, len, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = rows_cols(shape(*x));
                acc(grads, *x, m * n, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::Gather { x, cols } => {
                let (m, n) = rows_cols(shape(*x));
                acc(grads, *x, m * n, |gx| {
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                });
            }
            Op::Sum(a) => {
                let len = numel(shape(*a));
                acc(grads, *a, len, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let len = numel(shape(*a));
                let s = g[0] / len as f64;
                acc(grads, *a, len, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::LayerNorm { x, inv_std } => {
                let (m, n) = rows_cols(&node.shape);
                acc(grads, *x, m * n, |gx| {
                    for i in 0..m {
                        let y = &node.value[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] * (gr[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
