//! Dense f64 tensors and a reverse-mode tape.
//!
//! Every primitive records its inputs on the [`Tape`]; [`Tape::backward`]
//! replays the adjoints in reverse order and accumulates parameter
//! gradients into a [`Gradients`] buffer. Parameters are borrowed
//! immutably, so several tapes may run against one [`ParamStore`] at once.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("objective is not deterministic (dropout active?)")]
    Nondeterministic,
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(AutodiffError::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return dim_err("from_vec", shape, &[data.len()]);
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (1-D tensors are a single column).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `c (+)= op(a) * op(b)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents computed from m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return dim_err("matmul", &a.shape, &b.shape);
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out.data, false);
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Stable log-softmax over the unmasked entries; masked entries get `-inf`.
pub fn log_softmax_masked(xs: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..xs.len()).filter(|&j| keep(j)).map(|j| xs[j]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = (0..xs.len()).filter(|&j| keep(j)).map(|j| (xs[j] - max).exp()).sum();
    let lz = max + z.ln();
    (0..xs.len()).map(|j| if keep(j) { xs[j] - lz } else { f64::NEG_INFINITY }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let gradient = Tensor::zeros(&value.shape);
        self.params.push(Parameter { name: name.into(), value, gradient });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add a gradient buffer into the stored `gradient` fields.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.gradient.add_assign(g);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.squared_norm()).sum()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.params.iter().map(|p| Tensor::zeros(&p.value.shape)).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            t.data.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct LstmCache {
    /// Activated gates per step in processing order: [i, f, g, o] blocks of width h.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    OuterSum(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    SquaredNorm(Var),
    RowSoftmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    NllPick(Var, Vec<(usize, usize)>),
    Bilinear(Var, Var, Var),
    LabelBilinear(Var, Var, Var),
    Lstm { input: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool, cache: Box<LstmCache> },
}

struct Node {
    value: Value,
    op: Op,
}

/// Records a forward computation over borrowed parameters.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    stochastic: bool,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), stochastic: false }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// True once a dropout mask with a nonzero rate has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.params[id.0].value,
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(op, s, &[]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return dim_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, &self.value(a).data, (k, 1), &self.value(b).data, (1, k), &mut out.data, false);
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", self.shape(a), self.shape(b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        if self.value(bias).len() != n {
            return dim_err("add_row", self.shape(a), self.shape(bias));
        }
        let mut out = self.value(a).clone();
        let b = &self.value(bias).data;
        for i in 0..m {
            for (o, bj) in out.data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("add_scalar", self.shape(a), self.shape(s));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|v| v + c);
        Ok(self.push(out, Op::AddScalar(a, s)))
    }

    /// `out[i, j] = a[i] + b[j]` for flat `a` (length m) and `b` (length n).
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = (self.value(a).len(), self.value(b).len());
        let mut out = Tensor::zeros(&[m, n]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        out.data = av.iter().flat_map(|&x| bv.iter().map(move |&y| x + y)).collect();
        Ok(self.push(out, Op::OuterSum(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul", self.shape(a), self.shape(b));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return dim_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for i in 0..rows {
                out.data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return dim_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a matrix (a vector counts as one column).
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > rows {
            return dim_err("slice_rows", &t.shape, &[start, end]);
        }
        let out = Tensor::from_vec(&[end - start, cols], t.data[start * cols..end * cols].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Select rows by index; serves as embedding lookup.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(AutodiffError::Argument(format!("row index {} out of bounds for {} rows", i, rows)));
            }
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_vec(&[ids.len(), cols], data)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Inverted dropout. A zero rate records nothing.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Multiply by an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        if mask.iter().any(|&m| m != 1.0) {
            self.stochastic = true;
        }
        let t = self.value(a);
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor { shape: t.shape.clone(), data };
        self.push(out, Op::Dropout(a, mask))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).squared_norm();
        self.push(Tensor::scalar(s), Op::SquaredNorm(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "row_softmax")?;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(softmax(&src[i * n..(i + 1) * n]));
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::RowSoftmax(a)))
    }

    /// Row-wise log-softmax. With a mask (row-major, same shape), masked
    /// entries are excluded from normalization and hold `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "log_softmax")?;
        if let Some(mask) = &mask {
            if mask.len() != m * n {
                return dim_err("log_softmax", &[m, n], &[mask.len()]);
            }
            if (0..m).any(|i| !mask[i * n..(i + 1) * n].iter().any(|&k| k)) {
                return Err(AutodiffError::Argument("fully masked row in log_softmax".into()));
            }
        }
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row_mask = mask.as_ref().map(|mk| &mk[i * n..(i + 1) * n]);
            data.extend(log_softmax_masked(&src[i * n..(i + 1) * n], row_mask));
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(out, Op::LogSoftmax(a, mask)))
    }

    /// `-Σ logp[row, col]` over the given picks.
    pub fn nll_from_log_probs(&mut self, logp: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.matrix_dims(logp, "nll")?;
        let t = self.value(logp);
        let mut total = 0.0;
        for &(i, j) in picks {
            if i >= m || j >= n {
                return Err(AutodiffError::Argument(format!("pick ({}, {}) outside {}x{}", i, j, m, n)));
            }
            total -= t.data[i * n + j];
        }
        Ok(self.push(Tensor::scalar(total), Op::NllPick(logp, picks.to_vec())))
    }

    /// `d · U · hᵀ` for `d: m×p`, `U: p×q`, `h: n×q`.
    pub fn bilinear(&mut self, d: Var, u: Var, h: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(d, "bilinear")?;
        let (p2, q) = self.matrix_dims(u, "bilinear")?;
        let (n, q2) = self.matrix_dims(h, "bilinear")?;
        if p != p2 || q != q2 {
            return dim_err("bilinear", self.shape(d), self.shape(u));
        }
        let du = matmul(self.value(d), self.value(u))?;
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, q, n, &du.data, (q, 1), &self.value(h).data, (1, q), &mut out.data, false);
        Ok(self.push(out, Op::Bilinear(d, u, h)))
    }

    /// Row-aligned label-wise bilinear form: `out[i, l] = d_i · U_l · h_i`
    /// for `d: m×p`, `U: R×p×q`, `h: m×q`.
    pub fn label_bilinear(&mut self, d: Var, u: Var, h: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(d, "label_bilinear")?;
        let (m2, q) = self.matrix_dims(h, "label_bilinear")?;
        let (r, p2, q2) = match self.shape(u) {
            [r, p, q] => (*r, *p, *q),
            s => return dim_err("label_bilinear", s, &[p, q]),
        };
        if m != m2 || p != p2 || q != q2 {
            return dim_err("label_bilinear", self.shape(d), self.shape(u));
        }
        // du[l] = d · U_l  (m×q), then row-wise dot with h.
        let (dv, uv, hv) = (&self.value(d).data, &self.value(u).data, &self.value(h).data);
        let mut out = Tensor::zeros(&[m, r]);
        let mut du = vec![0.0; m * q];
        for l in 0..r {
            gemm(m, p, q, dv, (p, 1), &uv[l * p * q..(l + 1) * p * q], (q, 1), &mut du, false);
            for i in 0..m {
                out.data[i * r + l] = du[i * q..(i + 1) * q].iter().zip(&hv[i * q..(i + 1) * q]).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(out, Op::LabelBilinear(d, u, h)))
    }

    /// One LSTM direction over the rows of `input` (T×in). `w_ih`: in×4h,
    /// `w_hh`: h×4h, `bias`: 4h, gate order [input, forget, cell, output].
    /// With `reverse`, the sequence is consumed last row first; output row
    /// `t` is always the state at input position `t`.
    pub fn lstm(&mut self, input: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let (steps, in_dim) = self.matrix_dims(input, "lstm")?;
        let (in2, four_h) = self.matrix_dims(w_ih, "lstm")?;
        let (h, four_h2) = self.matrix_dims(w_hh, "lstm")?;
        if in_dim != in2 || four_h != 4 * h || four_h2 != four_h || self.value(bias).len() != four_h {
            return dim_err("lstm", self.shape(input), self.shape(w_ih));
        }
        let pre_in = matmul(self.value(input), self.value(w_ih))?;
        let whh = &self.value(w_hh).data;
        let b = &self.value(bias).data;

        let mut out = Tensor::zeros(&[steps, h]);
        let mut gates = vec![0.0; steps * four_h];
        let mut cells = vec![0.0; steps * h];
        let mut tanh_cells = vec![0.0; steps * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut pre = vec![0.0; four_h];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            pre.copy_from_slice(&pre_in.data[t * four_h..(t + 1) * four_h]);
            for (p, bj) in pre.iter_mut().zip(b) {
                *p += bj;
            }
            gemm(1, h, four_h, &h_prev, (h, 1), whh, (four_h, 1), &mut pre, true);
            let g = &mut gates[s * four_h..(s + 1) * four_h];
            for j in 0..h {
                g[j] = sigmoid(pre[j]);
                g[h + j] = sigmoid(pre[h + j]);
                g[2 * h + j] = pre[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(pre[3 * h + j]);
                let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                cells[s * h + j] = c;
                tanh_cells[s * h + j] = tc;
                let hv = g[3 * h + j] * tc;
                out.data[t * h + j] = hv;
                h_prev[j] = hv;
                c_prev[j] = c;
            }
        }
        let cache = Box::new(LstmCache { gates, cells, tanh_cells });
        Ok(self.push(out, Op::Lstm { input, w_ih, w_hh, bias, reverse, cache }))
    }

    /// Backpropagate from a scalar, accumulating parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Argument(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let (Op::Leaf, Value::Param(id)) = (&node.op, &node.value) {
                grads.0[id.0].add_assign(&g);
                continue;
            }
            self.propagate(&node.op, Var(idx), &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: Var, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| match &mut adj[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let val = |v: Var| self.value(v);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(m, n, k, &g.data, (n, 1), &val(*b).data, (1, n), &mut ga.data, false);
                let mut gb = Tensor::zeros(&[k, n]);
                gemm(k, m, n, &val(*a).data, (1, k), &g.data, (n, 1), &mut gb.data, false);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[0];
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(m, n, k, &g.data, (n, 1), &val(*b).data, (k, 1), &mut ga.data, false);
                let mut gb = Tensor::zeros(&[n, k]);
                gemm(n, m, k, &g.data, (1, n), &val(*a).data, (k, 1), &mut gb.data, false);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                let n = g.cols();
                let mut gb = Tensor::zeros(&val(*bias).shape);
                for row in g.data.chunks(n) {
                    for (s, v) in gb.data.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, gb);
            }
            Op::AddScalar(a, s) => {
                let total = g.data.iter().sum();
                acc(*a, g.clone());
                acc(*s, Tensor::from_vec(&val(*s).shape, vec![total]).unwrap());
            }
            Op::OuterSum(a, b) => {
                let (m, n) = (val(*a).len(), val(*b).len());
                let mut ga = Tensor::zeros(&val(*a).shape);
                let mut gb = Tensor::zeros(&val(*b).shape);
                for i in 0..m {
                    for j in 0..n {
                        let v = g.data[i * n + j];
                        ga.data[i] += v;
                        gb.data[j] += v;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, val(*b), |x, y| x * y);
                let gb = zip_map(g, val(*a), |x, y| x * y);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Tanh(a) => acc(*a, zip_map(g, val(out), |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, zip_map(g, val(out), |x, y| x * y * (1.0 - y))),
            Op::Relu(a) => acc(*a, zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut gp = Tensor::zeros(&val(*p).shape);
                    for i in 0..rows {
                        gp.data[i * w..(i + 1) * w].copy_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    acc(*p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    let gp = Tensor::from_vec(&val(*p).shape, g.data[offset..offset + len].to_vec()).unwrap();
                    offset += len;
                    acc(*p, gp);
                }
            }
            Op::SliceRows(a, start) => {
                let cols = val(*a).cols();
                let mut ga = Tensor::zeros(&val(*a).shape);
                ga.data[start * cols..start * cols + g.len()].copy_from_slice(&g.data);
                acc(*a, ga);
            }
            Op::Gather(table, ids) => {
                let cols = val(*table).cols();
                let mut gt = Tensor::zeros(&val(*table).shape);
                for (k, &i) in ids.iter().enumerate() {
                    for (d, s) in gt.data[i * cols..(i + 1) * cols].iter_mut().zip(&g.data[k * cols..(k + 1) * cols]) {
                        *d += s;
                    }
                }
                acc(*table, gt);
            }
            Op::Dropout(a, mask) => {
                let data = g.data.iter().zip(mask).map(|(x, m)| x * m).collect();
                acc(*a, Tensor::from_vec(&g.shape, data).unwrap());
            }
            Op::Sum(a) => acc(*a, Tensor::filled(&val(*a).shape, g.item())),
            Op::SquaredNorm(a) => {
                let c = 2.0 * g.item();
                acc(*a, val(*a).map(|v| c * v));
            }
            Op::RowSoftmax(a) => {
                let y = val(out);
                let n = y.cols();
                let mut ga = Tensor::zeros(&y.shape);
                for i in 0..y.rows() {
                    let yr = &y.data[i * n..(i + 1) * n];
                    let gr = &g.data[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga.data[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a, mask) => {
                let y = val(out);
                let n = y.cols();
                let mut ga = Tensor::zeros(&y.shape);
                for i in 0..y.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * n + j]);
                    let gsum: f64 = (0..n).filter(|&j| keep(j)).map(|j| g.data[i * n + j]).sum();
                    for j in (0..n).filter(|&j| keep(j)) {
                        ga.data[i * n + j] = g.data[i * n + j] - y.data[i * n + j].exp() * gsum;
                    }
                }
                acc(*a, ga);
            }
            Op::NllPick(a, picks) => {
                let n = val(*a).cols();
                let mut ga = Tensor::zeros(&val(*a).shape);
                for &(i, j) in picks {
                    ga.data[i * n + j] -= g.item();
                }
                acc(*a, ga);
            }
            Op::Bilinear(d, u, h) => {
                let (dv, uv, hv) = (val(*d), val(*u), val(*h));
                let (m, p) = (dv.shape[0], dv.shape[1]);
                let q = uv.shape[1];
                let n = hv.shape[0];
                // gh_u = g · h  (m×q)
                let mut gh = vec![0.0; m * q];
                gemm(m, n, q, &g.data, (n, 1), &hv.data, (q, 1), &mut gh, false);
                let mut gd = Tensor::zeros(&[m, p]);
                gemm(m, q, p, &gh, (q, 1), &uv.data, (1, q), &mut gd.data, false);
                let mut gu = Tensor::zeros(&[p, q]);
                gemm(p, m, q, &dv.data, (1, p), &gh, (q, 1), &mut gu.data, false);
                let du = matmul(dv, uv).unwrap();
                let mut ghh = Tensor::zeros(&[n, q]);
                gemm(n, m, q, &g.data, (1, n), &du.data, (q, 1), &mut ghh.data, false);
                acc(*d, gd);
                acc(*u, gu);
                acc(*h, ghh);
            }
            Op::LabelBilinear(d, u, h) => {
                let (dv, uv, hv) = (val(*d), val(*u), val(*h));
                let (m, p) = (dv.shape[0], dv.shape[1]);
                let (r, q) = (uv.shape[0], uv.shape[2]);
                let mut gd = Tensor::zeros(&[m, p]);
                let mut gu = Tensor::zeros(&uv.shape);
                let mut gh = Tensor::zeros(&[m, q]);
                // Scaled copies: gd_i += Σ_l g_il U_l h_i ; gh_i += Σ_l g_il U_lᵀ d_i
                let mut gdl = vec![0.0; m * p];
                let mut ghl = vec![0.0; m * q];
                let mut scaled_d = vec![0.0; m * p];
                for l in 0..r {
                    let ul = &uv.data[l * p * q..(l + 1) * p * q];
                    let mut scaled_h = vec![0.0; m * q];
                    for i in 0..m {
                        let w = g.data[i * r + l];
                        for k in 0..q {
                            scaled_h[i * q + k] = w * hv.data[i * q + k];
                        }
                        for k in 0..p {
                            scaled_d[i * p + k] = w * dv.data[i * p + k];
                        }
                    }
                    gemm(m, q, p, &scaled_h, (q, 1), ul, (1, q), &mut gdl, false);
                    gemm(m, p, q, &scaled_d, (p, 1), ul, (q, 1), &mut ghl, false);
                    for (a, b) in gd.data.iter_mut().zip(&gdl) {
                        *a += b;
                    }
                    for (a, b) in gh.data.iter_mut().zip(&ghl) {
                        *a += b;
                    }
                    gemm(p, m, q, &scaled_d, (1, p), &hv.data, (q, 1), &mut gu.data[l * p * q..(l + 1) * p * q], true);
                }
                acc(*d, gd);
                acc(*u, gu);
                acc(*h, gh);
            }
            Op::Lstm { input, w_ih, w_hh, bias, reverse, cache } => {
                let (ga, gw_ih, gw_hh, gb) = self.lstm_backward(*input, *w_ih, *w_hh, *bias, *reverse, cache, g);
                acc(*input, ga);
                acc(*w_ih, gw_ih);
                acc(*w_hh, gw_hh);
                acc(*bias, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        input: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        reverse: bool,
        cache: &LstmCache,
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor, Tensor) {
        let x = self.value(input);
        let (steps, in_dim) = (x.shape[0], x.shape[1]);
        let whh = self.value(w_hh);
        let h = whh.shape[0];
        let four_h = 4 * h;
        let pos = |s: usize| if reverse { steps - 1 - s } else { s };

        // Pre-activation gradients per step (processing order).
        let mut dpre = vec![0.0; steps * four_h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for s in (0..steps).rev() {
            let t = pos(s);
            let gt = &cache.gates[s * four_h..(s + 1) * four_h];
            let d = &mut dpre[s * four_h..(s + 1) * four_h];
            for j in 0..h {
                let dh = g.data[t * h + j] + dh_next[j];
                let (i_g, f_g, c_g, o_g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let tc = cache.tanh_cells[s * h + j];
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                let c_prev = if s > 0 { cache.cells[(s - 1) * h + j] } else { 0.0 };
                d[j] = dc * c_g * i_g * (1.0 - i_g);
                d[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                d[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                d[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            // dh_prev = d · W_hhᵀ
            gemm(1, four_h, h, d, (four_h, 1), &whh.data, (1, four_h), &mut dh_next, false);
        }

        // Reorder to input positions for the dense products.
        let mut dpre_pos = vec![0.0; steps * four_h];
        let mut h_prev_pos = vec![0.0; steps * h];
        for s in 0..steps {
            let t = pos(s);
            dpre_pos[t * four_h..(t + 1) * four_h].copy_from_slice(&dpre[s * four_h..(s + 1) * four_h]);
            if s > 0 {
                for j in 0..h {
                    let o_g = cache.gates[(s - 1) * four_h + 3 * h + j];
                    h_prev_pos[t * h + j] = o_g * cache.tanh_cells[(s - 1) * h + j];
                }
            }
        }

        let mut gx = Tensor::zeros(&[steps, in_dim]);
        gemm(steps, four_h, in_dim, &dpre_pos, (four_h, 1), &self.value(w_ih).data, (1, four_h), &mut gx.data, false);
        let mut gw_ih = Tensor::zeros(&[in_dim, four_h]);
        gemm(in_dim, steps, four_h, &x.data, (1, in_dim), &dpre_pos, (four_h, 1), &mut gw_ih.data, false);
        let mut gw_hh = Tensor::zeros(&[h, four_h]);
        gemm(h, steps, four_h, &h_prev_pos, (1, h), &dpre_pos, (four_h, 1), &mut gw_hh.data, false);
        let mut gb = Tensor::zeros(&self.value(bias).shape);
        for row in dpre_pos.chunks(four_h) {
            for (a, b) in gb.data.iter_mut().zip(row) {
                *a += b;
            }
        }
        (gx, gw_ih, gw_hh, gb)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

/// Worst entry found by [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare reverse-mode gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every parameter.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(AutodiffError::Argument("eps must be positive".into()));
    }
    let evaluate = |store: &ParamStore| -> Result<(f64, bool)> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok((tape.value(loss).item(), tape.is_stochastic()))
    };

    let mut grads = Gradients::zeros_like(store);
    let base = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        if tape.is_stochastic() {
            return Err(AutodiffError::Nondeterministic);
        }
        tape.backward(loss, &mut grads)?;
        tape.value(loss).item()
    };
    if evaluate(store)?.0 != base {
        return Err(AutodiffError::Nondeterministic);
    }

    let mut report =
        GradCheckReport { max_relative_error: 0.0, param: String::new(), index: 0, analytic: 0.0, numeric: 0.0, entries_checked: 0 };
    for p in 0..store.len() {
        for k in 0..store.params[p].value.len() {
            let orig = store.params[p].value.data[k];
            store.params[p].value.data[k] = orig + eps;
            let plus = evaluate(store)?.0;
            store.params[p].value.data[k] = orig - eps;
            let minus = evaluate(store)?.0;
            store.params[p].value.data[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.0[p].data[k];
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.param.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                if err >= report.max_relative_error {
                    report.param = store.params[p].name.clone();
                    report.index = k;
                    report.analytic = analytic;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
