//! Dense 2-D tensors with reverse-mode differentiation.
//!
//! Operations are executed through a [`Record`]: each op computes its value
//! eagerly and, when gradients are enabled, appends a backward step to the
//! record. [`Record::backward`] replays the recorded steps in reverse
//! execution order (a valid topological order by construction), so every
//! operation is visited exactly once.
//!
//! A record and the tensors created on it are confined to one logical
//! thread; independent records on independent threads are safe.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::fmt;
use core::ops::Range;

use rand::Rng;

use crate::mathx;
use crate::rng::Stream;

/// Guard for L2-normalization denominators: `max(norm, EPS_NORM)`.
pub const EPS_NORM: f64 = 1e-12;
/// Variance epsilon used by batch normalization.
pub const EPS_BATCH_NORM: f64 = 1e-5;
/// Fraction of the batch statistic blended into the running statistic.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named op.
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    /// `backward` was invoked on a non-scalar tensor.
    NotScalar { shape: [usize; 2] },
    /// A row/label index fell outside the valid range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// An argument violated the op's contract (e.g. dropout p >= 1).
    InvalidArg { op: &'static str, msg: &'static str },
    /// Batch normalization in train mode needs at least two rows.
    DegenerateBatch { rows: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                lhs[0], lhs[1], rhs[0], rhs[1]
            ),
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got {}x{}", shape[0], shape[1])
            }
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TensorError::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
            TensorError::DegenerateBatch { rows } => {
                write!(f, "batch_norm train mode needs >= 2 rows, got {rows}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// Plain row-major matrix of `f64` values (no gradient tracking).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::InvalidArg {
                op: "Matrix::from_vec",
                msg: "data length does not match rows*cols",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::InvalidArg {
                    op: "Matrix::from_rows",
                    msg: "ragged rows",
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stack selected rows into a new matrix (rows may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise L2 normalization with the `max(norm, EPS_NORM)` guard.
    pub fn l2_normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = mathx::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(EPS_NORM);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        out
    }
}

/// `out += a (m x k) * b (k x n)`
fn matmul_nn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += a (m x k) * b^T (b is n x k)`
fn matmul_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a^T (a is k x m) * b (k x n)`
fn matmul_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..k {
        let arow = &a[i * m..(i + 1) * m];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

struct TensorData {
    shape: [usize; 2],
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a tensor living on a [`Record`].
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

impl Tensor {
    fn new(shape: [usize; 2], value: Vec<f64>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape[0] * shape[1], value.len());
        Tensor(Rc::new(RefCell::new(TensorData {
            shape,
            value,
            grad: None,
            requires_grad,
        })))
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.borrow().shape
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Borrow the raw value buffer (row-major).
    pub fn value(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |d| d.value.as_slice())
    }

    /// Copy of the value as a [`Matrix`].
    pub fn to_matrix(&self) -> Matrix {
        let d = self.0.borrow();
        Matrix {
            rows: d.shape[0],
            cols: d.shape[1],
            data: d.value.clone(),
        }
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        debug_assert_eq!(d.shape, [1, 1]);
        d.value[0]
    }

    /// Copy of the accumulated gradient, if one has been populated.
    pub fn grad(&self) -> Option<Matrix> {
        let d = self.0.borrow();
        d.grad.as_ref().map(|g| Matrix {
            rows: d.shape[0],
            cols: d.shape[1],
            data: g.clone(),
        })
    }

    /// Reset the gradient buffer to zeros (keeps the allocation).
    pub fn zero_grad(&self) {
        let mut d = self.0.borrow_mut();
        if let Some(g) = d.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn grad_snapshot(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut d = self.0.borrow_mut();
        let n = d.value.len();
        debug_assert_eq!(contrib.len(), n);
        let g = d.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gv, &cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.borrow();
        write!(
            f,
            "Tensor({}x{}, requires_grad={})",
            d.shape[0], d.shape[1], d.requires_grad
        )
    }
}

/// Train/eval switch for mode-dependent ops (dropout, batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running statistics owned by a batch-normalization unit.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    /// Identity statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Axis selector for per-slice ops on 2-D tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Slices are rows; reductions run over columns.
    Rows,
    /// Slices are columns; reductions run over rows.
    Cols,
}

struct Step {
    backward: Box<dyn Fn()>,
}

/// Ordered record of executed operations, replayed in reverse by
/// [`Record::backward`].
pub struct Record {
    steps: Vec<Step>,
    produced: Vec<Tensor>,
    grad_enabled: bool,
}

impl Default for Record {
    fn default() -> Self {
        Self::new()
    }
}

impl Record {
    /// Record with gradient tracking enabled.
    pub fn new() -> Self {
        Record {
            steps: Vec::new(),
            produced: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Record that computes values only; `backward` is a no-op.
    pub fn inference() -> Self {
        Record {
            steps: Vec::new(),
            produced: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Create a leaf tensor. Leaf gradients accumulate across `backward`
    /// calls until explicitly reset.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        Tensor::new(
            [value.rows, value.cols],
            value.data,
            requires_grad && self.grad_enabled,
        )
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    /// A fresh 1x1 constant (handy when assembling losses).
    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(Matrix::from_vec(1, 1, vec![v]).expect("1x1"))
    }

    fn output(&mut self, shape: [usize; 2], value: Vec<f64>, requires_grad: bool) -> Tensor {
        let t = Tensor::new(shape, value, requires_grad);
        if requires_grad {
            self.produced.push(t.clone());
        }
        t
    }

    fn push_step(&mut self, backward: impl Fn() + 'static) {
        self.steps.push(Step {
            backward: Box::new(backward),
        });
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    /// Standard matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let [m, k] = a.shape();
        let [kb, n] = b.shape();
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&a.value(), m, k, &b.value(), n, &mut out);
        let rg = self.wants_grad(&[a, b]);
        let t = self.output([m, n], out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(&g, m, n, &b.value(), k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&a.value(), m, k, &g, n, &mut db);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(t)
    }

    /// `a (m x k) * b^T` where `b` is `n x k`.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let [m, k] = a.shape();
        let [n, kb] = b.shape();
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&a.value(), m, k, &b.value(), n, &mut out);
        let rg = self.wants_grad(&[a, b]);
        let t = self.output([m, n], out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    matmul_nn_acc(&g, m, n, &b.value(), k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(&g, m, n, &a.value(), k, &mut db);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(t)
    }

    fn elementwise_pair(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, [usize; 2]), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = a
            .value()
            .iter()
            .zip(b.value().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, a.shape()))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (out, shape) = Self::elementwise_pair("add", a, b, |x, y| x + y)?;
        let rg = self.wants_grad(&[a, b]);
        let t = self.output(shape, out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g);
                }
            });
        }
        Ok(t)
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (out, shape) = Self::elementwise_pair("sub", a, b, |x, y| x - y)?;
        let rg = self.wants_grad(&[a, b]);
        let t = self.output(shape, out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            });
        }
        Ok(t)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (out, shape) = Self::elementwise_pair("mul", a, b, |x, y| x * y)?;
        let rg = self.wants_grad(&[a, b]);
        let t = self.output(shape, out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    let da: Vec<f64> =
                        g.iter().zip(b.value().iter()).map(|(&g, &y)| g * y).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> =
                        g.iter().zip(a.value().iter()).map(|(&g, &x)| g * x).collect();
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(t)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let out = a.value().iter().map(|&x| c * x).collect();
        let rg = self.wants_grad(&[a]);
        let t = self.output(a.shape(), out, rg);
        if rg {
            let (a, o) = (a.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let da: Vec<f64> = g.iter().map(|&v| c * v).collect();
                a.accumulate_grad(&da);
            });
        }
        t
    }

    /// Add a `1 x c` bias row to every row of `x (n x c)`.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let [n, c] = x.shape();
        if bias.shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = x.value().to_vec();
        {
            let b = bias.value();
            for r in 0..n {
                for j in 0..c {
                    out[r * c + j] += b[j];
                }
            }
        }
        let rg = self.wants_grad(&[x, bias]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, bias, o) = (x.clone(), bias.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if x.requires_grad() {
                    x.accumulate_grad(&g);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            });
        }
        Ok(t)
    }

    /// Horizontal concatenation of `n x c1` and `n x c2`.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let [n, c1] = a.shape();
        let [nb, c2] = b.shape();
        if n != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Vec::with_capacity(n * (c1 + c2));
        {
            let av = a.value();
            let bv = b.value();
            for r in 0..n {
                out.extend_from_slice(&av[r * c1..(r + 1) * c1]);
                out.extend_from_slice(&bv[r * c2..(r + 1) * c2]);
            }
        }
        let rg = self.wants_grad(&[a, b]);
        let t = self.output([n, c1 + c2], out, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let c = c1 + c2;
                if a.requires_grad() {
                    let mut da = vec![0.0; n * c1];
                    for r in 0..n {
                        da[r * c1..(r + 1) * c1].copy_from_slice(&g[r * c..r * c + c1]);
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n * c2];
                    for r in 0..n {
                        db[r * c2..(r + 1) * c2].copy_from_slice(&g[r * c + c1..(r + 1) * c]);
                    }
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(t)
    }

    /// Copy the column range `cols` out of `x (n x c)`.
    pub fn slice_cols(&mut self, x: &Tensor, cols: Range<usize>) -> Result<Tensor, TensorError> {
        let [n, c] = x.shape();
        if cols.end > c || cols.start >= cols.end {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: cols.end,
                bound: c,
            });
        }
        let width = cols.len();
        let mut out = Vec::with_capacity(n * width);
        {
            let xv = x.value();
            for r in 0..n {
                out.extend_from_slice(&xv[r * c + cols.start..r * c + cols.end]);
            }
        }
        let rg = self.wants_grad(&[x]);
        let t = self.output([n, width], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            let start = cols.start;
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    dx[r * c + start..r * c + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(t)
    }

    /// Stack the rows `idx` of `x` into a new tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
        let [n, c] = x.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        {
            let xv = x.value();
            for &i in idx {
                out.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let rows = idx.len();
        let rg = self.wants_grad(&[x]);
        let t = self.output([rows, c], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            let idx = idx.to_vec();
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let mut dx = vec![0.0; n * c];
                for (e, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[e * c + j];
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(t)
    }

    /// Per-segment weighted sum of rows: `out[s] = sum_{e in segments[s]}
    /// weights[e] * x[e]`. Weights are constants (not differentiated).
    pub fn weighted_segment_sum(
        &mut self,
        x: &Tensor,
        weights: &[f64],
        segments: &[Range<usize>],
    ) -> Result<Tensor, TensorError> {
        let [e_rows, c] = x.shape();
        if weights.len() != e_rows {
            return Err(TensorError::InvalidArg {
                op: "weighted_segment_sum",
                msg: "weights length must equal the number of rows",
            });
        }
        for seg in segments {
            if seg.end > e_rows || seg.start > seg.end {
                return Err(TensorError::IndexOutOfRange {
                    op: "weighted_segment_sum",
                    index: seg.end,
                    bound: e_rows,
                });
            }
        }
        let n = segments.len();
        let mut out = vec![0.0; n * c];
        {
            let xv = x.value();
            for (s, seg) in segments.iter().enumerate() {
                let orow = &mut out[s * c..(s + 1) * c];
                for e in seg.clone() {
                    let w = weights[e];
                    let xrow = &xv[e * c..(e + 1) * c];
                    for (o, &v) in orow.iter_mut().zip(xrow) {
                        *o += w * v;
                    }
                }
            }
        }
        let rg = self.wants_grad(&[x]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            let weights = weights.to_vec();
            let segments = segments.to_vec();
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let mut dx = vec![0.0; e_rows * c];
                for (s, seg) in segments.iter().enumerate() {
                    let grow = &g[s * c..(s + 1) * c];
                    for e in seg.clone() {
                        let w = weights[e];
                        let drow = &mut dx[e * c..(e + 1) * c];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += w * gv;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(t)
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        let out = x.value().iter().map(|&v| v.max(slope * v)).collect();
        let rg = self.wants_grad(&[x]);
        let t = self.output(x.shape(), out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.value().iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { g * slope })
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        t
    }

    /// Elementwise logistic sigmoid, evaluated on the non-overflowing branch.
    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x
            .value()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + mathx::exp(-v))
                } else {
                    let e = mathx::exp(v);
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.wants_grad(&[x]);
        let t = self.output(x.shape(), out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let dx: Vec<f64> = {
                    let y = o.value();
                    g.iter().zip(y.iter()).map(|(&g, &y)| g * y * (1.0 - y)).collect()
                };
                x.accumulate_grad(&dx);
            });
        }
        t
    }

    /// Temperature-scaled softmax along `axis`: `softmax(inv_temp * x)`,
    /// stabilized by max subtraction.
    pub fn softmax_scaled(&mut self, x: &Tensor, inverse_temperature: f64, axis: Axis) -> Tensor {
        let [n, c] = x.shape();
        let mut out = vec![0.0; n * c];
        {
            let xv = x.value();
            for_each_slice(n, c, axis, |slice| {
                let mut m = f64::NEG_INFINITY;
                for &i in slice {
                    m = m.max(inverse_temperature * xv[i]);
                }
                let mut z = 0.0;
                for &i in slice {
                    let e = mathx::exp(inverse_temperature * xv[i] - m);
                    out[i] = e;
                    z += e;
                }
                for &i in slice {
                    out[i] /= z;
                }
            });
        }
        let rg = self.wants_grad(&[x]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let mut dx = vec![0.0; n * c];
                {
                    let y = o.value();
                    for_each_slice(n, c, axis, |slice| {
                        let mut dot = 0.0;
                        for &i in slice {
                            dot += g[i] * y[i];
                        }
                        for &i in slice {
                            dx[i] = inverse_temperature * y[i] * (g[i] - dot);
                        }
                    });
                }
                x.accumulate_grad(&dx);
            });
        }
        t
    }

    /// Per-slice L2 normalization along `axis` with the guarded denominator
    /// `max(norm, EPS_NORM)`; an all-zero slice maps to zero.
    pub fn l2_normalize(&mut self, x: &Tensor, axis: Axis) -> Tensor {
        let [n, c] = x.shape();
        let mut out = vec![0.0; n * c];
        let mut norms = Vec::new();
        {
            let xv = x.value();
            for_each_slice(n, c, axis, |slice| {
                let mut ss = 0.0;
                for &i in slice {
                    ss += xv[i] * xv[i];
                }
                let norm = mathx::sqrt(ss).max(EPS_NORM);
                norms.push(norm);
                for &i in slice {
                    out[i] = xv[i] / norm;
                }
            });
        }
        let rg = self.wants_grad(&[x]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let mut dx = vec![0.0; n * c];
                {
                    let y = o.value();
                    let mut s = 0usize;
                    for_each_slice(n, c, axis, |slice| {
                        let norm = norms[s];
                        s += 1;
                        if norm > EPS_NORM {
                            let mut dot = 0.0;
                            for &i in slice {
                                dot += g[i] * y[i];
                            }
                            for &i in slice {
                                dx[i] = (g[i] - y[i] * dot) / norm;
                            }
                        } else {
                            // Guarded branch: the denominator is a constant.
                            for &i in slice {
                                dx[i] = g[i] / norm;
                            }
                        }
                    });
                }
                x.accumulate_grad(&dx);
            });
        }
        t
    }

    /// Batch normalization over the row (node) dimension of `x (n x c)`.
    ///
    /// Train mode normalizes with batch statistics (variance epsilon 1e-5),
    /// applies `scale`/`shift`, and folds the batch statistics into
    /// `running` with momentum 0.1 (unbiased variance, the usual
    /// convention). Eval mode normalizes with `running` as-is.
    pub fn batch_norm(
        &mut self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        running: &mut BnRunning,
        phase: Phase,
    ) -> Result<Tensor, TensorError> {
        let [n, c] = x.shape();
        if scale.shape() != [1, c] || shift.shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape(),
                rhs: scale.shape(),
            });
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::InvalidArg {
                op: "batch_norm",
                msg: "running statistics have wrong channel count",
            });
        }
        match phase {
            Phase::Train => self.batch_norm_train(x, scale, shift, running, n, c),
            Phase::Eval => self.batch_norm_eval(x, scale, shift, running, n, c),
        }
    }

    fn batch_norm_train(
        &mut self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        running: &mut BnRunning,
        n: usize,
        c: usize,
    ) -> Result<Tensor, TensorError> {
        if n < 2 {
            return Err(TensorError::DegenerateBatch { rows: n });
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        {
            let xv = x.value();
            for r in 0..n {
                for j in 0..c {
                    mean[j] += xv[r * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for r in 0..n {
                for j in 0..c {
                    let d = xv[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let sc = scale.value();
            let sh = shift.value();
            for r in 0..n {
                for j in 0..c {
                    let h = (xv[r * c + j] - mean[j]) / mathx::sqrt(var[j] + EPS_BATCH_NORM);
                    xhat[r * c + j] = h;
                    out[r * c + j] = sc[j] * h + sh[j];
                }
            }
        }
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..c {
            running.mean[j] =
                (1.0 - BATCH_NORM_MOMENTUM) * running.mean[j] + BATCH_NORM_MOMENTUM * mean[j];
            running.var[j] = (1.0 - BATCH_NORM_MOMENTUM) * running.var[j]
                + BATCH_NORM_MOMENTUM * var[j] * unbias;
        }
        let rg = self.wants_grad(&[x, scale, shift]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, scale, shift, o) = (x.clone(), scale.clone(), shift.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let nf = n as f64;
                if scale.requires_grad() {
                    let mut ds = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            ds[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    scale.accumulate_grad(&ds);
                }
                if shift.requires_grad() {
                    let mut dsh = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dsh[j] += g[r * c + j];
                        }
                    }
                    shift.accumulate_grad(&dsh);
                }
                if x.requires_grad() {
                    // Standard backward through the batch statistics.
                    let dx = {
                        let sc = scale.value();
                        let mut dx = vec![0.0; n * c];
                        for j in 0..c {
                            let istd = 1.0 / mathx::sqrt(var[j] + EPS_BATCH_NORM);
                            let mut sum_dy = 0.0;
                            let mut sum_dy_xhat = 0.0;
                            for r in 0..n {
                                let dy = g[r * c + j] * sc[j];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[r * c + j];
                            }
                            for r in 0..n {
                                let dy = g[r * c + j] * sc[j];
                                dx[r * c + j] =
                                    istd * (dy - sum_dy / nf - xhat[r * c + j] * sum_dy_xhat / nf);
                            }
                        }
                        dx
                    };
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(t)
    }

    fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        running: &BnRunning,
        n: usize,
        c: usize,
    ) -> Result<Tensor, TensorError> {
        // Identity statistics must be an exact identity, so the epsilon
        // only guards small variances instead of being added throughout.
        let istd: Vec<f64> = running
            .var
            .iter()
            .map(|&v| 1.0 / mathx::sqrt(v.max(EPS_BATCH_NORM)))
            .collect();
        let rmean = running.mean.clone();
        let mut out = vec![0.0; n * c];
        {
            let xv = x.value();
            let sc = scale.value();
            let sh = shift.value();
            for r in 0..n {
                for j in 0..c {
                    out[r * c + j] = sc[j] * (xv[r * c + j] - rmean[j]) * istd[j] + sh[j];
                }
            }
        }
        let rg = self.wants_grad(&[x, scale, shift]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, scale, shift, o) = (x.clone(), scale.clone(), shift.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                if x.requires_grad() {
                    let dx: Vec<f64> = {
                        let sc = scale.value();
                        g.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * sc[i % c] * istd[i % c])
                            .collect()
                    };
                    x.accumulate_grad(&dx);
                }
                if scale.requires_grad() {
                    let ds = {
                        let xv = x.value();
                        let mut ds = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                ds[j] += g[r * c + j] * (xv[r * c + j] - rmean[j]) * istd[j];
                            }
                        }
                        ds
                    };
                    scale.accumulate_grad(&ds);
                }
                if shift.requires_grad() {
                    let mut dsh = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            dsh[j] += g[r * c + j];
                        }
                    }
                    shift.accumulate_grad(&dsh);
                }
            });
        }
        Ok(t)
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: &Tensor,
        p: f64,
        phase: Phase,
        rng: &mut Stream,
    ) -> Result<Tensor, TensorError> {
        let mask_len = x.rows() * x.cols();
        self.dropout_impl(x, p, phase, rng, mask_len, false)
    }

    /// Dropout with one mask per column, shared by every row. Keeps
    /// row-symmetric computations symmetric under a single mask draw.
    pub fn dropout_shared_rows(
        &mut self,
        x: &Tensor,
        p: f64,
        phase: Phase,
        rng: &mut Stream,
    ) -> Result<Tensor, TensorError> {
        let cols = x.cols();
        self.dropout_impl(x, p, phase, rng, cols, true)
    }

    fn dropout_impl(
        &mut self,
        x: &Tensor,
        p: f64,
        phase: Phase,
        rng: &mut Stream,
        mask_len: usize,
        shared: bool,
    ) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                msg: "drop probability must lie in [0, 1)",
            });
        }
        if phase == Phase::Eval || p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..mask_len)
            .map(|_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let [n, c] = x.shape();
        let out: Vec<f64> = x
            .value()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * if shared { mask[i % c] } else { mask[i] })
            .collect();
        let rg = self.wants_grad(&[x]);
        let t = self.output([n, c], out, rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let dx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * if shared { mask[i % c] } else { mask[i] })
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(t)
    }

    /// Mean cross entropy of score rows against integer labels, stabilized
    /// with log-sum-exp.
    pub fn cross_entropy_from_scores(
        &mut self,
        scores: &Tensor,
        labels: &[usize],
    ) -> Result<Tensor, TensorError> {
        let [m, n] = scores.shape();
        if labels.len() != m {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy_from_scores",
                msg: "one label per score row required",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_from_scores",
                index: bad,
                bound: n,
            });
        }
        let mut total = 0.0;
        {
            let sv = scores.value();
            for (r, &label) in labels.iter().enumerate() {
                let row = &sv[r * n..(r + 1) * n];
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = mx + mathx::ln(row.iter().map(|&s| mathx::exp(s - mx)).sum::<f64>());
                total += lse - row[label];
            }
        }
        let value = total / m as f64;
        let rg = self.wants_grad(&[scores]);
        let t = self.output([1, 1], vec![value], rg);
        if rg {
            let (scores, o) = (scores.clone(), t.clone());
            let labels = labels.to_vec();
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let gv = g[0] / m as f64;
                let ds = {
                    let sv = scores.value();
                    let mut ds = vec![0.0; m * n];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &sv[r * n..(r + 1) * n];
                        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let mut z = 0.0;
                        for (j, &s) in row.iter().enumerate() {
                            let e = mathx::exp(s - mx);
                            ds[r * n + j] = e;
                            z += e;
                        }
                        for (j, d) in ds[r * n..(r + 1) * n].iter_mut().enumerate() {
                            *d = gv * (*d / z - f64::from(j == label));
                        }
                    }
                    ds
                };
                scores.accumulate_grad(&ds);
            });
        }
        Ok(t)
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let value = x.value().iter().sum();
        let rg = self.wants_grad(&[x]);
        let t = self.output([1, 1], vec![value], rg);
        if rg {
            let (x, o) = (x.clone(), t.clone());
            self.push_step(move || {
                let Some(g) = o.grad_snapshot() else { return };
                let n = x.rows() * x.cols();
                let dx = vec![g[0]; n];
                x.accumulate_grad(&dx);
            });
        }
        t
    }

    /// Replay all recorded operations in reverse, accumulating gradients
    /// into every `requires_grad` tensor that influenced `loss`.
    ///
    /// Gradients of tensors produced by ops on this record are reset at the
    /// start of each call; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.shape() != [1, 1] {
            return Err(TensorError::NotScalar { shape: loss.shape() });
        }
        for t in &self.produced {
            t.zero_grad();
        }
        if loss.requires_grad() {
            loss.accumulate_grad(&[1.0]);
        }
        for step in self.steps.iter().rev() {
            (step.backward)();
        }
        Ok(())
    }
}

/// Call `f` with the flat indices of every slice along `axis`.
fn for_each_slice(rows: usize, cols: usize, axis: Axis, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::new();
    match axis {
        Axis::Rows => {
            for r in 0..rows {
                idx.clear();
                idx.extend((0..cols).map(|c| r * cols + c));
                f(&idx);
            }
        }
        Axis::Cols => {
            for c in 0..cols {
                idx.clear();
                idx.extend((0..rows).map(|r| r * cols + c));
                f(&idx);
            }
        }
    }
}
