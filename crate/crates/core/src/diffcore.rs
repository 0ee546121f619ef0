//! Dense f64 tensors with a reverse-mode gradient tape.
//!
//! Every trainable module in this crate (GNN encoder, soft-prompt projector,
//! policy transformer) is built from the closed primitive set below. Values
//! are recorded on a [`Tape`] during the forward pass; [`Tape::backward`]
//! replays the tape in reverse and accumulates gradients for every leaf that
//! was registered with `requires_grad`.
//!
//! Numerical conventions:
//! - all storage is row-major f64, tensors are 2-D `[rows, cols]`, a scalar
//!   is `[1, 1]`;
//! - softmax and log-softmax subtract the row max before exponentiating;
//! - `log sigmoid(z)` is computed as `-softplus(-z)`.

use std::collections::BTreeMap;

use thiserror::Error;

/// Errors produced by tensor ops and the optimizer.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("row index {index} out of bounds for {rows} rows in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("{op} requires at least one input")]
    EmptyInput { op: &'static str },
}

pub type DiffResult<T> = Result<T, DiffError>;

/// A dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Tensor {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    /// A 1 x d row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let d = data.len();
        Tensor::new(1, d, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable sigmoid.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// log sigmoid(z) = -softplus(-z).
pub fn log_sigmoid(x: f64) -> f64 {
    -stable_softplus(-x)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    MeanAll(Var),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every grad-requiring node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, zero-filled when the var is off the loss's ancestry.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        let data = match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Tensor {
            shape: shape.clone(),
            data,
            requires_grad: false,
        }
    }
}

/// Record of primitive operations in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Register a tensor as a leaf; gradients are keyed by the returned handle.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t.clone(), rg)
    }

    /// A leaf that never receives gradient (masks, labels, fixed features).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn constant_row(&mut self, data: Vec<f64>) -> Var {
        self.constant(Tensor::row(data))
    }

    pub fn zeros_const(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                details: format!("{m}x{k} * {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.value(a).data;
            let bv = &self.value(b).data;
            matmul_into(av, bv, &mut out, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(m, n, out), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let sa = self.shape2(a);
        let sb = self.shape2(b);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(sa.0, sa.1, data), rg))
    }

    /// `[n x d] + [1 x d]` with the bias row broadcast over all rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        let (br, bd) = self.shape2(bias);
        if br != 1 || bd != d {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                details: format!("{n}x{d} + {br}x{bd}"),
            });
        }
        let mut data = self.value(a).data.clone();
        let bv = self.value(bias).data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bv[c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddBias(a, bias), Tensor::new(n, d, data), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let sa = self.shape2(a);
        let sb = self.shape2(b);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op: "sub",
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), Tensor::new(sa.0, sa.1, data), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let sa = self.shape2(a);
        let sb = self.shape2(b);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(sa.0, sa.1, data), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> DiffResult<Var> {
        let (r, cl) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), Tensor::new(r, cl, data), rg))
    }

    pub fn neg(&mut self, a: Var) -> DiffResult<Var> {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|x| -x).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Neg(a), Tensor::new(r, c, data), rg))
    }

    /// Stack inputs vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> DiffResult<Var> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.shape2(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shape2(p);
            if c != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("expected {cols} cols, got {c}"),
                });
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(rows, cols, data),
            rg,
        ))
    }

    /// Stack inputs horizontally; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> DiffResult<Var> {
        if parts.is_empty() {
            return Err(DiffError::EmptyInput { op: "concat_cols" });
        }
        let rows = self.shape2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p);
            if r != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("expected {rows} rows, got {r}"),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value.data;
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(rows, total, data),
            rg,
        ))
    }

    /// Column-wise mean over rows: `[n x d] -> [1 x d]`.
    pub fn mean_rows(&mut self, a: Var) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        if n == 0 {
            return Err(DiffError::EmptyInput { op: "mean_rows" });
        }
        let av = &self.value(a).data;
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += av[r * d + c];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MeanRows(a), Tensor::new(1, d, out), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> DiffResult<Var> {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Sigmoid(a), Tensor::new(r, c, data), rg))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        let av = &self.value(a).data;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (row[c] - m).exp();
                out[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                out[r * d + c] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::new(n, d, out), rg))
    }

    /// Row-wise log-softmax: `x - max - ln(sum exp(x - max))`.
    pub fn log_softmax_rows(&mut self, a: Var) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        let av = &self.value(a).data;
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &av[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
            for c in 0..d {
                out[r * d + c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmaxRows(a), Tensor::new(n, d, out), rg))
    }

    pub fn log(&mut self, a: Var) -> DiffResult<Var> {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.ln()).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a), Tensor::new(r, c, data), rg))
    }

    pub fn relu(&mut self, a: Var) -> DiffResult<Var> {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Relu(a), Tensor::new(r, c, data), rg))
    }

    pub fn softplus(&mut self, a: Var) -> DiffResult<Var> {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| stable_softplus(x)).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Softplus(a), Tensor::new(r, c, data), rg))
    }

    /// Select rows by index; duplicate indices are allowed and accumulate
    /// gradient on the same source row.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        for &i in indices {
            if i >= n {
                return Err(DiffError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    rows: n,
                });
            }
        }
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::GatherRows(a, indices.to_vec()),
            Tensor::new(indices.len(), d, data),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> DiffResult<Var> {
        let (n, d) = self.shape2(a);
        let av = &self.value(a).data;
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = av[r * d + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::new(d, n, data), rg))
    }

    pub fn sum(&mut self, a: Var) -> DiffResult<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> DiffResult<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(DiffError::EmptyInput { op: "mean_all" });
        }
        let s: f64 = self.value(a).data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s), rg))
    }

    /// Reinterpret the row-major buffer under a new 2-D shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> DiffResult<Var> {
        let t = self.value(a);
        if t.numel() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {rows}x{cols}", t.shape),
            });
        }
        let data = t.data.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), Tensor::new(rows, cols, data), rg))
    }

    /// Reverse pass from a scalar loss. Visits each recorded operation once,
    /// in reverse topological order.
    pub fn backward(&self, loss: Var) -> DiffResult<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Leaves requiring grad but off the ancestry get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let (_, n) = self.shape2(*b);
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.rg(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv != 0.0 {
                                for j in 0..k {
                                    da[r * k + j] += gv * bv[j * n + c];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let a_rj = av[r * k + j];
                            if a_rj != 0.0 {
                                for c in 0..n {
                                    db[j * n + c] += a_rj * g[r * n + c];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g);
                if self.rg(*bias) {
                    let (n, d) = self.shape2(*a);
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = zip_map(g, &self.value(*b).data, |x, y| x * y);
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db = zip_map(g, &self.value(*a).data, |x, y| x * y);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let sz = self.value(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + sz]);
                    offset += sz;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.shape2(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.shape2(p).1).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape2(p).1;
                    if self.rg(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                // Each of the n rows receives 1/n of the upstream gradient.
                let (n, d) = self.shape2(*a);
                let inv = 1.0 / n as f64;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        da[r * d + c] = g[c] * inv;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[i].value.data;
                let da = zip_map(g, s, |gv, sv| gv * sv * (1.0 - sv));
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (n, d) = self.shape2(*a);
                let s = &self.nodes[i].value.data;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    let srow = &s[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for c in 0..d {
                        da[r * d + c] = srow[c] * (grow[c] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LogSoftmaxRows(a) => {
                let (n, d) = self.shape2(*a);
                let out = &self.nodes[i].value.data;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    let orow = &out[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..d {
                        da[r * d + c] = grow[c] - orow[c].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Log(a) => {
                let av = &self.value(*a).data;
                let da = zip_map(g, av, |gv, xv| gv / xv);
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                let da = zip_map(g, av, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, &da);
            }
            Op::Softplus(a) => {
                let av = &self.value(*a).data;
                let da = zip_map(g, av, |gv, xv| gv * stable_sigmoid(xv));
                self.accumulate(grads, *a, &da);
            }
            Op::GatherRows(a, indices) => {
                let (n, d) = self.shape2(*a);
                let mut da = vec![0.0; n * d];
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..d {
                        da[src * d + c] += g[r * d + c];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Transpose(a) => {
                let (n, d) = self.shape2(*a);
                // g has shape d x n
                let mut da = vec![0.0; n * d];
                for r in 0..d {
                    for c in 0..n {
                        da[c * d + r] = g[r * n + c];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let sz = self.value(*a).numel();
                let da = vec![g[0]; sz];
                self.accumulate(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let sz = self.value(*a).numel();
                let da = vec![g[0] / sz as f64; sz];
                self.accumulate(grads, *a, &da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (j, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[j * n..(j + 1) * n];
                for c in 0..n {
                    orow[c] += av * brow[c];
                }
            }
        }
    }
}

/// AdamW configuration; decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One parameter update handed to [`AdamW::step`].
pub struct ParamUpdate<'a> {
    pub name: String,
    pub param: &'a mut Tensor,
    pub grad: Vec<f64>,
}

/// AdamW with bias-corrected moments. Moments start at zero on first use of
/// each parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update at learning rate `lr` to every listed parameter.
    pub fn step(&mut self, lr: f64, updates: &mut [ParamUpdate]) -> DiffResult<()> {
        for u in updates.iter() {
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(DiffError::NonFiniteGradient(u.name.clone()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for u in updates.iter_mut() {
            let n = u.param.numel();
            let mom = self
                .state
                .entry(u.name.clone())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            for i in 0..n {
                let g = u.grad[i];
                mom.m[i] = self.cfg.beta1 * mom.m[i] + (1.0 - self.cfg.beta1) * g;
                mom.v[i] = self.cfg.beta2 * mom.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                let p = &mut u.param.data[i];
                *p -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
            }
        }
        Ok(())
    }

    /// Moment buffers in name order, for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.state
            .iter()
            .map(|(k, mv)| (k.clone(), mv.m.clone(), mv.v.clone()))
            .collect()
    }

    pub fn restore_state(&mut self, t: u64, entries: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.state = entries
            .into_iter()
            .map(|(k, m, v)| (k, Moments { m, v }))
            .collect();
    }
}

/// Gaussian-initialized tensor via Box-Muller, deterministic given the rng.
pub fn randn_tensor<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-300..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(rows, cols, data)
}

/// Rescale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference oracle. Uses forward evaluation only, so it
    //! stays independent of the backward pass it checks.

    /// d f / d x_i via central differences with step `eps` on each entry of
    /// `x`, where `f` re-evaluates the forward pass from scratch.
    pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            grad[i] = (fp - fm) / (2.0 * eps);
        }
        grad
    }

    /// Largest `|a - f| / max(|a|, |f|, floor)` over paired entries.
    pub fn max_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(fd)
            .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}
