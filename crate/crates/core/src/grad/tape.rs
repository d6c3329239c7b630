//! Reverse-mode evaluation over a closed set of tensor primitives.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the adjoint of every node that depends on a differentiable leaf.

use super::params::{Bound, GradRecord};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, f64),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::raw(a.shape().to_vec(), v)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(a.shape().to_vec(), a.values().iter().map(|&x| f(x)).collect())
}

/// `a (m×k) · b (k×n)`, i-k-j loop order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ (k×m)ᵀ · b (m×n)` where `a` is `m×k`; result `k×n`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::raw(vec![], vec![v]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        if self.value(b).values().iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// `a (r×c) + b (c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = matrix_dims("add_row", self.value(a))?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let out = (0..r * c).map(|i| av[i] + bv[i % c]).collect();
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::AddRow(a, b), &[a, b]))
    }

    /// `a (r×c) ⊙ b (c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = matrix_dims("mul_row", self.value(a))?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let out = (0..r * c).map(|i| av[i] * bv[i % c]).collect();
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MulRow(a, b), &[a, b]))
    }

    /// `a (r×c) ⊙ b (r)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = matrix_dims("mul_col", self.value(a))?;
        if self.value(b).shape() != [r] {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let out = (0..r * c).map(|i| av[i] * bv[i / c]).collect();
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MulCol(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = map(self.value(a), |x| k * x);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = map(self.value(a), |x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}×{k}) · ({k2}×{n})")));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("({m}×{k}) · ({n}×{k2})ᵀ"),
            ));
        }
        let out = matmul_nt_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = map(self.value(a), f64::exp);
        if !v.is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).values().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of non-positive value".into()));
        }
        let v = map(self.value(a), f64::ln);
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).values().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        let v = map(self.value(a), f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `max(a, 0)^k` for `k ≥ 1`.
    pub fn powf(&mut self, a: Var, k: f64) -> Result<Var> {
        if k < 1.0 {
            return Err(Error::invalid(format!("powf exponent {k} < 1")));
        }
        let v = map(self.value(a), |x| x.max(0.0).powf(k));
        Ok(self.push(v, Op::Powf(a, k), &[a]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().is_empty() || t.shape().len() > 2 {
            return Err(Error::shape("softmax", format!("shape {:?}", t.shape())));
        }
        let c = t.cols();
        let mut out = t.values().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax(a), &[a]))
    }

    /// Concatenation along `axis` (0 for vectors; 0 = rows, 1 = columns for matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let ndim = first.len();
        if ndim == 0 || ndim > 2 || axis >= ndim {
            return Err(Error::shape("concat", format!("axis {axis} on shape {first:?}")));
        }
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == ndim && (0..ndim).all(|d| d == axis || s[d] == first[d]);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} with {s:?} along axis {axis}"),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).shape()[axis]).sum();
        let value = if ndim == 1 || axis == 0 {
            let mut v = Vec::new();
            for p in parts {
                v.extend_from_slice(self.value(*p).values());
            }
            let mut shape = first.clone();
            shape[axis] = total;
            Tensor::raw(shape, v)
        } else {
            let r = first[0];
            let mut v = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    v.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::raw(vec![r, total], v)
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let v = Tensor::raw(shape.to_vec(), t.values().to_vec());
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Row-major flattening to a vector.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, &[n]).expect("flatten preserves size")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Tensor::raw(vec![], vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s: f64 = t.values().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::raw(vec![], vec![s]), Op::Mean(a), &[a]))
    }

    /// Per-row sums of a matrix, `r×c -> r`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("row_sum", self.value(a))?;
        let t = self.value(a);
        let out = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let _ = c;
        Ok(self.push(Tensor::raw(vec![r], out), Op::RowSum(a), &[a]))
    }

    /// Per-column means of a matrix, `r×c -> c`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("col_mean", self.value(a))?;
        if r == 0 {
            return Err(Error::shape("col_mean", "zero rows"));
        }
        let t = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(Tensor::raw(vec![c], out), Op::ColMean(a), &[a]))
    }

    /// Row lookup. Vectors are treated as a column of scalars.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c, shape) = match t.shape() {
            [r] => (*r, 1, vec![idx.len()]),
            [r, c] => (*r, *c, vec![idx.len(), *c]),
            s => return Err(Error::shape("gather_rows", format!("shape {s:?}"))),
        };
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let mut v = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            v.extend_from_slice(&t.values()[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::raw(shape, v),
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        ))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = matrix_dims("column", self.value(a))?;
        if j >= c {
            return Err(Error::shape("column", format!("column {j} of {c}")));
        }
        let t = self.value(a);
        let v = (0..r).map(|i| t.get2(i, j)).collect();
        Ok(self.push(Tensor::raw(vec![r], v), Op::Column(a, j), &[a]))
    }

    // --- composites -------------------------------------------------------

    /// `x Wᵀ + b` with `x: r×in`, `W: out×in`, `b: out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_nt(x, w)?;
        self.add_row(xw, b)
    }

    /// `keys · query / √d` for `keys: L×d`, `query: d`; returns `L` scores.
    pub fn scaled_dot(&mut self, keys: Var, query: Var) -> Result<Var> {
        let d = self.value(query).len();
        let q = self.reshape(query, &[1, d])?;
        let s = self.matmul_nt(keys, q)?;
        let s = self.flatten(s);
        Ok(self.scale(s, 1.0 / (d as f64).sqrt()))
    }

    /// Row-wise dot products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.row_sum(p)
    }

    // --- reverse pass -----------------------------------------------------

    /// Adjoints of every node with respect to the scalar `loss`.
    ///
    /// Entries are `None` for nodes that do not influence `loss` or that do not
    /// depend on any differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &self.nodes[i].value;
        let val = |v: Var| self.nodes[v.0].value.values();
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bv[k];
                    }
                });
                self.acc(grads, *b, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] / bv[k];
                    }
                });
                self.acc(grads, *b, |g| {
                    for k in 0..g.len() {
                        g[k] -= gy[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = y.cols();
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                self.acc(grads, *b, |g| {
                    for (k, d) in gy.iter().enumerate() {
                        g[k % c] += d;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = y.cols();
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bv[k % c];
                    }
                });
                self.acc(grads, *b, |g| {
                    for (k, d) in gy.iter().enumerate() {
                        g[k % c] += d * av[k];
                    }
                });
            }
            Op::MulCol(a, b) => {
                let c = y.cols();
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * bv[k / c];
                    }
                });
                self.acc(grads, *b, |g| {
                    for (k, d) in gy.iter().enumerate() {
                        g[k / c] += d * av[k];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += s * d));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = y.cols();
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    // gy (m×n) · bᵀ where b is k×n
                    let d = matmul_nt_raw(gy, bv, m, n, k);
                    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                });
                self.acc(grads, *b, |g| {
                    // aᵀ · gy
                    let d = matmul_tn_raw(av, gy, m, k, n);
                    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = y.cols();
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    // gy (m×n) · b (n×k)
                    let d = matmul_raw(gy, bv, m, n, k);
                    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                });
                self.acc(grads, *b, |g| {
                    // gyᵀ (n×m) · a (m×k)
                    let d = matmul_tn_raw(gy, av, m, n, k);
                    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            g[k] += gy[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = y.values();
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * yv[k] * (1.0 - yv[k]);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = y.values();
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * (1.0 - yv[k] * yv[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = y.values();
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * yv[k];
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] / av[k];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = val(*a);
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * sigmoid(av[k]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = y.values();
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * 0.5 / yv[k];
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * 2.0 * av[k];
                    }
                });
            }
            Op::Powf(a, p) => {
                let av = val(*a);
                self.acc(grads, *a, |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * p * av[k].max(0.0).powf(p - 1.0);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = y.cols().max(1);
                let yv = y.values();
                self.acc(grads, *a, |g| {
                    for (row, (yr, gr)) in yv.chunks(c).zip(gy.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[row * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                if y.shape().len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let slice = &gy[offset..offset + n];
                        self.acc(grads, *p, |g| {
                            g.iter_mut().zip(slice).for_each(|(g, d)| *g += d)
                        });
                        offset += n;
                    }
                } else {
                    let total = y.cols();
                    let r = y.rows();
                    let mut col = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        self.acc(grads, *p, |g| {
                            for i in 0..r {
                                for j in 0..c {
                                    g[i * c + j] += gy[i * total + col + j];
                                }
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += gy[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::RowSum(a) => {
                let c = self.value(*a).cols();
                self.acc(grads, *a, |g| {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g += gy[k / c];
                    }
                });
            }
            Op::ColMean(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.acc(grads, *a, |g| {
                    for (k, g) in g.iter_mut().enumerate() {
                        *g += gy[k % c] / r as f64;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                let c = if self.value(*a).shape().len() == 1 { 1 } else { c };
                self.acc(grads, *a, |g| {
                    for (t, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[row * c + j] += gy[t * c + j];
                        }
                    }
                });
            }
            Op::Column(a, j) => {
                let c = self.value(*a).cols();
                self.acc(grads, *a, |g| {
                    for (i, d) in gy.iter().enumerate() {
                        g[i * c + j] += d;
                    }
                });
            }
        }
    }

    /// Runs [`Tape::backward`] and collects the adjoints of bound parameters.
    pub fn gradients(&self, loss: Var, bound: &Bound) -> Result<GradRecord> {
        let loss_value = self.value(loss).item().ok_or_else(|| {
            Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            )
        })?;
        let mut adj = self.backward(loss)?;
        let mut grads = std::collections::BTreeMap::new();
        for (name, var) in bound.iter() {
            let shape = self.value(var).shape().to_vec();
            let g = match adj.get_mut(var.0).and_then(Option::take) {
                Some(v) => Tensor::raw(shape, v),
                None => Tensor::zeros(&shape),
            };
            grads.insert(name.to_string(), g);
        }
        Ok(GradRecord {
            loss: loss_value,
            grads,
        })
    }
}
