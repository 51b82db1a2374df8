//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during the
//! forward pass. [`Tape::backward`] walks the records in reverse, producing
//! the adjoint of every node; parameter adjoints can then be accumulated into
//! a [`ParameterSet`]. Tapes are single-use and single-threaded: build a fresh
//! one per forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix in CSR layout, used for fixed graph mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` entries. Duplicates are summed; zeros are dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::dim("sparse", &[rows, cols], &[r, c]));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            col_idx.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        };
        m.drop_zeros();
        Ok(m)
    }

    fn drop_zeros(&mut self) {
        if self.vals.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut row_ptr = vec![0; self.rows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for r in 0..self.rows {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.vals[idx] != 0.0 {
                    col_idx.push(self.col_idx[idx]);
                    vals.push(self.vals[idx]);
                }
            }
            row_ptr[r + 1] = vals.len();
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.vals = vals;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let data = out.data_mut();
        for r in 0..self.rows {
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                data[r * self.cols + self.col_idx[idx]] += self.vals[idx];
            }
        }
        out
    }

    /// `self · x` for a row-major `cols × width` block.
    fn mul(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.vals[idx];
                let src = &x[self.col_idx[idx] * width..(self.col_idx[idx] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for a row-major `rows × width` block.
    fn mul_transposed(&self, g: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.vals[idx];
                let c = self.col_idx[idx];
                for (d, s) in out[c * width..(c + 1) * width].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SpMM(Arc<SparseMatrix>, Var),
}

/// Elementary operations addressable by name, for table-driven callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Concat,
    Sum,
    Softmax,
    Log,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Adjoints of every node after a backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }
}

fn is_scalar_shape(t: &Tensor) -> bool {
    t.is_scalar()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {:?}",
                std::mem::discriminant(&op)
            )));
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        }
        self.values.push(t);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    /// Records a copy of the named parameter; its adjoint flows back through
    /// [`Tape::backward_into`].
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let t = params.get(name)?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        self.push(value, Op::Param(name.to_string()))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.values[v.0].dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if is_scalar_shape(ta) {
            Ok(tb.shape().to_vec())
        } else if is_scalar_shape(tb) {
            Ok(ta.shape().to_vec())
        } else {
            Err(Error::dim(op, ta.shape(), tb.shape()))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        match (da.len(), db.len()) {
            (x, y) if x == y => da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect(),
            (1, _) => db.iter().map(|&q| f(da[0], q)).collect(),
            _ => da.iter().map(|&p| f(p, db[0])).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        self.push(Tensor::new(shape, out)?, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.values[row.0].numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.values[row.0].data();
        let out: Vec<f64> = self.values[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        debug_assert_eq!(out.len(), m * n);
        self.push(Tensor::new(shape, out)?, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = &self.values[x.0];
        let out = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.values[x.0];
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.values[x.0].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("log of non-positive value".into()));
        }
        self.map(x, f64::ln, Op::Log(x))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.values[p.0].data());
        }
        self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let mut out = self.values[x.0].data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(x))
    }

    /// Mean softmax cross-entropy of `rows × classes` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.len() != rows || rows == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!("target {t} out of range for {cols} classes")));
        }
        let mut probs = self.values[logits.0].data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            loss -= log_softmax_at(row, t);
            softmax_in_place(row);
        }
        loss /= rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `matrix · x` for a constant sparse matrix.
    pub fn spmm(&mut self, matrix: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if matrix.cols != rows {
            return Err(Error::dim("spmm", &[matrix.rows, matrix.cols], self.shape(x)));
        }
        let out = matrix.mul(self.values[x.0].data(), cols);
        let out_rows = matrix.rows;
        self.push(Tensor::matrix(out_rows, cols, out)?, Op::SpMM(matrix, x))
    }

    /// Dispatches one of the named elementary operations.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("{op:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match op {
            Elementwise::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Elementwise::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Elementwise::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            Elementwise::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            Elementwise::Concat => self.concat_cols(inputs),
            Elementwise::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            Elementwise::Softmax => {
                arity(1)?;
                self.softmax_rows(inputs[0])
            }
            Elementwise::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
        }
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Adjoint of every parameter node, keyed by parameter name. A parameter
    /// loaded more than once gets the sum of its adjoints.
    pub fn param_gradients(&self, loss: Var) -> Result<BTreeMap<String, Vec<f64>>> {
        let grads = self.backward(loss)?;
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (idx, op) in self.ops.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (op, grads.adjoints[idx].as_ref()) {
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adds each parameter's adjoint into its accumulator in `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        for (name, g) in self.param_gradients(loss)? {
            let t = params.get_mut(&name)?;
            let acc = t
                .grad_mut()
                .ok_or_else(|| Error::Contract(format!("{name} does not track gradients")))?;
            if acc.len() != g.len() {
                return Err(Error::dim("backward_into", &[acc.len()], &[g.len()]));
            }
            acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.values[idx];
        match &self.ops[idx] {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.values[a.0].dims2().unwrap();
                let (_, n) = self.values[b.0].dims2().unwrap();
                let da = matmul_bt(g, self.values[b.0].data(), m, n, k);
                let db = matmul_at(self.values[a.0].data(), g, m, k, n);
                accumulate(adj, *a, &da);
                accumulate(adj, *b, &db);
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(adj, *a, g, 1.0);
                self.accumulate_broadcast(adj, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(adj, *a, g, 1.0);
                self.accumulate_broadcast(adj, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
                let n = g.len();
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let ga: Vec<f64> = (0..n).map(|i| g[i] * pick(db, i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| g[i] * pick(da, i)).collect();
                self.accumulate_broadcast(adj, *a, &ga, 1.0);
                self.accumulate_broadcast(adj, *b, &gb, 1.0);
            }
            Op::AddRow(x, row) => {
                accumulate(adj, *x, g);
                let n = self.values[row.0].numel();
                let mut gr = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gr[i % n] += v;
                }
                accumulate(adj, *row, &gr);
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(adj, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(adj, *x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(adj, *x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(g, v)| g / v)
                    .collect();
                accumulate(adj, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.values[p.0].dims2().unwrap();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(adj, *p, &gp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.values[p.0].numel();
                    accumulate(adj, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Reshape(x) => accumulate(adj, *x, g),
            Op::Sum(x) => {
                let n = self.values[x.0].numel();
                accumulate(adj, *x, &vec![g[0]; n]);
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = out.dims2().unwrap();
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                accumulate(adj, *x, &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let s = g[0] / rows as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * cols + t] -= s;
                }
                accumulate(adj, *logits, &gx);
            }
            Op::SpMM(matrix, x) => {
                let (_, width) = out.dims2().unwrap();
                let gx = matrix.mul_transposed(g, width);
                accumulate(adj, *x, &gx);
            }
        }
    }

    fn accumulate_broadcast(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64], sign: f64) {
        let n = self.values[v.0].numel();
        if n == g.len() {
            if sign == 1.0 {
                accumulate(adj, v, g);
            } else {
                let neg: Vec<f64> = g.iter().map(|x| sign * x).collect();
                accumulate(adj, v, &neg);
            }
        } else {
            let total: f64 = g.iter().sum();
            accumulate(adj, v, &[sign * total]);
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
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

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

/// `a (m×k) · b (k×n)`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *d += av * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_rng;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = t.constant(Tensor::eye(2));
        let p = t.matmul(a, i).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = t.constant(Tensor::zeros(&[2, 1]));
        let q = t.matmul(i, z).unwrap();
        assert_eq!(t.value(q).data(), &[0.0, 0.0]);
        assert_eq!(t.shape(q), &[2, 1]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = init_rng(11);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    oracle[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let va = t.constant(Tensor::matrix(3, 4, a).unwrap());
        let vb = t.constant(Tensor::matrix(4, 2, b).unwrap());
        let c = t.matmul(va, vb).unwrap();
        assert!(close(t.value(c).data(), &oracle, 1e-12));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn elementary_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        let h = t.tanh(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        assert_eq!(t.value(h).data(), &[0.0]);
        let ones = t.constant(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        let sm = t.softmax_rows(ones).unwrap();
        assert!(close(t.value(sm).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
        let s = t.constant(Tensor::scalar(2.0));
        let ok = t.mul(a, s).unwrap();
        assert_eq!(t.shape(ok), &[2, 3]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut params = ParameterSet::new();
        params.insert("p", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let mut t = Tape::new();
        let p = t.param(&params, "p").unwrap();
        let loss = t.sum(p).unwrap();
        t.backward_into(loss, &mut params).unwrap();
        assert_eq!(params.get("p").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);

        let mut params = ParameterSet::new();
        params.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::new();
        let p = t.param(&params, "p").unwrap();
        let sq = t.mul(p, p).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward_into(loss, &mut params).unwrap();
        assert_eq!(params.get("p").unwrap().grad().unwrap(), &[2.0, 4.0]);

        // accumulation, then explicit reset
        t.backward_into(loss, &mut params).unwrap();
        assert_eq!(params.get("p").unwrap().grad().unwrap(), &[4.0, 8.0]);
        params.zero_grad();
        assert_eq!(params.get("p").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sparse_matches_dense() {
        let m = SparseMatrix::from_triplets(
            2,
            3,
            vec![(0, 2, 1.5), (1, 0, -1.0), (0, 2, 0.5), (1, 1, 0.0)],
        )
        .unwrap();
        assert_eq!(m.nnz(), 2);
        let dense = m.to_dense();
        assert_eq!(dense.data(), &[0.0, 0.0, 2.0, -1.0, 0.0, 0.0]);
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let d = t.constant(dense);
        let y1 = t.spmm(Arc::new(m), x).unwrap();
        let y2 = t.matmul(d, x).unwrap();
        assert_eq!(t.value(y1).data(), t.value(y2).data());
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 5]));
        let ce = t.cross_entropy(l, &[0, 3]).unwrap();
        assert!((t.value(ce).data()[0] - 5f64.ln()).abs() < 1e-14);
    }
}
