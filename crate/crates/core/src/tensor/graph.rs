use std::collections::HashMap;

use super::kernels::{log_softmax_row_in_place, matmul_at_into, matmul_bt_into, matmul_into};
use super::{dot, softmax_row_in_place, ParamId, ParamStore, Tensor};
use crate::error::{contract, Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// The graph owns copies of every value it computes. Dropping it frees the
/// tape; gradients are read back with [`Graph::grad`] or pushed into a
/// [`ParamStore`] with [`ParamStore::accumulate`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_links(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Record a leaf. Its gradient is tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push_raw(value, Op::Leaf, rg)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Bring a stored parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = self.leaf(t);
        self.params.push((id, v));
        self.param_vars.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_bt", Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2(x, "transpose")?;
        let t = self.value(x).transpose();
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Add a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let b = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in data.chunks_mut(n) {
            for (v, bi) in r.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        self.push("add_row", Tensor::matrix(m, n, data)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())?;
        self.push("relu", t, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone().with_requires_grad(false);
        t.zero_grad();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            softmax_row_in_place(row);
        }
        self.push("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone().with_requires_grad(false);
        t.zero_grad();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            log_softmax_row_in_place(row);
        }
        self.push("log_softmax_rows", t, Op::LogSoftmaxRows(x), &[x])
    }

    /// Scale each row to unit L2 norm (rows of norm zero are left at zero).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        let xs = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let norm = dot(row, row).sqrt();
            norms[r] = norm;
            if norm > 0.0 {
                for c in 0..n {
                    out[r * n + c] = row[c] / norm;
                }
            }
        }
        self.push(
            "l2_normalize_rows",
            Tensor::matrix(m, n, out)?,
            Op::L2NormalizeRows { x, norms },
            &[x],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            contract!(i < m, "gather_rows index {i} out of range for {m} rows");
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let t = Tensor::matrix(idx.len(), n, out)?;
        self.push("gather_rows", t, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_rows needs at least one input");
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, n, data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_cols needs at least one input");
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, total, data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        contract!(
            start < end && end <= n,
            "slice_cols {start}..{end} out of range for {n} columns"
        );
        let xs = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&xs[r * n + start..r * n + end]);
        }
        let t = Tensor::matrix(m, w, data)?;
        self.push("slice_cols", t, Op::SliceCols(x, start, end), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        contract!(!v.is_empty(), "mean of an empty tensor");
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = dot(self.value(a).data(), self.value(b).data());
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    /// Element `(r, c)` as a scalar node.
    pub fn pick(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let v = self.value(x);
        contract!(
            r < v.rows() && c < v.cols(),
            "pick ({r}, {c}) out of range for {:?}",
            v.shape()
        );
        let flat = r * v.cols() + c;
        let s = v.data()[flat];
        self.push("pick", Tensor::scalar(s), Op::Pick(x, flat), &[x])
    }

    /// Sum a list of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        contract!(!terms.is_empty(), "add_all needs at least one term");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        contract!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn acc_add(&mut self, v: Var, src: &[f64], sign: f64) {
        self.acc(v, |g| {
            for (a, b) in g.iter_mut().zip(src) {
                *a += sign * b;
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so that inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.acc(a, |ga| matmul_bt_into(g, &bv, ga, m, n, k));
                self.acc(b, |gb| matmul_at_into(&av, g, gb, k, m, n));
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.acc(a, |ga| matmul_into(g, &bv, ga, m, n, k));
                self.acc(b, |gb| matmul_at_into(g, &av, gb, n, m, k));
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.value(x).rows(), self.value(x).cols());
                self.acc(x, |gx| {
                    for p in 0..r {
                        for q in 0..c {
                            gx[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc_add(a, g, 1.0);
                self.acc_add(b, g, 1.0);
            }
            &Op::Sub(a, b) => {
                self.acc_add(a, g, 1.0);
                self.acc_add(b, g, -1.0);
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.acc(a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += gi * y;
                    }
                });
                self.acc(b, |gb| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(&av) {
                        *x += gi * y;
                    }
                });
            }
            &Op::AddRow(x, row) => {
                self.acc_add(x, g, 1.0);
                let n = self.value(row).len();
                self.acc(row, |gr| {
                    for chunk in g.chunks(n) {
                        for (a, b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                });
            }
            &Op::Scale(x, c) => self.acc_add(x, g, c),
            &Op::Relu(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |gx| {
                    for ((a, gi), v) in gx.iter_mut().zip(g).zip(&xv) {
                        if *v > 0.0 {
                            *a += gi;
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
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = self.value(gamma).len();
                let m = inv_std.len();
                let gv = self.value(gamma).data().to_vec();
                self.acc(gamma, |gg| {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                self.acc(beta, |gb| {
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                });
                self.acc(x, |gx| {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = g[r * n + c] * gv[c];
                            s1 += dh;
                            s2 += dh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dh = g[r * n + c] * gv[c];
                            gx[r * n + c] += inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.cols();
                self.acc(x, |gx| {
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.cols();
                self.acc(x, |gx| {
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gxr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let x = *x;
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.cols();
                self.acc(x, |gx| {
                    for (r, norm) in norms.iter().enumerate() {
                        if *norm == 0.0 {
                            continue;
                        }
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let s = dot(gr, yr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * s) / norm;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let x = *x;
                let n = self.value(x).cols();
                self.acc(x, |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            gx[r * n + c] += g[k * n + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_add(p, &g[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let m = self.nodes[i].value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |gp| {
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            &Op::SliceCols(x, start, end) => {
                let n = self.value(x).cols();
                let w = end - start;
                self.acc(x, |gx| {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        for (c, v) in chunk.iter().enumerate() {
                            gx[r * n + start + c] += v;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let s = g[0];
                self.acc(x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            &Op::Mean(x) => {
                let s = g[0] / self.value(x).len() as f64;
                self.acc(x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            &Op::Dot(a, b) => {
                let s = g[0];
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.acc(a, |ga| ga.iter_mut().zip(&bv).for_each(|(x, y)| *x += s * y));
                self.acc(b, |gb| gb.iter_mut().zip(&av).for_each(|(x, y)| *x += s * y));
            }
            &Op::Pick(x, flat) => {
                let s = g[0];
                self.acc(x, |gx| gx[flat] += s);
            }
        }
        self.nodes[i].op = op;
    }
}
