//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node whose inputs precede it, so the node order is
//! already a topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable op.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Returns one gradient buffer per input, each of that input's length.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    L1RowSum(Var),
    SqFrobenius(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    NormalizeSum(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every op fail with [`Error::NonFinite`] when its output holds NaN or Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).ok()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if !t.is_matrix() {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("add_bias", a)?;
        let (br, bc) = self.matrix_dims("add_bias", bias)?;
        if br != 1 || bc != m {
            return Err(Error::shape("add_bias", format!("{n}x{m} + {br}x{bc}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let rg = self.any_grad(&[a, bias]);
        self.push(Tensor::matrix(n, m, data)?, Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax; each output row is a probability vector.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("softmax_rows", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(n, m, data)?, Op::SoftmaxRows(a), rg)
    }

    /// `n×m → n×1`, entry `i` is `Σ_j |a[i,j]|`.
    pub fn l1_rowsum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("l1_rowsum", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|x| x.abs()).sum())
            .collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(n, 1, data)?, Op::L1RowSum(a), rg)
    }

    /// Squared Frobenius norm as a `1×1` scalar.
    pub fn sq_frobenius(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SqFrobenius(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over rows: `n×m → 1×m`. Used for batch means and node pooling.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("mean_rows", a)?;
        let mut out = vec![0.0; m];
        for row in self.value(a).data().chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(1, m, out)?, Op::MeanRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let m = self.matrix_dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != m {
                return Err(Error::shape("concat_rows", format!("width {c} vs {m}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::matrix(rows, m, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let n = self.matrix_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("height {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather_rows", format!("row {i} of {n}")));
            }
            data.extend_from_slice(src.row(i));
        }
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::matrix(idx.len(), m, data)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("transpose", a)?;
        let out = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// `a / Σ a`. The caller guarantees a nonzero sum.
    pub fn normalize_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        if s == 0.0 {
            return Err(Error::NonFinite("normalize_sum of a zero-sum tensor".into()));
        }
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x / s).collect())?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::NormalizeSum(a), rg)
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut total = 0.0;
        for (row, &l) in self.value(logits).data().chunks(k).zip(labels) {
            total += log_sum_exp(row) - row[l];
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy(logits, labels.to_vec()),
            rg,
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let rg = self.any_grad(inputs);
        self.push(out, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Propagates `d loss / d node` to every node that requires grad and adds
    /// the result to the tape's accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    gemm_nt_acc(g, bv.data(), self.slot(local, *a), m, n, k);
                }
                if self.requires_grad(*b) {
                    gemm_tn_acc(av.data(), g, self.slot(local, *b), m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc(local, *a, g.iter().copied());
                self.acc(local, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(local, *a, g.iter().copied());
                self.acc(local, *b, g.iter().map(|x| -x));
            }
            Op::AddBias(a, bias) => {
                self.acc(local, *a, g.iter().copied());
                if self.requires_grad(*bias) {
                    let m = out.cols();
                    let slot = self.slot(local, *bias);
                    for row in g.chunks(m) {
                        slot.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Scale(a, s) => self.acc(local, *a, g.iter().map(|x| x * s)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    local,
                    *a,
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let m = out.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (y, gy) in out.data().chunks(m).zip(g.chunks(m)) {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    dx.extend(y.iter().zip(gy).map(|(p, q)| p * (q - dot)));
                }
                self.acc(local, *a, dx.into_iter());
            }
            Op::L1RowSum(a) => {
                let x = self.value(*a);
                let m = x.cols();
                let dx = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[i / m] * sign(*v));
                self.acc(local, *a, dx);
            }
            Op::SqFrobenius(a) => {
                let x = self.value(*a).data();
                self.acc(local, *a, x.iter().map(|v| 2.0 * v * g[0]));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(local, *a, std::iter::repeat_n(g[0], n));
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let (n, m) = (x.rows(), x.cols());
                let inv = 1.0 / n as f64;
                self.acc(local, *a, (0..n * m).map(|i| g[i % m] * inv));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.acc(local, *p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let slot = self.slot(local, *p);
                        for (i, row) in g.chunks(total).enumerate() {
                            slot[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[col..col + w])
                                .for_each(|(s, x)| *s += x);
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.requires_grad(*a) {
                    let m = out.cols();
                    let slot = self.slot(local, *a);
                    for (k, &i) in idx.iter().enumerate() {
                        slot[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(&g[k * m..(k + 1) * m])
                            .for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = Tensor::matrix(r, c, g.to_vec())
                    .expect("grad matches output shape")
                    .transpose();
                self.acc(local, *a, gt.into_data().into_iter());
            }
            Op::Reshape(a) => self.acc(local, *a, g.iter().copied()),
            Op::NormalizeSum(a) => {
                let x = self.value(*a).data();
                let s: f64 = x.iter().sum();
                let dot: f64 = out.data().iter().zip(g).map(|(y, q)| y * q).sum();
                self.acc(local, *a, g.iter().map(|q| (q - dot) / s));
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let x = self.value(*logits);
                let k = x.cols();
                let scale = g[0] / labels.len() as f64;
                let mut dx = Vec::with_capacity(x.numel());
                for (row, &l) in x.data().chunks(k).zip(labels) {
                    let mut p = row.to_vec();
                    softmax_in_place(&mut p);
                    p[l] -= 1.0;
                    dx.extend(p.into_iter().map(|v| v * scale));
                }
                self.acc(local, *logits, dx.into_iter());
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, out, g);
                for (v, gi) in inputs.iter().zip(grads) {
                    self.acc(local, *v, gi.into_iter());
                }
            }
        }
    }

    fn slot<'a>(&self, local: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let n = self.value(v).numel();
        local[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc(&self, local: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = self.slot(local, v);
        slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::L1RowSum(..) => "l1_rowsum",
        Op::SqFrobenius(..) => "sq_frobenius",
        Op::Sum(..) => "sum",
        Op::MeanRows(..) => "mean_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::NormalizeSum(..) => "normalize_sum",
        Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        Op::Custom(op, _) => op.name(),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}
