//! Eager reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] evaluates every op as it is recorded, so the same code path
//! serves inference (never call `backward`) and training. A graph lives for
//! one sample's forward/backward and is confined to one thread.

use std::rc::Rc;

use super::resample::ResampleMap;
use super::tensor::{
    gelu_grad_scalar, gelu_scalar, log_softmax_rows, matmul, matmul_at, matmul_bt, relu, sigmoid,
    softmax_rows, Tensor,
};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
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
    ScaleBy(Var, Var),
    MulRowsBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    SumRows(Var),
    MeanCols(Var),
    Reshape(Var),
    Resample(Var, Rc<ResampleMap>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumSquares(Var),
    SmoothL1Mean(Var, Tensor),
    CrossEntropyMean(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of `v`; `None` when no path from `v` reaches the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(like.shape().to_vec(), vec![0.0; like.len()]).unwrap())
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant carrying `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = matmul(self.value(a), self.value(b))?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = matmul_bt(self.value(a), self.value(b))?;
        Ok(self.derived(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.derived(t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        Ok(self.derived(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(self.value(b))?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1×n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let r = self.value(row);
        if r.dims2() != (1, n) {
            return Err(shape_err!("add_row: [{m}×{n}] + {:?}", r.shape()));
        }
        let mut t = self.value(x).clone();
        let rd = r.data().to_vec();
        for chunk in t.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&rd) {
                *v += b;
            }
        }
        Ok(self.derived(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).scale(c);
        self.derived(t, Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by a `[1×1]` variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err!("scale_by expects a scalar, got {:?}", sv.shape()));
        }
        let t = self.value(x).scale(sv.item());
        Ok(self.derived(t, Op::ScaleBy(x, s), &[x, s]))
    }

    /// Multiplies row `i` of `x` `[m×n]` by `w[i]`, `w` being `[m×1]`.
    pub fn mul_rows_by(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(w).dims2() != (m, 1) {
            return Err(shape_err!("mul_rows_by: [{m}×{n}] with {:?}", self.value(w).shape()));
        }
        let wd = self.value(w).data().to_vec();
        let mut t = self.value(x).clone();
        for (chunk, s) in t.data_mut().chunks_mut(n).zip(&wd) {
            for v in chunk.iter_mut() {
                *v *= s;
            }
        }
        Ok(self.derived(t, Op::MulRowsBy(x, w), &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = relu(self.value(x));
        self.derived(t, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        self.derived(t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = sigmoid(self.value(x));
        self.derived(t, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x));
        self.derived(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&ts)?;
        Ok(self.derived(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&ts)?;
        Ok(self.derived(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_cols(start, len)?;
        Ok(self.derived(t, Op::SliceCols(x, start), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        Ok(self.derived(t, Op::SliceRows(x, start), &[x]))
    }

    /// `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x).mean_rows();
        self.derived(t, Op::MeanRows(x), &[x])
    }

    /// `[m×n] -> [1×n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x).sum_rows();
        self.derived(t, Op::SumRows(x), &[x])
    }

    /// `[m×n] -> [m×1]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let t = self.value(x).mean_cols();
        self.derived(t, Op::MeanCols(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).reshape(vec![rows, cols])?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    /// Applies a linear spatial resampling to every row of `x`.
    pub fn resample(&mut self, x: Var, map: Rc<ResampleMap>) -> Result<Var> {
        let t = map.apply_rows(self.value(x))?;
        Ok(self.derived(t, Op::Resample(x, map), &[x]))
    }

    /// Row lookup into `table` (embedding).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (m, n) = tv.dims2();
        if idx.is_empty() {
            return Err(Error::Input("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Vocabulary(i));
            }
            out.extend_from_slice(tv.row_slice(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), n], out)?;
        Ok(self.derived(t, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.derived(t, Op::SumAll(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.derived(t, Op::SumSquares(x), &[x])
    }

    /// Mean over elements of the piecewise smooth-L1 of `pred - target`.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err!("smooth_l1: {} predictions vs {} targets", p.len(), target.len()));
        }
        let n = p.len() as f64;
        let total: f64 = p.data().iter().zip(target.data()).map(|(a, b)| smooth_l1_value(a - b)).sum();
        let t = Tensor::scalar(total / n);
        Ok(self.derived(t, Op::SmoothL1Mean(pred, target.clone()), &[pred]))
    }

    /// Mean over rows of softmax cross entropy against integer class labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, k) = lv.dims2();
        if labels.len() != m {
            return Err(shape_err!("cross entropy: {m} rows vs {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("class label {bad} out of range for {k} classes")));
        }
        let ls = log_softmax_rows(lv);
        let total: f64 = labels.iter().enumerate().map(|(i, &l)| -ls.get(i, l)).sum();
        let t = Tensor::scalar(total / m as f64);
        Ok(self.derived(t, Op::CrossEntropyMean(logits, labels.to_vec()), &[logits]))
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", ov.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::from_parts(ov.shape().to_vec(), vec![1.0])?);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, matmul_bt(g, self.value(*b))?)?;
                acc(*b, matmul_at(self.value(*a), g)?)?;
            }
            Op::MatMulBt(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, matmul(g, self.value(*b))?)?;
                acc(*b, matmul_at(g, self.value(*a))?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone())?;
                acc(*row, g.sum_rows())?;
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c))?,
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                acc(*x, g.scale(sv))?;
                let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                acc(*s, Tensor::scalar(d))?;
            }
            Op::MulRowsBy(x, w) => {
                let (m, n) = g.dims2();
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = g.clone();
                let mut dw = vec![0.0; m];
                for i in 0..m {
                    let s = wv.data()[i];
                    for j in 0..n {
                        dw[i] += g.data()[i * n + j] * xv.data()[i * n + j];
                        dx.data_mut()[i * n + j] *= s;
                    }
                }
                acc(*x, dx)?;
                acc(*w, Tensor::from_parts(vec![m, 1], dw)?)?;
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                acc(*x, d)?;
            }
            Op::Gelu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad_scalar(xv))?;
                acc(*x, d)?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                acc(*x, d)?;
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = g.dims2();
                let y = &node.value;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gy: f64 = (0..n).map(|j| g.data()[i * n + j] * y.data()[i * n + j]).sum();
                    for j in 0..n {
                        d[i * n + j] = y.data()[i * n + j] * (g.data()[i * n + j] - gy);
                    }
                }
                acc(*x, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    acc(*p, g.slice_rows(start, h)?)?;
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let w = g.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(g.row_slice(i));
                }
                acc(*x, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.value(*x).dims2();
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::MeanRows(x) | Op::SumRows(x) => {
                let (m, n) = self.value(*x).dims2();
                let c = if matches!(node.op, Op::MeanRows(_)) { 1.0 / m as f64 } else { 1.0 };
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|v| v * c));
                }
                acc(*x, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::MeanCols(x) => {
                let (m, n) = self.value(*x).dims2();
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    d.extend(std::iter::repeat(g.data()[i] / n as f64).take(n));
                }
                acc(*x, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape().to_vec())?)?,
            Op::Resample(x, map) => acc(*x, map.apply_rows_transposed(g)?)?,
            Op::GatherRows(table, idx) => {
                let (m, n) = self.value(*table).dims2();
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, src) in d[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(r)) {
                        *dst += src;
                    }
                }
                acc(*table, Tensor::from_parts(vec![m, n], d)?)?;
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                acc(*x, xv.map(|_| g.item()))?;
            }
            Op::SumSquares(x) => {
                let gv = g.item();
                acc(*x, self.value(*x).map(|v| 2.0 * v * gv))?;
            }
            Op::SmoothL1Mean(pred, target) => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                let gv = g.item();
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| gv * smooth_l1_slope(a - b) / n)
                    .collect();
                acc(*pred, Tensor::from_parts(p.shape().to_vec(), data)?)?;
            }
            Op::CrossEntropyMean(logits, labels) => {
                let lv = self.value(*logits);
                let (m, k) = lv.dims2();
                let mut d = softmax_rows(lv);
                let c = g.item() / m as f64;
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= 1.0;
                }
                acc(*logits, d.scale(c))?;
            }
        }
        Ok(())
    }
}

/// `0.5·x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
