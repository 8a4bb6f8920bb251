//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Each op
//! appends a node; nodes that depend on a gradient-requiring input also keep
//! what their backward rule needs. Because nodes are only ever appended,
//! index order is a topological order, and [`Graph::backward`] walks it once
//! in reverse.

use crate::math::{dot, gemm, sqrt, transpose};
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    MaskRows(Var, Vec<f64>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    consumed: bool,
    replayed: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, &[t.shape()]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    /// A graph that records ops for `backward`.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            consumed: false,
            replayed: 0,
        }
    }

    /// A graph that only evaluates; nothing ever requires a gradient.
    pub fn no_grad() -> Self {
        Graph {
            record: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Number of backward rules executed by the last `backward`.
    pub fn replayed_ops(&self) -> usize {
        self.replayed
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.record,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = expect_2d("matmul", ta)?;
        let (k2, n) = expect_2d("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout of a linear layer with weights stored `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = expect_2d("matmul_nt", ta)?;
        let (n, k2) = expect_2d("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, ta.data(), &transpose(n, k, tb.data()), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, &[ta.shape(), tb.shape()]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    /// Adds the vector `b[n]` to every row of `x[m,n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = expect_2d("add_row", tx)?;
        if tb.numel() != n {
            return Err(Error::shape("add_row", &[tx.shape(), tb.shape()]));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, bv) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, &[x, b], Op::AddRow(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Scale(x, factor))
    }

    /// Row-wise layer normalization of `x[m,n]` with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = expect_2d("layer_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::shape("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / sqrt(var + LAYER_NORM_EPS);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { what: "concat input" });
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = expect_2d("concat_cols", t)?;
            if r != m {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Euclidean norm of each row: `x[m,n] -> [m]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = expect_2d("row_norm", t)?;
        let data = (0..m).map(|i| crate::math::norm(t.row(i))).collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.push(value, &[x], Op::RowNorm(x)))
    }

    /// Multiplies row `i` of `x[m,n]` by `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = expect_2d("mask_rows", t)?;
        if mask.len() != m {
            return Err(Error::shape("mask_rows", &[t.shape(), &[mask.len()]]));
        }
        let mut data = t.data().to_vec();
        for i in 0..m {
            for v in &mut data[i * n..(i + 1) * n] {
                *v *= mask[i];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, &[x], Op::MaskRows(x, mask)))
    }

    fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = &mut self.nodes[v.0];
        n.grad.take().unwrap_or_else(|| vec![0.0; n.value.numel()])
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn accumulate(&mut self, v: Var, delta: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.take_grad(v);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += delta(i);
        }
        self.put_grad(v, g);
    }

    /// Populates gradients of every gradient-requiring node reachable from
    /// the scalar `loss`. The tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;
        self.replayed = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.replayed += 1;
            self.backward_op(idx, &op, &gy);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gy: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = self.take_grad(*a);
                    let bt = transpose(k, n, self.nodes[b.0].value.data());
                    gemm(m, k, n, &gy, &bt, &mut ga);
                    self.put_grad(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = self.take_grad(*b);
                    let at = transpose(m, k, self.nodes[a.0].value.data());
                    gemm(k, n, m, &at, &gy, &mut gb);
                    self.put_grad(*b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.requires_grad(*a) {
                    let mut ga = self.take_grad(*a);
                    gemm(m, k, n, &gy, self.nodes[b.0].value.data(), &mut ga);
                    self.put_grad(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = self.take_grad(*b);
                    let gyt = transpose(m, n, &gy);
                    gemm(n, k, m, &gyt, self.nodes[a.0].value.data(), &mut gb);
                    self.put_grad(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |i| gy[i]);
                self.accumulate(*b, |i| gy[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |i| gy[i]);
                self.accumulate(*b, |i| -gy[i]);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, |i| gy[i]);
                if self.requires_grad(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = self.take_grad(*b);
                    for row in gy.chunks(n) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::Relu(x) => {
                let out = self.nodes[idx].value.data().to_vec();
                self.accumulate(*x, |i| if out[i] > 0.0 { gy[i] } else { 0.0 });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(*x, |i| f * gy[i]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let m = rstd.len();
                if self.requires_grad(*x) {
                    let gd = self.value(*gamma).data().to_vec();
                    let mut gx = self.take_grad(*x);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        let g = &gy[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, h) / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                    self.put_grad(*x, gx);
                }
                if self.requires_grad(*gamma) {
                    let mut gg = self.take_grad(*gamma);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gy[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.put_grad(*gamma, gg);
                }
                if self.requires_grad(*beta) {
                    let mut gb = self.take_grad(*beta);
                    for row in gy.chunks(n) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.put_grad(*beta, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let off = offset;
                    self.accumulate(p, |i| {
                        let (r, c) = (i / w, i % w);
                        gy[r * total + off + c]
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let g = gy[0];
                self.accumulate(*x, |_| g);
            }
            Op::Mean(x) => {
                let g = gy[0] / self.value(*x).numel().max(1) as f64;
                self.accumulate(*x, |_| g);
            }
            Op::RowNorm(x) => {
                let norms = self.nodes[idx].value.data().to_vec();
                let n = self.value(*x).cols();
                let xd = self.value(*x).data().to_vec();
                self.accumulate(*x, |i| {
                    let r = i / n;
                    if norms[r] > 0.0 {
                        gy[r] * xd[i] / norms[r]
                    } else {
                        0.0
                    }
                });
            }
            Op::MaskRows(x, mask) => {
                let n = self.value(*x).cols();
                self.accumulate(*x, |i| gy[i] * mask[i / n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(mat(1, 3, &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::identity(3));
        let x = g.constant(mat(3, 2, &[1.0, -2.0, 3.5, 4.0, 0.0, 6.0]));
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(mat(1, 4, &[3.0; 4]));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("{other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_squared_norm_closed_form() {
        // loss = ||W x||^2  =>  dW = 2 (W x) x^T
        let w = mat(2, 3, &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let x = [1.0, 2.0, -1.0];
        let mut g = Graph::new();
        let wv = g.leaf(w.clone(), true);
        let xv = g.constant(mat(1, 3, &x));
        let wx = g.matmul_nt(xv, wv).unwrap();
        let sq = g.matmul_nt(wx, wx).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let wxv: Vec<f64> = (0..2).map(|o| dot(&w.data()[o * 3..o * 3 + 3], &x)).collect();
        let expect: Vec<f64> = (0..6).map(|i| 2.0 * wxv[i / 3] * x[i % 3]).collect();
        for (a, b) in g.grad(wv).unwrap().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(Error::TapeConsumed));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_replays_each_record_once() {
        let mut g = Graph::new();
        let x = g.leaf(mat(2, 2, &[1.0, -1.0, 0.5, 2.0]), true);
        let a = g.relu(x);
        let b = g.add(a, x).unwrap();
        let c = g.scale(b, 3.0);
        let l = g.mean(c);
        let recorded = g.recorded_ops();
        g.backward(l).unwrap();
        assert_eq!(recorded, 4);
        assert_eq!(g.replayed_ops(), recorded);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::no_grad();
        let x = g.leaf(mat(1, 2, &[1.0, 2.0]), true);
        let y = g.relu(x);
        let _ = g.sum(y);
        assert_eq!(g.recorded_ops(), 0);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = Rng::seed_from_u64(5);
        let mut data = vec![0.0; 12];
        rng.fill_normal(&mut data, 1.0);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(mat(3, 4, &data));
            let gamma = g.constant(Tensor::full(&[4], 1.3));
            let beta = g.constant(Tensor::full(&[4], -0.2));
            let y = g.layer_norm(x, gamma, beta).unwrap();
            let z = g.matmul_nt(y, x).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run(), run());
    }
}
