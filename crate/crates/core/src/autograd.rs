//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly (values are computed on push) and
//! [`Tape::backward`] walks it in reverse from a scalar output. Only the
//! operations the detector and its losses need are provided.

use std::rc::Rc;

use crate::boxes;
use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed sparse linear map `out[r] = Σ w · in[c]`, used for bilinear sampling,
/// pooling and upsampling of spatial grids.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_rows: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn new(in_rows: usize, entries: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(entries.iter().flatten().all(|&(c, _)| c < in_rows));
        SparseMap { in_rows, entries }
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<(usize, f64)>] {
        &self.entries
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows(), self.in_rows, "sparse map input rows");
        let d = x.cols();
        let mut out = Mat::zeros(self.entries.len(), d);
        for (r, row) in self.entries.iter().enumerate() {
            let dst = out.row_mut(r);
            for &(c, w) in row {
                for (o, v) in dst.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat) -> Mat {
        let d = g.cols();
        let mut out = Mat::zeros(self.in_rows, d);
        for (r, row) in self.entries.iter().enumerate() {
            let src = g.row(r);
            for &(c, w) in row {
                for (o, v) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Sparse(Var, Rc<SparseMap>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    TopKMeanCols { x: Var, k: usize, selected: Vec<Vec<usize>> },
    MeanRows(Var),
    SumAll(Var),
    CrossEntropyRenorm { x: Var, targets: Vec<usize> },
    SoftmaxCrossEntropy { x: Var, targets: Vec<usize> },
    BceWithLogits { x: Var, targets: Vec<f64> },
    GiouLoss { x: Var, targets: Mat },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a @ bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Broadcast-add a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, v.cols()), "add_row shape");
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise L2 normalization.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::l2_norm(xv.row(r)).max(1e-12);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::NormalizeRows { x, norms }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut xhat = Mat::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    pub fn sparse(&mut self, x: Var, map: Rc<SparseMap>) -> Var {
        let v = map.apply(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Sparse(x, map), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::SelectRows(x, idx.to_vec()), ng)
    }

    /// Per column, mean of the `k` largest entries. Output is `1 × cols`.
    pub fn topk_mean_cols(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert!(k >= 1 && k <= n, "top-k out of range");
        let mut out = Mat::zeros(1, c);
        let mut selected = Vec::with_capacity(c);
        let mut column = vec![0.0; n];
        for j in 0..c {
            for (i, slot) in column.iter_mut().enumerate() {
                *slot = xv.get(i, j);
            }
            let idx = crate::dense::topk_indices(&column, k);
            out.data_mut()[j] = idx.iter().map(|&i| column[i]).sum::<f64>() / k as f64;
            selected.push(idx);
        }
        let ng = self.ng(x);
        self.push(out, Op::TopKMeanCols { x, k, selected }, ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows() as f64;
        let mut out = Mat::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v / n;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = {
            let v = self.value(x);
            (v.rows() * v.cols()).max(1) as f64
        };
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-ln(x[i, t_i] / Σ_j x[i, j])` for positive scores `x`.
    pub fn cross_entropy_renorm(&mut self, x: Var, targets: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), targets.len());
        let n = targets.len().max(1) as f64;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = xv.row(i);
            let s: f64 = row.iter().sum();
            loss += s.ln() - row[t].ln();
        }
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(1, 1, vec![loss / n]),
            Op::CrossEntropyRenorm { x, targets: targets.to_vec() },
            ng,
        )
    }

    /// Mean softmax cross-entropy over rows of logits.
    pub fn softmax_cross_entropy(&mut self, x: Var, targets: &[usize]) -> Var {
        let lsm = log_softmax_rows(self.value(x));
        assert_eq!(lsm.rows(), targets.len());
        let n = targets.len().max(1) as f64;
        let loss: f64 = targets.iter().enumerate().map(|(i, &t)| -lsm.get(i, t)).sum();
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(1, 1, vec![loss / n]),
            Op::SoftmaxCrossEntropy { x, targets: targets.to_vec() },
            ng,
        )
    }

    /// Mean binary cross-entropy of an `n × 1` logit column against targets in [0,1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.data().len(), targets.len());
        let n = targets.len().max(1) as f64;
        let loss: f64 = xv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(1, 1, vec![loss / n]),
            Op::BceWithLogits { x, targets: targets.to_vec() },
            ng,
        )
    }

    /// Mean of `1 - GIoU` between `n × 4` cxcywh predictions and constant targets.
    pub fn giou_loss(&mut self, x: Var, targets: &Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), targets.shape());
        assert_eq!(xv.cols(), 4);
        let n = xv.rows().max(1) as f64;
        let loss: f64 = (0..xv.rows())
            .map(|i| {
                let p = boxes::cxcywh_row(xv.row(i));
                let t = boxes::cxcywh_row(targets.row(i));
                1.0 - boxes::giou(&p.to_xyxy(), &t.to_xyxy())
            })
            .sum();
        let ng = self.ng(x);
        self.push(Mat::from_vec(1, 1, vec![loss / n]), Op::GiouLoss { x, targets: targets.clone() }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let gb = g.matmul_t(self.value(*b));
                    accum(grads, *a, gb);
                }
                if self.ng(*b) {
                    let ga = self.value(*a).t_matmul(g);
                    accum(grads, *b, ga);
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    let bv = self.value(*b);
                    let mut gb = Mat::zeros(bv.rows(), bv.cols());
                    gemm(g, true, self.value(*a), false, &mut gb, 0.0);
                    accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accum(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accum(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.ng(*b) {
                    accum(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.ng(*row) {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accum(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => accum(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let xv = self.value(*a);
                let data = g.data().iter().zip(xv.data()).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 });
                accum(grads, *a, Mat::from_vec(g.rows(), g.cols(), data.collect()));
            }
            Op::Sigmoid(a) => {
                let data = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s));
                accum(grads, *a, Mat::from_vec(g.rows(), g.cols(), data.collect()));
            }
            Op::Exp(a) => accum(grads, *a, hadamard(g, y)),
            Op::Abs(a) => {
                let xv = self.value(*a);
                let data = g.data().iter().zip(xv.data()).map(|(gv, x)| gv * sign(*x));
                accum(grads, *a, Mat::from_vec(g.rows(), g.cols(), data.collect()));
            }
            Op::SoftmaxRows(a) => {
                let mut gx = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - s);
                    }
                }
                accum(grads, *a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let mut gx = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - yv.exp() * s;
                    }
                }
                accum(grads, *a, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let mut gx = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gv - yv * gy) / norms[r];
                    }
                }
                accum(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, m) = g.shape();
                let gv = self.value(*gain);
                if self.ng(*gain) || self.ng(*bias) {
                    let mut gg = Mat::zeros(1, m);
                    let mut gb = Mat::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                    if self.ng(*gain) {
                        accum(grads, *gain, gg);
                    }
                    if self.ng(*bias) {
                        accum(grads, *bias, gb);
                    }
                }
                if self.ng(*x) {
                    let mut gx = Mat::zeros(n, m);
                    let mf = m as f64;
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..m).map(|c| g.get(r, c) * gv.data()[c]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            let v = inv_std[r] / mf * (mf * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                            gx.set(r, c, v);
                        }
                    }
                    accum(grads, *x, gx);
                }
            }
            Op::Sparse(x, map) => accum(grads, *x, map.apply_transpose(g)),
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accum(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Mat::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accum(grads, p, gp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.ng(p) {
                        let slice = g.data()[off * cols..(off + pr) * cols].to_vec();
                        accum(grads, p, Mat::from_vec(pr, cols, slice));
                    }
                    off += pr;
                }
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accum(grads, *x, gx);
            }
            Op::TopKMeanCols { x, k, selected } => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (j, sel) in selected.iter().enumerate() {
                    let share = g.data()[j] / *k as f64;
                    for &i in sel {
                        gx.set(i, j, gx.get(i, j) + share);
                    }
                }
                accum(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                accum(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accum(grads, *x, Mat::filled(xv.rows(), xv.cols(), g.data()[0]));
            }
            Op::CrossEntropyRenorm { x, targets } => {
                let xv = self.value(*x);
                let n = targets.len().max(1) as f64;
                let scale = g.data()[0] / n;
                let mut gx = Mat::zeros(xv.rows(), xv.cols());
                for (i, &t) in targets.iter().enumerate() {
                    let s: f64 = xv.row(i).iter().sum();
                    for v in gx.row_mut(i) {
                        *v = scale / s;
                    }
                    let cur = gx.get(i, t);
                    gx.set(i, t, cur - scale / xv.get(i, t));
                }
                accum(grads, *x, gx);
            }
            Op::SoftmaxCrossEntropy { x, targets } => {
                let mut p = softmax_rows(self.value(*x));
                let n = targets.len().max(1) as f64;
                let scale = g.data()[0] / n;
                for (i, &t) in targets.iter().enumerate() {
                    let cur = p.get(i, t);
                    p.set(i, t, cur - 1.0);
                }
                accum(grads, *x, p.scale(scale));
            }
            Op::BceWithLogits { x, targets } => {
                let xv = self.value(*x);
                let n = targets.len().max(1) as f64;
                let scale = g.data()[0] / n;
                let data = xv.data().iter().zip(targets).map(|(&z, &t)| scale * (sigmoid(z) - t)).collect();
                accum(grads, *x, Mat::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::GiouLoss { x, targets } => {
                let xv = self.value(*x);
                let n = xv.rows().max(1) as f64;
                let scale = g.data()[0] / n;
                let mut gx = Mat::zeros(xv.rows(), 4);
                for i in 0..xv.rows() {
                    let grad = boxes::giou_grad_cxcywh(xv.row(i), targets.row(i));
                    for (o, v) in gx.row_mut(i).iter_mut().zip(grad) {
                        *o = -scale * v;
                    }
                }
                accum(grads, *x, gx);
            }
        }
    }
}

fn accum(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
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

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= lse;
        }
    }
    out
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row {
            *v /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a tape-built function.
    fn check(input: Mat, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        let h = 1e-5;
        for i in 0..input.data().len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let eval = |m: Mat| {
                let mut t = Tape::new();
                let v = t.param(m);
                let l = f(&mut t, v);
                t.scalar(l)
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let tol = 1e-6 + 1e-4 * numeric.abs().max(a.abs());
            assert!((a - numeric).abs() < tol, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::randn(r, c, 1.0, &mut rng)
    }

    #[test]
    fn grad_matmul_chain() {
        let w = rand_mat(4, 3, 1);
        check(rand_mat(2, 4, 2), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let y = t.matmul_t(y, y);
            t.sum_all(y)
        });
        check(rand_mat(4, 3, 3), |t, x| {
            let a = t.constant(rand_mat(2, 4, 4));
            let y = t.matmul(a, x);
            let z = t.relu(y);
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_softmax_family() {
        check(rand_mat(3, 5, 5), |t, x| {
            let s = t.softmax_rows(x);
            let w = t.constant(rand_mat(3, 5, 6));
            let y = t.mul(s, w);
            t.sum_all(y)
        });
        check(rand_mat(3, 5, 7), |t, x| {
            let s = t.log_softmax_rows(x);
            let w = t.constant(rand_mat(3, 5, 8));
            let y = t.mul(s, w);
            t.sum_all(y)
        });
        check(rand_mat(3, 4, 9), |t, x| t.softmax_cross_entropy(x, &[0, 3, 1]));
        check(rand_mat(4, 1, 10), |t, x| t.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.3]));
    }

    #[test]
    fn grad_normalize_and_layernorm() {
        check(rand_mat(3, 4, 11), |t, x| {
            let n = t.normalize_rows(x);
            let w = t.constant(rand_mat(3, 4, 12));
            let y = t.mul(n, w);
            t.sum_all(y)
        });
        let gain = rand_mat(1, 5, 13);
        let bias = rand_mat(1, 5, 14);
        check(rand_mat(3, 5, 15), |t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            let y = t.layer_norm(x, g, b);
            let w = t.constant(rand_mat(3, 5, 16));
            let y = t.mul(y, w);
            t.sum_all(y)
        });
        check(gain.clone(), |t, g| {
            let x = t.constant(rand_mat(3, 5, 15));
            let b = t.constant(bias.clone());
            let y = t.layer_norm(x, g, b);
            let w = t.constant(rand_mat(3, 5, 16));
            let y = t.mul(y, w);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let map = Rc::new(SparseMap::new(3, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]]));
        check(rand_mat(3, 2, 17), |t, x| {
            let y = t.sparse(x, map.clone());
            let y = t.sigmoid(y);
            t.sum_all(y)
        });
        check(rand_mat(3, 6, 18), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 4, 2);
            let c = t.concat_cols(&[b, a]);
            let d = t.select_rows(c, &[2, 0, 2]);
            let e = t.exp(d);
            let m = t.mean_rows(e);
            t.sum_all(m)
        });
        check(rand_mat(2, 3, 22), |t, x| {
            let c = t.constant(rand_mat(1, 3, 23));
            let y = t.concat_rows(&[x, c, x]);
            let y = t.softmax_rows(y);
            let w = t.constant(rand_mat(5, 3, 24));
            let y = t.mul(y, w);
            t.sum_all(y)
        });
        check(rand_mat(5, 3, 19), |t, x| {
            let e = t.exp(x);
            let k = t.topk_mean_cols(e, 2);
            t.cross_entropy_renorm(k, &[1])
        });
        check(rand_mat(2, 3, 20), |t, x| {
            let c = t.constant(rand_mat(2, 3, 21));
            let d = t.sub(x, c);
            let a = t.abs(d);
            t.mean_all(a)
        });
    }

    #[test]
    fn grad_giou_loss() {
        let targets = Mat::from_rows(&[vec![0.5, 0.5, 0.3, 0.4], vec![0.2, 0.3, 0.2, 0.2]]);
        check(Mat::from_rows(&[vec![0.45, 0.56, 0.35, 0.3], vec![0.7, 0.7, 0.1, 0.2]]), |t, x| {
            t.giou_loss(x, &targets)
        });
    }
}
