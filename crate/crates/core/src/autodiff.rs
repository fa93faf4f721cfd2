//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every network block records its forward computation here; `backward` then
//! walks the tape in reverse. Only the operations the model needs are provided,
//! plus two fused kernels (batch normalization and the pairwise position MLP)
//! that would otherwise materialize very large intermediates.

use crate::error::{shape_err, Result};
use crate::tensor::Matrix;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Negates the gradient of every row-broadcast Hadamard product.
    NegateRowHadamard,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Ln(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    GroupMaxRows(Var, Vec<usize>),
    BroadcastRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    BatchNorm {
        x: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    StraightThrough {
        soft: Var,
        indices: Vec<usize>,
    },
    PairBias {
        q_coords: Matrix,
        k_coords: Matrix,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

/// Gradients indexed by tape variable; `None` when a variable received no gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: GradFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + row`, with the 1×C `row` repeated over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row_op("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// `a ⊙ row`, with the 1×C `row` repeated over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row_op("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::MulRow(a, row), rg))
    }

    fn broadcast_row_op(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err(
                op,
                format!("row {:?} against {:?}", rm.shape(), am.shape()),
            ));
        }
        let mut out = am.clone();
        let r = rm.as_slice();
        for i in 0..out.rows() {
            for (o, &y) in out.row_mut(i).iter_mut().zip(r) {
                *o = f(*o, y);
            }
        }
        Ok(out)
    }

    /// `a ⊙ col`, with the R×1 `col` repeated over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(col));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(shape_err(
                "mul_col",
                format!("col {:?} against {:?}", cm.shape(), am.shape()),
            ));
        }
        let mut out = am.clone();
        for i in 0..out.rows() {
            let s = cm[(i, 0)];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Column means, R×C → 1×C.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols());
        let inv = 1.0 / m.rows().max(1) as f64;
        for r in 0..m.rows() {
            for (o, &x) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        for o in out.as_mut_slice() {
            *o *= inv;
        }
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Column maxima, R×C → 1×C; the first maximal row wins ties.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(shape_err("max_rows", "no rows"));
        }
        let mut arg = vec![0usize; m.cols()];
        let mut out = Matrix::row_vector(m.row(0));
        for r in 1..m.rows() {
            for (c, &x) in m.row(r).iter().enumerate() {
                if x > out[(0, c)] {
                    out[(0, c)] = x;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaxRows(a, arg), rg))
    }

    /// Max over consecutive groups of `k` rows: (G·k)×C → G×C.
    pub fn group_max_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let m = self.value(a);
        if k == 0 || m.rows() % k != 0 {
            return Err(shape_err(
                "group_max_rows",
                format!("{} rows not divisible into groups of {k}", m.rows()),
            ));
        }
        let groups = m.rows() / k;
        let mut out = Matrix::zeros(groups, m.cols());
        let mut arg = vec![0usize; groups * m.cols()];
        for g in 0..groups {
            out.row_mut(g).copy_from_slice(m.row(g * k));
            for c in 0..m.cols() {
                arg[g * m.cols() + c] = g * k;
            }
            for r in g * k + 1..(g + 1) * k {
                for (c, &x) in m.row(r).iter().enumerate() {
                    if x > out[(g, c)] {
                        out[(g, c)] = x;
                        arg[g * m.cols() + c] = r;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GroupMaxRows(a, arg), rg))
    }

    /// Repeats a 1×C row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(shape_err("broadcast_rows", format!("{:?}", m.shape())));
        }
        let mut out = Matrix::zeros(rows, m.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(m.row(0));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::BroadcastRows(a), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.rows() != bm.rows() {
            return Err(shape_err(
                "concat_cols",
                format!("{:?} vs {:?}", am.shape(), bm.shape()),
            ));
        }
        let mut out = Matrix::zeros(am.rows(), am.cols() + bm.cols());
        for r in 0..am.rows() {
            let row = out.row_mut(r);
            row[..am.cols()].copy_from_slice(am.row(r));
            row[am.cols()..].copy_from_slice(bm.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("width {} vs {cols}", m.cols()),
                ));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows of `a` at `indices` (repeats allowed); the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("index {bad} out of {} rows", m.rows()),
            ));
        }
        let out = m.select_rows(indices);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), rg)
    }

    /// Per-column standardization with batch statistics (biased variance).
    /// Returns the normalized output plus the batch mean and unbiased variance.
    pub fn batch_norm_train(&mut self, x: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let m = self.value(x);
        let (n, c) = m.shape();
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (mu, &v) in mean.iter_mut().zip(m.row(r)) {
                *mu += v;
            }
        }
        let inv_n = 1.0 / n.max(1) as f64;
        mean.iter_mut().for_each(|mu| *mu *= inv_n);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, &v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s * inv_n + BN_EPS).sqrt())
            .collect();
        let mut xhat = m.clone();
        for r in 0..n {
            for ((o, mu), is) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - mu) * is;
            }
        }
        let rg = self.rg(x);
        let v = self.push(
            xhat.clone(),
            Op::BatchNorm { x, xhat, inv_std },
            rg,
        );
        (v, mean, unbiased)
    }

    /// Mean cross-entropy of row-wise softmax(logits) against integer labels, as a 1×1 value.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if m.rows() != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows vs {} labels", m.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m.cols()) {
            return Err(shape_err(
                "cross_entropy",
                format!("label {bad} with {} classes", m.cols()),
            ));
        }
        let probs = softmax_rows(m);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = m.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len().max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Straight-through selection multipliers.
    ///
    /// Produces an H×1 column whose entry r is `1 + soft[idx_r] − baseline[r]`; the
    /// gradient flows into `soft` as if the entry were `soft[idx_r]`. With
    /// `baseline = None` the baseline is the current soft value, so the forward
    /// value is exactly 1.0 (hard selection) while the backward pass sees the
    /// soft weights. A frozen baseline gives the relaxed function whose ordinary
    /// derivative equals the straight-through gradient, for finite-difference checks.
    pub fn straight_through(
        &mut self,
        soft: Var,
        indices: &[usize],
        baseline: Option<&[f64]>,
    ) -> Result<Var> {
        let s = self.value(soft);
        if s.rows() != 1 {
            return Err(shape_err("straight_through", "soft weights must be 1×N"));
        }
        if let Some(b) = baseline {
            if b.len() != indices.len() {
                return Err(shape_err("straight_through", "baseline length"));
            }
        }
        let mut out = Matrix::zeros(indices.len(), 1);
        for (r, &i) in indices.iter().enumerate() {
            if i >= s.cols() {
                return Err(shape_err("straight_through", format!("index {i}")));
            }
            let w = s[(0, i)];
            let base = baseline.map_or(w, |b| b[r]);
            out[(r, 0)] = 1.0 + (w - base);
        }
        let rg = self.rg(soft);
        Ok(self.push(
            out,
            Op::StraightThrough {
                soft,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar pairwise bias `B[i,j] = w2 · relu(W1 (q_i − k_j) + b1) + b2`.
    ///
    /// Shapes: `w1` 3×P, `b1` 1×P, `w2` P×1, `b2` 1×1. Coordinates are data and
    /// receive no gradient. Hidden activations are recomputed in the backward pass.
    pub fn pair_bias(
        &mut self,
        q_coords: &Matrix,
        k_coords: &Matrix,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    ) -> Result<Var> {
        let (w1m, b1m, w2m, b2m) = (self.value(w1), self.value(b1), self.value(w2), self.value(b2));
        let p = w1m.cols();
        if q_coords.cols() != 3
            || k_coords.cols() != 3
            || w1m.rows() != 3
            || b1m.shape() != (1, p)
            || w2m.shape() != (p, 1)
            || b2m.shape() != (1, 1)
        {
            return Err(shape_err(
                "pair_bias",
                format!(
                    "coords {:?}/{:?}, w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    q_coords.shape(),
                    k_coords.shape(),
                    w1m.shape(),
                    b1m.shape(),
                    w2m.shape(),
                    b2m.shape()
                ),
            ));
        }
        // W1 (q − k) + b1 = (q·W1 + b1) − k·W1
        let qp = q_coords.matmul(w1m)?;
        let kp = k_coords.matmul(w1m)?;
        let (h, n) = (q_coords.rows(), k_coords.rows());
        let b1s = b1m.as_slice();
        let w2s = w2m.as_slice();
        let b2v = b2m[(0, 0)];
        let mut out = Matrix::zeros(h, n);
        let mut qb = vec![0.0; p];
        for i in 0..h {
            for ((o, &a), &b) in qb.iter_mut().zip(qp.row(i)).zip(b1s) {
                *o = a + b;
            }
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                let kr = kp.row(j);
                let mut acc = b2v;
                for t in 0..p {
                    let pre = qb[t] - kr[t];
                    if pre > 0.0 {
                        acc += w2s[t] * pre;
                    }
                }
                *o = acc;
            }
        }
        let rg = self.rg(w1) || self.rg(b1) || self.rg(w2) || self.rg(b2);
        Ok(self.push(
            out,
            Op::PairBias {
                q_coords: q_coords.clone(),
                k_coords: k_coords.clone(),
                w1,
                b1,
                w2,
                b2,
            },
            rg,
        ))
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(shape_err("backward", format!("output {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b))?;
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g)?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(self.value(*a))?;
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(bm, |x, y| x * y));
                self.acc(grads, *b, g.zip_map(am, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let sign = if self.fault == Some(GradFault::NegateRowHadamard) {
                    -1.0
                } else {
                    1.0
                };
                let (am, rm) = (self.value(*a), self.value(*row));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    let r = rm.as_slice();
                    for i in 0..ga.rows() {
                        for (o, &s) in ga.row_mut(i).iter_mut().zip(r) {
                            *o *= s * sign;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*row) {
                    let mut gr = column_sums(&g.zip_map(am, |x, y| x * y));
                    gr.as_mut_slice().iter_mut().for_each(|v| *v *= sign);
                    self.acc(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let (am, cm) = (self.value(*a), self.value(*col));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = cm[(i, 0)];
                        ga.row_mut(i).iter_mut().for_each(|o| *o *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*col) {
                    let mut gc = Matrix::zeros(cm.rows(), 1);
                    for i in 0..cm.rows() {
                        gc[(i, 0)] = g.row(i).iter().zip(am.row(i)).map(|(x, y)| x * y).sum();
                    }
                    self.acc(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Ln(a) => {
                let am = self.value(*a);
                self.acc(grads, *a, g.zip_map(am, |x, v| x / v));
            }
            Op::Relu(a) => {
                let am = self.value(*a);
                self.acc(grads, *a, g.zip_map(am, |x, v| if v > 0.0 { x } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let inv = 1.0 / am.rows().max(1) as f64;
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = x * inv;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MaxRows(a, arg) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga[(r, c)] += g[(0, c)];
                }
                self.acc(grads, *a, ga);
            }
            Op::GroupMaxRows(a, arg) => {
                let am = self.value(*a);
                let cols = am.cols();
                let mut ga = Matrix::zeros(am.rows(), cols);
                for (k, &r) in arg.iter().enumerate() {
                    let (gi, c) = (k / cols, k % cols);
                    ga[(r, c)] += g[(gi, c)];
                }
                self.acc(grads, *a, ga);
            }
            Op::BroadcastRows(a) => self.acc(grads, *a, column_sums(g)),
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut ga = Matrix::zeros(g.rows(), ac);
                let mut gb = Matrix::zeros(g.rows(), bc);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let cols = g.cols();
                        let slice = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                        self.acc(grads, p, Matrix::from_vec(rows, cols, slice)?);
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, indices) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, g.reshape(r, c)?);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for (k, (&gv, &xv)) in g.row(r).iter().zip(xhat.row(r)).enumerate() {
                        sum_g[k] += gv;
                        sum_gx[k] += gv * xv;
                    }
                }
                let nf = n as f64;
                let mut gx = Matrix::zeros(n, c);
                for r in 0..n {
                    for k in 0..c {
                        gx[(r, k)] = inv_std[k] / nf
                            * (nf * g[(r, k)] - sum_g[k] - xhat[(r, k)] * sum_gx[k]);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g[(0, 0)] / labels.len().max(1) as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[(r, l)] -= 1.0;
                }
                gl.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                self.acc(grads, *logits, gl);
            }
            Op::StraightThrough { soft, indices } => {
                let n = self.value(*soft).cols();
                let mut gs = Matrix::zeros(1, n);
                for (r, &i) in indices.iter().enumerate() {
                    gs[(0, i)] += g[(r, 0)];
                }
                self.acc(grads, *soft, gs);
            }
            Op::PairBias {
                q_coords,
                k_coords,
                w1,
                b1,
                w2,
                b2,
            } => {
                let (w1m, b1m, w2m) = (self.value(*w1), self.value(*b1), self.value(*w2));
                let p = w1m.cols();
                let qp = q_coords.matmul(w1m)?;
                let kp = k_coords.matmul(w1m)?;
                let (h, n) = (q_coords.rows(), k_coords.rows());
                let w2s = w2m.as_slice();
                let mut gw2 = vec![0.0; p];
                let mut gb1 = vec![0.0; p];
                // gradient wrt (q·W1) rows and (k·W1) rows
                let mut gqp = Matrix::zeros(h, p);
                let mut gkp = Matrix::zeros(n, p);
                let mut gb2 = 0.0;
                let mut qb = vec![0.0; p];
                for i in 0..h {
                    for t in 0..p {
                        qb[t] = qp[(i, t)] + b1m[(0, t)];
                    }
                    for j in 0..n {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        gb2 += gij;
                        let kr = kp.row(j);
                        for t in 0..p {
                            let pre = qb[t] - kr[t];
                            if pre > 0.0 {
                                gw2[t] += gij * pre;
                                let gp = gij * w2s[t];
                                gb1[t] += gp;
                                gqp[(i, t)] += gp;
                                gkp[(j, t)] -= gp;
                            }
                        }
                    }
                }
                if self.rg(*w1) {
                    let mut gw1 = q_coords.matmul_tn(&gqp)?;
                    gw1.add_assign(&k_coords.matmul_tn(&gkp)?);
                    self.acc(grads, *w1, gw1);
                }
                self.acc(grads, *b1, Matrix::row_vector(&gb1));
                self.acc(grads, *w2, Matrix::column_vector(&gw2));
                self.acc(grads, *b2, Matrix::filled(1, 1, gb2));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Row-wise max-shifted softmax. Callers validate finiteness beforehand.
pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
