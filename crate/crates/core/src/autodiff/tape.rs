//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape once in reverse, accumulating adjoints only along nodes that depend
//! on a differentiable leaf.

use super::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Vec<bool>>),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    GatherRows(Var, Vec<usize>),
    Diag(Var),
    SmoothL1Mean(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }

    /// `(param id, gradient)` for every parameter leaf with a nonzero path.
    pub fn param_grads(&mut self) -> Vec<(usize, Matrix)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
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

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose adjoint is readable after `backward`.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by the `1 × cols` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1), "mul_scalar expects 1x1");
        let k = self.value(s).data()[0];
        let v = self.value(a).scale(k);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-softmax. When `mask` is given, entries with `false` are
    /// excluded from the normalizer; their output value is 0 and they carry no
    /// gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.len(), "mask length");
        }
        let cols = x.cols();
        let mut out = x.clone();
        for r in 0..out.rows() {
            let keep = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
            let row = out.row_mut(r);
            let mx = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = mx
                + (0..cols)
                    .filter(|&c| keep(c))
                    .map(|c| (row[c] - mx).exp())
                    .sum::<f64>()
                    .ln();
            for (c, v) in row.iter_mut().enumerate() {
                *v = if keep(c) { *v - lse } else { 0.0 };
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a, mask), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(out, Op::L2NormalizeRows(a, norms), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols range");
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + x.cols()].copy_from_slice(x.row(r));
            }
            off += x.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows range");
        let c = x.cols();
        let out = Matrix::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows cols");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Diagonal of a square matrix as a `1 × n` row.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), x.cols(), "diag expects square");
        let v = Matrix::row_vector((0..x.rows()).map(|i| x.get(i, i)).collect());
        let rg = self.rg(a);
        self.push(v, Op::Diag(a), rg)
    }

    /// Mean elementwise smooth-L1 (Huber with threshold 1) between `a` and `b`.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var) -> Var {
        let x = self.value(a);
        let y = self.value(b);
        assert_eq!(x.shape(), y.shape(), "smooth_l1 shape");
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| smooth_l1(p - q))
            .sum();
        let v = Matrix::scalar(s / x.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::SmoothL1Mean(a, b), rg)
    }

    /// Cosine similarity between two `1 × d` rows, as a `1 × 1` node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let na = self.l2_normalize_rows(a);
        let nb = self.l2_normalize_rows(b);
        let prod = self.mul(na, nb);
        self.sum_all(prod)
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Matrix::scalar(1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.rg(*a) {
                    self.accumulate(grads, *a, broadcast_rows(g, rv, |x, y| x * y));
                }
                if self.rg(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(k));
                }
                if self.rg(*s) {
                    self.accumulate(grads, *s, Matrix::scalar(g.dot(self.value(*a))));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |d, e| d * e)),
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d / x));
            }
            Op::Gelu(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x)));
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - s);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a, mask) => {
                let cols = y.cols();
                let mut dx = Matrix::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let keep = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
                    let gs: f64 = (0..cols).filter(|&c| keep(c)).map(|c| g.get(r, c)).sum();
                    for c in 0..cols {
                        if keep(c) {
                            dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols() as f64;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    let inv = inv_std[r];
                    for ((d, &q), &p) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = inv / n * (n * p - sg - q * sgy);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (q - p * s) / norms[r];
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Matrix::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let c = x.cols();
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let dp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, p, dp);
                    }
                    off += r;
                }
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (d, &q) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = q * inv;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let v = g.data()[0] / x.len() as f64;
                self.accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), v));
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &q) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += q;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Diag(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for k in 0..x.rows() {
                    dx.set(k, k, g.data()[k]);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SmoothL1Mean(a, b) => {
                let x = self.value(*a);
                let w = g.data()[0] / x.len() as f64;
                let d = x.zip_map(self.value(*b), |p, q| w * smooth_l1_grad(p - q));
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0));
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

fn broadcast_rows(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast row must be 1 x cols");
    assert_eq!(a.cols(), row.cols(), "broadcast cols");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(row.row(0)) {
            *v = f(*v, b);
        }
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
