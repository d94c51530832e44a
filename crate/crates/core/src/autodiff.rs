//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that (transitively) depends on a differentiable leaf.
//! Constants never receive gradients, which keeps masked or frozen inputs
//! out of the backward pass entirely.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (m×n) + b (m×1)` broadcast over columns.
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    /// `sqrt(a + eps)`.
    SqrtEps(Var),
    Sum(Var),
    Mean(Var),
    /// Row sums: `m×n -> m×1`.
    SumCols(Var),
    /// Column sums: `m×n -> 1×n`.
    SumRows(Var),
    /// Row maxima `m×n -> m×1`, keeping the first argmax per row.
    MaxCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Conv1d(ConvSpec),
    /// Per-row standardisation without affine terms; keeps `1/std` per row.
    LayerNormRows(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct ConvSpec {
    x: Var,
    w: Var,
    b: Var,
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Differentiable leaf (parameters, or inputs we want gradients for).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (1, ta.cols()), "add_row expects a 1×n bias");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (ta.rows(), 1), "add_col expects an m×1 bias");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let bv = tb.data()[r];
            for o in out.row_mut(r) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddCol(a, b), rg)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (1, ta.cols()), "mul_row expects a 1×n factor");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o *= bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulRow(a, b), rg)
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (ta.rows(), 1), "mul_col expects an m×1 factor");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let bv = tb.data()[r];
            for o in out.row_mut(r) {
                *o *= bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulCol(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::SqrtEps(a), move |x| (x + eps).sqrt())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::col_vector(data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).cols() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut arg = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let rg = self.rg(a);
        self.push(Tensor::col_vector(data), Op::MaxCols(a, arg), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (d, &v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        let out = Tensor::row_vector(data);
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols);
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.cols(), "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::from_vec(t.rows(), w, data);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.rows(), "slice_rows out of range");
        let c = t.cols();
        let out = Tensor::from_vec(end - start, c, t.data()[start * c..end * c].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `x` is `(batch·cin)×T` (one row per channel), `w` is `cout×(cin·kernel)`
    /// and `b` is `cout×1`. Tap `kernel-1` reads the current step; tap `j`
    /// reads `(kernel-1-j)·dilation` steps back, zeros before the start.
    pub fn conv1d_causal(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        kernel: usize,
        dilation: usize,
    ) -> Var {
        let (xr, t_len) = self.shape(x);
        let (cout, wk) = self.shape(w);
        assert_eq!(xr % batch, 0, "conv input rows not divisible by batch");
        let cin = xr / batch;
        assert_eq!(wk, cin * kernel, "conv weight shape mismatch");
        assert_eq!(self.shape(b), (cout, 1), "conv bias shape mismatch");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * cout * t_len];
        for bi in 0..batch {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * t_len..(bi * cout + co + 1) * t_len];
                o.fill(bv[co]);
                for ci in 0..cin {
                    let xs = &xv[(bi * cin + ci) * t_len..(bi * cin + ci + 1) * t_len];
                    for j in 0..kernel {
                        let wgt = wv[co * wk + ci * kernel + j];
                        let shift = (kernel - 1 - j) * dilation;
                        if shift >= t_len || wgt == 0.0 {
                            continue;
                        }
                        for (ov, &xvv) in o[shift..].iter_mut().zip(&xs[..t_len - shift]) {
                            *ov += wgt * xvv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let spec = ConvSpec {
            x,
            w,
            b,
            batch,
            cin,
            cout,
            kernel,
            dilation,
        };
        self.push(
            Tensor::from_vec(batch * cout, t_len, out),
            Op::Conv1d(spec),
            rg,
        )
    }

    /// Standardises each row to zero mean and unit (population) variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        let mut inv = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv.push(s);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows(a, inv), rg)
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(root);
        grads[root.0] = Some(Tensor::filled(r, c, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.add_assign(g));
                self.acc(grads, *b, |d| d.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.add_assign(g));
                self.acc(grads, *b, |d| {
                    for (x, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((x, &gv), &bv) in d.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *x += gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, &gv), &av) in d.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |d| d.add_assign(g));
                self.acc(grads, *b, |d| {
                    for r in 0..g.rows() {
                        for (x, &gv) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::AddCol(a, b) => {
                self.acc(grads, *a, |d| d.add_assign(g));
                self.acc(grads, *b, |d| {
                    for r in 0..g.rows() {
                        d.data_mut()[r] += g.row(r).iter().sum::<f64>();
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for r in 0..g.rows() {
                        for ((x, &gv), &bv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(vb.data()) {
                            *x += gv * bv;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..g.rows() {
                        for ((x, &gv), &av) in d.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *x += gv * av;
                        }
                    }
                });
            }
            Op::MulCol(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for r in 0..g.rows() {
                        let bv = vb.data()[r];
                        for (x, &gv) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += gv * bv;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for r in 0..g.rows() {
                        d.data_mut()[r] += g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| {
                    for (x, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *x += gv * s;
                    }
                });
            }
            Op::AddScalar(a) => self.acc(grads, *a, |d| d.add_assign(g)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = g.matmul(&vb.transpose());
                    self.acc(grads, *a, |d| d.add_assign(&ga));
                }
                if self.rg(*b) {
                    let gb = va.transpose().matmul(g);
                    self.acc(grads, *b, |d| d.add_assign(&gb));
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc(grads, *a, |d| d.add_assign(&gt));
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for ((x, &gv), &yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *x += gv * yv * (1.0 - yv);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |d| {
                for ((x, &gv), &yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *x += gv * (1.0 - yv * yv);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |d| {
                for ((x, &gv), &yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    if yv > 0.0 {
                        *x += gv;
                    }
                }
            }),
            Op::Square(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((x, &gv), &av) in d.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *x += 2.0 * gv * av;
                    }
                });
            }
            Op::SqrtEps(a) => self.acc(grads, *a, |d| {
                for ((x, &gv), &yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *x += gv * 0.5 / yv;
                }
            }),
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, |d| d.data_mut().iter_mut().for_each(|x| *x += gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                self.acc(grads, *a, |d| d.data_mut().iter_mut().for_each(|x| *x += gv));
            }
            Op::SumCols(a) => self.acc(grads, *a, |d| {
                for r in 0..d.rows() {
                    let gv = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|x| *x += gv);
                }
            }),
            Op::MaxCols(a, arg) => self.acc(grads, *a, |d| {
                for (r, &c) in arg.iter().enumerate() {
                    let v = d.get(r, c) + g.data()[r];
                    d.set(r, c, v);
                }
            }),
            Op::SumRows(a) => self.acc(grads, *a, |d| {
                for r in 0..d.rows() {
                    for (x, &gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *x += gv;
                    }
                }
            }),
            Op::SoftmaxRows(a) => self.acc(grads, *a, |d| {
                for r in 0..d.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((x, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *x += yv * (gv - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => self.acc(grads, *a, |d| {
                for r in 0..d.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for ((x, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *x += gv - yv.exp() * gsum;
                    }
                }
            }),
            Op::Reshape(a) => self.acc(grads, *a, |d| {
                for (x, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                    *x += gv;
                }
            }),
            Op::SliceCols(a, start) => self.acc(grads, *a, |d| {
                for r in 0..g.rows() {
                    for (x, &gv) in d.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *x += gv;
                    }
                }
            }),
            Op::SliceRows(a, start) => self.acc(grads, *a, |d| {
                let c = d.cols();
                for (x, &gv) in d.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                    *x += gv;
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |d| {
                        for r in 0..g.rows() {
                            for (x, &gv) in d.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += gv;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |d| {
                        for (x, &gv) in d.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *x += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::Conv1d(spec) => self.conv_backward(spec, g, grads),
            Op::LayerNormRows(a, inv) => self.acc(grads, *a, |d| {
                let n = g.cols() as f64;
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    let s = inv[r];
                    for ((x, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += s * (gv - gmean - yv * gy);
                    }
                }
            }),
        }
    }

    fn conv_backward(&self, s: &ConvSpec, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let t_len = g.cols();
        let xv = self.value(s.x).data();
        let wv = self.value(s.w).data();
        let wk = s.cin * s.kernel;
        let gv = g.data();
        if self.rg(s.b) {
            self.acc(grads, s.b, |d| {
                for bi in 0..s.batch {
                    for co in 0..s.cout {
                        let row = &gv[(bi * s.cout + co) * t_len..(bi * s.cout + co + 1) * t_len];
                        d.data_mut()[co] += row.iter().sum::<f64>();
                    }
                }
            });
        }
        if self.rg(s.w) {
            self.acc(grads, s.w, |d| {
                let dw = d.data_mut();
                for bi in 0..s.batch {
                    for co in 0..s.cout {
                        let grow = &gv[(bi * s.cout + co) * t_len..(bi * s.cout + co + 1) * t_len];
                        for ci in 0..s.cin {
                            let xs = &xv[(bi * s.cin + ci) * t_len..(bi * s.cin + ci + 1) * t_len];
                            for j in 0..s.kernel {
                                let shift = (s.kernel - 1 - j) * s.dilation;
                                if shift >= t_len {
                                    continue;
                                }
                                let dot: f64 = grow[shift..]
                                    .iter()
                                    .zip(&xs[..t_len - shift])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                dw[co * wk + ci * s.kernel + j] += dot;
                            }
                        }
                    }
                }
            });
        }
        if self.rg(s.x) {
            self.acc(grads, s.x, |d| {
                let dx = d.data_mut();
                for bi in 0..s.batch {
                    for co in 0..s.cout {
                        let grow = &gv[(bi * s.cout + co) * t_len..(bi * s.cout + co + 1) * t_len];
                        for ci in 0..s.cin {
                            let base = (bi * s.cin + ci) * t_len;
                            for j in 0..s.kernel {
                                let wgt = wv[co * wk + ci * s.kernel + j];
                                let shift = (s.kernel - 1 - j) * s.dilation;
                                if shift >= t_len || wgt == 0.0 {
                                    continue;
                                }
                                for (x, &gg) in dx[base..base + t_len - shift].iter_mut().zip(&grow[shift..]) {
                                    *x += wgt * gg;
                                }
                            }
                        }
                    }
                }
            });
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialised above"));
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

pub fn softmax_in_place(row: &mut [f64]) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d inputs against central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |ins: &[Tensor], weights: &Tensor| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &vars);
            let wv = g.constant(weights.clone());
            let prod = g.mul(out, wv);
            let loss = g.sum(prod);
            (g, vars, loss)
        };
        let (r, c) = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.shape(out)
        };
        let weights = rand_tensor(&mut rng, r, c);
        let (g, vars, loss) = build(&inputs, &weights);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let (gp, _, lp) = build(&plus, &weights);
                let (gm, _, lm) = build(&minus, &weights);
                let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {k} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let t = g.tanh(s);
            let q = g.sigmoid(v[0]);
            let w = g.add(t, q);
            g.square(w)
        });
        check(vec![a.map(|x| x + 2.0)], |g, v| g.sqrt_eps(v[0], 1e-12));
        check(vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.relu(v[0]));
    }

    #[test]
    fn max_cols_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, 3, 5);
        check(vec![a], |g, v| g.max_cols(v[0]));
    }

    #[test]
    fn broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 3, 4);
        let r = rand_tensor(&mut rng, 1, 4);
        let c = rand_tensor(&mut rng, 3, 1);
        check(vec![a.clone(), r.clone(), c.clone()], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let y = g.mul_col(x, v[2]);
            let z = g.mul_row(y, v[1]);
            g.add_col(z, v[2])
        });
    }

    #[test]
    fn matmul_and_reductions_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 3, 5);
        let b = rand_tensor(&mut rng, 5, 2);
        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let t = g.transpose(m);
            let s = g.sum_cols(t);
            let r = g.sum_rows(v[0]);
            let rr = g.reshape(r, 5, 1);
            let mr = g.mean_rows(rr);
            let ms = g.mean(v[1]);
            let c1 = g.concat_rows(&[s, mr]);
            let cc = g.concat_cols(&[c1, c1]);
            let sl = g.slice_cols(cc, 1, 2);
            let sr = g.slice_rows(sl, 0, 2);
            let sc = g.scale(sr, 0.7);
            let q = g.add_scalar(sc, 0.3);
            let total = g.sum(q);
            let out = g.add(total, ms);
            g.mean_cols(out)
        });
    }

    #[test]
    fn softmax_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, 2, 5);
        check(vec![a.clone()], |g, v| g.softmax_rows(v[0]));
        check(vec![a.clone()], |g, v| g.log_softmax_rows(v[0]));
        check(vec![a.clone()], |g, v| g.layer_norm_rows(v[0], 1e-5));
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, cin, cout, k, t) = (2, 3, 2, 3, 9);
        let x = rand_tensor(&mut rng, batch * cin, t);
        let w = rand_tensor(&mut rng, cout, cin * k);
        let b = rand_tensor(&mut rng, cout, 1);
        for dil in [1, 2, 4] {
            check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
                g.conv1d_causal(v[0], v[1], v[2], batch, k, dil)
            });
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut g = Graph::new();
        let mut x = Tensor::zeros(1, 8);
        x.set(0, 5, 1.0);
        let x = g.constant(x);
        let w = g.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::zeros(1, 1));
        let y = g.conv1d_causal(x, w, b, 1, 3, 2);
        // impulse at 5 reaches 5 (tap 2), 7 (tap 1); tap 0 lands at 9, out of range
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let m = g.mul(a, c);
        let grads = g.backward(m);
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert!(grads.get(c).is_none());
    }
}
