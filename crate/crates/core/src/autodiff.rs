//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation as a node holding its value. Calling
//! [`Tape::backward`] on a 1×1 node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node.

use crate::matrix::Matrix;

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
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Matrix plus a 1×m row broadcast over every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Transpose(Var),
    SoftmaxRow(Var),
    Gather(Var, Vec<usize>),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        width: usize,
    },
    SumSquaredError(Var, Matrix),
    BceWithLogitsSum(Var, Vec<f64>),
    Sum(Var),
    SumSquares(Var),
    LogAbsDet(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]. Nodes that do not influence the output
/// have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => {
            for (a, b) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// `a · bᵀ` without materialising the transpose.
fn matmul_t(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "matmul_t shape mismatch");
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn t_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "t_matmul shape mismatch");
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let br = b.row(r);
        for (i, &x) in a.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out.row_mut(i).iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

/// LU decomposition with partial pivoting. Returns (log|det|, inverse) or
/// `None` when singular.
pub(crate) fn log_abs_det_and_inverse(m: &Matrix) -> Option<(f64, Matrix)> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "determinant of non-square matrix");
    let nm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    let lu = nm.lu();
    let det = lu.determinant();
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = lu.try_inverse()?;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = inv[(i, j)];
        }
    }
    Some((det.abs().ln(), out))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.as_slice()[0]
    }

    /// A leaf: a parameter or a constant input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (mv, rv) = (self.value(m), self.value(row));
        assert_eq!(rv.shape(), (1, mv.cols()), "add_row shape mismatch");
        let mut out = mv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(m, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let av = self.value(a);
        let out = Matrix::from_vec(1, av.cols(), av.row(r).to_vec());
        self.push(out, Op::Row(a, r))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let cols = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let rv = self.value(r);
            assert_eq!(rv.shape(), (1, cols), "stack_rows expects equal 1×m rows");
            data.extend_from_slice(rv.as_slice());
        }
        self.push(Matrix::from_vec(rows.len(), cols, data), Op::StackRows(rows.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Softmax over the single row of a 1×n node.
    pub fn softmax_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "softmax_row expects a 1×n input");
        let max = av.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.as_slice().iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = Matrix::from_vec(1, exps.len(), exps.iter().map(|e| e / sum).collect());
        self.push(out, Op::SoftmaxRow(a))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// "Same"-padded 1-D convolution over time. `input` is T×C_in, `kernel`
    /// is C_out×(C_in·width) laid out as `[o][c][j]`, output is T×C_out.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Option<Var>, width: usize) -> Var {
        let x = self.value(input);
        let k = self.value(kernel);
        let (t_len, c_in) = x.shape();
        let c_out = k.rows();
        assert_eq!(k.cols(), c_in * width, "conv1d kernel shape mismatch");
        let pad = (width - 1) / 2;
        let mut out = Matrix::zeros(t_len, c_out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for t in 0..t_len {
                out.row_mut(t).copy_from_slice(bv.as_slice());
            }
        }
        for t in 0..t_len {
            for j in 0..width {
                let src = t as i64 + j as i64 - pad as i64;
                if src < 0 || src >= t_len as i64 {
                    continue;
                }
                let xr = x.row(src as usize);
                for o in 0..c_out {
                    let kr = k.row(o);
                    let mut acc = 0.0;
                    for (c, &xv) in xr.iter().enumerate() {
                        acc += kr[c * width + j] * xv;
                    }
                    out[(t, o)] += acc;
                }
            }
        }
        self.push(
            out,
            Op::Conv1d {
                input,
                kernel,
                bias,
                width,
            },
        )
    }

    /// `Σ (a - target)²` as a 1×1 node.
    pub fn sum_squared_error(&mut self, a: Var, target: &Matrix) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "sse shape mismatch");
        let s: f64 = av.as_slice().iter().zip(target.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumSquaredError(a, target.clone()))
    }

    /// Summed binary cross-entropy of logits `a` against `targets`.
    pub fn bce_with_logits_sum(&mut self, a: Var, targets: &[f64]) -> Var {
        let av = self.value(a);
        assert_eq!(av.as_slice().len(), targets.len(), "bce length mismatch");
        let s: f64 = av
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Matrix::filled(1, 1, s), Op::BceWithLogitsSum(a, targets.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().map(|x| x * x).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a))
    }

    /// `ln |det a|` of a square node. Returns `None` if singular.
    pub fn log_abs_det(&mut self, a: Var) -> Option<Var> {
        let (ld, _) = log_abs_det_and_inverse(self.value(a))?;
        Some(self.push(Matrix::filled(1, 1, ld), Op::LogAbsDet(a)))
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_t(&g, self.value(*b));
                    let db = t_matmul(self.value(*a), &g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = t_matmul(&g, self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::AddRow(m, r) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, &x) in dr.as_mut_slice().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads[r.0], dr);
                    accumulate(&mut grads[m.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.map(|x| x * c)),
                Op::Tanh(a) => accumulate(&mut grads[a.0], zip_map(&g, y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => {
                    accumulate(&mut grads[a.0], zip_map(&g, y, |d, s| d * s * (1.0 - s)))
                }
                Op::Relu(a) => {
                    accumulate(&mut grads[a.0], zip_map(&g, y, |d, r| if r > 0.0 { d } else { 0.0 }))
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], zip_map(&g, y, |d, e| d * e)),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(&mut grads[p.0], d);
                        off += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Row(a, r) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    d.row_mut(*r).copy_from_slice(g.as_slice());
                    accumulate(&mut grads[a.0], d);
                }
                Op::StackRows(rows) => {
                    for (i, r) in rows.iter().enumerate() {
                        accumulate(&mut grads[r.0], Matrix::from_vec(1, g.cols(), g.row(i).to_vec()));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::SoftmaxRow(a) => {
                    let dot: f64 = g.as_slice().iter().zip(y.as_slice()).map(|(d, s)| d * s).sum();
                    accumulate(&mut grads[a.0], zip_map(&g, y, |d, s| s * (d - dot)));
                }
                Op::Gather(table, ids) => {
                    let tv = self.value(*table);
                    let mut d = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[table.0], d);
                }
                Op::Conv1d {
                    input,
                    kernel,
                    bias,
                    width,
                } => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let (t_len, c_in) = x.shape();
                    let pad = (width - 1) / 2;
                    let mut dx = Matrix::zeros(t_len, c_in);
                    let mut dk = Matrix::zeros(k.rows(), k.cols());
                    for t in 0..t_len {
                        let gr = g.row(t);
                        for j in 0..*width {
                            let src = t as i64 + j as i64 - pad as i64;
                            if src < 0 || src >= t_len as i64 {
                                continue;
                            }
                            let src = src as usize;
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let kr = k.row(o);
                                for c in 0..c_in {
                                    dk[(o, c * width + j)] += go * x[(src, c)];
                                    dx[(src, c)] += go * kr[c * width + j];
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let mut db = Matrix::zeros(1, g.cols());
                        for row in g.iter_rows() {
                            for (d, &x) in db.as_mut_slice().iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    accumulate(&mut grads[input.0], dx);
                    accumulate(&mut grads[kernel.0], dk);
                }
                Op::SumSquaredError(a, target) => {
                    let s = g.as_slice()[0];
                    let d = zip_map(self.value(*a), target, |x, t| 2.0 * (x - t) * s);
                    accumulate(&mut grads[a.0], d);
                }
                Op::BceWithLogitsSum(a, targets) => {
                    let s = g.as_slice()[0];
                    let av = self.value(*a);
                    let data = av
                        .as_slice()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * s)
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(av.rows(), av.cols(), data));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads[a.0], Matrix::filled(av.rows(), av.cols(), g.as_slice()[0]));
                }
                Op::SumSquares(a) => {
                    let s = g.as_slice()[0];
                    accumulate(&mut grads[a.0], self.value(*a).map(|x| 2.0 * x * s));
                }
                Op::LogAbsDet(a) => {
                    let s = g.as_slice()[0];
                    let (_, inv) = log_abs_det_and_inverse(self.value(*a))
                        .expect("matrix was invertible in the forward pass");
                    accumulate(&mut grads[a.0], inv.transpose().map(|x| x * s));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}
