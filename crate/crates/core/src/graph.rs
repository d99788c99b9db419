//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every node holds a 2-d value. Scalars are `1x1`. Nodes are appended in
//! evaluation order, so a reverse sweep over the tape is a valid
//! topological order for backpropagation.

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{Mat, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    Shift(Var, isize),
    MaskRows(Var, Vec<bool>),
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    RepeatRow(Var),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: Vec<(ParamId, Mat)>,
}

impl Gradients {
    pub fn accumulate_into(self, store: &mut ParameterStore) {
        for (id, g) in self.params {
            store.accumulate_grad(id, &g);
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> Mat {
    Mat::from_elem((1, 1), v)
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather(&mut self, a: Var, rows: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((rows.len(), src.ncols()));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                v.row_mut(i).assign(&src.row(r));
            }
        }
        self.push(v, Op::Gather(a, rows))
    }

    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.gather(a, (start..end).map(Some).collect())
    }

    /// `out[i] = a[i + offset]`, zero outside the sequence.
    pub fn shift(&mut self, a: Var, offset: isize) -> Var {
        let src = self.value(a);
        let n = src.nrows() as isize;
        let mut v = Mat::zeros(src.dim());
        for i in 0..n {
            let j = i + offset;
            if (0..n).contains(&j) {
                v.row_mut(i as usize).assign(&src.row(j as usize));
            }
        }
        self.push(v, Op::Shift(a, offset))
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut v = self.value(a).clone();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                v.row_mut(i).fill(0.0);
            }
        }
        self.push(v, Op::MaskRows(a, mask.to_vec()))
    }

    /// Row-wise softmax over the columns whose mask entry is true; masked
    /// columns receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, col_mask: &[bool]) -> Var {
        let v = masked_softmax_rows(self.value(a), col_mask);
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Column-wise maximum over rows whose mask entry is true, `1 x d`.
    pub fn max_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let src = self.value(a);
        let mut arg = vec![usize::MAX; src.ncols()];
        let mut v = Mat::zeros((1, src.ncols()));
        for c in 0..src.ncols() {
            let mut best = f64::NEG_INFINITY;
            for r in 0..src.nrows() {
                if mask[r] && src[[r, c]] > best {
                    best = src[[r, c]];
                    arg[c] = r;
                }
            }
            assert!(arg[c] != usize::MAX, "max_rows: fully masked input");
            v[[0, c]] = best;
        }
        self.push(v, Op::MaxRows(a, arg))
    }

    /// Broadcasts a `1 x d` row to `n x d`.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a).row(0).to_owned();
        let v = row.broadcast((n, row.len())).unwrap().to_owned();
        self.push(v, Op::RepeatRow(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = scalar(src.sum() / src.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// `log(mean(exp(a)))` over all entries, stabilized by max subtraction.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let v = scalar(log_mean_exp(self.value(a).iter().copied()));
        self.push(v, Op::LogMeanExp(a))
    }

    /// Mean softmax cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let src = self.value(logits);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = src.row(r);
            total += log_mean_exp(row.iter().copied()) + (row.len() as f64).ln() - row[y];
        }
        let v = scalar(total / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(scalar(1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.params.push((*id, g)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, grow);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gi, &y| {
                        if y <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gi, &x| *gi *= sign(x));
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Gather(a, rows) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let mut dst = ga.row_mut(r);
                            dst += &g.row(i);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Shift(a, offset) => {
                    let n = g.nrows() as isize;
                    let mut ga = Mat::zeros(g.dim());
                    for i in 0..n {
                        let j = i + offset;
                        if (0..n).contains(&j) {
                            ga.row_mut(j as usize).assign(&g.row(i as usize));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskRows(a, mask) => {
                    let mut ga = g;
                    for (i, &keep) in mask.iter().enumerate() {
                        if !keep {
                            ga.row_mut(i).fill(0.0);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - sum(g * y))
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (c, &r) in arg.iter().enumerate() {
                        ga[[r, c]] += g[[0, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RepeatRow(a) => acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let ga = Mat::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::LogMeanExp(a) => {
                    // d/dx_i log mean exp(x) = softmax(x)_i
                    let x = self.value(*a);
                    let m = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let e = x.mapv(|v| (v - m).exp());
                    let z = e.sum();
                    acc(&mut grads, *a, e * (g[[0, 0]] / z));
                }
                Op::CrossEntropy(logits, labels) => {
                    let x = self.value(*logits);
                    let all = vec![true; x.ncols()];
                    let mut ga = masked_softmax_rows(x, &all);
                    let k = g[[0, 0]] / labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        ga[[r, y]] -= 1.0;
                    }
                    acc(&mut grads, *logits, ga * k);
                }
            }
        }
        out
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

/// Numerically stable `log(mean(exp(x)))`. Returns `-inf` for an empty input.
pub fn log_mean_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let (m, n) = xs
        .clone()
        .fold((f64::NEG_INFINITY, 0usize), |(m, n), x| (m.max(x), n + 1));
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.map(|x| (x - m).exp()).sum();
    m + (s / n as f64).ln()
}

pub fn masked_softmax_rows(x: &Mat, col_mask: &[bool]) -> Mat {
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let m = x
            .row(r)
            .iter()
            .zip(col_mask)
            .filter(|(_, &k)| k)
            .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for c in 0..x.ncols() {
            if col_mask[c] {
                let e = (x[[r, c]] - m).exp();
                out[[r, c]] = e;
                z += e;
            }
        }
        out.row_mut(r).mapv_inplace(|v| v / z);
    }
    out
}
