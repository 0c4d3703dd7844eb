//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-d array; vectors are `1 × n` rows or
//! `n × 1` columns. Parameters are borrowed for the lifetime of the tape, so
//! building a graph never copies the weight matrices.

use std::borrow::Cow;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Norm below which a cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CumsumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowSums(Var),
    Sum(Var),
    DivRows(Var, Var),
    // winning row for every column
    MaxRows(Var, Vec<usize>),
    Cosine(Var, Var),
    Transpose(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    tracked: bool,
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar root with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Rows or inner dimension at or below which the loop kernels beat gemm.
const THIN: usize = 8;

/// `out += lhs · rhs`. Thin operands (a few rows, or a short inner
/// dimension) use loops over contiguous rows instead of a packed gemm.
fn product_into(lhs: ArrayView2<f64>, rhs: ArrayView2<f64>, out: &mut Array2<f64>) {
    let rows_contiguous = rhs.strides()[1] == 1;
    let cols_contiguous = rhs.strides()[0] == 1;
    if lhs.nrows() <= THIN && rows_contiguous {
        for (i, l) in lhs.rows().into_iter().enumerate() {
            let mut o = out.row_mut(i);
            for (k, &w) in l.iter().enumerate() {
                if w != 0.0 {
                    o.scaled_add(w, &rhs.row(k));
                }
            }
        }
    } else if lhs.nrows() <= THIN && cols_contiguous {
        for (i, l) in lhs.rows().into_iter().enumerate() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o += l.dot(&rhs.column(j));
            }
        }
    } else if lhs.ncols() <= THIN && rows_contiguous {
        for (k, mut o) in out.rows_mut().into_iter().enumerate() {
            for p in 0..lhs.ncols() {
                let w = lhs[[k, p]];
                if w != 0.0 {
                    o.scaled_add(w, &rhs.row(p));
                }
            }
        }
    } else {
        general_mat_mul(1.0, &lhs, &rhs, 1.0, out);
    }
}

fn norm(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.push(Cow::Owned(value), op, tracked)
    }

    /// Records a trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Records an owned leaf that receives a gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "not a scalar");
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let mut value = Array2::zeros((x.nrows(), y.ncols()));
        product_into(x.view(), y.view(), &mut value);
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "broadcast operand must be a row");
        let value = self.value(a) + self.value(row);
        self.push_op(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push_op(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push_op(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push_op(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push_op(value, Op::Exp(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push_op(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push_op(value, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn cumsum_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.accumulate_axis_inplace(Axis(1), |&prev, cur| *cur += prev);
        self.push_op(value, Op::CumsumRows(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts differ");
        self.push_op(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        self.push_op(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push_op(value, Op::SliceCols(x, start), &[x])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push_op(value, Op::SliceRows(x, start), &[x])
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.slice_rows(x, i, i + 1)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        self.push_op(value, Op::GatherRows(x, rows.to_vec()), &[x])
    }

    /// `m × n` to `m × 1`.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let sums: Vec<f64> = src.rows().into_iter().map(|r| r.sum()).collect();
        let value = Array2::from_shape_vec((src.nrows(), 1), sums).expect("column of row sums");
        self.push_op(value, Op::RowSums(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    /// Divides row `i` of `x` by `s[i]`; rows with `s[i] == 0` become zero.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Var {
        let mut value = self.value(x).clone();
        let denom = self.value(s);
        assert_eq!(denom.dim(), (value.nrows(), 1), "divisor must be a column");
        for (mut row, &d) in value.rows_mut().into_iter().zip(denom.iter()) {
            if d == 0.0 {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v / d);
            }
        }
        self.push_op(value, Op::DivRows(x, s), &[x, s])
    }

    /// Elementwise maximum over the selected rows, as a `1 × n` row.
    pub fn max_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "max over an empty row set");
        let src = self.value(x);
        let cols = src.ncols();
        let mut winners = vec![rows[0]; cols];
        let mut value = Array2::zeros((1, cols));
        for c in 0..cols {
            let mut best = src[[rows[0], c]];
            for &r in &rows[1..] {
                if src[[r, c]] > best {
                    best = src[[r, c]];
                    winners[c] = r;
                }
            }
            value[[0, c]] = best;
        }
        self.push_op(value, Op::MaxRows(x, winners), &[x])
    }

    /// Cosine similarity of two equally shaped values; zero when either norm
    /// is below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "cosine operands differ in shape");
        let (na, nb) = (norm(va), norm(vb));
        let c = if na < COSINE_EPS || nb < COSINE_EPS {
            0.0
        } else {
            (va * vb).sum() / (na * nb)
        };
        self.push_op(Array2::from_elem((1, 1), c), Op::Cosine(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push_op(value, Op::Transpose(x), &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let data: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape size mismatch");
        self.push_op(value, Op::Reshape(x), &[x])
    }

    /// Back-propagates from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &*node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    self.accumulate_product(&mut grads, *a, g.view(), self.value(*b).t());
                    self.accumulate_product(&mut grads, *b, self.value(*a).t(), g.view());
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, *row, drow);
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *b, -&g);
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.is_tracked(*a) {
                        let da = &g * self.value(*b);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.is_tracked(*b) {
                        let db = &g * self.value(*a);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Affine(x, scale) => {
                    self.accumulate(&mut grads, *x, g * *scale);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &v| *d *= v * (1.0 - v));
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &v| *d *= 1.0 - v * v);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(y).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = g * y;
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &p| *d = p * (*d - dot));
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &lp| *d -= lp.exp() * total);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::CumsumRows(x) => {
                    let mut dx = g;
                    for mut row in dx.rows_mut() {
                        let mut acc = 0.0;
                        for v in row.iter_mut().rev() {
                            acc += *v;
                            *v = acc;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        if self.is_tracked(p) {
                            let part = g.slice(s![.., start..start + width]).to_owned();
                            self.accumulate(&mut grads, p, part);
                        }
                        start += width;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let height = self.shape(p).0;
                        if self.is_tracked(p) {
                            let part = g.slice(s![start..start + height, ..]).to_owned();
                            self.accumulate(&mut grads, p, part);
                        }
                        start += height;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SliceRows(x, start) => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows(x, rows) => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    for (grow, &r) in g.rows().into_iter().zip(rows) {
                        let mut target = dx.row_mut(r);
                        target += &grow;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::RowSums(x) => {
                    let (m, n) = self.shape(*x);
                    let dx = g
                        .broadcast((m, n))
                        .expect("row-sum gradient broadcast")
                        .to_owned();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::DivRows(x, sv) => {
                    let xv = self.value(*x);
                    let denom = self.value(*sv);
                    if self.is_tracked(*sv) {
                        let mut ds = Array2::zeros(denom.dim());
                        for (i, &d) in denom.iter().enumerate() {
                            if d != 0.0 {
                                let dot: f64 = g.row(i).dot(&xv.row(i));
                                ds[[i, 0]] = -dot / (d * d);
                            }
                        }
                        self.accumulate(&mut grads, *sv, ds);
                    }
                    if self.is_tracked(*x) {
                        let mut dx = g;
                        for (mut row, &d) in dx.rows_mut().into_iter().zip(denom.iter()) {
                            if d == 0.0 {
                                row.fill(0.0);
                            } else {
                                row.mapv_inplace(|v| v / d);
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MaxRows(x, winners) => {
                    let mut dx = Array2::zeros(self.shape(*x));
                    for (c, &r) in winners.iter().enumerate() {
                        dx[[r, c]] += g[[0, c]];
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Cosine(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (na, nb) = (norm(va), norm(vb));
                    if na >= COSINE_EPS && nb >= COSINE_EPS {
                        let c = y[[0, 0]];
                        let up = g[[0, 0]];
                        if self.is_tracked(*a) {
                            let da = (vb / (na * nb) - va * (c / (na * na))) * up;
                            self.accumulate(&mut grads, *a, da);
                        }
                        if self.is_tracked(*b) {
                            let db = (va / (na * nb) - vb * (c / (nb * nb))) * up;
                            self.accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::Transpose(x) => {
                    self.accumulate(&mut grads, *x, g.reversed_axes().as_standard_layout().to_owned());
                }
                Op::Reshape(x) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    let dx = Array2::from_shape_vec(self.shape(*x), data).expect("reshape gradient");
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients { grads }
    }

    /// Adds `lhs · rhs` into the gradient of `target` without a temporary.
    fn accumulate_product(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: Var,
        lhs: ArrayView2<f64>,
        rhs: ArrayView2<f64>,
    ) {
        if !self.is_tracked(target) {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| Array2::zeros((lhs.nrows(), rhs.ncols())));
        product_into(lhs, rhs, slot);
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], target: Var, contribution: Array2<f64>) {
        if !self.is_tracked(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            out[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |v: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(v.clone());
            let out = build(&mut t, xv);
            t.scalar(out)
        };
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone());
        let out = build(&mut tape, xv);
        let grads = tape.backward(out);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |t, x| {
            let a = t.sigmoid(x);
            let b = t.tanh(x);
            let c = t.mul(a, b);
            let d = t.exp(c);
            let e = t.affine(d, -2.0, 1.0);
            let f = t.sub(e, x);
            t.sum(f)
        });
        check(sample(), |t, x| {
            let r = t.relu(x);
            let sq = t.mul(r, r);
            t.sum(sq)
        });
    }

    #[test]
    fn row_ops() {
        let weights = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        check(sample(), |t, x| {
            let w = t.constant(weights.clone());
            let sm = t.softmax_rows(x);
            let cs = t.cumsum_rows(sm);
            let ls = t.log_softmax_rows(x);
            let m1 = t.mul(cs, w);
            let m2 = t.mul(ls, w);
            let s = t.add(m1, m2);
            t.sum(s)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(), |t, x| {
            let a = t.slice_cols(x, 1, 3);
            let b = t.row(x, 1);
            let bt = t.transpose(b);
            let p = t.matmul(a, a);
            let g = t.gather_rows(x, &[1, 1, 0]);
            let cc = t.concat_cols(&[g, g]);
            let cr = t.concat_rows(&[a, a]);
            let rs = t.row_sums(cr);
            let r = t.reshape(cc, 3, 6);
            let mx = t.max_rows(r, &[0, 2]);
            let q = t.matmul(x, bt);
            let s1 = t.sum(q);
            let s2 = t.sum(rs);
            let s3 = t.sum(mx);
            let s4 = t.sum(p);
            let s12 = t.add(s1, s2);
            let s34 = t.add(s3, s4);
            t.add(s12, s34)
        });
    }

    #[test]
    fn matmul_and_broadcast() {
        let w = array![[0.2, -0.4], [1.0, 0.5], [-0.3, 0.8]];
        check(sample(), |t, x| {
            let wv = t.constant(w.clone());
            let m = t.matmul(x, wv);
            let b = t.constant(array![[0.1, -0.2]]);
            let mb = t.add_row(m, b);
            let th = t.tanh(mb);
            t.sum(th)
        });
    }

    #[test]
    fn div_rows_and_cosine() {
        let other = array![[0.5, 0.1, -0.9]];
        check(sample(), |t, x| {
            let pos = t.exp(x);
            let sums = t.row_sums(pos);
            let normed = t.div_rows(x, sums);
            let r0 = t.row(normed, 0);
            let o = t.constant(other.clone());
            let c = t.cosine(r0, o);
            let r1 = t.row(x, 1);
            let c2 = t.cosine(r1, r0);
            t.add(c, c2)
        });
    }

    #[test]
    fn zero_divisor_rows_are_zero() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = t.constant(array![[2.0], [0.0]]);
        let y = t.div_rows(x, s);
        assert_eq!(t.value(y), &array![[0.5, 1.0], [0.0, 0.0]]);
        let total = t.sum(y);
        let g = t.backward(total);
        assert_eq!(g.get(x).unwrap(), &array![[0.5, 0.5], [0.0, 0.0]]);
    }

    #[test]
    fn cosine_guard() {
        let mut t = Tape::new();
        let a = t.variable(array![[0.0, 0.0]]);
        let b = t.variable(array![[1.0, 2.0]]);
        let c = t.cosine(a, b);
        assert_eq!(t.scalar(c), 0.0);
        let g = t.backward(c);
        assert!(g.get(a).is_none() && g.get(b).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.variable(array![[3.0, 4.0]]);
        let p = t.mul(a, b);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &array![[1.0, 2.0]]);
    }
}
