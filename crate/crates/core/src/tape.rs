//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 x n` rows. A [`Graph`] records
//! operations as they execute and [`Graph::backward`] walks the record in
//! reverse to accumulate gradients for every [`ParamStore`] entry that was
//! pulled into the graph.

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    LogSoftmax(Var, Option<Array2<bool>>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.grads.get_mut(id.index()).and_then(|g| g.as_mut())
    }

    /// Iterates over parameters that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A constant that never receives a gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Pulls a parameter into the graph. Repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.param_nodes.len() <= i {
            self.param_nodes.resize(i + 1, None);
        }
        if let Some(v) = self.param_nodes[i] {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.param_nodes[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x m row");
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a (n x m) * row (1 x m)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1 x m row");
        let v = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    /// `a (n x m) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an n x 1 column");
        let v = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.needs(a);
        self.push(v, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of every entry, as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `n x m -> n x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(v, Op::RowSums(a), ng)
    }

    /// `n x m -> 1 x m`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(v, Op::ColSums(a), ng)
    }

    pub fn col_means(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.col_sums(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.gather_rows(a, (start..end).collect())
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let ng = self.needs(a);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Row-wise log-softmax. Entries where `mask` is false are excluded from
    /// the normaliser and come out as 0 with zero gradient.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Array2<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "log_softmax mask shape");
        }
        let mut out = Array2::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep(*j))
                    .map(|(_, &v)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    out[[i, j]] = v - lse;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a, mask), ng)
    }

    // Composite helpers.

    /// `x W + b` with `b` a `1 x m` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let ss = self.row_sums(sq);
        let norm = self.sqrt(ss);
        let inv = self.recip(norm);
        self.mul_col(a, inv)
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let an = self.l2_normalize_rows(a);
        let bn = if a == b {
            an
        } else {
            self.l2_normalize_rows(b)
        };
        let bt = self.transpose(bn);
        self.matmul(an, bt)
    }

    /// Runs reverse accumulation from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let k = id.index();
                    if out.grads.len() <= k {
                        out.grads.resize(k + 1, None);
                    }
                    out.grads[k] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *r, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, r) => {
                    if self.needs(*r) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *r, gr);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*r));
                    }
                }
                Op::MulCol(a, c) => {
                    if self.needs(*c) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *c, gc);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*c));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, g / self.value(*a)),
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 0.5 / y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= -y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => accumulate(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColSums(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.needs(p) {
                            accumulate(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::LogSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let keep = |j: usize| mask.as_ref().is_none_or(|m| m[[i, j]]);
                        let gsum: f64 = (0..y.ncols()).filter(|&j| keep(j)).map(|j| g[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            if keep(j) {
                                ga[[i, j]] = g[[i, j]] - y[[i, j]].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x)))/dx for a single parameter.
    fn check(
        init: Array2<f64>,
        build: impl Fn(&mut Graph, Var) -> Var,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("x", init.clone(), true);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = build(&mut g, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let analytic = grads.get(id).unwrap().clone();

        let eps = 1e-6;
        for idx in 0..init.len() {
            let (r, c) = (idx / init.ncols(), idx % init.ncols());
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id)[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.param(&s, id);
                let y = build(&mut g, x);
                let l = g.sum_all(y);
                g.scalar(l)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                "entry ({r},{c}): analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_ops() {
        let x = array![[0.3, -0.7, 1.1], [0.2, 0.5, -1.4]];
        check(x.clone(), |g, x| g.tanh(x));
        check(x.clone(), |g, x| g.sigmoid(x));
        check(x.clone(), |g, x| g.exp(x));
        check(x.clone(), |g, x| g.softplus(x));
        check(x.clone(), |g, x| g.square(x));
        check(x.mapv(f64::abs), |g, x| g.ln(x));
        check(x.mapv(f64::abs), |g, x| g.sqrt(x));
        check(x.mapv(f64::abs), |g, x| g.recip(x));
    }

    #[test]
    fn structural_ops() {
        let x = array![[0.3, -0.7, 1.1], [0.2, 0.5, -1.4]];
        check(x.clone(), |g, x| {
            let t = g.transpose(x);
            let p = g.matmul(x, t);
            g.tanh(p)
        });
        check(x.clone(), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.slice_cols(x, 0, 2);
            let c = g.mul(a, b);
            g.concat_cols(&[c, x])
        });
        check(x.clone(), |g, x| {
            let r = g.gather_rows(x, vec![1, 1, 0]);
            let sq = g.square(r);
            g.concat_rows(&[sq, x])
        });
        check(x.clone(), |g, x| {
            let rs = g.row_sums(x);
            let cs = g.col_sums(x);
            let a = g.mul_col(x, rs);
            let b = g.mul_row(a, cs);
            let c = g.add_row(b, cs);
            g.scale(c, 0.5)
        });
        check(x.clone(), |g, x| {
            let c = g.cosine_matrix(x, x);
            g.exp(c)
        });
    }

    #[test]
    fn log_softmax_gradient_and_mask() {
        let x = array![[0.3, -0.7, 1.1], [0.2, 0.5, -1.4]];
        let w = array![[1.0, 2.0, -0.5], [0.3, -1.0, 2.0]];
        check(x.clone(), |g, x| {
            let l = g.log_softmax(x, None);
            let w = g.input(w.clone());
            g.mul(l, w)
        });
        let mask = array![[true, false, true], [true, true, true]];
        check(x.clone(), |g, x| {
            let l = g.log_softmax(x, Some(mask.clone()));
            let w = g.input(w.clone());
            g.mul(l, w)
        });
        let mut g = Graph::new();
        let v = g.input(x);
        let l = g.log_softmax(v, Some(mask));
        let row0: f64 = [0usize, 2].iter().map(|&j| g.value(l)[[0, j]].exp()).sum();
        assert!((row0 - 1.0).abs() < 1e-12);
        assert_eq!(g.value(l)[[0, 1]], 0.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0]], true);
        let b = store.add("b", array![[3.0], [4.0]], false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let y = g.matmul(va, vb);
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap(), &array![[3.0, 4.0]]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-3, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * (1.0 + y));
        }
    }
}
