//! A small reverse-mode automatic differentiation graph over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. Calling
//! [`Graph::backward`] walks the nodes in reverse and accumulates adjoints.
//! Nodes that do not depend on a parameter are never differentiated.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(n × m) + (1 × m)` broadcast over rows.
    AddRow(Var, Var),
    /// `(n × m) * (n × 1)` broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    live: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed like the
/// parameter store the graph was bound to.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(index).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    fn push(&mut self, value: Tensor, op: Op, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].live)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let live = self.live(&[a, b]);
        self.push(value, Op::MatMul(a, b), live)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let live = self.live(&[a, b]);
        self.push(value, Op::Add(a, b), live)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let live = self.live(&[a, b]);
        self.push(value, Op::Sub(a, b), live)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let live = self.live(&[a, b]);
        self.push(value, Op::Mul(a, b), live)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a 1 x m row");
        assert_eq!(av.cols(), rv.cols(), "add_row column mismatch");
        let mut value = av.clone();
        let cols = av.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += rv.data()[i % cols];
        }
        let live = self.live(&[a, row]);
        self.push(value, Op::AddRow(a, row), live)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects an n x 1 column");
        assert_eq!(av.rows(), cv.rows(), "mul_col row mismatch");
        let mut value = av.clone();
        let cols = av.cols();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x *= cv.data()[i / cols];
        }
        let live = self.live(&[a, col]);
        self.push(value, Op::MulCol(a, col), live)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let live = self.live(&[a]);
        self.push(value, Op::Scale(a, k), live)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let live = self.live(&[a]);
        self.push(value, Op::AddScalar(a), live)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let live = self.live(&[a]);
        self.push(value, Op::Tanh(a), live)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let live = self.live(&[a]);
        self.push(value, Op::Sigmoid(a), live)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let live = self.live(&[a]);
        self.push(value, Op::Exp(a), live)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let live = self.live(&[a]);
        self.push(value, Op::Ln(a), live)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let live = self.live(&[a]);
        self.push(value, Op::Square(a), live)
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let live = self.live(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), live)
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let live = self.live(&[a]);
        self.push(value, Op::Sum(a), live)
    }

    /// Per-row sums, as an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let live = self.live(&[a]);
        self.push(value, Op::SumCols(a), live)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(av.rows(), len, data);
        let live = self.live(&[a]);
        self.push(value, Op::SliceCols(a, start), live)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data);
        let live = self.live(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), live)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::from_vec(rows, cols, data);
        let live = self.live(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), live)
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(index.len() * av.cols());
        for &i in &index {
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_vec(index.len(), av.cols(), data);
        let live = self.live(&[a]);
        self.push(value, Op::GatherRows(a, index), live)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows() {
            let row = av.row(r);
            let lse = log_sum_exp(row);
            for c in 0..av.cols() {
                value.set(r, c, (row[c] - lse).exp());
            }
        }
        let live = self.live(&[a]);
        self.push(value, Op::SoftmaxRows(a), live)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows() {
            let row = av.row(r);
            let lse = log_sum_exp(row);
            for c in 0..av.cols() {
                value.set(r, c, row[c] - lse);
            }
        }
        let live = self.live(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), live)
    }

    /// Row-wise log-sum-exp, as an `n × 1` column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| log_sum_exp(av.row(r))).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let live = self.live(&[a]);
        self.push(value, Op::LogSumExpRows(a), live)
    }

    /// Reverse pass from a scalar output. Returns one gradient slot per
    /// parameter index in `0..n_params`; parameters the output does not
    /// depend on get `None`.
    pub fn backward(&self, output: Var, n_params: usize) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
        adj[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.live {
                continue;
            }
            let val = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(idx) => accumulate(&mut grads[*idx], g),
                Op::MatMul(a, b) => {
                    if self.is_live(*a) {
                        let ga = g.matmul_nt(self.value(*b));
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.is_live(*b) {
                        let gb = self.value(*a).matmul_tn(&g);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *b, g.clone());
                    self.acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *b, g.scale(-1.0));
                    self.acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.is_live(*a) {
                        let ga = g.zip_map(self.value(*b), |x, y| x * y);
                        self.acc(&mut adj, *a, ga);
                    }
                    if self.is_live(*b) {
                        let gb = g.zip_map(self.value(*a), |x, y| x * y);
                        self.acc(&mut adj, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.is_live(*row) {
                        let cols = g.cols();
                        let mut gr = vec![0.0; cols];
                        for (k, x) in g.data().iter().enumerate() {
                            gr[k % cols] += x;
                        }
                        self.acc(&mut adj, *row, Tensor::row_vector(gr));
                    }
                    self.acc(&mut adj, *a, g);
                }
                Op::MulCol(a, col) => {
                    let cols = g.cols();
                    if self.is_live(*col) {
                        let av = self.value(*a);
                        let mut gc = vec![0.0; g.rows()];
                        for (k, (x, y)) in g.data().iter().zip(av.data()).enumerate() {
                            gc[k / cols] += x * y;
                        }
                        self.acc(&mut adj, *col, Tensor::from_vec(g.rows(), 1, gc));
                    }
                    if self.is_live(*a) {
                        let cv = self.value(*col);
                        let mut ga = g;
                        for (k, x) in ga.data_mut().iter_mut().enumerate() {
                            *x *= cv.data()[k / cols];
                        }
                        self.acc(&mut adj, *a, ga);
                    }
                }
                Op::Scale(a, k) => self.acc(&mut adj, *a, g.scale(*k)),
                Op::AddScalar(a) => self.acc(&mut adj, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(val, |x, y| x * (1.0 - y * y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(val, |x, y| x * y * (1.0 - y));
                    self.acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(val, |x, y| x * y);
                    self.acc(&mut adj, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x / y);
                    self.acc(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    self.acc(&mut adj, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(*a), |x, y| {
                        if y < *lo || y > *hi {
                            0.0
                        } else {
                            x
                        }
                    });
                    self.acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut adj, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (k, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = g.data()[k / c];
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (j, &x) in g.row(row).iter().enumerate() {
                            ga.set(row, start + j, x);
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        if self.is_live(p) {
                            let mut gp = Vec::with_capacity(r * c);
                            for row in 0..r {
                                gp.extend_from_slice(&g.row(row)[offset..offset + c]);
                            }
                            self.acc(&mut adj, p, Tensor::from_vec(r, c, gp));
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.is_live(p) {
                            let gp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                            self.acc(&mut adj, p, Tensor::from_vec(r, cols, gp));
                        }
                        offset += r;
                    }
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (k, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            let cur = ga.get(src, j);
                            ga.set(src, j, cur + g.get(k, j));
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(val.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..g.cols() {
                            ga.set(r, c, val.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) - val.get(r, c).exp() * total);
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let mut ga = av.clone();
                    for r in 0..av.rows() {
                        let lse = val.get(r, 0);
                        for c in 0..av.cols() {
                            ga.set(r, c, g.get(r, 0) * (av.get(r, c) - lse).exp());
                        }
                    }
                    self.acc(&mut adj, *a, ga);
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].live {
            accumulate(&mut adj[v.0], g);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let p = g.param(0, t.clone());
            let out = build(&mut g, p);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let p = g.param(0, x.clone());
        let out = build(&mut g, p);
        let analytic = g.backward(out, 1).grads[0].clone().unwrap();
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn sample() -> Tensor {
        Tensor::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())
    }

    #[test]
    fn elementwise_gradients() {
        check(sample(), |g, p| {
            let a = g.tanh(p);
            let b = g.sigmoid(p);
            let c = g.mul(a, b);
            let d = g.exp(c);
            let e = g.square(d);
            let f = g.add_scalar(e, 1.5);
            let l = g.ln(f);
            let s = g.scale(l, 0.3);
            g.sum(s)
        });
    }

    #[test]
    fn structural_gradients() {
        let w = Tensor::from_vec(4, 2, vec![0.1, -0.2, 0.3, 0.5, -0.7, 0.2, 0.05, 0.9]);
        check(sample(), move |g, p| {
            let wv = g.constant(w.clone());
            let m = g.matmul(p, wv);
            let row = g.slice_cols(p, 1, 2);
            let row0 = g.gather_rows(row, vec![0]);
            let m2 = g.add_row(m, row0);
            let col = g.slice_cols(p, 3, 1);
            let m3 = g.mul_col(m2, col);
            let cat = g.concat_cols(&[m3, p]);
            let stacked = g.concat_rows(&[cat, cat]);
            let picked = g.gather_rows(stacked, vec![0, 4, 4, 2]);
            let sm = g.softmax_rows(picked);
            let ls = g.log_softmax_rows(picked);
            let lse = g.log_sum_exp_rows(picked);
            let rows = g.sum_cols(sm);
            let x = g.mul(sm, ls);
            let a = g.sum(x);
            let b = g.sum(lse);
            let c = g.sum(rows);
            let ab = g.add(a, b);
            g.sub(ab, c)
        });
    }

    #[test]
    fn matmul_gradients_both_sides() {
        check(sample(), |g, p| {
            let t = g.slice_cols(p, 0, 3);
            let m = g.matmul(t, p);
            let n = g.clamp(m, -2.0, 2.0);
            g.sum(n)
        });
    }

    #[test]
    fn dead_branches_get_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let out = g.mul(c, c);
        assert!(!g.is_live(out));
        let out = g.add(out, p);
        let grads = g.backward(out, 2);
        assert_eq!(grads.grads[0].as_ref().unwrap().item(), 1.0);
        assert!(grads.grads[1].is_none());
    }
}
