//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Values are computed eagerly when an operation is recorded, so callers can
//! inspect intermediate results (for example to rank candidates) while the
//! graph is being built. Only the operations the encoder and the losses need
//! are supported.

use nalgebra::DMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1 * row`, broadcasting a `1 x m` row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// `a * s` for a `1 x 1` value `s`.
    MulScalar(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    MeanRows(Var),
    /// Row `r` of `a` incremented by the `1 x m` value `v`.
    AddToRow(Var, usize, Var),
    StackRows(Vec<Var>),
    /// Frobenius inner product, `1 x 1`.
    Dot(Var, Var),
    Square(Var),
    Sum(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_row(&mut self, row: &[f64]) -> Var {
        self.leaf(DMatrix::from_row_slice(1, row.len(), row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b).transpose();
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast operand must be a row");
        let mut v = self.value(a).clone();
        for mut vr in v.row_iter_mut() {
            vr += r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let v = DMatrix::from_fn(rows.len(), t.ncols(), |i, j| t[(rows[i], j)]);
        self.push(v, Op::GatherRows(table, rows))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).rows(start, len).into_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.row_mean();
        let v = DMatrix::from_row_slice(1, m.ncols(), v.as_slice());
        self.push(v, Op::MeanRows(a))
    }

    pub fn add_to_row(&mut self, a: Var, r: usize, delta: Var) -> Var {
        let mut v = self.value(a).clone();
        let d = self.value(delta).clone();
        let mut target = v.row_mut(r);
        target += d;
        self.push(v, Op::AddToRow(a, r, delta))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.rows_mut(at, pv.nrows()).copy_from(pv);
            at += pv.nrows();
        }
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(DMatrix::from_element(1, 1, v), Op::Dot(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Mean of equally shaped values.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let s = self.sum(parts);
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// `w * a + (1 - w) * b` for a constant weight.
    pub fn lerp(&mut self, a: Var, b: Var, w: f64) -> Var {
        let sa = self.scale(a, w);
        let sb = self.scale(b, 1.0 - w);
        self.add(sa, sb)
    }

    /// Reverse sweep from `output`, which must be `1 x 1`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar"
        );
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = g.transpose() * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.row_sum();
                    acc(
                        &mut grads,
                        *row,
                        DMatrix::from_row_slice(1, gr.len(), gr.as_slice()),
                    );
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::MulScalar(a, s) => {
                    let gs = g.dot(self.value(*a));
                    acc(&mut grads, *s, DMatrix::from_element(1, 1, gs));
                    acc(&mut grads, *a, &g * self.scalar(*s));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.component_mul(y);
                    for r in 0..y.nrows() {
                        let inner = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            ga[(r, c)] -= y[(r, c)] * inner;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, rows) => {
                    let t = self.value(*table);
                    let mut gt = DMatrix::zeros(t.nrows(), t.ncols());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceRows(a, start, len) => {
                    let av = self.value(*a);
                    let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                    ga.rows_mut(*start, *len).copy_from(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.nrows() as f64;
                    let ga = DMatrix::from_fn(av.nrows(), av.ncols(), |_, c| g[(0, c)] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::AddToRow(a, r, delta) => {
                    let gd = g.rows(*r, 1).into_owned();
                    acc(&mut grads, *delta, gd);
                    acc(&mut grads, *a, g.clone());
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        acc(&mut grads, p, g.rows(at, rows).into_owned());
                        at += rows;
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[(0, 0)];
                    acc(&mut grads, *a, self.value(*b) * s);
                    acc(&mut grads, *b, self.value(*a) * s);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| 2.0 * x * gi);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Builds a scalar touching every op from three leaves.
    fn program(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
        let h = t.matmul(x, w);
        let h = t.add_row(h, b);
        let h = t.tanh(h);
        let att = t.matmul_t(h, x);
        let att = t.softmax_rows(att);
        let mixed = t.matmul(att, x);
        let g = t.gather_rows(w, vec![0, 2, 2]);
        let top = t.slice_rows(mixed, 0, 3);
        let both = t.add(top, g);
        let m = t.mean_rows(both);
        let gate = t.slice_rows(b, 0, 1);
        let gate = t.matmul_t(gate, gate);
        let ms = t.mul_scalar(m, gate);
        let r = t.add_to_row(both, 1, ms);
        let stacked = t.stack_rows(&[r, ms]);
        let sq = t.square(stacked);
        let first = t.row(sq, 0);
        let d = t.dot(first, ms);
        let e = t.scale(d, -0.7);
        let l = t.lerp(d, e, 0.3);
        t.sum(&[l, d])
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random(4, 3, &mut rng);
        let w0 = random(3, 3, &mut rng);
        let b0 = random(1, 3, &mut rng);
        let eval = |x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let out = program(&mut t, xv, wv, bv);
            (t.scalar(out), t, [xv, wv, bv], out)
        };
        let (_, tape, vars, out) = eval(&x0, &w0, &b0);
        let grads = tape.backward(out);
        let inputs = [x0.clone(), w0.clone(), b0.clone()];
        let h = 1e-6;
        for which in 0..3 {
            let analytic = grads.get(vars[which]).unwrap();
            for i in 0..inputs[which].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[which][i] += h;
                minus[which][i] -= h;
                let fp = eval(&plus[0], &plus[1], &plus[2]).0;
                let fm = eval(&minus[0], &minus[1], &minus[2]).0;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                    "input {which}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let a = t.leaf(random(5, 7, &mut rng) * 30.0);
        let s = t.softmax_rows(a);
        for r in t.value(s).row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(DMatrix::from_element(1, 2, 1.0));
        let unused = t.leaf(DMatrix::from_element(1, 2, 1.0));
        let d = t.dot(a, a);
        let g = t.backward(d);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(a).unwrap(), &DMatrix::from_element(1, 2, 2.0));
    }
}
