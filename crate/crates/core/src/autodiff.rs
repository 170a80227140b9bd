//! Reverse-mode differentiation over dense matrices.
//!
//! Values are computed eagerly as nodes are appended; [`Tape::backward`]
//! walks the tape once in reverse from a scalar (1×1) node.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the result of [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a 1×n row to every row.
    AddRow(Var, Var),
    /// Multiplies every row elementwise by a 1×n row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    /// Zero-mean, unit-variance rows; stores `1/σ` per row.
    LayerNormRows(Var, Vec<f64>),
    /// Row-major flatten into a single row.
    Flatten(Var),
    GatherRows(Var, Vec<usize>),
    /// Mean absolute difference against a constant.
    L1Mean(Var, Mat),
    /// Mean squared difference against a constant.
    MseMean(Var, Mat),
    GroupedMse(Var, GroupedResidual),
}

/// Sufficient statistics of a residual `r_i = d_i + u[g(i)]` over rows `i`,
/// where `d` is constant and `g` assigns rows to groups (or to none).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedResidual {
    /// Per-group sum of `d_i`, one row per group.
    pub sums: Mat,
    /// Rows in each group.
    pub counts: Vec<f64>,
    /// `Σ |d_i|²` over all rows.
    pub sq: f64,
    /// Number of scalar entries the mean is taken over.
    pub len: usize,
}

impl GroupedResidual {
    pub fn new(d: &Mat, groups: &[Option<usize>], n_groups: usize) -> Self {
        assert_eq!(d.nrows(), groups.len());
        let mut sums = Mat::zeros(n_groups, d.ncols());
        let mut counts = vec![0.0; n_groups];
        for (i, g) in groups.iter().enumerate() {
            if let Some(g) = *g {
                let mut row = sums.row_mut(g);
                row += d.row(i);
                counts[g] += 1.0;
            }
        }
        GroupedResidual { sums, counts, sq: d.norm_squared(), len: d.len() }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
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
        assert_eq!(r.nrows(), 1);
        let mut v = self.value(a).clone();
        for mut rr in v.row_iter_mut() {
            rr += r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let mut v = self.value(a).clone();
        for mut rr in v.row_iter_mut() {
            rr.component_mul_assign(r);
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.row_iter_mut() {
            let m = row.max();
            row.apply(|x| *x = (*x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let n = v.ncols() as f64;
        let mut inv = Vec::with_capacity(v.nrows());
        for mut row in v.row_iter_mut() {
            let mu = row.sum() / n;
            row.add_scalar_mut(-mu);
            let var = row.norm_squared() / n;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv.push(is);
        }
        self.push(v, Op::LayerNormRows(a, inv))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_row_iterator(1, m.len(), m.transpose().iter().copied());
        self.push(v, Op::Flatten(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        let v = Mat::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)]);
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn l1_mean(&mut self, a: Var, target: Mat) -> Var {
        let m = self.value(a);
        assert_eq!(m.shape(), target.shape());
        let s = (m - &target).abs().sum() / m.len() as f64;
        self.push(Mat::from_element(1, 1, s), Op::L1Mean(a, target))
    }

    pub fn mse_mean(&mut self, a: Var, target: Mat) -> Var {
        let m = self.value(a);
        assert_eq!(m.shape(), target.shape());
        let s = (m - &target).norm_squared() / m.len() as f64;
        self.push(Mat::from_element(1, 1, s), Op::MseMean(a, target))
    }

    /// `mean_i |d_i + u[g(i)]|²`, evaluated from the group statistics.
    pub fn grouped_mse(&mut self, u: Var, stats: GroupedResidual) -> Var {
        let m = self.value(u);
        assert_eq!(m.shape(), stats.sums.shape());
        let mut s = stats.sq;
        for g in 0..m.nrows() {
            s += 2.0 * m.row(g).dot(&stats.sums.row(g)) + stats.counts[g] * m.row(g).norm_squared();
        }
        self.push(Mat::from_element(1, 1, s / stats.len as f64), Op::GroupedMse(u, stats))
    }

    /// Hash of the discrete state: ReLU masks and L1 residual signs.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).iter().for_each(|x| (*x > 0.0).hash(&mut h)),
                Op::L1Mean(a, t) => {
                    self.value(*a).iter().zip(t.iter()).for_each(|(x, y)| (x.partial_cmp(y)).hash(&mut h))
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `out` w.r.t. every node; `None` where no
    /// path reaches.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));
        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => *x += g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b).transpose());
                    acc(&mut grads, *b, self.value(*a).transpose() * &g);
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, g.transpose() * self.value(*a));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, Mat::from_fn(1, g.ncols(), |_, c| g.column(c).sum()));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let gr = Mat::from_fn(1, g.ncols(), |_, c| g.column(c).dot(&av.column(c)));
                    let mut ga = g.clone();
                    for mut row in ga.row_iter_mut() {
                        row.component_mul_assign(rv);
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gg, x| if x > 0.0 { gg } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.component_mul(y);
                    for r in 0..y.nrows() {
                        let s = ga.row(r).sum();
                        for c in 0..y.ncols() {
                            ga[(r, c)] -= y[(r, c)] * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = g.clone();
                    for r in 0..y.nrows() {
                        let mg = g.row(r).sum() / n;
                        let mgy = g.row(r).dot(&y.row(r)) / n;
                        for c in 0..y.ncols() {
                            ga[(r, c)] = inv[r] * (g[(r, c)] - mg - y[(r, c)] * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Flatten(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::from_fn(rows, cols, |r, c| g[(0, r * cols + c)]));
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.value(*a).nrows(), g.ncols());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L1Mean(a, t) => {
                    let k = g[(0, 0)] / t.len() as f64;
                    let ga = self.value(*a).zip_map(t, |x, y| if x > y { k } else if x < y { -k } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::GroupedMse(u, st) => {
                    let k = 2.0 * g[(0, 0)] / st.len as f64;
                    let mut gu = self.value(*u).clone();
                    for (r, mut row) in gu.row_iter_mut().enumerate() {
                        row *= st.counts[r];
                        row += st.sums.row(r);
                        row *= k;
                    }
                    acc(&mut grads, *u, gu);
                }
                Op::MseMean(a, t) => {
                    let k = 2.0 * g[(0, 0)] / t.len() as f64;
                    acc(&mut grads, *a, (self.value(*a) - t) * k);
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Builds a graph touching every op and checks each leaf gradient by
    /// central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves: Vec<Mat> =
            vec![random(3, 4, &mut rng), random(4, 4, &mut rng), random(1, 4, &mut rng), random(5, 4, &mut rng)];
        let l1_target = random(1, 12, &mut rng);
        let mse_target = random(6, 4, &mut rng);
        let build = |ls: &[Mat]| {
            let mut t = Tape::new();
            let v: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone())).collect();
            let x = t.matmul(v[0], v[1]);
            let x = t.add_row(x, v[2]);
            let n = t.layer_norm_rows(x, 1e-5);
            let m = t.mul_row(n, v[2]);
            let s = t.matmul_t(m, v[3]);
            let s = t.scale(s, 0.5);
            let a = t.softmax_rows(s);
            let h = t.matmul(a, v[3]);
            let h = t.add(h, x);
            let r = t.relu(h);
            let p = t.gather_rows(r, vec![0, 2, 2, 1, 0, 1]);
            let l2 = t.mse_mean(p, mse_target.clone());
            let f = t.flatten(h);
            let l1 = t.l1_mean(f, l1_target.clone());
            let d = Mat::from_fn(7, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
            let groups = [Some(1), None, Some(0), Some(2), Some(1), Some(4), Some(1)];
            let x5 = t.gather_rows(x, vec![0, 1, 2, 0, 1]);
            let gm = t.grouped_mse(x5, GroupedResidual::new(&d, &groups, 5));
            let out = t.add(l1, l2);
            let out = t.add(out, gm);
            (t, v, out)
        };
        let (tape, vars, out) = build(&leaves);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads[vars[li].0].as_ref().unwrap();
            for k in 0..leaf.len() {
                let mut ls = leaves.clone();
                ls[li][k] += eps;
                let (tp, _, op) = build(&ls);
                ls[li][k] -= 2.0 * eps;
                let (tm, _, om) = build(&ls);
                if tp.signature() != tape.signature() || tm.signature() != tape.signature() {
                    continue;
                }
                let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * eps);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "leaf {li} entry {k}: fd {fd} analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn grouped_mse_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random(9, 3, &mut rng);
        let u = random(3, 3, &mut rng);
        let groups = [Some(0), Some(0), None, Some(1), Some(2), Some(2), None, Some(1), Some(0)];
        let mut t = Tape::new();
        let uv = t.leaf(u.clone());
        let l = t.grouped_mse(uv, GroupedResidual::new(&d, &groups, 3));
        let mut direct = 0.0;
        for (i, g) in groups.iter().enumerate() {
            for c in 0..3 {
                let r = d[(i, c)] + g.map_or(0.0, |g| u[(g, c)]);
                direct += r * r;
            }
        }
        assert!((t.scalar(l) - direct / 27.0).abs() < 1e-12);
    }

    #[test]
    fn flatten_is_row_major() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let f = t.flatten(a);
        assert_eq!(t.value(f).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
