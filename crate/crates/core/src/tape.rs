//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every trainer in the crate builds its loss on a fresh [`Tape`], calls
//! [`Tape::backward`], and hands the parameter gradients to an optimiser.
//! Values are row-major `Array2<f64>`; scalars are `1×1` matrices.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One term of a sparse row aggregation: `scale · mask[mask_idx] · input[src]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggTerm {
    pub src: usize,
    pub mask: Option<usize>,
    pub scale: f64,
}

impl AggTerm {
    pub fn plain(src: usize, scale: f64) -> Self {
        AggTerm { src, mask: None, scale }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    ClampMin(Var, f64),
    Gather(Var, Vec<usize>),
    Aggregate {
        input: Var,
        mask: Option<Var>,
        rows: Vec<Vec<AggTerm>>,
    },
    Concat(Var, Var),
    RowNormalize(Var),
    RowDots(Var, Var, Vec<(usize, usize)>),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SumSquares(Var),
    PairwiseCosSq(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// ln(1e-12): floor applied to log-probabilities before they enter a loss.
pub const LOG_EPS: f64 = -27.631_021_115_928_547;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient with respect to `v`; zeros if `v` did not influence the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Mat {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Mat::zeros(tape.value(v).raw_dim()))
    }
}

fn stable_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

/// `log σ(x)` with σ clamped into `[1e-12, 1 − 1e-12]`.
pub fn clamped_log_sigmoid(x: f64) -> f64 {
    stable_log_sigmoid(x).clamp(LOG_EPS, (-1e-12f64).ln_1p())
}

fn clamped_log_sigmoid_active(x: f64) -> bool {
    let l = stable_log_sigmoid(x);
    l > LOG_EPS && l < (-1e-12f64).ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    /// A trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + b` with `b` a `1×c` row broadcast over `a`'s rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row bias must be a row");
        assert_eq!(self.value(a).ncols(), self.value(b).ncols(), "add_row width");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// `log σ(x)` with the 1e-12 probability clamp.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(clamped_log_sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::LogSigmoid(a), rg)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo));
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, lo), rg)
    }

    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((rows.len(), src.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            v.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::Gather(a, rows), rg)
    }

    /// Sparse weighted row sums; `mask`, when given, is an `E×1` column whose
    /// entries gate the terms that reference them.
    pub fn aggregate(&mut self, input: Var, mask: Option<Var>, rows: Vec<Vec<AggTerm>>) -> Var {
        let src = self.value(input);
        let m = mask.map(|m| self.value(m));
        let mut v = Mat::zeros((rows.len(), src.ncols()));
        for (r, terms) in rows.iter().enumerate() {
            let mut out = v.row_mut(r);
            for t in terms {
                let gate = match (t.mask, m) {
                    (Some(k), Some(m)) => m[[k, 0]],
                    (Some(_), None) => panic!("masked term without a mask"),
                    _ => 1.0,
                };
                out.scaled_add(t.scale * gate, &src.row(t.src));
            }
        }
        let rg = self.rg(input) || mask.is_some_and(|m| self.rg(m));
        self.push(v, Op::Aggregate { input, mask, rows }, rg)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat rows");
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Concat(a, b), rg)
    }

    /// Each row scaled to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::RowNormalize(a), rg)
    }

    /// `P×1` column of `a[i]·b[j]` for each `(i, j)` pair.
    pub fn row_dots(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let v = Mat::from_shape_fn((pairs.len(), 1), |(p, _)| {
            let (i, j) = pairs[p];
            va.row(i).dot(&vb.row(j))
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::RowDots(a, b, pairs), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    /// `R×1` column holding `a[r, cols[r]]`.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), cols.len(), "pick rows");
        let v = Mat::from_shape_fn((cols.len(), 1), |(r, _)| va[[r, cols[r]]]);
        let rg = self.rg(a);
        self.push(v, Op::Pick(a, cols), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1) as f64;
        let v = Mat::from_elem((1, 1), va.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).mapv(|x| x * x).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumSquares(a), rg)
    }

    /// `Σ_{a<b} cos²(col_a, col_b)` over the columns of `a`.
    pub fn pairwise_cos_sq(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), pairwise_cos_sq_value(self.value(a)));
        let rg = self.rg(a);
        self.push(v, Op::PairwiseCosSq(a), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * val(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        *d *= if clamped_log_sigmoid_active(x) {
                            1.0 - sigmoid(x)
                        } else {
                            0.0
                        };
                    });
                    acc(&mut grads, *a, d);
                }
                Op::ClampMin(a, lo) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= *lo {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Gather(a, rows) => {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    for (r, &i) in rows.iter().enumerate() {
                        let mut target = d.row_mut(i);
                        target += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Aggregate { input, mask, rows } => {
                    let src = val(*input);
                    let m = mask.map(&val);
                    let mut d_in = self.rg(*input).then(|| Mat::zeros(src.raw_dim()));
                    let mut d_mask = mask.filter(|m| self.rg(*m)).map(|m| Mat::zeros(val(m).raw_dim()));
                    for (r, terms) in rows.iter().enumerate() {
                        let gr = g.row(r);
                        for t in terms {
                            let gate = match (t.mask, m) {
                                (Some(k), Some(m)) => m[[k, 0]],
                                _ => 1.0,
                            };
                            if let Some(d) = d_in.as_mut() {
                                d.row_mut(t.src).scaled_add(t.scale * gate, &gr);
                            }
                            if let (Some(dm), Some(k)) = (d_mask.as_mut(), t.mask) {
                                dm[[k, 0]] += t.scale * gr.dot(&src.row(t.src));
                            }
                        }
                    }
                    if let Some(d) = d_in {
                        acc(&mut grads, *input, d);
                    }
                    if let (Some(dm), Some(m)) = (d_mask, *mask) {
                        acc(&mut grads, m, dm);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = val(*a).ncols();
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                    }
                }
                Op::RowNormalize(a) => {
                    let x = val(*a);
                    let mut d = Mat::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let n = x.row(r).dot(&x.row(r)).sqrt();
                        if n > 0.0 {
                            let y = node.value.row(r);
                            let proj = y.dot(&g.row(r));
                            let mut dr = d.row_mut(r);
                            dr.assign(&g.row(r));
                            dr.scaled_add(-proj, &y);
                            dr /= n;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowDots(a, b, pairs) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut da = self.rg(*a).then(|| Mat::zeros(va.raw_dim()));
                    let mut db = self.rg(*b).then(|| Mat::zeros(vb.raw_dim()));
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let gp = g[[p, 0]];
                        if let Some(da) = da.as_mut() {
                            da.row_mut(i).scaled_add(gp, &vb.row(j));
                        }
                        if let Some(db) = db.as_mut() {
                            db.row_mut(j).scaled_add(gp, &va.row(i));
                        }
                    }
                    if let Some(da) = da {
                        acc(&mut grads, *a, da);
                    }
                    if let Some(db) = db {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for (mut dr, (gr, yr)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(node.value.rows()))
                    {
                        let total = gr.sum();
                        ndarray::Zip::from(&mut dr)
                            .and(&yr)
                            .for_each(|d, &y| *d -= y.exp() * total);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Pick(a, cols) => {
                    let mut d = Mat::zeros(val(*a).raw_dim());
                    for (r, &c) in cols.iter().enumerate() {
                        d[[r, c]] += g[[r, 0]];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(val(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    let d = Mat::from_elem(val(*a).raw_dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SumSquares(a) => acc(&mut grads, *a, val(*a) * (2.0 * g[[0, 0]])),
                Op::PairwiseCosSq(a) => {
                    let d = pairwise_cos_sq_grad(val(*a)) * g[[0, 0]];
                    acc(&mut grads, *a, d);
                }
            }
        }
        Grads { grads }
    }
}

fn pairwise_cos_sq_value(c: &Mat) -> f64 {
    let k = c.ncols();
    let norms: Vec<f64> = (0..k).map(|a| c.column(a).dot(&c.column(a))).collect();
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            if norms[a] > 0.0 && norms[b] > 0.0 {
                let g = c.column(a).dot(&c.column(b));
                total += g * g / (norms[a] * norms[b]);
            }
        }
    }
    total
}

fn pairwise_cos_sq_grad(c: &Mat) -> Mat {
    let k = c.ncols();
    let norms: Vec<f64> = (0..k).map(|a| c.column(a).dot(&c.column(a))).collect();
    let mut d = Mat::zeros(c.raw_dim());
    for a in 0..k {
        for b in a + 1..k {
            let (na, nb) = (norms[a], norms[b]);
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let g = c.column(a).dot(&c.column(b));
            let ca = c.column(a).to_owned();
            let cb = c.column(b).to_owned();
            let mut da = &cb * (2.0 * g / (na * nb));
            da.scaled_add(-2.0 * g * g / (na * na * nb), &ca);
            let mut db = &ca * (2.0 * g / (na * nb));
            db.scaled_add(-2.0 * g * g / (na * nb * nb), &cb);
            let mut col = d.column_mut(a);
            col += &da;
            let mut col = d.column_mut(b);
            col += &db;
        }
    }
    d
}

/// Central finite-difference gradient of `f` with respect to every entry of
/// every matrix in `params`.
pub fn finite_difference<F>(f: F, params: &[Mat], eps: f64) -> Vec<Mat>
where
    F: Fn(&[Mat]) -> f64,
{
    let mut work: Vec<Mat> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Mat::zeros(params[p].raw_dim());
        let shape = params[p].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = work[p][[r, c]];
                work[p][[r, c]] = orig + eps;
                let up = f(&work);
                work[p][[r, c]] = orig - eps;
                let down = f(&work);
                work[p][[r, c]] = orig;
                g[[r, c]] = (up - down) / (2.0 * eps);
            }
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error across a list of gradients.
pub fn max_relative_error(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max)
}
