//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation applied during a forward pass; calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients for every variable created with
//! [`Tape::param`]. One tape covers one training step and is dropped
//! afterwards, so activations live exactly as long as they are needed.
//!
//! Shape errors in tape ops are programming errors and panic; the op set is
//! fixed and every caller controls its own shapes.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    /// Adds a 1 x c row to every row of an n x c matrix.
    AddRow(Var, Var),
    /// Tiles a 1 x c row n times.
    RepeatRow(Var),
    /// Column sums: n x c -> 1 x c.
    SumRows(Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LnCache<T>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    SumAll(Var),
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to tape variables.
pub struct Grads<T: Scalar> {
    by_var: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to `v`; zero matrices are always materialized
    /// for variables that require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.by_var[v.0].as_ref()
    }
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1 x 1 node as a scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar_value on non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn push_unary(&mut self, a: Var, value: Array2<T>, op: Op<T>) -> Var {
        let rg = self.needs(a);
        self.push(value, op, rg)
    }

    fn push_binary(&mut self, a: Var, b: Var, value: Array2<T>, op: Op<T>) -> Var {
        let rg = self.needs(a) || self.needs(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.push_binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push_binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push_binary(a, b, value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push_binary(a, b, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push_unary(a, value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push_unary(a, value, Op::AddScalar(a, c))
    }

    /// Adds `row` (1 x c) to every row of `a` (n x c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "add_row: row must be 1x{ac}");
        let value = self.value(a) + self.value(row);
        self.push_binary(a, row, value, Op::AddRow(a, row))
    }

    /// Tiles `row` (1 x c) into an n x c matrix.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let (rr, rc) = self.shape(row);
        assert_eq!(rr, 1, "repeat_row: input must have one row");
        assert!(n > 0, "repeat_row: n must be positive");
        let src = self.value(row).row(0).to_owned();
        let mut value = Array2::zeros((n, rc));
        for mut r in value.rows_mut() {
            r.assign(&src);
        }
        self.push_unary(row, value, Op::RepeatRow(row))
    }

    /// Column sums: n x c -> 1 x c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push_unary(a, value, Op::SumRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push_unary(a, value, Op::Transpose(a))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_tanh);
        self.push_unary(a, value, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push_unary(a, value, Op::Exp(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push_unary(a, value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with affine output: gamma * xhat + beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma must be 1x{c}");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta must be 1x{c}");
        let inv_c = T::cast(1.0 / c as f64);
        let mut xhat = self.value(x).clone();
        let mut rstd = Array1::zeros(n);
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() * inv_c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) * inv_c;
            let r = (var + eps).sqrt().recip();
            row.mapv_inplace(|v| v * r);
            rstd[i] = r;
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = xhat.clone();
        for mut row in value.rows_mut() {
            Zip::from(&mut row).and(&g).and(&b).for_each(|v, &gi, &bi| {
                *v = *v * gi + bi;
            });
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache: LnCache { xhat, rstd },
            },
            rg,
        )
    }

    /// Stacks `a` on top of `b` (columns must match).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "concat_rows: column mismatch {ac} vs {bc}");
        let mut value = Array2::zeros((ar + br, ac));
        value.slice_mut(s![..ar, ..]).assign(self.value(a));
        value.slice_mut(s![ar.., ..]).assign(self.value(b));
        self.push_binary(a, b, value, Op::ConcatRows(a, b))
    }

    /// Puts `a` left of `b` (rows must match).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row mismatch {ar} vs {br}");
        let mut value = Array2::zeros((ar, ac + bc));
        value.slice_mut(s![.., ..ac]).assign(self.value(a));
        value.slice_mut(s![.., ac..]).assign(self.value(b));
        self.push_binary(a, b, value, Op::ConcatCols(a, b))
    }

    /// Rows `r0..r1` of `a`.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (n, _) = self.shape(a);
        assert!(
            r0 < r1 && r1 <= n,
            "slice_rows: bad range {r0}..{r1} of {n}"
        );
        let value = self.value(a).slice(s![r0..r1, ..]).to_owned();
        self.push_unary(a, value, Op::SliceRows(a, r0, r1))
    }

    /// Columns `c0..c1` of `a`.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (_, c) = self.shape(a);
        assert!(
            c0 < c1 && c1 <= c,
            "slice_cols: bad range {c0}..{c1} of {c}"
        );
        let value = self.value(a).slice(s![.., c0..c1]).to_owned();
        self.push_unary(a, value, Op::SliceCols(a, c0, c1))
    }

    /// Sum of all elements as a 1 x 1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_unary(a, value, Op::SumAll(a))
    }

    /// Mean of all elements as a 1 x 1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::cast(1.0 / n as f64))
    }

    /// Backpropagates from a 1 x 1 node, returning gradients for every
    /// variable on the path from a `param` leaf to `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut by_var: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        by_var[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || by_var[i].is_none() {
                continue;
            }
            let g = by_var[i].take().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut by_var[a.0], da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut by_var[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g.mapv(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.mapv(|x| x * *c));
                    }
                }
                Op::AddScalar(a, _) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.clone());
                    }
                    if self.needs(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut by_var[row.0], dr);
                    }
                }
                Op::RepeatRow(row) => {
                    if self.needs(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut by_var[row.0], dr);
                    }
                }
                Op::SumRows(a) => {
                    if self.needs(*a) {
                        let (n, _) = self.shape(*a);
                        let src = g.row(0).to_owned();
                        let mut da = Array2::zeros(self.shape(*a));
                        for mut r in da.rows_mut() {
                            r.assign(&src);
                        }
                        let _ = n;
                        accumulate(&mut by_var[a.0], da);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.t().to_owned());
                    }
                }
                Op::Gelu(a) => {
                    if self.needs(*a) {
                        let mut da = self.value(*a).clone();
                        da.mapv_inplace(gelu_tanh_grad);
                        accumulate(&mut by_var[a.0], da * &g);
                    }
                }
                Op::Exp(a) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], &g * &self.nodes[i].value);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let y = &self.nodes[i].value;
                        let mut da = g.clone();
                        for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                            let dot = drow
                                .iter()
                                .zip(yrow.iter())
                                .map(|(&d, &v)| d * v)
                                .fold(T::zero(), |acc, x| acc + x);
                            Zip::from(&mut drow).and(&yrow).for_each(|d, &v| {
                                *d = v * (*d - dot);
                            });
                        }
                        accumulate(&mut by_var[a.0], da);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (_, c) = self.shape(*x);
                    let inv_c = T::cast(1.0 / c as f64);
                    if self.needs(*beta) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut by_var[beta.0], db);
                    }
                    if self.needs(*gamma) {
                        let dg = (&g * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut by_var[gamma.0], dg);
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma).row(0).to_owned();
                        let mut dx = Array2::zeros(self.shape(*x));
                        for (r, (grow, xhrow)) in
                            g.rows().into_iter().zip(cache.xhat.rows()).enumerate()
                        {
                            // dxhat = g * gamma; dx = rstd*(dxhat - mean(dxhat)
                            //         - xhat*mean(dxhat*xhat))
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for ((&gv, &gm), &xh) in grow.iter().zip(gam.iter()).zip(xhrow.iter()) {
                                let dxh = gv * gm;
                                m1 += dxh;
                                m2 += dxh * xh;
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            let r_std = cache.rstd[r];
                            let mut drow = dx.row_mut(r);
                            for (((d, &gv), &gm), &xh) in drow
                                .iter_mut()
                                .zip(grow.iter())
                                .zip(gam.iter())
                                .zip(xhrow.iter())
                            {
                                *d = r_std * (gv * gm - m1 - xh * m2);
                            }
                        }
                        accumulate(&mut by_var[x.0], dx);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ar, _) = self.shape(*a);
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.slice(s![..ar, ..]).to_owned());
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g.slice(s![ar.., ..]).to_owned());
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (_, ac) = self.shape(*a);
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.slice(s![.., ..ac]).to_owned());
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g.slice(s![.., ac..]).to_owned());
                    }
                }
                Op::SliceRows(a, r0, r1) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.shape(*a));
                        da.slice_mut(s![*r0..*r1, ..]).assign(&g);
                        accumulate(&mut by_var[a.0], da);
                    }
                }
                Op::SliceCols(a, c0, c1) => {
                    if self.needs(*a) {
                        let mut da = Array2::zeros(self.shape(*a));
                        da.slice_mut(s![.., *c0..*c1]).assign(&g);
                        accumulate(&mut by_var[a.0], da);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(*a) {
                        let da = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                        accumulate(&mut by_var[a.0], da);
                    }
                }
            }
            by_var[i] = Some(g);
        }
        Grads { by_var }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array2<T>>, delta: Array2<T>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let three = T::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Central-difference gradients of `f` with respect to each matrix in
/// `params`, one finite-difference evaluation pair per element.
pub fn numerical_gradient<T, F>(mut f: F, params: &[Array2<T>], step: T) -> Vec<Array2<T>>
where
    T: Scalar,
    F: FnMut(&[Array2<T>]) -> T,
{
    let mut work: Vec<Array2<T>> = params.to_vec();
    let two_step = step + step;
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Array2::zeros(params[p].dim());
        for idx in 0..params[p].len() {
            let (rows, cols) = params[p].dim();
            let (r, c) = (idx / cols, idx % cols);
            let _ = rows;
            let orig = work[p][[r, c]];
            work[p][[r, c]] = orig + step;
            let up = f(&work);
            work[p][[r, c]] = orig - step;
            let down = f(&work);
            work[p][[r, c]] = orig;
            g[[r, c]] = (up - down) / two_step;
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two gradients, with the
/// denominator floored to keep near-zero entries comparable.
pub fn max_relative_error<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_relative_error: shape mismatch");
    let floor = 1e-6;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / (x.abs() + y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
