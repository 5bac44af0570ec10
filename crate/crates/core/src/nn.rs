//! Neural-network building blocks over the autodiff tape.
//!
//! Parameters live in a [`ParamSet`] keyed by stable names (used for
//! checkpoint serialization). A [`Graph`] wraps one [`Tape`] plus the
//! parameter set for a single forward/backward pass; layers are thin structs
//! holding [`ParamId`]s and building tape ops on demand.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::scalar::Scalar;

/// Handle to one named parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter storage shared by all model components.
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Array2<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix` (component grouping).
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Total element count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// One forward/backward pass: a tape plus lazily bound parameters.
pub struct Graph<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Binds a parameter onto the tape (cached per graph, so reuse within a
    /// step accumulates gradients on one node).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.tape.constant(value)
    }

    /// Backward pass from `root`, returning gradients keyed by parameter id.
    /// Parameters not touched by this graph get `None`.
    pub fn backward_params(&self, root: Var) -> ParamGrads<T> {
        let grads = self.tape.backward(root);
        let by_param = self
            .bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.wrt(v).cloned()))
            .collect();
        ParamGrads { by_param }
    }

    /// Raw tape gradients (for checking non-parameter inputs).
    pub fn backward_all(&self, root: Var) -> Grads<T> {
        self.tape.backward(root)
    }
}

/// Per-parameter gradients of one backward pass.
pub struct ParamGrads<T: Scalar> {
    by_param: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.by_param[id.0].as_ref()
    }

    /// L2 norm over the gradients of the given parameters (missing = zero).
    pub fn norm(&self, ids: impl Iterator<Item = ParamId>) -> f64 {
        let mut acc = 0.0;
        for id in ids {
            if let Some(g) = self.get(id) {
                acc += g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Array2<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        T::uniform(rng, T::cast(-limit), T::cast(limit))
    })
}

/// Gaussian initialization with the given standard deviation.
pub fn normal_init<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::standard_normal(rng) * T::cast(std))
}

/// Standard sinusoidal position table: row p holds
/// [sin(p/10000^(0/d)), cos(p/10000^(0/d)), sin(p/10000^(2/d)), ...].
pub fn sinusoid_table<T: Scalar>(n_pos: usize, dim: usize) -> Array2<T> {
    assert!(
        dim >= 2 && dim.is_multiple_of(2),
        "sinusoid dim must be even, got {dim}"
    );
    Array2::from_shape_fn((n_pos, dim), |(p, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = p as f64 * freq;
        if i % 2 == 0 {
            T::cast(angle.sin())
        } else {
            T::cast(angle.cos())
        }
    })
}

/// Sinusoid rows for explicit positions (e.g. shifted windows).
pub fn sinusoid_rows<T: Scalar>(positions: &[usize], dim: usize) -> Array2<T> {
    let max = positions.iter().copied().max().unwrap_or(0);
    let table = sinusoid_table::<T>(max + 1, dim);
    let mut out = Array2::zeros((positions.len(), dim));
    for (r, &p) in positions.iter().enumerate() {
        out.row_mut(r).assign(&table.row(p));
    }
    out
}

/// Fully connected layer, x (n x din) -> x.w + b (n x dout).
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), xavier_uniform(rng, din, dout));
        let b = ps.add(&format!("{name}.b"), Array2::zeros((1, dout)));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.p(self.w);
        let b = g.p(self.b);
        let xw = g.tape.matmul(x, w);
        g.tape.add_row(xw, b)
    }
}

/// Layer normalization with learned affine transform.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = ps.add(&format!("{name}.beta"), Array2::zeros((1, dim)));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.p(self.gamma);
        let beta = g.p(self.beta);
        g.tape.layer_norm(x, gamma, beta, T::cast(self.eps))
    }
}

/// Two-layer feed-forward block with GELU.
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden),
            lin2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.lin1.forward(g, x);
        let h = g.tape.gelu(h);
        self.lin2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`, keys
/// and values from `kv_in`; `q_in == kv_in` gives self-attention.
pub struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    d_head: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> Self {
        assert!(
            n_heads > 0 && dim.is_multiple_of(n_heads),
            "attention dim {dim} not divisible by {n_heads} heads"
        );
        Self {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), dim, dim),
            n_heads,
            d_head: dim / n_heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, q_in: Var, kv_in: Var) -> Var {
        let q = self.wq.forward(g, q_in);
        let k = self.wk.forward(g, kv_in);
        let v = self.wv.forward(g, kv_in);
        let scale = T::cast(1.0 / (self.d_head as f64).sqrt());
        let mut merged: Option<Var> = None;
        for h in 0..self.n_heads {
            let (c0, c1) = (h * self.d_head, (h + 1) * self.d_head);
            let qh = g.tape.slice_cols(q, c0, c1);
            let kh = g.tape.slice_cols(k, c0, c1);
            let vh = g.tape.slice_cols(v, c0, c1);
            let kt = g.tape.transpose(kh);
            let scores = g.tape.matmul(qh, kt);
            let scores = g.tape.scale(scores, scale);
            let weights = g.tape.softmax_rows(scores);
            let out = g.tape.matmul(weights, vh);
            merged = Some(match merged {
                None => out,
                Some(m) => g.tape.concat_cols(m, out),
            });
        }
        self.wo.forward(g, merged.expect("n_heads > 0"))
    }
}

/// Pre-norm transformer encoder layer (self-attention + feed-forward).
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), dim, n_heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), dim, ffn_hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h);
        let x = g.tape.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.tape.add(x, f)
    }
}

/// Pre-norm transformer decoder layer: self-attention over the token
/// sequence, cross-attention into `memory`, then feed-forward.
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        n_heads: usize,
        ffn_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            self_attn: Attention::new(ps, rng, &format!("{name}.self_attn"), dim, n_heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            cross_attn: Attention::new(ps, rng, &format!("{name}.cross_attn"), dim, n_heads),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), dim, ffn_hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, memory: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h);
        let x = g.tape.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory);
        let x = g.tape.add(x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.tape.add(x, f)
    }
}

/// Adam optimizer with bias correction. Parameters without a gradient in a
/// step are left untouched.
pub struct Adam<T: Scalar> {
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T) -> Self {
        let m = params
            .iter()
            .map(|(_, _, p)| Array2::zeros(p.dim()))
            .collect();
        let v = params
            .iter()
            .map(|(_, _, p)| Array2::zeros(p.dim()))
            .collect();
        Self {
            lr,
            beta1: T::cast(0.9),
            beta2: T::cast(0.999),
            eps: T::cast(1e-8),
            step: 0,
            m,
            v,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let one = T::one();
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &gi| {
                *m = self.beta1 * *m + (one - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &gi| {
                *v = self.beta2 * *v + (one - self.beta2) * gi * gi;
            });
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_relative_error, numerical_gradient};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_set_names_and_lookup() {
        let mut ps = ParamSet::<f32>::new();
        let a = ps.add("enc.w", Array2::zeros((2, 3)));
        let b = ps.add("dec.w", Array2::ones((1, 1)));
        assert_eq!(ps.name(a), "enc.w");
        assert_eq!(ps.id("dec.w"), Some(b));
        assert_eq!(ps.id("missing"), None);
        assert_eq!(ps.n_scalars(), 7);
        assert_eq!(ps.ids_with_prefix("enc.").count(), 1);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_param_name_panics() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Array2::zeros((1, 1)));
        ps.add("w", Array2::zeros((1, 1)));
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", array![[2.0, 3.0]]);
        let mut g = Graph::new(&ps);
        let v1 = g.p(id);
        let v2 = g.p(id);
        assert_eq!(v1, v2);
        // f = sum(w) + sum(w) => grad 2 per element.
        let s1 = g.tape.sum_all(v1);
        let s2 = g.tape.sum_all(v2);
        let root = g.tape.add(s1, s2);
        let grads = g.backward_params(root);
        assert_abs_diff_eq!(grads.get(id).unwrap(), &array![[2.0, 2.0]], epsilon = 1e-12);
    }

    #[test]
    fn sinusoid_table_structure() {
        let t = sinusoid_table::<f64>(4, 6);
        // Position 0: sin(0)=0, cos(0)=1 alternating.
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_abs_diff_eq!(t[[0, i]], expect, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(t[[2, 0]], 2.0f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(t[[2, 1]], 2.0f64.cos(), epsilon = 1e-12);
        // Distinct positions produce distinct rows.
        let d: f64 = t
            .row(1)
            .iter()
            .zip(t.row(3))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 0.1);
        let picked = sinusoid_rows::<f64>(&[2, 0], 6);
        assert_abs_diff_eq!(
            picked.row(0).to_owned(),
            t.row(2).to_owned(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn encoder_layer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::<f64>::new();
        let layer = EncoderLayer::new(&mut ps, &mut rng, "l0", 4, 2, 8);
        let x = Array2::from_shape_fn((3, 4), |_| f64::standard_normal(&mut rng));

        let mut g = Graph::new(&ps);
        let xv = g.tape.param(x.clone());
        let y = layer.forward(&mut g, xv);
        let sq = g.tape.mul(y, y);
        let root = g.tape.mean_all(sq);
        let grads = g.backward_all(root);
        let gx = grads.wrt(xv).unwrap();

        let numeric = numerical_gradient(
            |p| {
                let mut g = Graph::new(&ps);
                let xv = g.tape.param(p[0].clone());
                let y = layer.forward(&mut g, xv);
                let sq = g.tape.mul(y, y);
                let root = g.tape.mean_all(sq);
                g.tape.scalar_value(root)
            },
            &[x],
            1e-6,
        );
        assert!(max_relative_error(gx, &numeric[0]) < 1e-5);
    }

    #[test]
    fn decoder_layer_param_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::<f64>::new();
        let layer = DecoderLayer::new(&mut ps, &mut rng, "l0", 4, 2, 8);
        let x = Array2::from_shape_fn((3, 4), |_| f64::standard_normal(&mut rng));
        let mem = Array2::from_shape_fn((5, 4), |_| f64::standard_normal(&mut rng));

        fn loss_for(
            ps: &ParamSet<f64>,
            layer: &DecoderLayer,
            x: &Array2<f64>,
            mem: &Array2<f64>,
        ) -> f64 {
            let mut g = Graph::new(ps);
            let xv = g.constant(x.clone());
            let mv = g.constant(mem.clone());
            let y = layer.forward(&mut g, xv, mv);
            let sq = g.tape.mul(y, y);
            let root = g.tape.mean_all(sq);
            g.tape.scalar_value(root)
        }

        let analytic: Vec<(ParamId, Array2<f64>)> = {
            let mut g = Graph::new(&ps);
            let xv = g.constant(x.clone());
            let mv = g.constant(mem.clone());
            let y = layer.forward(&mut g, xv, mv);
            let sq = g.tape.mul(y, y);
            let root = g.tape.mean_all(sq);
            let grads = g.backward_params(root);
            [
                "l0.self_attn.wq.w",
                "l0.cross_attn.wv.w",
                "l0.ffn.fc2.b",
                "l0.ln2.gamma",
            ]
            .iter()
            .map(|n| {
                let id = ps.id(n).unwrap();
                (id, grads.get(id).unwrap().clone())
            })
            .collect()
        };

        // Finite differences over a few representative parameters (a full
        // sweep is slow).
        for (id, g_analytic) in analytic {
            let base = ps.get(id).clone();
            let cols = base.dim().1;
            let mut numeric = Array2::zeros(base.dim());
            for idx in 0..base.len() {
                let (r, c) = (idx / cols, idx % cols);
                ps.get_mut(id)[[r, c]] = base[[r, c]] + 1e-6;
                let up = loss_for(&ps, &layer, &x, &mem);
                ps.get_mut(id)[[r, c]] = base[[r, c]] - 1e-6;
                let down = loss_for(&ps, &layer, &x, &mem);
                ps.get_mut(id)[[r, c]] = base[[r, c]];
                numeric[[r, c]] = (up - down) / 2e-6;
            }
            assert!(
                max_relative_error(&g_analytic, &numeric) < 1e-5,
                "param {} gradient mismatch",
                ps.name(id)
            );
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("x", array![[5.0f32, -3.0]]);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..500 {
            let mut g = Graph::new(&ps);
            let x = g.p(id);
            let sq = g.tape.mul(x, x);
            let loss = g.tape.sum_all(sq);
            let grads = g.backward_params(loss);
            opt.update(&mut ps, &grads);
        }
        let x = ps.get(id);
        assert!(
            x[[0, 0]].abs() < 1e-2 && x[[0, 1]].abs() < 1e-2,
            "got {x:?}"
        );
    }

    #[test]
    fn attention_output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f32>::new();
        let attn = Attention::new(&mut ps, &mut rng, "a", 8, 2);
        let q = normal_init::<f32, _>(&mut rng, 3, 8, 1.0);
        let kv = normal_init::<f32, _>(&mut rng, 6, 8, 1.0);
        let run = || {
            let mut g = Graph::new(&ps);
            let qv = g.constant(q.clone());
            let kvv = g.constant(kv.clone());
            let out = attn.forward(&mut g, qv, kvv);
            g.tape.value(out).clone()
        };
        let o1 = run();
        let o2 = run();
        assert_eq!(o1.dim(), (3, 8));
        assert_eq!(o1, o2);
    }
}
