//! Variational style encoder: arbitrary-length motion clip to a fixed-size
//! time-invariant style code.
//!
//! Per-frame motion features are projected to the hidden width, given
//! sinusoidal positions, run through a transformer encoder, mean-pooled over
//! time, and passed through two fully connected layers whose output splits
//! into the mean and log-variance of the style posterior. Predicting
//! log-variance keeps sigma positive by construction. The reparameterized
//! sample `s = mu + sigma * eps` takes caller-provided noise so all
//! randomness stays seeded.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, EncoderLayer, Graph, LayerNorm, Linear, ParamSet};
use crate::scalar::Scalar;

/// Posterior statistics of one encoded clip (each `1 x d_style`).
#[derive(Debug, Clone)]
pub struct StyleStats<T: Scalar> {
    pub mu: Array2<T>,
    pub log_var: Array2<T>,
}

impl<T: Scalar> StyleStats<T> {
    pub fn sigma(&self) -> Array2<T> {
        self.log_var.mapv(|v| (v * T::cast(0.5)).exp())
    }
}

/// Tape handles to the posterior statistics, for in-graph training.
#[derive(Debug, Clone, Copy)]
pub struct StyleStatsVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Mean over rows: `n x c -> 1 x c`. Length-invariant on clips made of one
/// repeated frame, which is what makes pooling testable in isolation.
pub fn mean_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = tape.shape(x).0;
    let s = tape.sum_rows(x);
    tape.scale(s, T::cast(1.0 / n as f64))
}

pub struct StyleEncoder {
    input_proj: Linear,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    d_motion: usize,
    hidden: usize,
    d_style: usize,
    max_frames: usize,
    use_pos_enc: bool,
}

impl StyleEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        d_motion: usize,
        hidden: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_mult: usize,
        d_style: usize,
        max_frames: usize,
        use_pos_enc: bool,
    ) -> Self {
        let name = "style_enc";
        let input_proj = Linear::new(ps, rng, &format!("{name}.input"), d_motion, hidden);
        let layers = (0..n_layers)
            .map(|i| {
                EncoderLayer::new(
                    ps,
                    rng,
                    &format!("{name}.layer{i}"),
                    hidden,
                    n_heads,
                    hidden * ffn_mult,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{name}.final_ln"), hidden);
        let fc1 = Linear::new(ps, rng, &format!("{name}.fc1"), hidden, hidden);
        let fc2 = Linear::new(ps, rng, &format!("{name}.fc2"), hidden, 2 * d_style);
        Self {
            input_proj,
            layers,
            final_ln,
            fc1,
            fc2,
            d_motion,
            hidden,
            d_style,
            max_frames,
            use_pos_enc,
        }
    }

    pub fn d_style(&self) -> usize {
        self.d_style
    }

    /// Encodes a clip of `M >= 1` frames into posterior statistics.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, clip: &Array2<T>) -> Result<StyleStatsVars> {
        let (m, d) = clip.dim();
        if m == 0 {
            return Err(Error::EmptyInput("style clip"));
        }
        if d != self.d_motion {
            return Err(Error::shape("style_encoder", self.d_motion, d));
        }
        if m > self.max_frames {
            return Err(Error::InvalidArgument(format!(
                "style clip of {m} frames exceeds the cap of {} (truncation would lose style information)",
                self.max_frames
            )));
        }
        let clip_v = g.constant(clip.clone());
        let mut x = self.input_proj.forward(g, clip_v);
        if self.use_pos_enc {
            let pos = g.constant(sinusoid_table::<T>(m, self.hidden));
            x = g.tape.add(x, pos);
        }
        for layer in &self.layers {
            x = layer.forward(g, x);
        }
        let x = self.final_ln.forward(g, x);
        let pooled = mean_pool(&mut g.tape, x);
        let h = self.fc1.forward(g, pooled);
        let h = g.tape.gelu(h);
        let out = self.fc2.forward(g, h);
        let mu = g.tape.slice_cols(out, 0, self.d_style);
        let log_var = g.tape.slice_cols(out, self.d_style, 2 * self.d_style);
        Ok(StyleStatsVars { mu, log_var })
    }

    /// Reparameterized sample on the tape: `s = mu + exp(log_var / 2) * eps`.
    pub fn sample<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        stats: StyleStatsVars,
        eps: &Array2<T>,
    ) -> Var {
        assert_eq!(
            eps.dim(),
            (1, self.d_style),
            "style eps must be 1 x d_style"
        );
        let half_lv = g.tape.scale(stats.log_var, T::cast(0.5));
        let sigma = g.tape.exp(half_lv);
        let eps_v = g.constant(eps.clone());
        let noise = g.tape.mul(sigma, eps_v);
        g.tape.add(stats.mu, noise)
    }

    /// Array-level encoding (inference path).
    pub fn encode_arrays<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        clip: &Array2<T>,
    ) -> Result<StyleStats<T>> {
        let mut g = Graph::new(params);
        let stats = self.encode(&mut g, clip)?;
        Ok(StyleStats {
            mu: g.tape.value(stats.mu).clone(),
            log_var: g.tape.value(stats.log_var).clone(),
        })
    }
}

/// Array-level reparameterization: `s = mu + sigma * eps`.
pub fn sample_style<T: Scalar>(stats: &StyleStats<T>, eps: &Array2<T>) -> Array2<T> {
    assert_eq!(eps.dim(), stats.mu.dim(), "style eps shape mismatch");
    &stats.mu + &(stats.sigma() * eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_encoder(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) -> StyleEncoder {
        StyleEncoder::new(ps, rng, 5, 8, 1, 2, 2, 4, 1000, true)
    }

    #[test]
    fn output_size_is_independent_of_clip_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ps = ParamSet::<f64>::new();
        let enc = small_encoder(&mut ps, &mut rng);
        for m in [1usize, 50, 500] {
            let clip = Array2::from_shape_fn((m, 5), |_| f64::standard_normal(&mut rng));
            let stats = enc.encode_arrays(&ps, &clip).unwrap();
            assert_eq!(stats.mu.dim(), (1, 4));
            assert_eq!(stats.log_var.dim(), (1, 4));
            assert!(stats
                .mu
                .iter()
                .chain(stats.log_var.iter())
                .all(|v| v.is_finite()));
            assert!(stats.sigma().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut ps = ParamSet::<f32>::new();
        let enc = StyleEncoder::new(&mut ps, &mut rng, 6, 8, 2, 2, 2, 3, 100, true);
        let clip = Array2::from_shape_fn((20, 6), |_| f32::standard_normal(&mut rng));
        let a = enc.encode_arrays(&ps, &clip).unwrap();
        let b = enc.encode_arrays(&ps, &clip).unwrap();
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.log_var, b.log_var);
    }

    #[test]
    fn encode_rejects_bad_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut ps = ParamSet::<f64>::new();
        let enc = StyleEncoder::new(&mut ps, &mut rng, 5, 8, 1, 2, 2, 4, 64, true);
        assert!(enc.encode_arrays(&ps, &Array2::zeros((0, 5))).is_err());
        assert!(enc.encode_arrays(&ps, &Array2::zeros((3, 4))).is_err());
        assert!(enc.encode_arrays(&ps, &Array2::zeros((65, 5))).is_err());
        assert!(enc.encode_arrays(&ps, &Array2::zeros((64, 5))).is_ok());
    }

    #[test]
    fn mean_pool_is_length_invariant_on_repeated_frames() {
        // Encoder ablated to identity: pooling a repeated frame gives that
        // frame back regardless of how often it repeats.
        let row = [1.5f64, -2.0, 0.25];
        for m in [3usize, 7] {
            let mut tape = Tape::new();
            let clip = Array2::from_shape_fn((m, 3), |(_, j)| row[j]);
            let v = tape.constant(clip);
            let pooled = mean_pool(&mut tape, v);
            let got = tape.value(pooled).clone();
            assert_abs_diff_eq!(got, &array![[1.5, -2.0, 0.25]], epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_edge_cases() {
        let stats = StyleStats {
            mu: array![[0.5, -1.0, 2.0]],
            log_var: array![[0.0, 0.0, 0.0]],
        };
        let zero_eps = Array2::zeros((1, 3));
        assert_eq!(sample_style(&stats, &zero_eps), stats.mu);

        let centered = StyleStats {
            mu: Array2::zeros((1, 3)),
            log_var: Array2::zeros((1, 3)),
        };
        let eps = array![[0.3, -0.7, 1.1]];
        assert_eq!(sample_style(&centered, &eps), eps);
    }

    #[test]
    fn sample_moments_match_statistics() {
        // Empirical mean and std over 1e5 draws match (mu, sigma) within 1%.
        let stats = StyleStats {
            mu: array![[0.8f64, -1.2]],
            log_var: array![[(0.5f64).ln() * 2.0, (1.5f64).ln() * 2.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..n {
            let eps = Array2::from_shape_fn((1, 2), |_| f64::standard_normal(&mut rng));
            let s = sample_style(&stats, &eps);
            for j in 0..2 {
                sum[j] += s[[0, j]];
                sumsq[j] += s[[0, j]] * s[[0, j]];
            }
        }
        let sigma = stats.sigma();
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let std = (sumsq[j] / n as f64 - mean * mean).sqrt();
            assert!(
                (mean - stats.mu[[0, j]]).abs() / stats.mu[[0, j]].abs() < 0.01,
                "mean[{j}] = {mean}"
            );
            assert!(
                (std - sigma[[0, j]]).abs() / sigma[[0, j]] < 0.01,
                "std[{j}] = {std}"
            );
        }
    }

    #[test]
    fn sample_gradients_are_affine_in_eps() {
        // d s / d mu = I; d s / d log_var = sigma * eps / 2.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut ps = ParamSet::<f64>::new();
        let enc = small_encoder(&mut ps, &mut rng);
        let mu0 = array![[0.4, -0.3, 1.0, 0.0]];
        let lv0 = array![[0.2, -0.5, 0.0, 0.7]];
        let eps = array![[1.3, -0.8, 0.5, 2.0]];
        // Probe: sum of s picks out column sums of the Jacobians.
        let mut g = Graph::new(&ps);
        let mu = g.tape.param(mu0.clone());
        let lv = g.tape.param(lv0.clone());
        let stats = StyleStatsVars { mu, log_var: lv };
        let s = enc.sample(&mut g, stats, &eps);
        let root = g.tape.sum_all(s);
        let grads = g.backward_all(root);
        let d_mu = grads.wrt(mu).unwrap();
        let d_lv = grads.wrt(lv).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(d_mu[[0, j]], 1.0, epsilon = 1e-12);
            let sigma = (0.5 * lv0[[0, j]]).exp();
            assert_abs_diff_eq!(d_lv[[0, j]], 0.5 * sigma * eps[[0, j]], epsilon = 1e-12);
        }
        // Cross-check against central finite differences.
        let numeric = crate::autodiff::numerical_gradient(
            |p| {
                let mut g = Graph::new(&ps);
                let mu = g.tape.param(p[0].clone());
                let lv = g.tape.param(p[1].clone());
                let s = enc.sample(&mut g, StyleStatsVars { mu, log_var: lv }, &eps);
                let root = g.tape.sum_all(s);
                g.tape.scalar_value(root)
            },
            &[mu0, lv0],
            1e-5,
        );
        assert!(crate::autodiff::max_relative_error(d_mu, &numeric[0]) < 1e-4);
        assert!(crate::autodiff::max_relative_error(d_lv, &numeric[1]) < 1e-4);
    }
}
