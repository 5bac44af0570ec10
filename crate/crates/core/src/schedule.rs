//! Forward diffusion and the DDPM reverse step.
//!
//! The schedule stores per-step `beta_t`, `a_t = 1 - beta_t` and the
//! cumulative product `a_bar_t`, with the convention `a_bar_0 = 1` so the
//! final reverse step is deterministic. Steps are indexed 1..=T; internal
//! arrays are 0-indexed by `t - 1`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    t_steps: usize,
    betas: Vec<T>,
    a: Vec<T>,
    a_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear beta ramp inclusive of both endpoints.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            betas.push(T::cast(beta_start + (beta_end - beta_start) * frac));
        }
        let a: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut a_bar = Vec::with_capacity(t_steps);
        let mut prod = T::one();
        for &ai in &a {
            prod *= ai;
            a_bar.push(prod);
        }
        Ok(Self {
            t_steps,
            betas,
            a,
            a_bar,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn a(&self, t: usize) -> T {
        self.a[t - 1]
    }

    /// Cumulative product; `a_bar(0) = 1` by convention.
    pub fn a_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.a_bar[t - 1]
        }
    }

    /// Forward diffusion: `X_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps`.
    pub fn q_sample(&self, x0: &Array2<T>, t: usize, eps: &Array2<T>) -> Result<Array2<T>> {
        self.check_t(t)?;
        if x0.dim() != eps.dim() {
            return Err(Error::shape(
                "q_sample",
                format!("{:?}", x0.dim()),
                format!("{:?}", eps.dim()),
            ));
        }
        let ab = self.a_bar(t);
        let signal = ab.sqrt();
        let noise = (T::one() - ab).sqrt();
        Ok(x0.mapv(|v| v * signal) + eps.mapv(|v| v * noise))
    }

    /// Coefficients of the x0-parameterized DDPM posterior at step `t`:
    /// (coefficient on x0_hat, coefficient on x_t, posterior std).
    pub fn posterior_coefficients(&self, t: usize) -> Result<(T, T, T)> {
        self.check_t(t)?;
        if t == 1 {
            // a_bar_0 = 1 collapses the posterior to x0_hat exactly; computing
            // beta_1 / (1 - a_bar_1) in floating point would lose the identity.
            return Ok((T::one(), T::zero(), T::zero()));
        }
        let beta = self.beta(t);
        let a_t = self.a(t);
        let ab_t = self.a_bar(t);
        let ab_prev = self.a_bar(t - 1);
        let denom = T::one() - ab_t;
        let coef_x0 = ab_prev.sqrt() * beta / denom;
        let coef_xt = a_t.sqrt() * (T::one() - ab_prev) / denom;
        let var = beta * (T::one() - ab_prev) / denom;
        Ok((coef_x0, coef_xt, var.sqrt()))
    }

    /// One reverse step `X_{t-1}` from the current noisy signal and the
    /// predicted clean signal. `z` must be zero at `t = 1`.
    pub fn ddpm_step(
        &self,
        x_t: &Array2<T>,
        x0_hat: &Array2<T>,
        t: usize,
        z: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.check_t(t)?;
        if x_t.dim() != x0_hat.dim() || x_t.dim() != z.dim() {
            return Err(Error::shape(
                "ddpm_step",
                format!("{:?}", x_t.dim()),
                format!("{:?} / {:?}", x0_hat.dim(), z.dim()),
            ));
        }
        if t == 1 && z.iter().any(|&v| v != T::zero()) {
            return Err(Error::InvalidArgument(
                "ddpm_step requires z = 0 at t = 1".into(),
            ));
        }
        let (c0, ct, sigma) = self.posterior_coefficients(t)?;
        Ok(x0_hat.mapv(|v| v * c0) + x_t.mapv(|v| v * ct) + z.mapv(|v| v * sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.02, 1e-4).is_err());
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(s.a_bar(1), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a_bar(0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_step_hand_product() {
        // betas [0.1, 0.2] => a_bar [0.9, 0.72].
        let s = NoiseSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        assert_abs_diff_eq!(s.beta(1), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta(2), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.a_bar(2), 0.72, epsilon = 1e-15);
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        // Endpoints included exactly.
        assert_abs_diff_eq!(s.beta(1), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(s.beta(1000), 0.02, epsilon = 1e-18);
        // a_bar strictly decreasing, matches direct product, small at T.
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            assert_abs_diff_eq!(s.a_bar(t), prod, epsilon = 1e-12);
            assert!(s.a_bar(t) < s.a_bar(t - 1));
        }
        assert!(s.a_bar(1000) > 0.0 && s.a_bar(1000) < 1e-3);
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::<f64>::linear(10, 0.01, 0.2).unwrap();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let zeros = Array2::zeros((2, 2));
        let eps = array![[0.3, -0.1], [2.0, 0.0]];

        let xt = s.q_sample(&x0, 4, &zeros).unwrap();
        assert_abs_diff_eq!(&xt, &x0.mapv(|v| v * s.a_bar(4).sqrt()), epsilon = 1e-15);

        let xt = s.q_sample(&zeros, 4, &eps).unwrap();
        assert_abs_diff_eq!(
            &xt,
            &eps.mapv(|v| v * (1.0 - s.a_bar(4)).sqrt()),
            epsilon = 1e-15
        );

        // Linearity in x0: scaling x0 scales the signal term exactly.
        let a = s.q_sample(&x0, 7, &eps).unwrap();
        let b = s.q_sample(&x0.mapv(|v| 3.0 * v), 7, &eps).unwrap();
        let expected = &a + &x0.mapv(|v| 2.0 * v * s.a_bar(7).sqrt());
        assert_abs_diff_eq!(&b, &expected, epsilon = 1e-12);

        assert!(s.q_sample(&x0, 0, &zeros).is_err());
        assert!(s.q_sample(&x0, 11, &zeros).is_err());
        assert!(s.q_sample(&x0, 1, &Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn final_step_returns_x0_hat() {
        let s = NoiseSchedule::<f64>::linear(10, 0.01, 0.2).unwrap();
        let x_t = array![[0.7, -0.4]];
        let x0_hat = array![[1.5, 2.5]];
        let z = Array2::zeros((1, 2));
        let out = s.ddpm_step(&x_t, &x0_hat, 1, &z).unwrap();
        // a_bar_0 = 1 makes the x_t coefficient exactly 0.
        assert_eq!(out, x0_hat);
        assert!(s.ddpm_step(&x_t, &x0_hat, 1, &array![[0.1, 0.0]]).is_err());
    }

    #[test]
    fn posterior_coefficients_hand_case() {
        // betas [0.1, 0.2]; t=2: a_bar_1=0.9, a_bar_2=0.72.
        let s = NoiseSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        let (c0, ct, sigma) = s.posterior_coefficients(2).unwrap();
        let expect_c0 = 0.9f64.sqrt() * 0.2 / (1.0 - 0.72);
        let expect_ct = 0.8f64.sqrt() * (1.0 - 0.9) / (1.0 - 0.72);
        let expect_var: f64 = 0.2 * (1.0 - 0.9) / (1.0 - 0.72);
        assert_abs_diff_eq!(c0, expect_c0, epsilon = 1e-12);
        assert_abs_diff_eq!(ct, expect_ct, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma, expect_var.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn oracle_chain_recovers_x0() {
        // Perfect predictor and z = 0 throughout: terminal error < 1e-6.
        let s = NoiseSchedule::<f64>::linear(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Array2::from_shape_fn((4, 3), |_| f64::standard_normal(&mut rng));
        let mut x = Array2::from_shape_fn((4, 3), |_| f64::standard_normal(&mut rng));
        let z = Array2::zeros((4, 3));
        for t in (1..=50).rev() {
            x = s.ddpm_step(&x, &x0, t, &z).unwrap();
        }
        let err = (&x - &x0)
            .mapv(f64::abs)
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "terminal error {err}");
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        // Unit-variance x0 and eps keep X_t at unit variance for every t.
        let s = NoiseSchedule::<f32>::linear(100, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for t in [1usize, 50, 100] {
            let n = 200;
            let x0 = Array2::from_shape_fn((n, n), |_| f32::standard_normal(&mut rng));
            let eps = Array2::from_shape_fn((n, n), |_| f32::standard_normal(&mut rng));
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let mean = xt.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
            let var = xt.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n * n) as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t}: variance {var}");
        }
    }
}
