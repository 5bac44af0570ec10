//! Training objectives: reconstruction, velocity, smoothness and KL terms.
//!
//! Every loss reduces by the mean over evaluated elements, so the weights
//! are independent of batch and window size. Each loss comes in two forms: a
//! plain-array function (used for validation and as the finite-difference
//! reference) and a tape builder (used in the training graph). Frame
//! validity masks exclude zero-padded frames from every reduction; a
//! difference term is evaluated only when all frames it touches are valid.
//!
//! Window indexing: with `n_prev` context frames, first differences cover
//! frame pairs from `n_prev - 1` on (all pairs when `n_prev = 0`), and
//! second differences are centered on frames `n_prev..` (clamped to 1).

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_simple: f64,
    pub lambda_vel: f64,
    pub lambda_smooth: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_simple: 1.0,
            lambda_vel: 0.5,
            lambda_smooth: 5e-6,
            lambda_kl: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_simple,
            self.lambda_vel,
            self.lambda_smooth,
            self.lambda_kl,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The four unweighted loss values of one step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub simple: f64,
    pub vel: f64,
    pub smooth: f64,
    pub kl: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_simple * self.simple
            + w.lambda_vel * self.vel
            + w.lambda_smooth * self.smooth
            + w.lambda_kl * self.kl
    }
}

fn check_same_shape<T: Scalar>(ctx: &'static str, a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            ctx,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

fn check_mask(ctx: &'static str, n: usize, valid: Option<&[bool]>) -> Result<()> {
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::shape(ctx, format!("mask of {n}"), v.len()));
        }
    }
    Ok(())
}

fn frame_valid(valid: Option<&[bool]>, i: usize) -> bool {
    valid.is_none_or(|v| v[i])
}

/// Range of first-difference indices: `d_i = x[i+1] - x[i]`.
fn velocity_range(n: usize, n_prev: usize) -> Result<std::ops::Range<usize>> {
    if n < 2 || n_prev >= n - 1 {
        return Err(Error::InvalidArgument(format!(
            "velocity loss needs n_prev < N-1, got n_prev={n_prev}, N={n}"
        )));
    }
    Ok(n_prev.saturating_sub(1)..n - 1)
}

/// Range of second-difference centers: `x[c+1] - 2 x[c] + x[c-1]`.
fn smoothness_range(n: usize, n_prev: usize) -> Result<std::ops::Range<usize>> {
    if n < n_prev + 3 {
        return Err(Error::InvalidArgument(format!(
            "smoothness loss needs N - n_prev >= 3, got n_prev={n_prev}, N={n}"
        )));
    }
    Ok(n_prev.max(1)..n - 1)
}

/// Mean squared error over all elements, restricted to valid frames.
pub fn simple_loss<T: Scalar>(
    x0: &Array2<T>,
    x0_hat: &Array2<T>,
    valid: Option<&[bool]>,
) -> Result<T> {
    check_same_shape("simple_loss", x0, x0_hat)?;
    check_mask("simple_loss", x0.nrows(), valid)?;
    let d = x0.ncols();
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..x0.nrows() {
        if !frame_valid(valid, i) {
            continue;
        }
        for j in 0..d {
            let e = x0[[i, j]] - x0_hat[[i, j]];
            sum += e * e;
        }
        count += d;
    }
    if count == 0 {
        return Err(Error::EmptyInput("simple_loss: no valid frames"));
    }
    Ok(sum / T::cast(count as f64))
}

/// Mean squared error between first differences of target and prediction.
pub fn velocity_loss<T: Scalar>(
    x: &Array2<T>,
    x_hat: &Array2<T>,
    n_prev: usize,
    valid: Option<&[bool]>,
) -> Result<T> {
    check_same_shape("velocity_loss", x, x_hat)?;
    check_mask("velocity_loss", x.nrows(), valid)?;
    let range = velocity_range(x.nrows(), n_prev)?;
    let d = x.ncols();
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in range {
        if !(frame_valid(valid, i) && frame_valid(valid, i + 1)) {
            continue;
        }
        for j in 0..d {
            let dv = (x[[i + 1, j]] - x[[i, j]]) - (x_hat[[i + 1, j]] - x_hat[[i, j]]);
            sum += dv * dv;
        }
        count += d;
    }
    if count == 0 {
        return Err(Error::EmptyInput("velocity_loss: no valid differences"));
    }
    Ok(sum / T::cast(count as f64))
}

/// Mean squared second difference of the prediction.
pub fn smoothness_loss<T: Scalar>(
    x_hat: &Array2<T>,
    n_prev: usize,
    valid: Option<&[bool]>,
) -> Result<T> {
    check_mask("smoothness_loss", x_hat.nrows(), valid)?;
    let range = smoothness_range(x_hat.nrows(), n_prev)?;
    let d = x_hat.ncols();
    let mut sum = T::zero();
    let mut count = 0usize;
    for c in range {
        let ok = frame_valid(valid, c - 1) && frame_valid(valid, c) && frame_valid(valid, c + 1);
        if !ok {
            continue;
        }
        for j in 0..d {
            let sd = x_hat[[c + 1, j]] - (x_hat[[c, j]] + x_hat[[c, j]]) + x_hat[[c - 1, j]];
            sum += sd * sd;
        }
        count += d;
    }
    if count == 0 {
        return Err(Error::EmptyInput("smoothness_loss: no valid centers"));
    }
    Ok(sum / T::cast(count as f64))
}

/// KL divergence to the standard normal from log-variance statistics:
/// `0.5 * sum(mu^2 + exp(log_var) - log_var - 1)`.
pub fn kl_from_log_var<T: Scalar>(mu: &Array2<T>, log_var: &Array2<T>) -> Result<T> {
    check_same_shape("kl_loss", mu, log_var)?;
    let half = T::cast(0.5);
    let mut sum = T::zero();
    for (&m, &lv) in mu.iter().zip(log_var.iter()) {
        sum = sum + m * m + lv.exp() - lv - T::one();
    }
    Ok(half * sum)
}

/// KL divergence from (mu, sigma) directly; sigma must be positive.
pub fn kl_loss<T: Scalar>(mu: &Array2<T>, sigma: &Array2<T>) -> Result<T> {
    check_same_shape("kl_loss", mu, sigma)?;
    if sigma.iter().any(|&s| s <= T::zero()) {
        return Err(Error::InvalidArgument(
            "kl_loss requires strictly positive sigma".into(),
        ));
    }
    let log_var = sigma.mapv(|s| s.ln() * T::cast(2.0));
    kl_from_log_var(mu, &log_var)
}

/// Mask matrix with 1s on valid rows, matching `rows x cols`; `None` when
/// every frame is valid (no-op).
fn row_mask<T: Scalar>(
    valid: Option<&[bool]>,
    row_ok: impl Fn(&[bool], usize) -> bool,
    rows: usize,
    cols: usize,
) -> (Option<Array2<T>>, usize) {
    match valid {
        None => (None, rows * cols),
        Some(v) => {
            let mut m = Array2::zeros((rows, cols));
            let mut n_ok = 0;
            for i in 0..rows {
                if row_ok(v, i) {
                    m.slice_mut(s![i, ..]).fill(T::one());
                    n_ok += 1;
                }
            }
            if n_ok == rows {
                (None, rows * cols)
            } else {
                (Some(m), n_ok * cols)
            }
        }
    }
}

fn masked_mean<T: Scalar>(
    tape: &mut Tape<T>,
    sq: Var,
    mask: Option<Array2<T>>,
    count: usize,
) -> Var {
    let masked = match mask {
        None => sq,
        Some(m) => {
            let mv = tape.constant(m);
            tape.mul(sq, mv)
        }
    };
    let total = tape.sum_all(masked);
    tape.scale(total, T::cast(1.0 / count as f64))
}

/// Tape version of [`simple_loss`]; `x0` is typically a constant node.
pub fn tape_simple_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x0: Var,
    x0_hat: Var,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let (n, d) = tape.shape(x0);
    check_mask("simple_loss", n, valid)?;
    let (mask, count) = row_mask::<T>(valid, |v, i| v[i], n, d);
    if count == 0 {
        return Err(Error::EmptyInput("simple_loss: no valid frames"));
    }
    let diff = tape.sub(x0, x0_hat);
    let sq = tape.mul(diff, diff);
    Ok(masked_mean(tape, sq, mask, count))
}

/// Tape version of [`velocity_loss`].
pub fn tape_velocity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    n_prev: usize,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let (n, d) = tape.shape(x);
    check_mask("velocity_loss", n, valid)?;
    let range = velocity_range(n, n_prev)?;
    let rows = range.len();
    let start = range.start;
    let (mask, count) = row_mask::<T>(valid, |v, i| v[start + i] && v[start + i + 1], rows, d);
    if count == 0 {
        return Err(Error::EmptyInput("velocity_loss: no valid differences"));
    }
    let dx = first_difference(tape, x, start, n);
    let dxh = first_difference(tape, x_hat, start, n);
    let diff = tape.sub(dx, dxh);
    let sq = tape.mul(diff, diff);
    Ok(masked_mean(tape, sq, mask, count))
}

fn first_difference<T: Scalar>(tape: &mut Tape<T>, x: Var, start: usize, n: usize) -> Var {
    let hi = tape.slice_rows(x, start + 1, n);
    let lo = tape.slice_rows(x, start, n - 1);
    tape.sub(hi, lo)
}

/// Tape version of [`smoothness_loss`].
pub fn tape_smoothness_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x_hat: Var,
    n_prev: usize,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let (n, d) = tape.shape(x_hat);
    check_mask("smoothness_loss", n, valid)?;
    let range = smoothness_range(n, n_prev)?;
    let rows = range.len();
    let c0 = range.start;
    let (mask, count) = row_mask::<T>(
        valid,
        |v, i| v[c0 + i - 1] && v[c0 + i] && v[c0 + i + 1],
        rows,
        d,
    );
    if count == 0 {
        return Err(Error::EmptyInput("smoothness_loss: no valid centers"));
    }
    let next = tape.slice_rows(x_hat, c0 + 1, n);
    let mid = tape.slice_rows(x_hat, c0, n - 1);
    let prev = tape.slice_rows(x_hat, c0 - 1, n - 2);
    let mid2 = tape.scale(mid, T::cast(-2.0));
    let ends = tape.add(next, prev);
    let sd = tape.add(ends, mid2);
    let sq = tape.mul(sd, sd);
    Ok(masked_mean(tape, sq, mask, count))
}

/// Tape version of [`kl_from_log_var`].
pub fn tape_kl_loss<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Var {
    let musq = tape.mul(mu, mu);
    let var = tape.exp(log_var);
    let inner = tape.add(musq, var);
    let inner = tape.sub(inner, log_var);
    let inner = tape.add_scalar(inner, T::cast(-1.0));
    let total = tape.sum_all(inner);
    tape.scale(total, T::cast(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| f64::standard_normal(rng))
    }

    #[test]
    fn simple_loss_examples() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert_abs_diff_eq!(simple_loss(&a, &a, None).unwrap(), 0.0, epsilon = 1e-15);
        let zeros = Array2::zeros((2, 2));
        assert_abs_diff_eq!(simple_loss(&a, &zeros, None).unwrap(), 1.0, epsilon = 1e-15);

        let x0 = array![[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]];
        let xh = array![[0.0, -1.0], [0.5, 2.0], [1.0, 1.0]];
        let hand = (1.0 + 1.0 + 0.0 + 4.0 + 4.0 + 0.0) / 6.0;
        assert_abs_diff_eq!(simple_loss(&x0, &xh, None).unwrap(), hand, epsilon = 1e-15);
        assert!(simple_loss(&x0, &zeros, None).is_err());
    }

    #[test]
    fn velocity_loss_examples() {
        let x = array![[0.0], [1.0], [3.0], [6.0]];
        let xh = array![[0.0], [1.0], [2.0], [3.0]];
        assert_abs_diff_eq!(
            velocity_loss(&x, &x, 0, None).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // Constant offset leaves first differences unchanged.
        let shifted = xh.mapv(|v| v + 7.5);
        assert_abs_diff_eq!(
            velocity_loss(&x, &xh, 0, None).unwrap(),
            velocity_loss(&x, &shifted, 0, None).unwrap(),
            epsilon = 1e-15
        );
        // Differences (1,2,3) vs (1,1,1) -> squared (0,1,4), mean 5/3.
        assert_abs_diff_eq!(
            velocity_loss(&x, &xh, 0, None).unwrap(),
            5.0 / 3.0,
            epsilon = 1e-15
        );
        // n_prev=2 keeps pairs from frame 1 on: diffs (2,3) vs (1,1) -> (1,4).
        assert_abs_diff_eq!(
            velocity_loss(&x, &xh, 2, None).unwrap(),
            2.5,
            epsilon = 1e-15
        );
        assert!(velocity_loss(&x, &xh, 3, None).is_err());
    }

    #[test]
    fn smoothness_loss_examples() {
        let ramp = Array2::from_shape_fn((6, 2), |(i, j)| 0.5 + (j as f64 + 1.0) * i as f64);
        assert_abs_diff_eq!(
            smoothness_loss(&ramp, 0, None).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let constant = Array2::from_elem((5, 3), 2.0);
        assert_abs_diff_eq!(
            smoothness_loss(&constant, 0, None).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        // [0,1,0,1]: second differences (-2, 2) -> mean square 4.
        let zigzag = array![[0.0], [1.0], [0.0], [1.0]];
        assert_abs_diff_eq!(
            smoothness_loss(&zigzag, 0, None).unwrap(),
            4.0,
            epsilon = 1e-15
        );
        assert!(smoothness_loss(&zigzag, 2, None).is_err());
    }

    #[test]
    fn kl_loss_examples() {
        let zeros = Array2::<f64>::zeros((1, 4));
        let ones = Array2::<f64>::ones((1, 4));
        assert_abs_diff_eq!(kl_loss(&zeros, &ones).unwrap(), 0.0, epsilon = 1e-15);

        let mu = array![[1.0]];
        let sigma = array![[1.0]];
        assert_abs_diff_eq!(kl_loss(&mu, &sigma).unwrap(), 0.5, epsilon = 1e-15);

        let e = std::f64::consts::E;
        let sigma_e = array![[e]];
        let zero = array![[0.0]];
        assert_abs_diff_eq!(
            kl_loss(&zero, &sigma_e).unwrap(),
            0.5 * (e * e - 3.0),
            epsilon = 1e-12
        );
        assert!(kl_loss(&mu, &array![[0.0]]).is_err());
        assert!(kl_loss(&mu, &array![[-1.0]]).is_err());
        // Log-variance form agrees with the sigma form.
        let lv = array![[0.7]];
        let sig = lv.mapv(|v: f64| (0.5 * v).exp());
        assert_abs_diff_eq!(
            kl_from_log_var(&mu, &lv).unwrap(),
            kl_loss(&mu, &sig).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts {
            simple: 1.0,
            vel: 1.0,
            smooth: 1.0,
            kl: 1.0,
        };
        let zero = LossWeights {
            lambda_simple: 0.0,
            lambda_vel: 0.0,
            lambda_smooth: 0.0,
            lambda_kl: 0.0,
        };
        assert_eq!(parts.total(&zero), 0.0);
        assert_abs_diff_eq!(
            parts.total(&LossWeights::default()),
            1.500006,
            epsilon = 1e-12
        );
        let only_vel = LossWeights {
            lambda_vel: 2.0,
            ..zero
        };
        let mixed = LossParts {
            simple: 9.0,
            vel: 3.0,
            smooth: 9.0,
            kl: 9.0,
        };
        assert_abs_diff_eq!(mixed.total(&only_vel), 6.0, epsilon = 1e-15);
        assert!(LossWeights {
            lambda_kl: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn masks_exclude_padded_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let full_x = randn(&mut rng, 8, 3);
        let full_xh = randn(&mut rng, 8, 3);
        // Pad the last 3 frames with garbage; mask must make it invisible.
        let mut padded_x = full_x.clone();
        let mut padded_xh = full_xh.clone();
        for i in 5..8 {
            for j in 0..3 {
                padded_x[[i, j]] = 99.0;
                padded_xh[[i, j]] = -99.0;
            }
        }
        let valid = [true, true, true, true, true, false, false, false];
        let trimmed_x = full_x.slice(s![..5, ..]).to_owned();
        let trimmed_xh = full_xh.slice(s![..5, ..]).to_owned();

        assert_abs_diff_eq!(
            simple_loss(&padded_x, &padded_xh, Some(&valid)).unwrap(),
            simple_loss(&trimmed_x, &trimmed_xh, None).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            velocity_loss(&padded_x, &padded_xh, 2, Some(&valid)).unwrap(),
            velocity_loss(&trimmed_x, &trimmed_xh, 2, None).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            smoothness_loss(&padded_xh, 1, Some(&valid)).unwrap(),
            smoothness_loss(&trimmed_xh, 1, None).unwrap(),
            epsilon = 1e-12
        );
        // Fully padded -> error, never silently zero.
        let none = [false; 8];
        assert!(simple_loss(&padded_x, &padded_xh, Some(&none)).is_err());
        assert!(velocity_loss(&padded_x, &padded_xh, 0, Some(&none)).is_err());
        assert!(smoothness_loss(&padded_xh, 0, Some(&none)).is_err());
    }

    #[test]
    fn tape_losses_match_array_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn(&mut rng, 7, 4);
        let xh = randn(&mut rng, 7, 4);
        let valid = [true, true, false, true, true, true, false];
        let mu = randn(&mut rng, 1, 5);
        let lv = randn(&mut rng, 1, 5);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let xhv = tape.param(xh.clone());
        let muv = tape.param(mu.clone());
        let lvv = tape.param(lv.clone());

        let simple = tape_simple_loss(&mut tape, xv, xhv, Some(&valid)).unwrap();
        let vel = tape_velocity_loss(&mut tape, xv, xhv, 2, Some(&valid)).unwrap();
        let smooth = tape_smoothness_loss(&mut tape, xhv, 2, Some(&valid)).unwrap();
        let kl = tape_kl_loss(&mut tape, muv, lvv);

        assert_abs_diff_eq!(
            tape.scalar_value(simple),
            simple_loss(&x, &xh, Some(&valid)).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            tape.scalar_value(vel),
            velocity_loss(&x, &xh, 2, Some(&valid)).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            tape.scalar_value(smooth),
            smoothness_loss(&xh, 2, Some(&valid)).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            tape.scalar_value(kl),
            kl_from_log_var(&mu, &lv).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn tape_loss_gradients_match_finite_differences() {
        use crate::autodiff::{max_relative_error, numerical_gradient};
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, 6, 3);
        let xh0 = randn(&mut rng, 6, 3);
        let valid = [true, true, true, true, true, false];

        let loss = |xh: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let xhv = tape.param(xh.clone());
            let s = tape_simple_loss(&mut tape, xv, xhv, Some(&valid)).unwrap();
            let v = tape_velocity_loss(&mut tape, xv, xhv, 1, Some(&valid)).unwrap();
            let sm = tape_smoothness_loss(&mut tape, xhv, 1, Some(&valid)).unwrap();
            let sv = tape.add(s, v);
            let root = tape.add(sv, sm);
            tape.scalar_value(root)
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let xhv = tape.param(xh0.clone());
        let s = tape_simple_loss(&mut tape, xv, xhv, Some(&valid)).unwrap();
        let v = tape_velocity_loss(&mut tape, xv, xhv, 1, Some(&valid)).unwrap();
        let sm = tape_smoothness_loss(&mut tape, xhv, 1, Some(&valid)).unwrap();
        let sv = tape.add(s, v);
        let root = tape.add(sv, sm);
        let grads = tape.backward(root);
        let analytic = grads.wrt(xhv).unwrap();

        let numeric = numerical_gradient(|p| loss(&p[0]), &[xh0], 1e-6);
        assert!(max_relative_error(analytic, &numeric[0]) < 1e-6);
    }

    proptest! {
        #[test]
        fn velocity_invariant_to_shared_offset(
            seed in 0u64..1000,
            offset in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, 6, 2);
            let xh = randn(&mut rng, 6, 2);
            let base = velocity_loss(&x, &xh, 1, None).unwrap();
            let shifted = velocity_loss(
                &x.mapv(|v| v + offset),
                &xh.mapv(|v| v + offset),
                1,
                None,
            ).unwrap();
            prop_assert!((base - shifted).abs() < 1e-9);
            let xh_only = velocity_loss(&x, &xh.mapv(|v| v + offset), 1, None).unwrap();
            prop_assert!((base - xh_only).abs() < 1e-9);
        }

        #[test]
        fn losses_non_negative_and_zero_on_match(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, 5, 3);
            let xh = randn(&mut rng, 5, 3);
            prop_assert!(simple_loss(&x, &xh, None).unwrap() >= 0.0);
            prop_assert!(velocity_loss(&x, &xh, 0, None).unwrap() >= 0.0);
            prop_assert!(smoothness_loss(&xh, 0, None).unwrap() >= 0.0);
            prop_assert!(simple_loss(&x, &x, None).unwrap() == 0.0);
            prop_assert!(velocity_loss(&x, &x, 0, None).unwrap() == 0.0);
            let mu = randn(&mut rng, 1, 4);
            let lv = randn(&mut rng, 1, 4);
            prop_assert!(kl_from_log_var(&mu, &lv).unwrap() >= 0.0);
        }

        #[test]
        fn smoothness_vanishes_on_affine_sequences(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            n in 3usize..12,
        ) {
            let x = Array2::from_shape_fn((n, 2), |(i, j)| {
                a + b * i as f64 * (j as f64 + 1.0)
            });
            prop_assert!(smoothness_loss(&x, 0, None).unwrap() < 1e-18);
        }
    }
}
