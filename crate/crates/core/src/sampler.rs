//! Reverse-diffusion sampling with classifier-free guidance and sequential
//! window stitching.
//!
//! Each window starts from pure noise and is denoised for `t = T..1`. At
//! every step the model predicts the clean window under the full conditions
//! and under each dropped condition that carries a nonzero guidance scale;
//! the predictions are combined in clean-motion space before the stochastic
//! reverse step. A condition that is already null contributes no guidance
//! (its dropped prediction would equal the full one), so its scale is
//! treated as zero.
//!
//! Long sequences are generated window by window: the first window uses the
//! learned start features, later windows condition on the tail of what was
//! already generated plus the matching audio tail.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::denoiser::compose;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::style_encoder::sample_style;

/// Guidance scales per condition. Zero disables that guidance term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgScales {
    pub lambda_audio: f64,
    pub lambda_style: f64,
}

impl Default for CfgScales {
    fn default() -> Self {
        Self {
            lambda_audio: 1.0,
            lambda_style: 1.0,
        }
    }
}

impl CfgScales {
    pub fn zero() -> Self {
        Self {
            lambda_audio: 0.0,
            lambda_style: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_audio.is_finite() && self.lambda_style.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scales must be finite, got audio={} style={}",
                self.lambda_audio, self.lambda_style
            )));
        }
        Ok(())
    }
}

/// Clean-motion predictions made with one condition nulled out.
#[derive(Debug, Clone, Default)]
pub struct DroppedPredictions<T: Scalar> {
    pub audio: Option<Array2<T>>,
    pub style: Option<Array2<T>>,
}

/// Guided combination in clean-motion space:
/// `(1 + sum_c lambda_c) * full - sum_c lambda_c * dropped_c`.
/// With every scale zero this returns `pred_full` bit for bit.
pub fn cfg_combine<T: Scalar>(
    pred_full: &Array2<T>,
    dropped: &DroppedPredictions<T>,
    scales: &CfgScales,
) -> Result<Array2<T>> {
    scales.validate()?;
    let terms = [
        ("audio", scales.lambda_audio, &dropped.audio),
        ("style", scales.lambda_style, &dropped.style),
    ];
    let lambda_sum: f64 = terms
        .iter()
        .filter(|(_, l, _)| *l != 0.0)
        .map(|(_, l, _)| l)
        .sum();
    if lambda_sum == 0.0 {
        return Ok(pred_full.clone());
    }
    let mut out = pred_full.mapv(|v| v * T::cast(1.0 + lambda_sum));
    for (name, lambda, pred) in terms {
        if lambda == 0.0 {
            continue;
        }
        let pred = pred
            .as_ref()
            .ok_or(Error::MissingDroppedPrediction { condition: name })?;
        if pred.dim() != pred_full.dim() {
            return Err(Error::shape(
                "cfg_combine",
                format!("{:?}", pred_full.dim()),
                format!("{:?}", pred.dim()),
            ));
        }
        out.zip_mut_with(pred, |o, &p| *o -= T::cast(lambda) * p);
    }
    Ok(out)
}

/// One denoised window plus the mixing weights of the final (t = 1)
/// full-condition prediction, for diagnostics.
#[derive(Debug, Clone)]
pub struct WindowSample<T: Scalar> {
    pub motion: Array2<T>,
    pub final_alpha: Option<Array2<T>>,
}

/// Denoises one window from pure noise under the given conditions.
pub fn sample_window_traced<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    bundle: &ConditionBundle<T>,
    scales: &CfgScales,
    rng: &mut R,
) -> Result<WindowSample<T>> {
    scales.validate()?;
    let (n, d) = (model.config.window, model.config.d_motion);
    let s_full = model.resolve_style(bundle);
    let basis_full = model.decode_basis(&s_full)?;

    // Guidance only makes sense for conditions that are actually present.
    let guide_audio = scales.lambda_audio != 0.0 && !bundle.drop_audio;
    let guide_style = scales.lambda_style != 0.0 && bundle.effective_style().is_some();
    let eff = CfgScales {
        lambda_audio: if guide_audio {
            scales.lambda_audio
        } else {
            0.0
        },
        lambda_style: if guide_style {
            scales.lambda_style
        } else {
            0.0
        },
    };
    let audio_bundle = guide_audio.then(|| bundle.clone().with_drop_audio());
    let style_bundle = guide_style.then(|| bundle.clone().with_drop_style());
    // The style-dropped branch runs under the null style, so it composes
    // with the null style's basis.
    let basis_null = if guide_style {
        model.decode_basis(&model.null_style_code())?
    } else {
        None
    };

    let mut x = Array2::from_shape_fn((n, d), |_| T::standard_normal(rng));
    let mut final_alpha = None;
    for t in (1..=model.config.t_steps).rev() {
        let out_full = model.predict(&x, t, bundle)?;
        let x0_full = compose(&out_full, basis_full.as_ref())?;
        let dropped = DroppedPredictions {
            audio: match &audio_bundle {
                Some(b) => Some(compose(&model.predict(&x, t, b)?, basis_full.as_ref())?),
                None => None,
            },
            style: match &style_bundle {
                Some(b) => Some(compose(&model.predict(&x, t, b)?, basis_null.as_ref())?),
                None => None,
            },
        };
        let x0 = cfg_combine(&x0_full, &dropped, &eff)?;
        if t == 1 {
            final_alpha = out_full.alpha;
        }
        let z = if t > 1 {
            Array2::from_shape_fn((n, d), |_| T::standard_normal(rng))
        } else {
            Array2::zeros((n, d))
        };
        x = model.schedule.ddpm_step(&x, &x0, t, &z)?;
    }
    Ok(WindowSample {
        motion: x,
        final_alpha,
    })
}

/// [`sample_window_traced`] without the diagnostics.
pub fn sample_window<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    bundle: &ConditionBundle<T>,
    scales: &CfgScales,
    rng: &mut R,
) -> Result<Array2<T>> {
    Ok(sample_window_traced(model, bundle, scales, rng)?.motion)
}

/// A full generated sequence with per-frame mixing weights from the final
/// denoising step of each window (`None` when the basis is disabled).
#[derive(Debug, Clone)]
pub struct Generation<T: Scalar> {
    pub motion: Array2<T>,
    pub alpha: Option<Array2<T>>,
}

/// Generates motion for the whole feature sequence, window by window. The
/// style clip is encoded once and reused; `stochastic_style` samples the
/// style posterior instead of taking its mean.
pub fn generate_traced<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    audio: &Array2<T>,
    style_clip: Option<&Array2<T>>,
    scales: &CfgScales,
    stochastic_style: bool,
    rng: &mut R,
) -> Result<Generation<T>> {
    let n_total = audio.nrows();
    if n_total == 0 {
        return Err(Error::EmptyInput("audio features"));
    }
    if audio.ncols() != model.config.d_audio {
        return Err(Error::shape(
            "generate audio",
            model.config.d_audio,
            audio.ncols(),
        ));
    }
    let style_code = match style_clip {
        Some(clip) => {
            let stats = model.encode_style(clip)?;
            let eps = if stochastic_style {
                Array2::from_shape_fn(stats.mu.dim(), |_| T::standard_normal(rng))
            } else {
                Array2::zeros(stats.mu.dim())
            };
            Some(sample_style(&stats, &eps))
        }
        None => None,
    };

    let (n_w, n_p) = (model.config.window, model.config.prev_window);
    let n_windows = n_total.div_ceil(n_w);
    let mut padded = Array2::zeros((n_windows * n_w, model.config.d_audio));
    padded.slice_mut(s![..n_total, ..]).assign(audio);

    let mut motion = Array2::zeros((n_windows * n_w, model.config.d_motion));
    let mut alpha: Option<Array2<T>> = None;
    for w in 0..n_windows {
        let start = w * n_w;
        let mut bundle = ConditionBundle::new(padded.slice(s![start..start + n_w, ..]).to_owned());
        bundle.style = style_code.clone();
        if w > 0 {
            bundle.prev_motion = Some(motion.slice(s![start - n_p..start, ..]).to_owned());
            bundle.prev_audio = Some(padded.slice(s![start - n_p..start, ..]).to_owned());
        }
        let sample = sample_window_traced(model, &bundle, scales, rng)?;
        motion
            .slice_mut(s![start..start + n_w, ..])
            .assign(&sample.motion);
        if let Some(a) = sample.final_alpha {
            let all = alpha.get_or_insert_with(|| Array2::zeros((n_windows * n_w, a.ncols())));
            all.slice_mut(s![start..start + n_w, ..]).assign(&a);
        }
    }
    Ok(Generation {
        motion: motion.slice(s![..n_total, ..]).to_owned(),
        alpha: alpha.map(|a| a.slice(s![..n_total, ..]).to_owned()),
    })
}

/// [`generate_traced`] without the diagnostics.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    audio: &Array2<T>,
    style_clip: Option<&Array2<T>>,
    scales: &CfgScales,
    stochastic_style: bool,
    rng: &mut R,
) -> Result<Array2<T>> {
    Ok(generate_traced(model, audio, style_clip, scales, stochastic_style, rng)?.motion)
}
