//! End-to-end training: flat config, the per-batch optimization step, and
//! the loop with validation, early stopping, and checkpointing.
//!
//! Each batch element is a pair of adjacent windows and both windows are
//! trained: window a with the learned start context, window b with a's tail
//! as context. Style comes from the sibling or the target window itself
//! (cross/own, drawn per element); a fully padded style source falls back
//! to the learned null style. Velocity and smoothness losses run on the
//! context-prefixed sequence so the context boundary is penalized; the
//! simple loss covers only generated frames. One backward pass per step
//! spans the style encoder, basis decoder, and denoiser jointly.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_features;
use crate::autodiff::Var;
use crate::conditioning::{
    draw_condition_drops, draw_style_pairing, style_clip_for, Window, WindowPair, WindowSlot,
};
use crate::data_pipeline::ClipRecord;
use crate::denoiser::{compose_vars, DenoiserInputs};
use crate::error::{Error, Result};
use crate::losses::{
    tape_kl_loss, tape_simple_loss, tape_smoothness_loss, tape_velocity_loss, LossWeights,
};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, Graph, ParamGrads};
use crate::scalar::Scalar;

/// Training hyperparameters. Parsed from a flat `key = value` file; model
/// architecture keys use a `model_` prefix (for example `model_t_steps`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_iters: usize,
    pub lambda_simple: f64,
    pub lambda_vel: f64,
    pub lambda_smooth: f64,
    pub lambda_kl: f64,
    pub cfg_drop_p: f64,
    pub cross_ratio: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub train_ratio: f64,
    pub checkpoint_every: usize,
    pub val_every: usize,
    pub patience: usize,
    #[serde(skip)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 16,
            max_iters: 10_000,
            lambda_simple: 1.0,
            lambda_vel: 0.5,
            lambda_smooth: 5e-6,
            lambda_kl: 1e-6,
            cfg_drop_p: 0.1,
            cross_ratio: 0.5,
            seed: 0,
            split_seed: 0,
            train_ratio: 0.9,
            checkpoint_every: 1000,
            val_every: 1000,
            patience: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_simple: self.lambda_simple,
            lambda_vel: self.lambda_vel,
            lambda_smooth: self.lambda_smooth,
            lambda_kl: self.lambda_kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::BadConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("max_iters", self.max_iters),
            ("checkpoint_every", self.checkpoint_every),
            ("val_every", self.val_every),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        for (name, p) in [
            ("cfg_drop_p", self.cfg_drop_p),
            ("cross_ratio", self.cross_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::BadConfig(format!(
                "train_ratio = {} outside (0, 1]",
                self.train_ratio
            )));
        }
        self.weights().validate()?;
        self.model.validate()
    }

    /// Parses the flat config text. Unknown keys are rejected so typos fail
    /// loudly instead of silently training with defaults.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::BadConfig(format!("config parse: {e}")))?;
        let mut train_tbl = toml::Table::new();
        let mut model_tbl = toml::Table::new();
        for (k, v) in table {
            match k.strip_prefix("model_") {
                Some(rest) => model_tbl.insert(rest.to_string(), v),
                None => train_tbl.insert(k, v),
            };
        }
        let mut config: TrainConfig = train_tbl
            .try_into()
            .map_err(|e| Error::BadConfig(format!("config: {e}")))?;
        config.model = model_tbl
            .try_into()
            .map_err(|e| Error::BadConfig(format!("config (model_*): {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_str(&text)
    }
}

/// A clip with audio features already extracted at the model's width.
#[derive(Debug, Clone)]
pub struct LoadedClip<T: Scalar> {
    pub id: String,
    pub audio: Array2<T>,
    pub motion: Array2<T>,
}

/// Loads one manifest record relative to `base`, deriving audio features
/// from the waveform (or passing precomputed features through).
pub fn load_clip<T: Scalar>(
    base: &Path,
    record: &ClipRecord,
    model: &ModelConfig,
) -> Result<LoadedClip<T>> {
    let motion = crate::tensor_io::read_matrix::<T>(&base.join(&record.motion_path))?;
    if motion.dim() != (record.duration_frames, model.d_motion) {
        return Err(Error::shape(
            "clip motion",
            format!("{} x {}", record.duration_frames, model.d_motion),
            format!("{} x {}", motion.nrows(), motion.ncols()),
        ));
    }
    let audio = audio_features::load_audio_for_frames::<T>(
        &base.join(&record.audio_path),
        record.duration_frames,
        model.d_audio,
        model.audio_seed,
    )?;
    Ok(LoadedClip {
        id: record.id.clone(),
        audio,
        motion,
    })
}

/// Gradient L2 norms per parameter group after one step; all three model
/// components must receive gradient in a joint step.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradNorms {
    pub style_encoder: f64,
    pub basis: f64,
    pub denoiser: f64,
}

/// Scalar losses of one optimization step, averaged over trained windows.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: f64,
    pub simple: f64,
    pub vel: f64,
    pub smooth: f64,
    pub kl: f64,
    pub n_windows: usize,
    pub grad_norms: GradNorms,
}

/// Optimizer and step counter carried across steps.
pub struct TrainState<T: Scalar> {
    pub opt: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &Model<T>, lr: f64) -> Self {
        Self {
            opt: Adam::new(&model.params, T::cast(lr)),
            step: 0,
        }
    }
}

/// True when any adjacent valid pair exists at or after the velocity range
/// start, i.e. the velocity loss has at least one term.
fn has_velocity_terms(n_prev: usize, valid: &[bool]) -> bool {
    let start = n_prev.saturating_sub(1);
    (start..valid.len().saturating_sub(1)).any(|i| valid[i] && valid[i + 1])
}

/// True when any centered second difference lies fully in valid frames.
fn has_smoothness_terms(n_prev: usize, valid: &[bool]) -> bool {
    let start = n_prev.max(1);
    (start..valid.len().saturating_sub(1)).any(|c| valid[c - 1] && valid[c] && valid[c + 1])
}

struct WindowLossVars {
    simple: Var,
    vel: Option<Var>,
    smooth: Option<Var>,
    kl: Option<Var>,
}

/// Builds the in-graph losses for one (pair, slot) training element.
#[allow(clippy::too_many_arguments)]
fn build_window_losses<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    pair: &WindowPair<T>,
    slot: WindowSlot,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<WindowLossVars>> {
    let target: &Window<T> = match slot {
        WindowSlot::A => &pair.a,
        WindowSlot::B => &pair.b,
    };
    if target.n_valid() == 0 {
        return Ok(None);
    }
    let n_p = model.config.prev_window;
    let n_w = model.config.window;
    let d_style = model.config.d_style;

    // Style source; a padded-out sibling falls back to the null style.
    let pairing = draw_style_pairing(config.cross_ratio, rng);
    let style_clip = match style_clip_for(pair, slot, pairing) {
        Ok(clip) => Some(clip),
        Err(Error::StyleSourceEmpty) => None,
        Err(e) => return Err(e),
    };
    let (style_sample, kl) = match &style_clip {
        Some(clip) => {
            let stats = model.style_encoder.encode(g, clip)?;
            let kl = tape_kl_loss(&mut g.tape, stats.mu, stats.log_var);
            let eps = Array2::from_shape_fn((1, d_style), |_| T::standard_normal(rng));
            (Some(model.style_encoder.sample(g, stats, &eps)), Some(kl))
        }
        None => (None, None),
    };

    let (drop_audio, drop_style) = draw_condition_drops(config.cfg_drop_p, rng);
    let style = match (style_sample, drop_style) {
        (Some(s), false) => s,
        _ => g.p(model.null_style_id()),
    };
    let basis = model.basis.decode(g, style);

    // Diffuse the ground-truth window.
    let t = rng.random_range(1..=model.config.t_steps);
    let eps = Array2::from_shape_fn((n_w, model.config.d_motion), |_| T::standard_normal(rng));
    let x_t = model.schedule.q_sample(&target.motion, t, &eps)?;
    let x_t = g.constant(x_t);

    let audio = (!drop_audio).then(|| g.constant(target.audio.clone()));
    // Window b conditions on the ground-truth tail of window a.
    let (prev_motion_gt, prev_audio_gt) = match slot {
        WindowSlot::A => (None, None),
        WindowSlot::B => {
            let tail = |m: &Array2<T>| m.slice(ndarray::s![n_w - n_p.., ..]).to_owned();
            (Some(tail(&pair.a.motion)), Some(tail(&pair.a.audio)))
        }
    };
    let prev_motion = prev_motion_gt.as_ref().map(|m| g.constant(m.clone()));
    let prev_audio = match (&prev_audio_gt, drop_audio) {
        (Some(a), false) => Some(g.constant(a.clone())),
        _ => None,
    };

    let out = model.denoiser.predict(
        g,
        &DenoiserInputs {
            x_t,
            audio,
            prev_audio,
            prev_motion,
            style,
            t,
        },
    )?;
    let x0_hat = compose_vars(g, &out, basis);

    // Simple loss on generated frames only; temporal losses run on the
    // context-prefixed sequence so the boundary is included.
    let target_const = g.constant(target.motion.clone());
    let simple = tape_simple_loss(&mut g.tape, x0_hat, target_const, Some(&target.valid[..]))?;

    let (n_prev, pred_seq, gt_seq, seq_valid) = match (slot, &prev_motion_gt) {
        (WindowSlot::B, Some(prev)) => {
            let prev_c = g.constant(prev.clone());
            let pred = g.tape.concat_rows(prev_c, x0_hat);
            let gt = g.tape.concat_rows(prev_c, target_const);
            let mut valid = vec![true; n_p];
            valid.extend_from_slice(&target.valid);
            (n_p, pred, gt, valid)
        }
        _ => (0, x0_hat, target_const, target.valid.clone()),
    };
    let vel = has_velocity_terms(n_prev, &seq_valid)
        .then(|| tape_velocity_loss(&mut g.tape, gt_seq, pred_seq, n_prev, Some(&seq_valid[..])))
        .transpose()?;
    let smooth = has_smoothness_terms(n_prev, &seq_valid)
        .then(|| tape_smoothness_loss(&mut g.tape, pred_seq, n_prev, Some(&seq_valid[..])))
        .transpose()?;
    Ok(Some(WindowLossVars {
        simple,
        vel,
        smooth,
        kl,
    }))
}

fn group_norms<T: Scalar>(model: &Model<T>, grads: &ParamGrads<T>) -> GradNorms {
    GradNorms {
        style_encoder: grads.norm(model.params.ids_with_prefix("style_enc.")),
        basis: grads.norm(model.params.ids_with_prefix("style_basis.")),
        denoiser: grads.norm(model.params.ids_with_prefix("denoiser.")),
    }
}

/// Runs one optimization step over a batch of window pairs: builds every
/// window's losses on one tape, backpropagates the weighted mean, and
/// applies a single optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    batch: &[WindowPair<T>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let weights = config.weights();
    let mut g = Graph::new(&model.params);
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut n_windows = 0usize;
    for pair in batch {
        for slot in [WindowSlot::A, WindowSlot::B] {
            let Some(losses) = build_window_losses(model, &mut g, pair, slot, config, rng)? else {
                continue;
            };
            n_windows += 1;
            sums.0 += g.tape.scalar_value(losses.simple).as_f64();
            terms.push((losses.simple, weights.lambda_simple));
            if let Some(v) = losses.vel {
                sums.1 += g.tape.scalar_value(v).as_f64();
                terms.push((v, weights.lambda_vel));
            }
            if let Some(s) = losses.smooth {
                sums.2 += g.tape.scalar_value(s).as_f64();
                terms.push((s, weights.lambda_smooth));
            }
            if let Some(k) = losses.kl {
                sums.3 += g.tape.scalar_value(k).as_f64();
                terms.push((k, weights.lambda_kl));
            }
        }
    }
    if n_windows == 0 {
        return Err(Error::EmptyInput("batch contains no trainable windows"));
    }

    let mut total: Option<Var> = None;
    for (var, weight) in terms {
        let scaled = g.tape.scale(var, T::cast(weight / n_windows as f64));
        total = Some(match total {
            None => scaled,
            Some(acc) => g.tape.add(acc, scaled),
        });
    }
    let total = total.expect("at least one loss term");
    let total_value = g.tape.scalar_value(total).as_f64();
    let losses = StepLosses {
        total: total_value,
        simple: sums.0 / n_windows as f64,
        vel: sums.1 / n_windows as f64,
        smooth: sums.2 / n_windows as f64,
        kl: sums.3 / n_windows as f64,
        n_windows,
        grad_norms: GradNorms::default(),
    };
    if !total_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!(
                "total={total_value} simple={} vel={} smooth={} kl={}",
                losses.simple, losses.vel, losses.smooth, losses.kl
            ),
        });
    }
    let grads = g.backward_params(total);
    let norms = group_norms(model, &grads);
    drop(g);
    state.opt.update(&mut model.params, &grads);
    state.step += 1;
    Ok(StepLosses {
        grad_norms: norms,
        ..losses
    })
}

/// Forward-only loss over a clip set with a fixed noise seed, so successive
/// validation rounds are comparable.
pub fn evaluate_loss<T: Scalar>(
    model: &Model<T>,
    pairs: &[WindowPair<T>],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Dropout off for validation: measure the fully conditioned objective.
    let mut cfg = config.clone();
    cfg.cfg_drop_p = 0.0;
    let weights = config.weights();
    let mut total = 0.0f64;
    let mut n_windows = 0usize;
    for pair in pairs {
        let mut g = Graph::new(&model.params);
        for slot in [WindowSlot::A, WindowSlot::B] {
            let Some(losses) = build_window_losses(model, &mut g, pair, slot, &cfg, &mut rng)?
            else {
                continue;
            };
            n_windows += 1;
            total += weights.lambda_simple * g.tape.scalar_value(losses.simple).as_f64();
            if let Some(v) = losses.vel {
                total += weights.lambda_vel * g.tape.scalar_value(v).as_f64();
            }
            if let Some(s) = losses.smooth {
                total += weights.lambda_smooth * g.tape.scalar_value(s).as_f64();
            }
            if let Some(k) = losses.kl {
                total += weights.lambda_kl * g.tape.scalar_value(k).as_f64();
            }
        }
    }
    if n_windows == 0 {
        return Err(Error::EmptyInput(
            "validation set contains no trainable windows",
        ));
    }
    Ok(total / n_windows as f64)
}

/// Progress callbacks from the training loop.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step {
        step: usize,
        losses: &'a StepLosses,
    },
    Validation {
        step: usize,
        val_loss: f64,
        improved: bool,
    },
    Checkpoint {
        step: usize,
        path: &'a Path,
    },
    EarlyStop {
        step: usize,
        best_val: f64,
    },
}

/// Summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

/// Cuts every clip into its training window pair.
pub fn pairs_from_clips<T: Scalar>(
    clips: &[LoadedClip<T>],
    window: usize,
) -> Result<Vec<WindowPair<T>>> {
    clips
        .iter()
        .map(|c| crate::conditioning::make_window_pair(&c.audio, &c.motion, window))
        .collect()
}

/// Trains `model` on the given pairs, validating on `val_pairs` every
/// `val_every` steps with early stopping, and writing checkpoints under
/// `out_dir` (`latest.ckpt` at the cadence, `best.ckpt` on validation
/// improvement, `final.ckpt` at the end). Returns the path of the best
/// checkpoint (final when no validation ran).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_pairs: &[WindowPair<T>],
    val_pairs: &[WindowPair<T>],
    config: &TrainConfig,
    out_dir: &Path,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainReport> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = TrainState::new(model, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut next_index = |rng: &mut ChaCha8Rng| {
        if cursor >= order.len() {
            order = (0..train_pairs.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        cursor += 1;
        order[cursor - 1]
    };

    let mut best_val: Option<f64> = None;
    let mut rounds_since_best = 0usize;
    let mut stopped_early = false;
    let mut last_loss = f64::NAN;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let latest_path = out_dir.join("latest.ckpt");

    while state.step < config.max_iters {
        let batch: Vec<WindowPair<T>> = (0..config.batch)
            .map(|_| train_pairs[next_index(&mut rng)].clone())
            .collect();
        let losses = match train_step(model, &mut state, &batch, config, &mut rng) {
            Ok(l) => l,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                // Preserve the diverged state for inspection.
                let _ = model.save(&out_dir.join("nan_dump.ckpt"));
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        last_loss = losses.total;
        on_event(&TrainEvent::Step {
            step: state.step,
            losses: &losses,
        });

        if state.step.is_multiple_of(config.checkpoint_every) {
            model.save(&latest_path)?;
            on_event(&TrainEvent::Checkpoint {
                step: state.step,
                path: &latest_path,
            });
        }
        if !val_pairs.is_empty() && state.step.is_multiple_of(config.val_every) {
            let val_loss = evaluate_loss(model, val_pairs, config, config.seed ^ 0x5A17)?;
            let improved = best_val.is_none_or(|b| val_loss < b);
            on_event(&TrainEvent::Validation {
                step: state.step,
                val_loss,
                improved,
            });
            if improved {
                best_val = Some(val_loss);
                rounds_since_best = 0;
                model.save(&best_path)?;
            } else {
                rounds_since_best += 1;
                if rounds_since_best >= config.patience {
                    stopped_early = true;
                    on_event(&TrainEvent::EarlyStop {
                        step: state.step,
                        best_val: best_val.unwrap_or(f64::NAN),
                    });
                    break;
                }
            }
        }
    }
    model.save(&final_path)?;
    let checkpoint = if best_path.exists() {
        best_path
    } else {
        final_path
    };
    Ok(TrainReport {
        steps_run: state.step,
        final_loss: last_loss,
        best_val,
        stopped_early,
        checkpoint,
    })
}
