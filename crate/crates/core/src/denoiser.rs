//! Conditional denoiser: predicts the clean motion window from a noisy one.
//!
//! Token layout for self-attention, using one shared positional table so
//! previous-window and current-window tokens line up with their audio:
//!
//! ```text
//! position:  0       1 .. N_p          N_p+1 .. N_p+N
//! self:      style   prev motion       noisy motion
//! memory:            prev audio        audio
//! ```
//!
//! Every self token also receives an embedding of the diffusion step `t`.
//! Cross-attention reads the audio memory. Two linear heads map the last `N`
//! output tokens to a direct prediction `delta_x` and (when the style basis
//! is enabled) mixing weights `alpha` over the basis vectors; `alpha` is left
//! unconstrained so training decides how much basis to blend in.
//!
//! Dropped or absent conditions are realized as learned embeddings rather
//! than zeros, so "no condition" is itself trainable: a start-of-sequence
//! motion frame for the first window and a null audio frame substituted for
//! every audio row when audio is dropped.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    normal_init, sinusoid_rows, sinusoid_table, DecoderLayer, Graph, LayerNorm, Linear, ParamId,
    ParamSet,
};
use crate::scalar::Scalar;

/// Head outputs for one window, as arrays. `alpha` is `None` when the basis
/// is disabled (`K = 0`).
#[derive(Debug, Clone)]
pub struct DenoiserOutput<T: Scalar> {
    pub delta_x: Array2<T>,
    pub alpha: Option<Array2<T>>,
}

/// Head outputs on the tape, for in-graph training.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserOutputVars {
    pub delta_x: Var,
    pub alpha: Option<Var>,
}

/// Conditioning handles for one denoiser call. `None` fields select the
/// corresponding learned embedding: start-of-sequence motion for
/// `prev_motion`, the null audio frame for `audio` / `prev_audio`. The style
/// code is always explicit; callers pass the learned null style code when
/// style is dropped.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInputs {
    pub x_t: Var,
    pub audio: Option<Var>,
    pub prev_audio: Option<Var>,
    pub prev_motion: Option<Var>,
    pub style: Var,
    pub t: usize,
}

pub struct Denoiser {
    motion_proj: Linear,
    audio_proj: Linear,
    style_proj: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    start_motion: ParamId,
    null_audio: ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    head_delta: Linear,
    head_alpha: Option<Linear>,
    d_motion: usize,
    d_audio: usize,
    d_style: usize,
    hidden: usize,
    window: usize,
    prev_window: usize,
    t_steps: usize,
}

impl Denoiser {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        d_motion: usize,
        d_audio: usize,
        d_style: usize,
        hidden: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_mult: usize,
        basis_k: usize,
        window: usize,
        prev_window: usize,
        t_steps: usize,
    ) -> Self {
        let name = "denoiser";
        let motion_proj = Linear::new(ps, rng, &format!("{name}.motion_proj"), d_motion, hidden);
        let audio_proj = Linear::new(ps, rng, &format!("{name}.audio_proj"), d_audio, hidden);
        let style_proj = Linear::new(ps, rng, &format!("{name}.style_proj"), d_style, hidden);
        let time_fc1 = Linear::new(ps, rng, &format!("{name}.time_fc1"), hidden, hidden);
        let time_fc2 = Linear::new(ps, rng, &format!("{name}.time_fc2"), hidden, hidden);
        let start_motion = ps.add(
            &format!("{name}.start_motion"),
            normal_init(rng, 1, d_motion, 0.02),
        );
        let null_audio = ps.add(
            &format!("{name}.null_audio"),
            normal_init(rng, 1, d_audio, 0.02),
        );
        let layers = (0..n_layers)
            .map(|i| {
                DecoderLayer::new(
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
        let head_delta = Linear::new(ps, rng, &format!("{name}.head_delta"), hidden, d_motion);
        let head_alpha = (basis_k > 0)
            .then(|| Linear::new(ps, rng, &format!("{name}.head_alpha"), hidden, basis_k));
        Self {
            motion_proj,
            audio_proj,
            style_proj,
            time_fc1,
            time_fc2,
            start_motion,
            null_audio,
            layers,
            final_ln,
            head_delta,
            head_alpha,
            d_motion,
            d_audio,
            d_style,
            hidden,
            window,
            prev_window,
            t_steps,
        }
    }

    pub fn start_motion_id(&self) -> ParamId {
        self.start_motion
    }

    pub fn null_audio_id(&self) -> ParamId {
        self.null_audio
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn prev_window(&self) -> usize {
        self.prev_window
    }

    /// Embedding of the diffusion step: sinusoid at position `t` passed
    /// through a two-layer MLP. Returns a `1 x hidden` row.
    pub fn time_embedding<T: Scalar>(&self, g: &mut Graph<T>, t: usize) -> Var {
        let sin = g.constant(sinusoid_rows::<T>(&[t], self.hidden));
        let h = self.time_fc1.forward(g, sin);
        let h = g.tape.gelu(h);
        self.time_fc2.forward(g, h)
    }

    fn check_var(
        &self,
        g: &Graph<impl Scalar>,
        v: Var,
        rows: usize,
        cols: usize,
        what: &'static str,
    ) -> Result<()> {
        let (r, c) = g.tape.shape(v);
        if (r, c) != (rows, cols) {
            return Err(Error::shape(
                what,
                format!("{rows} x {cols}"),
                format!("{r} x {c}"),
            ));
        }
        Ok(())
    }

    /// Runs the denoiser for one window at diffusion step `t`.
    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &DenoiserInputs,
    ) -> Result<DenoiserOutputVars> {
        if inputs.t < 1 || inputs.t > self.t_steps {
            return Err(Error::StepOutOfRange {
                t: inputs.t,
                t_max: self.t_steps,
            });
        }
        let (n, n_p) = (self.window, self.prev_window);
        self.check_var(g, inputs.x_t, n, self.d_motion, "denoiser x_t")?;
        if let Some(a) = inputs.audio {
            self.check_var(g, a, n, self.d_audio, "denoiser audio")?;
        }
        if let Some(a) = inputs.prev_audio {
            self.check_var(g, a, n_p, self.d_audio, "denoiser prev_audio")?;
        }
        if let Some(m) = inputs.prev_motion {
            self.check_var(g, m, n_p, self.d_motion, "denoiser prev_motion")?;
        }
        self.check_var(g, inputs.style, 1, self.d_style, "denoiser style")?;

        // Self tokens: style, previous motion, noisy motion.
        let style_tok = self.style_proj.forward(g, inputs.style);
        let prev_m = match inputs.prev_motion {
            Some(m) => m,
            None => {
                let start = g.p(self.start_motion);
                g.tape.repeat_row(start, n_p)
            }
        };
        let prev_tok = self.motion_proj.forward(g, prev_m);
        let noisy_tok = self.motion_proj.forward(g, inputs.x_t);
        let toks = g.tape.concat_rows(style_tok, prev_tok);
        let toks = g.tape.concat_rows(toks, noisy_tok);

        // One positional table covers positions 0..=n_p+n; memory rows reuse
        // positions 1.. so each audio frame shares its motion frame's slot.
        let table = sinusoid_table::<T>(1 + n_p + n, self.hidden);
        let pos_self = g.constant(table.clone());
        let pos_mem = g.constant(table.slice(ndarray::s![1.., ..]).to_owned());
        let toks = g.tape.add(toks, pos_self);
        let temb = self.time_embedding(g, inputs.t);
        let mut x = g.tape.add_row(toks, temb);

        // Audio memory; dropped audio becomes the learned null frame.
        let prev_a = match inputs.prev_audio {
            Some(a) => a,
            None => {
                let null = g.p(self.null_audio);
                g.tape.repeat_row(null, n_p)
            }
        };
        let cur_a = match inputs.audio {
            Some(a) => a,
            None => {
                let null = g.p(self.null_audio);
                g.tape.repeat_row(null, n)
            }
        };
        let mem_frames = g.tape.concat_rows(prev_a, cur_a);
        let mem = self.audio_proj.forward(g, mem_frames);
        let mem = g.tape.add(mem, pos_mem);

        for layer in &self.layers {
            x = layer.forward(g, x, mem);
        }
        let x = self.final_ln.forward(g, x);
        let out_toks = g.tape.slice_rows(x, 1 + n_p, 1 + n_p + n);
        let delta_x = self.head_delta.forward(g, out_toks);
        let alpha = self.head_alpha.as_ref().map(|h| h.forward(g, out_toks));
        Ok(DenoiserOutputVars { delta_x, alpha })
    }
}

/// Composes the final clean-motion prediction: `delta_x + alpha . basis`.
/// With the basis disabled (both `alpha` and `basis` absent) the direct
/// prediction stands alone.
pub fn compose<T: Scalar>(out: &DenoiserOutput<T>, basis: Option<&Array2<T>>) -> Result<Array2<T>> {
    match (&out.alpha, basis) {
        (Some(alpha), Some(basis)) => {
            if alpha.nrows() != out.delta_x.nrows() {
                return Err(Error::shape(
                    "compose alpha rows",
                    out.delta_x.nrows(),
                    alpha.nrows(),
                ));
            }
            if alpha.ncols() != basis.nrows() {
                return Err(Error::shape(
                    "compose basis count",
                    alpha.ncols(),
                    basis.nrows(),
                ));
            }
            if basis.ncols() != out.delta_x.ncols() {
                return Err(Error::shape(
                    "compose motion width",
                    out.delta_x.ncols(),
                    basis.ncols(),
                ));
            }
            Ok(&out.delta_x + &alpha.dot(basis))
        }
        (None, None) => Ok(out.delta_x.clone()),
        (Some(_), None) => Err(Error::InvalidArgument(
            "denoiser produced alpha but no basis was supplied".into(),
        )),
        (None, Some(_)) => Err(Error::InvalidArgument(
            "basis supplied but the denoiser has no alpha head".into(),
        )),
    }
}

/// Tape version of [`compose`] for training.
pub fn compose_vars<T: Scalar>(
    g: &mut Graph<T>,
    out: &DenoiserOutputVars,
    basis: Option<Var>,
) -> Var {
    match (out.alpha, basis) {
        (Some(alpha), Some(basis)) => {
            let mix = g.tape.matmul(alpha, basis);
            g.tape.add(out.delta_x, mix)
        }
        (None, None) => out.delta_x,
        _ => panic!("alpha head and basis must be enabled together"),
    }
}
