//! Full model: configuration, parameter set, and checkpoint round-trip.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_features::DEFAULT_PROJECTION_SEED;
use crate::conditioning::ConditionBundle;
use crate::denoiser::{Denoiser, DenoiserInputs, DenoiserOutput};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Graph, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::style_basis::StyleBasisDecoder;
use crate::style_encoder::{StyleEncoder, StyleStats};
use crate::tensor_io::Archive;

/// Architecture and diffusion hyperparameters. Serialized into every
/// checkpoint so a saved model rebuilds itself without external context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_motion: usize,
    pub d_audio: usize,
    pub d_style: usize,
    pub hidden: usize,
    pub denoiser_layers: usize,
    pub denoiser_heads: usize,
    pub style_layers: usize,
    pub style_heads: usize,
    pub ffn_mult: usize,
    pub basis_k: usize,
    pub basis_hidden: usize,
    pub window: usize,
    pub prev_window: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub max_style_frames: usize,
    pub style_pos_enc: bool,
    /// Seed of the fixed random projection turning mel energies into audio
    /// features; baked into the config so generation matches training.
    pub audio_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_motion: 67,
            d_audio: 512,
            d_style: 128,
            hidden: 512,
            denoiser_layers: 8,
            denoiser_heads: 8,
            style_layers: 4,
            style_heads: 4,
            ffn_mult: 4,
            basis_k: 4,
            basis_hidden: 256,
            window: 100,
            prev_window: 10,
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            max_style_frames: 1000,
            style_pos_enc: true,
            audio_seed: DEFAULT_PROJECTION_SEED,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_motion", self.d_motion),
            ("d_audio", self.d_audio),
            ("d_style", self.d_style),
            ("hidden", self.hidden),
            ("denoiser_layers", self.denoiser_layers),
            ("denoiser_heads", self.denoiser_heads),
            ("style_layers", self.style_layers),
            ("style_heads", self.style_heads),
            ("ffn_mult", self.ffn_mult),
            ("window", self.window),
            ("prev_window", self.prev_window),
            ("t_steps", self.t_steps),
            ("max_style_frames", self.max_style_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.basis_k > 0 && self.basis_hidden == 0 {
            return Err(Error::BadConfig(
                "basis_hidden must be positive when basis_k > 0".into(),
            ));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::BadConfig(
                "hidden must be even for sinusoidal positions".into(),
            ));
        }
        if !self.hidden.is_multiple_of(self.denoiser_heads)
            || !self.hidden.is_multiple_of(self.style_heads)
        {
            return Err(Error::BadConfig(
                "hidden must be divisible by the head counts".into(),
            ));
        }
        if self.prev_window > self.window {
            return Err(Error::BadConfig(
                "prev_window cannot exceed window (context comes from one previous window)".into(),
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::BadConfig(
                "need 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        Ok(())
    }
}

/// The complete style-conditioned motion diffusion model.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub schedule: NoiseSchedule<T>,
    pub style_encoder: StyleEncoder,
    pub basis: StyleBasisDecoder,
    pub denoiser: Denoiser,
    null_style: ParamId,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Construction order is fixed so a
    /// given seed always produces the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.t_steps, config.beta_start, config.beta_end)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let style_encoder = StyleEncoder::new(
            &mut params,
            &mut rng,
            config.d_motion,
            config.hidden,
            config.style_layers,
            config.style_heads,
            config.ffn_mult,
            config.d_style,
            config.max_style_frames,
            config.style_pos_enc,
        );
        let basis = StyleBasisDecoder::new(
            &mut params,
            &mut rng,
            config.basis_k,
            config.d_style,
            config.basis_hidden,
            config.d_motion,
        );
        let denoiser = Denoiser::new(
            &mut params,
            &mut rng,
            config.d_motion,
            config.d_audio,
            config.d_style,
            config.hidden,
            config.denoiser_layers,
            config.denoiser_heads,
            config.ffn_mult,
            config.basis_k,
            config.window,
            config.prev_window,
            config.t_steps,
        );
        let null_style = params.add(
            "cond.null_style",
            normal_init(&mut rng, 1, config.d_style, 0.02),
        );
        Ok(Self {
            config,
            params,
            schedule,
            style_encoder,
            basis,
            denoiser,
            null_style,
        })
    }

    pub fn null_style_id(&self) -> ParamId {
        self.null_style
    }

    /// Current value of the learned null style code (`1 x d_style`).
    pub fn null_style_code(&self) -> Array2<T> {
        self.params.get(self.null_style).clone()
    }

    pub fn encode_style(&self, clip: &Array2<T>) -> Result<StyleStats<T>> {
        self.style_encoder.encode_arrays(&self.params, clip)
    }

    pub fn decode_basis(&self, s: &Array2<T>) -> Result<Option<Array2<T>>> {
        self.basis.decode_arrays(&self.params, s)
    }

    /// The style code a bundle resolves to: its carried code, or the learned
    /// null code when absent or dropped.
    pub fn resolve_style(&self, bundle: &ConditionBundle<T>) -> Array2<T> {
        match bundle.effective_style() {
            Some(s) => s.clone(),
            None => self.null_style_code(),
        }
    }

    /// Array-level denoiser call for inference: builds a throwaway graph,
    /// realizing dropped conditions as the learned null embeddings.
    pub fn predict(
        &self,
        x_t: &Array2<T>,
        t: usize,
        bundle: &ConditionBundle<T>,
    ) -> Result<DenoiserOutput<T>> {
        let mut g = Graph::new(&self.params);
        let x_t = g.constant(x_t.clone());
        let audio = if bundle.drop_audio {
            None
        } else {
            Some(g.constant(bundle.audio.clone()))
        };
        let prev_audio = match (&bundle.prev_audio, bundle.drop_audio) {
            (Some(a), false) => Some(g.constant(a.clone())),
            _ => None,
        };
        let prev_motion = bundle.prev_motion.as_ref().map(|m| g.constant(m.clone()));
        let style = match bundle.effective_style() {
            Some(s) => g.constant(s.clone()),
            None => g.p(self.null_style),
        };
        let out = self.denoiser.predict(
            &mut g,
            &DenoiserInputs {
                x_t,
                audio,
                prev_audio,
                prev_motion,
                style,
                t,
            },
        )?;
        Ok(DenoiserOutput {
            delta_x: g.tape.value(out.delta_x).clone(),
            alpha: out.alpha.map(|a| g.tape.value(a).clone()),
        })
    }

    /// Serializes config and parameters into one archive file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        let config = serde_json::to_vec_pretty(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
        ar.insert_bytes("config.json", config);
        for (_, name, value) in self.params.iter() {
            ar.insert_matrix(&format!("param/{name}"), value);
        }
        ar.write(path)
    }

    /// Restores a model from [`Model::save`] output. The parameter list must
    /// match the config-derived architecture exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::read(path)?;
        let config_bytes = ar.bytes("config.json").ok_or_else(|| {
            Error::Checkpoint(format!("{}: no config.json entry", path.display()))
        })?;
        let config: ModelConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: bad config.json: {e}", path.display())))?;
        let mut model = Self::new(config, 0)?;
        let mut expected = 0usize;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let key = format!("param/{name}");
            let stored: Array2<T> = ar
                .matrix(&key)
                .map_err(|_| Error::Checkpoint(format!("missing or corrupt parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if stored.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.dim(),
                    slot.dim()
                )));
            }
            *slot = stored;
            expected += 1;
        }
        let on_disk = ar.names().filter(|n| n.starts_with("param/")).count();
        if on_disk != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {on_disk} parameters, architecture defines {expected}"
            )));
        }
        Ok(model)
    }
}
