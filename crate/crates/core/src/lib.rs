//! Style-controlled speech-driven facial motion generation.
//!
//! Generates sequences of facial motion parameters from speech audio with a
//! windowed conditional latent diffusion model. A variational style encoder
//! summarizes a reference motion window into a compact style code; a set of
//! learned style basis decoders turns that code into per-dimension motion
//! templates; the denoiser predicts mixing weights over those templates plus
//! a residual, which keeps the style signal explicit all the way to the
//! output. Long sequences are produced window by window, each window
//! conditioned on the tail of the previous one.
//!
//! The crate is generic over the scalar type (`f32` for training and
//! inference, `f64` for finite-difference gradient checks). [`Real`] is the
//! working precision used by the command-line tools.

pub mod audio_features;
pub mod autodiff;
pub mod conditioning;
pub mod data_pipeline;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod style_basis;
pub mod style_encoder;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision for training and inference binaries.
pub type Real = f32;

/// Precision used for finite-difference gradient checking.
pub type CheckReal = f64;
