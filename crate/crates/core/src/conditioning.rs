//! Window construction and condition handling.
//!
//! Training cuts each clip into a pair of adjacent fixed-length windows so
//! the model learns both the start-of-sequence case (window a, learned start
//! features) and the continuation case (window b, conditioned on a's tail).
//! Short clips are zero-padded with a validity mask; losses and style
//! sources must never read padded frames.
//!
//! Classifier-free guidance training drops the audio and style conditions
//! independently at random, flagging the bundle so the model substitutes its
//! learned null embeddings.

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One fixed-length window with a per-frame validity mask. Padded frames are
/// zero and flagged invalid; validity is always a prefix.
#[derive(Debug, Clone)]
pub struct Window<T: Scalar> {
    pub audio: Array2<T>,
    pub motion: Array2<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Window<T> {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// The valid (unpadded) motion rows.
    pub fn valid_motion(&self) -> Array2<T> {
        self.motion.slice(s![..self.n_valid(), ..]).to_owned()
    }
}

/// Two adjacent non-overlapping windows cut from the front of a clip.
#[derive(Debug, Clone)]
pub struct WindowPair<T: Scalar> {
    pub a: Window<T>,
    pub b: Window<T>,
}

fn cut_window<T: Scalar>(
    audio: &Array2<T>,
    motion: &Array2<T>,
    start: usize,
    len: usize,
) -> Window<T> {
    let total = motion.nrows();
    let mut a = Array2::zeros((len, audio.ncols()));
    let mut m = Array2::zeros((len, motion.ncols()));
    let avail = total.saturating_sub(start).min(len);
    if avail > 0 {
        a.slice_mut(s![..avail, ..])
            .assign(&audio.slice(s![start..start + avail, ..]));
        m.slice_mut(s![..avail, ..])
            .assign(&motion.slice(s![start..start + avail, ..]));
    }
    let valid = (0..len).map(|i| i < avail).collect();
    Window {
        audio: a,
        motion: m,
        valid,
    }
}

/// Cuts the first two windows of `window` frames from aligned audio features
/// and motion. Frames past the end of the clip are zero-padded and masked.
pub fn make_window_pair<T: Scalar>(
    audio: &Array2<T>,
    motion: &Array2<T>,
    window: usize,
) -> Result<WindowPair<T>> {
    if audio.nrows() != motion.nrows() {
        return Err(Error::shape(
            "window pair frames",
            motion.nrows(),
            audio.nrows(),
        ));
    }
    if motion.nrows() == 0 {
        return Err(Error::EmptyInput("clip"));
    }
    if window == 0 {
        return Err(Error::InvalidArgument(
            "window length must be positive".into(),
        ));
    }
    Ok(WindowPair {
        a: cut_window(audio, motion, 0, window),
        b: cut_window(audio, motion, window, window),
    })
}

/// Which window of a pair is being denoised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSlot {
    A,
    B,
}

/// Where the style reference comes from relative to the target window: its
/// sibling window (cross) or the target window itself (own).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StylePairing {
    Cross,
    Own,
}

/// Ground-truth motion rows to encode as the style reference for `target`.
/// Only valid frames are returned; a fully padded source is an error so the
/// caller can fall back to the null style.
pub fn style_clip_for<T: Scalar>(
    pair: &WindowPair<T>,
    target: WindowSlot,
    pairing: StylePairing,
) -> Result<Array2<T>> {
    let source = match (target, pairing) {
        (WindowSlot::A, StylePairing::Own) | (WindowSlot::B, StylePairing::Cross) => &pair.a,
        (WindowSlot::B, StylePairing::Own) | (WindowSlot::A, StylePairing::Cross) => &pair.b,
    };
    if source.n_valid() == 0 {
        return Err(Error::StyleSourceEmpty);
    }
    Ok(source.valid_motion())
}

/// Conditions for denoising one window. `None` for `prev_*` means the first
/// window of a sequence (learned start features); `None` for `style` means
/// no style reference. The drop flags record classifier-free guidance
/// dropout: a dropped condition is replaced by its learned null embedding at
/// prediction time regardless of the data carried here.
#[derive(Debug, Clone)]
pub struct ConditionBundle<T: Scalar> {
    pub audio: Array2<T>,
    pub prev_audio: Option<Array2<T>>,
    pub prev_motion: Option<Array2<T>>,
    pub style: Option<Array2<T>>,
    pub drop_audio: bool,
    pub drop_style: bool,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn new(audio: Array2<T>) -> Self {
        Self {
            audio,
            prev_audio: None,
            prev_motion: None,
            style: None,
            drop_audio: false,
            drop_style: false,
        }
    }

    /// The style code in effect, accounting for dropout. `None` means the
    /// learned null style.
    pub fn effective_style(&self) -> Option<&Array2<T>> {
        if self.drop_style {
            None
        } else {
            self.style.as_ref()
        }
    }

    pub fn with_drop_audio(mut self) -> Self {
        self.drop_audio = true;
        self
    }

    pub fn with_drop_style(mut self) -> Self {
        self.drop_style = true;
        self
    }
}

/// Draws independent drop decisions for (audio, style), each with
/// probability `p`.
pub fn draw_condition_drops<R: Rng + ?Sized>(p: f64, rng: &mut R) -> (bool, bool) {
    assert!(
        (0.0..=1.0).contains(&p),
        "drop probability must be in [0, 1]"
    );
    (rng.random_bool(p), rng.random_bool(p))
}

/// Applies classifier-free guidance dropout: independently per condition,
/// with probability `p` the condition is flagged as dropped.
pub fn cfg_dropout<T: Scalar, R: Rng + ?Sized>(
    mut bundle: ConditionBundle<T>,
    p: f64,
    rng: &mut R,
) -> ConditionBundle<T> {
    let (drop_audio, drop_style) = draw_condition_drops(p, rng);
    bundle.drop_audio |= drop_audio;
    bundle.drop_style |= drop_style;
    bundle
}

/// Draws the cross/own style pairing with the given probability of cross.
pub fn draw_style_pairing<R: Rng + ?Sized>(cross_ratio: f64, rng: &mut R) -> StylePairing {
    assert!((0.0..=1.0).contains(&cross_ratio));
    if rng.random_bool(cross_ratio) {
        StylePairing::Cross
    } else {
        StylePairing::Own
    }
}
