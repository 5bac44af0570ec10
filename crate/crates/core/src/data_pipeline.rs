//! Dataset curation and synthetic data with known style ground truth.
//!
//! Curation is manifest-driven: one JSON record per line describing a clip's
//! tags and head-pose track; filtering keeps clean frontal speech-like clips.
//!
//! The synthetic generator produces clips whose style is fully known: a
//! per-channel offset (persistent expression), a gain scaling how strongly
//! the mouth follows the audio envelope (articulation), and an upper-face
//! bias. Channel layout: `0..16` mouth, `16..41` upper face, the rest
//! auxiliary. Because the envelope is reproducible from the clip seed, both
//! parameters can be recovered from motion alone — channel means give the
//! offsets, regressing mouth channels on the envelope gives the gain — which
//! is what makes style transfer measurable instead of a matter of taste.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_features::SAMPLES_PER_FRAME;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_io;

/// Channel ranges of the synthetic motion layout.
pub const MOUTH_CHANNELS: Range<usize> = 0..16;
pub const UPPER_CHANNELS: Range<usize> = 16..41;

/// One curated clip in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub duration_frames: usize,
    pub tags: BTreeSet<String>,
    pub yaw: Vec<f64>,
    pub pitch: Vec<f64>,
    pub audio_path: String,
    pub motion_path: String,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if self.duration_frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip {} has zero duration",
                self.id
            )));
        }
        if self.yaw.len() != self.duration_frames || self.pitch.len() != self.duration_frames {
            return Err(Error::InvalidArgument(format!(
                "clip {}: angle tracks must cover every frame ({} yaw, {} pitch, {} frames)",
                self.id,
                self.yaw.len(),
                self.pitch.len(),
                self.duration_frames
            )));
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::BadManifest {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::BadManifest {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Curation rules. A record survives when it carries at least one allowed
/// tag, none of the blocked ones, never turns past the angle limit, and has
/// no frame-to-frame head-pose jump above the jump limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub allow_tags: BTreeSet<String>,
    pub block_tags: BTreeSet<String>,
    pub max_angle_deg: f64,
    pub max_jump_deg: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        let set = |names: &[&str]| names.iter().map(|s| s.to_string()).collect();
        Self {
            allow_tags: set(&["speech", "singing", "whispering", "reading"]),
            block_tags: set(&["masked", "eating"]),
            max_angle_deg: 45.0,
            max_jump_deg: 15.0,
        }
    }
}

fn max_abs(series: &[f64]) -> f64 {
    series.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn max_jump(series: &[f64]) -> f64 {
    series
        .windows(2)
        .fold(0.0, |m, w| m.max((w[1] - w[0]).abs()))
}

/// Applies [`FilterRules`]; order-preserving and idempotent.
pub fn filter_manifest(records: &[ClipRecord], rules: &FilterRules) -> Result<Vec<ClipRecord>> {
    let mut kept = Vec::new();
    for r in records {
        r.validate()?;
        let allowed = r.tags.iter().any(|t| rules.allow_tags.contains(t));
        let blocked = r.tags.iter().any(|t| rules.block_tags.contains(t));
        let angle_ok = max_abs(&r.yaw).max(max_abs(&r.pitch)) <= rules.max_angle_deg;
        let jump_ok = max_jump(&r.yaw).max(max_jump(&r.pitch)) <= rules.max_jump_deg;
        if allowed && !blocked && angle_ok && jump_ok {
            kept.push(r.clone());
        }
    }
    Ok(kept)
}

/// Seeded shuffle then ratio split. Together the halves cover the input
/// exactly; the same seed always yields the same split.
pub fn split_train_val(
    records: &[ClipRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} outside [0, 1]"
        )));
    }
    let mut shuffled: Vec<ClipRecord> = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates; kept explicit so the draw order is pinned by this crate
    // rather than by a helper's implementation details.
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let n_train = (shuffled.len() as f64 * ratio).round() as usize;
    let val = shuffled.split_off(n_train.min(shuffled.len()));
    Ok((shuffled, val))
}

/// Ground-truth style of a synthetic clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    /// Persistent per-channel expression bias, length `d_motion`.
    pub offset: Vec<f64>,
    /// Articulation amplitude: how strongly mouth channels follow the
    /// envelope.
    pub gain: f64,
    /// Upper-face bias on top of the offset.
    pub brow: f64,
}

/// Sidecar entry tying a generated clip to its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleRecord {
    pub id: String,
    pub style: SyntheticStyle,
    pub seed: u64,
    pub f0: f64,
}

/// Smoothed seeded noise in [0, 1]; the articulation driver. Reproducible
/// from `(length, seed)` alone so oracles can regenerate it.
pub fn envelope(length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e: Vec<f64> = (0..length).map(|_| rng.random::<f64>()).collect();
    // Two box-filter passes (window 9, clamped at the edges).
    for _ in 0..2 {
        let src = e.clone();
        for (i, out) in e.iter_mut().enumerate() {
            let lo = i.saturating_sub(4);
            let hi = (i + 4).min(length - 1);
            *out = src[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    let (min, max) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max - min < 1e-12 {
        return vec![0.5; length];
    }
    e.iter().map(|v| (v - min) / (max - min)).collect()
}

/// One generated clip: the audio-proxy waveform, aligned motion, and the
/// tone frequency used (recorded for completeness; style lives elsewhere).
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub waveform: Vec<f64>,
    pub motion: Array2<f64>,
    pub f0: f64,
}

/// Generates one clip. Mouth channels follow `gain * envelope`, upper
/// channels carry `brow` plus a slow oscillation, everything rides on the
/// per-channel offset, and the waveform is a tone whose amplitude follows
/// the envelope.
pub fn gen_synthetic_clip(
    style: &SyntheticStyle,
    d_motion: usize,
    length: usize,
    seed: u64,
) -> Result<SyntheticClip> {
    if length == 0 {
        return Err(Error::InvalidArgument(
            "synthetic clip length must be positive".into(),
        ));
    }
    if style.offset.len() != d_motion {
        return Err(Error::shape(
            "synthetic offset",
            d_motion,
            style.offset.len(),
        ));
    }
    let e = envelope(length, seed);
    // Separate stream for everything that is not the envelope, so the
    // envelope stays exactly reproducible from the seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15E_A5E0_F00D);
    let f0 = rng.random_range(200.0..1000.0);
    let noise_sd = 0.01;
    let mouth = MOUTH_CHANNELS.start..MOUTH_CHANNELS.end.min(d_motion);
    let upper = UPPER_CHANNELS.start.min(d_motion)..UPPER_CHANNELS.end.min(d_motion);
    let phases: Vec<f64> = (0..d_motion)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut motion = Array2::zeros((length, d_motion));
    for t in 0..length {
        for c in 0..d_motion {
            let noise = noise_sd * f64::standard_normal(&mut rng);
            let base = style.offset[c]
                + if mouth.contains(&c) {
                    style.gain * e[t]
                } else if upper.contains(&c) {
                    // ~5 s period at 25 fps: slow enough to read as
                    // expression drift, not articulation.
                    style.brow + 0.05 * (std::f64::consts::TAU * t as f64 / 125.0 + phases[c]).sin()
                } else {
                    0.0
                };
            motion[[t, c]] = base + noise;
        }
    }
    let n_samples = length * SAMPLES_PER_FRAME;
    let waveform = (0..n_samples)
        .map(|s| {
            let pos = s as f64 / SAMPLES_PER_FRAME as f64;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let i1 = (i0 + 1).min(length - 1);
            let amp = e[i0] * (1.0 - frac) + e[i1] * frac;
            amp * (std::f64::consts::TAU * f0 * s as f64 / 8000.0).sin()
        })
        .collect();
    Ok(SyntheticClip {
        waveform,
        motion,
        f0,
    })
}

/// Style parameters read back from motion: per-channel temporal means and
/// the mouth-on-envelope regression slope.
#[derive(Debug, Clone)]
pub struct RecoveredStyle {
    pub channel_means: Vec<f64>,
    pub gain: f64,
}

/// Recovers style statistics from a motion sequence and its (regenerated)
/// envelope. Auxiliary channel means estimate the offsets directly; upper
/// channel means estimate offset + brow; the slope estimates the gain.
pub fn recover_style(motion: &Array2<f64>, env: &[f64]) -> Result<RecoveredStyle> {
    let (n, d) = motion.dim();
    if n == 0 {
        return Err(Error::EmptyInput("motion"));
    }
    if env.len() != n {
        return Err(Error::shape("envelope length", n, env.len()));
    }
    let channel_means: Vec<f64> = (0..d)
        .map(|c| motion.column(c).iter().sum::<f64>() / n as f64)
        .collect();
    let e_mean = env.iter().sum::<f64>() / n as f64;
    let e_var = env.iter().map(|v| (v - e_mean) * (v - e_mean)).sum::<f64>() / n as f64;
    if e_var < 1e-12 {
        return Err(Error::InvalidArgument(
            "envelope is constant; articulation gain is unidentifiable".into(),
        ));
    }
    let mouth = MOUTH_CHANNELS.start..MOUTH_CHANNELS.end.min(d);
    if mouth.is_empty() {
        return Err(Error::InvalidArgument(
            "motion too narrow for mouth channels".into(),
        ));
    }
    let mut slope_sum = 0.0;
    for c in mouth.clone() {
        let cov = motion
            .column(c)
            .iter()
            .zip(env)
            .map(|(&x, &ev)| (x - channel_means[c]) * (ev - e_mean))
            .sum::<f64>()
            / n as f64;
        slope_sum += cov / e_var;
    }
    Ok(RecoveredStyle {
        channel_means,
        gain: slope_sum / mouth.len() as f64,
    })
}

/// Options for synthetic dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub d_motion: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            d_motion: 67,
            min_frames: 220,
            max_frames: 320,
        }
    }
}

/// Everything `gen_synthetic_dataset` wrote, for callers that keep working
/// in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ClipRecord>,
    pub styles: Vec<StyleRecord>,
}

fn draw_style<R: Rng + ?Sized>(rng: &mut R, d_motion: usize) -> SyntheticStyle {
    SyntheticStyle {
        offset: (0..d_motion)
            .map(|_| 0.3 * f64::standard_normal(rng))
            .collect(),
        gain: rng.random_range(0.5..2.0),
        brow: rng.random_range(-0.5..0.5),
    }
}

fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    // SplitMix64 step keeps per-clip streams decorrelated.
    let mut z = dataset_seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n_clips` clips under `dir` (waveforms in `audio/`, motion in
/// `motion/`), plus `manifest.jsonl` and the `styles.json` ground-truth
/// sidecar. Same seed, same bytes.
pub fn gen_synthetic_dataset(
    dir: &Path,
    n_clips: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SyntheticDataset> {
    if opts.min_frames == 0 || opts.min_frames > opts.max_frames {
        return Err(Error::InvalidArgument(format!(
            "bad frame range {}..={}",
            opts.min_frames, opts.max_frames
        )));
    }
    let mut records = Vec::new();
    let mut styles = Vec::new();
    for i in 0..n_clips {
        let cs = clip_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(cs);
        let style = draw_style(&mut rng, opts.d_motion);
        let length = rng.random_range(opts.min_frames..=opts.max_frames);
        let clip = gen_synthetic_clip(&style, opts.d_motion, length, cs)?;

        let id = format!("syn{i:04}");
        let audio_path = format!("audio/{id}.msmd");
        let motion_path = format!("motion/{id}.msmd");
        // Waveforms are rank-1 on disk; motion is rank-2.
        let wave = ndarray::Array1::from(clip.waveform.clone()).into_dyn();
        tensor_io::write_tensor(&dir.join(&audio_path), &wave)?;
        tensor_io::write_matrix(&dir.join(&motion_path), &clip.motion)?;

        records.push(ClipRecord {
            id: id.clone(),
            duration_frames: length,
            tags: std::iter::once("speech".to_string()).collect(),
            yaw: vec![0.0; length],
            pitch: vec![0.0; length],
            audio_path,
            motion_path,
        });
        styles.push(StyleRecord {
            id,
            style,
            seed: cs,
            f0: clip.f0,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    let styles_json = serde_json::to_vec_pretty(&styles)
        .map_err(|e| Error::io(dir.join("styles.json"), std::io::Error::other(e)))?;
    fs::write(dir.join("styles.json"), styles_json)
        .map_err(|e| Error::io(dir.join("styles.json"), e))?;
    Ok(SyntheticDataset { records, styles })
}

pub fn read_styles(path: &Path) -> Result<Vec<StyleRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::BadManifest {
        line: 0,
        reason: format!("styles sidecar: {e}"),
    })
}
