//! Frame-aligned audio features.
//!
//! Two interchangeable providers fill the role of a frozen pretrained
//! speech encoder, both returning exactly `n_frames` rows of `d_a` features
//! at the motion frame rate:
//!
//! * [`features_from_file`] ingests precomputed features from a tensor file
//!   and linearly resamples them in time if the stored rate differs.
//! * [`filterbank_features`] computes short-time magnitude spectra, pools
//!   them into 80 triangular mel bands, applies `log(1+x)`, resamples to the
//!   frame grid, and applies a fixed seeded random projection to `d_a`.
//!
//! Both are deterministic; the projection seed stands in for frozen encoder
//! weights and must stay constant across training and inference.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_io;

/// Motion frame rate in frames per second.
pub const FPS: usize = 25;
/// Waveform sample rate for the synthetic corpus.
pub const SAMPLE_RATE: usize = 8000;
/// Samples per motion frame at the defaults above.
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE / FPS;
/// Number of mel bands before projection.
pub const N_MELS: usize = 80;
/// STFT window length in samples.
pub const N_FFT: usize = 512;
/// STFT hop in samples (2x the motion frame rate at 8 kHz).
pub const HOP: usize = 160;
/// Default feature width.
pub const DEFAULT_D_A: usize = 512;
/// Default seed of the fixed random projection (frozen-encoder stand-in).
pub const DEFAULT_PROJECTION_SEED: u64 = 0xA0D10;

/// Linear time-resampling of rows with centered alignment: output row `i`
/// reads source position `(i + 0.5) * rows / n - 0.5`, so a 2x-rate input
/// reduces by exact pair averaging.
pub fn resample_rows<T: Scalar>(m: &Array2<T>, n: usize) -> Result<Array2<T>> {
    let rows = m.nrows();
    if rows == 0 || n == 0 {
        return Err(Error::EmptyInput("resample_rows"));
    }
    if rows == n {
        return Ok(m.clone());
    }
    let mut out = Array2::zeros((n, m.ncols()));
    for i in 0..n {
        let p = (i as f64 + 0.5) * rows as f64 / n as f64 - 0.5;
        let p = p.clamp(0.0, (rows - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(rows - 1);
        let frac = T::cast(p - lo as f64);
        let one_m = T::one() - frac;
        for j in 0..m.ncols() {
            out[[i, j]] = one_m * m[[lo, j]] + frac * m[[hi, j]];
        }
    }
    Ok(out)
}

/// Loads precomputed features, requiring width `d_a` and resampling the
/// stored rows to exactly `n_frames`.
pub fn features_from_file<T: Scalar>(
    path: &Path,
    n_frames: usize,
    d_a: usize,
) -> Result<Array2<T>> {
    let m = tensor_io::read_matrix::<T>(path)?;
    if m.ncols() != d_a {
        return Err(Error::BadTensorFile {
            path: path.to_path_buf(),
            reason: format!("feature width {} does not match d_a {}", m.ncols(), d_a),
        });
    }
    if m.nrows() == 0 {
        return Err(Error::BadTensorFile {
            path: path.to_path_buf(),
            reason: "empty feature file".into(),
        });
    }
    resample_rows(&m, n_frames)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of mel band `band` under the fixed defaults.
pub fn mel_band_center_hz(band: usize) -> f64 {
    assert!(band < N_MELS);
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    mel_to_hz(lo + (hi - lo) * (band + 1) as f64 / (N_MELS + 1) as f64)
}

/// Triangular mel filterbank, `N_MELS x (N_FFT/2 + 1)`.
fn mel_filterbank() -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let points: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    let mut fb = Array2::zeros((N_MELS, n_bins));
    for k in 0..N_MELS {
        let (f_lo, f_c, f_hi) = (points[k], points[k + 1], points[k + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= f_c {
                (f - f_lo) / (f_c - f_lo)
            } else {
                (f_hi - f) / (f_hi - f_c)
            };
            if w > 0.0 {
                fb[[k, b]] = w;
            }
        }
    }
    fb
}

/// Log mel band energies of the short-time magnitude spectrum, one row per
/// STFT frame (Hann window of [`N_FFT`], hop [`HOP`], `log(1+x)` applied).
pub fn mel_band_energies<T: Scalar>(waveform: &[T]) -> Result<Array2<T>> {
    if waveform.is_empty() {
        return Err(Error::EmptyInput("mel_band_energies: empty waveform"));
    }
    let samples: Vec<f64> = waveform.iter().map(|&v| v.as_f64()).collect();
    let n_stft = if samples.len() >= N_FFT {
        (samples.len() - N_FFT) / HOP + 1
    } else {
        1
    };
    let hann: Vec<f64> = (0..N_FFT)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / N_FFT as f64;
            x.sin() * x.sin()
        })
        .collect();
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let mut out = Array2::zeros((n_stft, N_MELS));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for frame in 0..n_stft {
        let start = frame * HOP;
        for i in 0..N_FFT {
            let s = samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..N_MELS {
            let mut e = 0.0;
            for b in 0..n_bins {
                let w = fb[[k, b]];
                if w > 0.0 {
                    e += w * buf[b].norm();
                }
            }
            out[[frame, k]] = T::cast(e.ln_1p());
        }
    }
    Ok(out)
}

/// The fixed seeded projection from mel bands to the feature width.
pub fn projection_matrix<T: Scalar>(seed: u64, d_a: usize) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (N_MELS as f64).sqrt();
    Array2::from_shape_fn((N_MELS, d_a), |_| {
        T::standard_normal(&mut rng) * T::cast(scale)
    })
}

/// Filterbank provider: mel energies resampled to `n_frames` rows, then
/// projected to `d_a` features with the seeded fixed matrix.
pub fn filterbank_features<T: Scalar>(
    waveform: &[T],
    n_frames: usize,
    d_a: usize,
    seed: u64,
) -> Result<Array2<T>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument(
            "filterbank_features: n_frames = 0".into(),
        ));
    }
    let energies = mel_band_energies(waveform)?;
    let aligned = resample_rows(&energies, n_frames)?;
    Ok(aligned.dot(&projection_matrix::<T>(seed, d_a)))
}

/// Loads audio for a clip: a rank-1 tensor is treated as a waveform and run
/// through the filterbank provider; a rank-2 tensor is treated as
/// precomputed features of width `d_a`.
pub fn load_audio_for_frames<T: Scalar>(
    path: &Path,
    n_frames: usize,
    d_a: usize,
    seed: u64,
) -> Result<Array2<T>> {
    let t = tensor_io::read_tensor::<T>(path)?;
    match t.ndim() {
        1 => {
            let wave: Vec<T> = t.iter().copied().collect();
            filterbank_features(&wave, n_frames, d_a, seed)
        }
        2 => {
            drop(t);
            features_from_file(path, n_frames, d_a)
        }
        n => Err(Error::BadTensorFile {
            path: path.to_path_buf(),
            reason: format!("audio tensor must be rank 1 or 2, got rank {n}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn resample_identity_and_pair_average() {
        let m = array![[1.0f64, 10.0], [2.0, 20.0], [3.0, 30.0], [5.0, 50.0]];
        assert_eq!(resample_rows(&m, 4).unwrap(), m);
        // 2x rate reduces by pair averaging.
        let half = resample_rows(&m, 2).unwrap();
        assert_abs_diff_eq!(half[[0, 0]], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(half[[0, 1]], 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(half[[1, 0]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(half[[1, 1]], 40.0, epsilon = 1e-12);
        // Upsampling stays within range and keeps endpoints.
        let up = resample_rows(&m, 8).unwrap();
        assert_eq!(up.nrows(), 8);
        assert_abs_diff_eq!(up[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(up[[7, 0]], 5.0, epsilon = 1e-12);
        assert!(resample_rows(&m, 0).is_err());
    }

    #[test]
    fn silence_produces_constant_zero_rows() {
        let silence = vec![0.0f32; SAMPLE_RATE];
        let f = filterbank_features(&silence, 10, 16, 7).unwrap();
        assert_eq!(f.dim(), (10, 16));
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_at_band_center_dominates_band_energies() {
        let band = 30;
        let f_c = mel_band_center_hz(band);
        let wave: Vec<f64> = (0..SAMPLE_RATE)
            .map(|i| (2.0 * std::f64::consts::PI * f_c * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let e = mel_band_energies(&wave).unwrap();
        // Use an interior frame to avoid edge windows.
        let row = e.row(e.nrows() / 2);
        let (argmax, _) =
            row.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        // Triangles overlap, so allow the immediate neighbor.
        assert!(
            (argmax as i64 - band as i64).abs() <= 1,
            "band {argmax} dominated, expected ~{band}"
        );
    }

    #[test]
    fn filterbank_is_deterministic_and_exact_length() {
        let wave: Vec<f32> = (0..3 * SAMPLE_RATE)
            .map(|i| (i as f32 * 0.01).sin() * (1.0 + (i as f32 * 0.0001).cos()))
            .collect();
        for n in [1usize, 7, 75, 200] {
            let a = filterbank_features(&wave, n, 32, 5).unwrap();
            let b = filterbank_features(&wave, n, 32, 5).unwrap();
            assert_eq!(a.dim(), (n, 32));
            assert_eq!(a, b);
        }
        // Different projection seed -> different features.
        let a = filterbank_features(&wave, 10, 32, 5).unwrap();
        let c = filterbank_features(&wave, 10, 32, 6).unwrap();
        assert_ne!(a, c);
        let empty: Vec<f32> = vec![];
        assert!(filterbank_features(&empty, 10, 32, 5).is_err());
    }

    #[test]
    fn short_waveform_still_yields_frames() {
        let wave = vec![0.5f32; 100]; // shorter than one FFT window
        let f = filterbank_features(&wave, 3, 8, 1).unwrap();
        assert_eq!(f.dim(), (3, 8));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn features_from_file_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.msmd");
        let m = Array2::from_shape_fn((8, 4), |(i, j)| (i * 4 + j) as f32);
        tensor_io::write_matrix(&path, &m).unwrap();

        let same = features_from_file::<f32>(&path, 8, 4).unwrap();
        assert_eq!(same, m);
        let half = features_from_file::<f32>(&path, 4, 4).unwrap();
        assert_eq!(half.nrows(), 4);
        assert_abs_diff_eq!(half[[0, 0]], (m[[0, 0]] + m[[1, 0]]) / 2.0, epsilon = 1e-6);
        assert!(features_from_file::<f32>(&path, 8, 5).is_err());
    }

    #[test]
    fn load_audio_dispatches_on_rank() {
        let dir = tempfile::tempdir().unwrap();
        let wav_path = dir.path().join("wave.msmd");
        let wave: Vec<f32> = (0..SAMPLE_RATE).map(|i| (i as f32 * 0.02).sin()).collect();
        let wave_t =
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[wave.len()]), wave.clone()).unwrap();
        tensor_io::write_tensor(&wav_path, &wave_t).unwrap();

        let via_dispatch = load_audio_for_frames::<f32>(&wav_path, 25, 16, 3).unwrap();
        let direct = filterbank_features(&wave, 25, 16, 3).unwrap();
        assert_eq!(via_dispatch, direct);

        let feat_path = dir.path().join("feat.msmd");
        tensor_io::write_matrix(&feat_path, &Array2::<f32>::ones((25, 16))).unwrap();
        let feats = load_audio_for_frames::<f32>(&feat_path, 25, 16, 3).unwrap();
        assert_eq!(feats, Array2::<f32>::ones((25, 16)));
    }
}
