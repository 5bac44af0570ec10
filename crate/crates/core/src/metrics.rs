//! Vertex-space evaluation: a linear latent-to-mesh decoder and the four
//! error measures reported by `evaluate`.
//!
//! Reduction conventions, since one-line metric names admit variants:
//! lip error takes the per-frame maximum of squared lip-vertex errors, then
//! the temporal mean; upper-face dynamic deviation compares, per vertex, the
//! temporal standard deviation of its Euclidean distance from its own
//! temporal mean position, averaged as absolute differences. Both are pinned
//! by brute-force oracles in the tests.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor_io::Archive;

/// Linear map from motion latents to a mesh: `vertices = W x + neutral`,
/// with vertex index sets for the lip and upper-face metrics.
#[derive(Debug, Clone)]
pub struct VertexDecoder<T: Scalar> {
    /// `3V x D`; rows are (x, y, z) triples per vertex.
    pub w: Array2<T>,
    /// `3V` stacked neutral pose.
    pub neutral: Array1<T>,
    pub lip_mask: Vec<usize>,
    pub upper_mask: Vec<usize>,
    pub mouth_pair: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct DecoderMeta {
    lip_mask: Vec<usize>,
    upper_mask: Vec<usize>,
    mouth_pair: (usize, usize),
}

impl<T: Scalar> VertexDecoder<T> {
    pub fn n_vertices(&self) -> usize {
        self.w.nrows() / 3
    }

    pub fn d_motion(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.nrows() == 0 || !self.w.nrows().is_multiple_of(3) {
            return Err(Error::BadConfig(format!(
                "decoder W has {} rows, need a positive multiple of 3",
                self.w.nrows()
            )));
        }
        if self.neutral.len() != self.w.nrows() {
            return Err(Error::shape(
                "decoder neutral",
                self.w.nrows(),
                self.neutral.len(),
            ));
        }
        let v = self.n_vertices();
        let in_range = |m: &[usize]| m.iter().all(|&i| i < v);
        if !in_range(&self.lip_mask) || !in_range(&self.upper_mask) {
            return Err(Error::BadConfig("decoder mask index out of range".into()));
        }
        if self.mouth_pair.0 >= v || self.mouth_pair.1 >= v {
            return Err(Error::BadConfig("mouth pair index out of range".into()));
        }
        if self.lip_mask.is_empty() || self.upper_mask.is_empty() {
            return Err(Error::BadConfig("decoder masks must be non-empty".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.insert_matrix("w", &self.w);
        let neutral = self.neutral.clone().insert_axis(ndarray::Axis(0));
        ar.insert_matrix("neutral", &neutral);
        let meta = DecoderMeta {
            lip_mask: self.lip_mask.clone(),
            upper_mask: self.upper_mask.clone(),
            mouth_pair: self.mouth_pair,
        };
        ar.insert_bytes("meta.json", serde_json::to_vec_pretty(&meta).unwrap());
        ar.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::read(path)?;
        let bad = |reason: String| Error::BadTensorFile {
            path: path.into(),
            reason,
        };
        let w: Array2<T> = ar.matrix("w").map_err(bad)?;
        let neutral: Array2<T> = ar.matrix("neutral").map_err(bad)?;
        let meta_bytes = ar.bytes("meta.json").ok_or_else(|| Error::BadTensorFile {
            path: path.into(),
            reason: "no meta.json entry".into(),
        })?;
        let meta: DecoderMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::BadTensorFile {
                path: path.into(),
                reason: format!("bad meta.json: {e}"),
            })?;
        let dec = Self {
            w,
            neutral: neutral.row(0).to_owned(),
            lip_mask: meta.lip_mask,
            upper_mask: meta.upper_mask,
            mouth_pair: meta.mouth_pair,
        };
        dec.validate()?;
        Ok(dec)
    }
}

/// Channel ranges of the synthetic motion layout that the proxy decoder
/// mirrors: mouth articulation, upper face, auxiliary. Degrade gracefully
/// for small test widths.
fn channel_block(d_motion: usize, lo: usize, hi: usize) -> std::ops::Range<usize> {
    let lo = lo.min(d_motion);
    let hi = hi.min(d_motion);
    if lo < hi {
        lo..hi
    } else {
        0..d_motion
    }
}

/// Deterministic proxy decoder: 100 vertices (20 lip, 30 upper face), with
/// lip vertices driven by the mouth channels and upper-face vertices by the
/// upper channels, matching the synthetic data layout.
pub fn proxy_decoder<T: Scalar>(d_motion: usize, seed: u64) -> VertexDecoder<T> {
    let v = 100usize;
    let (lip, upper, aux) = (0..20, 20..50, 50..v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((3 * v, d_motion));
    let blocks = [
        (lip.clone(), channel_block(d_motion, 0, 16)),
        (upper.clone(), channel_block(d_motion, 16, 41)),
        (aux, channel_block(d_motion, 41, d_motion)),
    ];
    for (verts, chans) in blocks {
        let scale = T::cast(1.0 / (chans.len() as f64).sqrt());
        for vi in verts {
            for row in 3 * vi..3 * vi + 3 {
                for c in chans.clone() {
                    w[[row, c]] = T::standard_normal(&mut rng) * scale;
                }
            }
        }
    }
    let neutral = Array1::from_shape_fn(3 * v, |_| T::standard_normal(&mut rng) * T::cast(0.1));
    VertexDecoder {
        w,
        neutral,
        lip_mask: lip.collect(),
        upper_mask: upper.collect(),
        mouth_pair: (0, 1),
    }
}

/// Decodes a latent sequence into per-frame vertex positions `(N, V, 3)`.
pub fn decode_vertices<T: Scalar>(x: &Array2<T>, dec: &VertexDecoder<T>) -> Result<Array3<T>> {
    dec.validate()?;
    if x.ncols() != dec.d_motion() {
        return Err(Error::shape("decode_vertices", dec.d_motion(), x.ncols()));
    }
    let n = x.nrows();
    let v = dec.n_vertices();
    let mut flat = x.dot(&dec.w.t());
    for mut row in flat.rows_mut() {
        row += &dec.neutral;
    }
    Ok(flat
        .into_shape_with_order((n, v, 3))
        .expect("3V columns reshape to (V, 3)"))
}

fn check_pair<T: Scalar>(gt: &Array3<T>, gen: &Array3<T>) -> Result<()> {
    if gt.dim() != gen.dim() {
        return Err(Error::shape(
            "metric sequences",
            format!("{:?}", gt.dim()),
            format!("{:?}", gen.dim()),
        ));
    }
    if gt.shape()[0] == 0 {
        return Err(Error::EmptyInput("vertex sequence"));
    }
    Ok(())
}

fn sq_dist<T: Scalar>(a: &Array3<T>, b: &Array3<T>, frame: usize, vertex: usize) -> f64 {
    (0..3)
        .map(|c| {
            let d = (a[[frame, vertex, c]] - b[[frame, vertex, c]]).as_f64();
            d * d
        })
        .sum()
}

/// Mean squared Euclidean vertex error over all frames and vertices.
pub fn mse<T: Scalar>(gt: &Array3<T>, gen: &Array3<T>) -> Result<f64> {
    check_pair(gt, gen)?;
    let (n, v, _) = gt.dim();
    let total: f64 = (0..n)
        .flat_map(|f| (0..v).map(move |vi| (f, vi)))
        .map(|(f, vi)| sq_dist(gt, gen, f, vi))
        .sum();
    Ok(total / (n * v) as f64)
}

/// Lip vertex error: per-frame max squared error over lip vertices, then
/// temporal mean.
pub fn lve<T: Scalar>(gt: &Array3<T>, gen: &Array3<T>, lip_mask: &[usize]) -> Result<f64> {
    check_pair(gt, gen)?;
    if lip_mask.is_empty() {
        return Err(Error::EmptyInput("lip mask"));
    }
    let (n, v, _) = gt.dim();
    if lip_mask.iter().any(|&i| i >= v) {
        return Err(Error::BadConfig("lip mask index out of range".into()));
    }
    let total: f64 = (0..n)
        .map(|f| {
            lip_mask
                .iter()
                .map(|&vi| sq_dist(gt, gen, f, vi))
                .fold(0.0f64, f64::max)
        })
        .sum();
    Ok(total / n as f64)
}

/// Temporal std of one vertex's distance from its own temporal mean.
fn dynamic_deviation<T: Scalar>(seq: &Array3<T>, vertex: usize) -> f64 {
    let n = seq.shape()[0];
    let mut mean = [0.0f64; 3];
    for f in 0..n {
        for c in 0..3 {
            mean[c] += seq[[f, vertex, c]].as_f64();
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let dists: Vec<f64> = (0..n)
        .map(|f| {
            (0..3)
                .map(|c| {
                    let d = seq[[f, vertex, c]].as_f64() - mean[c];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let d_mean = dists.iter().sum::<f64>() / n as f64;
    let var = dists
        .iter()
        .map(|d| (d - d_mean) * (d - d_mean))
        .sum::<f64>()
        / n as f64;
    var.sqrt()
}

/// Upper-face dynamics deviation: mean absolute difference of per-vertex
/// dynamic deviations between the two sequences.
pub fn fdd<T: Scalar>(gt: &Array3<T>, gen: &Array3<T>, upper_mask: &[usize]) -> Result<f64> {
    check_pair(gt, gen)?;
    if upper_mask.is_empty() {
        return Err(Error::EmptyInput("upper-face mask"));
    }
    let v = gt.dim().1;
    if upper_mask.iter().any(|&i| i >= v) {
        return Err(Error::BadConfig("upper mask index out of range".into()));
    }
    let total: f64 = upper_mask
        .iter()
        .map(|&vi| (dynamic_deviation(gt, vi) - dynamic_deviation(gen, vi)).abs())
        .sum();
    Ok(total / upper_mask.len() as f64)
}

/// Mouth opening difference: mean absolute difference of the per-frame
/// distance between the mouth pair vertices.
pub fn mouth_opening_diff<T: Scalar>(
    gt: &Array3<T>,
    gen: &Array3<T>,
    mouth_pair: (usize, usize),
) -> Result<f64> {
    check_pair(gt, gen)?;
    let (n, v, _) = gt.dim();
    if mouth_pair.0 >= v || mouth_pair.1 >= v {
        return Err(Error::BadConfig("mouth pair index out of range".into()));
    }
    let opening = |seq: &Array3<T>, f: usize| -> f64 {
        (0..3)
            .map(|c| {
                let d = (seq[[f, mouth_pair.0, c]] - seq[[f, mouth_pair.1, c]]).as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = (0..n)
        .map(|f| (opening(gt, f) - opening(gen, f)).abs())
        .sum();
    Ok(total / n as f64)
}

/// All four metrics for one ground-truth/generated pair, in decoder units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub lve: f64,
    pub fdd: f64,
    #[serde(rename = "mod")]
    pub mod_: f64,
}

/// Decodes both latent sequences and computes the full report.
pub fn evaluate_latents<T: Scalar>(
    gt: &Array2<T>,
    gen: &Array2<T>,
    dec: &VertexDecoder<T>,
) -> Result<MetricReport> {
    let gt_v = decode_vertices(gt, dec)?;
    let gen_v = decode_vertices(gen, dec)?;
    Ok(MetricReport {
        mse: mse(&gt_v, &gen_v)?,
        lve: lve(&gt_v, &gen_v, &dec.lip_mask)?,
        fdd: fdd(&gt_v, &gen_v, &dec.upper_mask)?,
        mod_: mouth_opening_diff(&gt_v, &gen_v, dec.mouth_pair)?,
    })
}
