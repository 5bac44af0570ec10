//! On-disk tensor and archive formats.
//!
//! Single tensors are stored in a small binary format: the ASCII magic
//! `MSMD`, a `u32` format version, a `u32` rank, the `u32` dimensions, then
//! the elements as little-endian `f32` in row-major order. All integers are
//! little-endian. Values are converted to the in-memory scalar type on read,
//! so `f64` pipelines can load the same files.
//!
//! Checkpoints and multi-tensor bundles use an archive built on the same
//! codec: magic `MSAR`, a `u32` version, a `u32` entry count, then for each
//! entry a length-prefixed UTF-8 name and a length-prefixed payload. Tensor
//! payloads are whole `MSMD` blobs; metadata payloads are JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_MAGIC: [u8; 4] = *b"MSMD";
pub const TENSOR_VERSION: u32 = 1;

const ARCHIVE_MAGIC: [u8; 4] = *b"MSAR";
const ARCHIVE_VERSION: u32 = 1;

/// Rank limit for decoded tensors; guards against corrupt headers.
const MAX_NDIMS: usize = 8;

/// Encodes a tensor into the single-tensor binary format.
pub fn encode_tensor<T: Scalar>(tensor: &ArrayD<T>) -> Vec<u8> {
    let dims = tensor.shape();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * tensor.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes a tensor from the single-tensor binary format.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<ArrayD<T>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(format!("bad magic {magic:?}, expected {TENSOR_MAGIC:?}"));
    }
    let version = cur.u32()?;
    if version != TENSOR_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let ndims = cur.u32()? as usize;
    if ndims == 0 || ndims > MAX_NDIMS {
        return Err(format!("unsupported rank {ndims}"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(cur.u32()? as usize);
    }
    let len: usize = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format!("dimension overflow in {dims:?}"))?;
    let payload = cur.take(4 * len)?;
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| e.to_string())
}

/// Writes a tensor file, creating parent directories as needed.
pub fn write_tensor<T: Scalar>(path: &Path, tensor: &ArrayD<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file of any rank.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|reason| Error::BadTensorFile {
        path: path.to_path_buf(),
        reason,
    })
}

/// Reads a tensor file and requires rank 2.
pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let t = read_tensor::<T>(path)?;
    let shape = t.shape().to_vec();
    t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::BadTensorFile {
            path: path.to_path_buf(),
            reason: format!("expected rank 2, got shape {shape:?}"),
        })
}

/// Writes a rank-2 tensor file.
pub fn write_matrix<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    write_tensor(path, &m.clone().into_dyn())
}

/// Named byte payloads, written and read in name order.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    entries: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.insert(name.to_string(), bytes);
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, tensor: &ArrayD<T>) {
        self.insert_bytes(name, encode_tensor(tensor));
    }

    pub fn insert_matrix<T: Scalar>(&mut self, name: &str, m: &Array2<T>) {
        self.insert_tensor(name, &m.clone().into_dyn());
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        self.entries.get(name).map(|v| v.as_slice())
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>, String> {
        let bytes = self
            .bytes(name)
            .ok_or_else(|| format!("missing entry {name:?}"))?;
        decode_tensor(bytes).map_err(|e| format!("entry {name:?}: {e}"))
    }

    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<Array2<T>, String> {
        let t = self.tensor::<T>(name)?;
        let shape = t.shape().to_vec();
        t.into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| format!("entry {name:?}: expected rank 2, got shape {shape:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != ARCHIVE_MAGIC {
            return Err(format!("bad magic {magic:?}, expected {ARCHIVE_MAGIC:?}"));
        }
        let version = cur.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = cur.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| format!("entry name not UTF-8: {e}"))?
                .to_string();
            let payload_len = cur.u64()? as usize;
            let payload = cur.take(payload_len)?.to_vec();
            entries.insert(name, payload);
        }
        if cur.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::BadTensorFile {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
