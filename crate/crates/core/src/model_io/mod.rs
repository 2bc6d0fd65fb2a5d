//! Binary model container.
//!
//! ```text
//! offset 0   "SNN1"
//!        4   u32 format version (1)
//!        8   u64 metadata length L
//!       16   metadata: L bytes of UTF-8 JSON
//!            zero padding to a multiple of 64
//!            tensor blobs, each starting on a 64-byte boundary
//!   end-32   SHA-256 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian. The metadata records the encoder
//! topology, activation quantization and a tensor table (name, role, dtype,
//! shape, quantization, encoding, blob offset and length). A `dense` blob is
//! the raw element array. A `sparse4x1` blob holds the per-group block counts
//! (`u32`), the padded column indices (`u32`) and the micro-tile values
//! (`i8`), in that order; the per-channel weight scales live in the entry's
//! quantization record.
//!
//! Reading checks the container from the outside in: size, magic, version,
//! header lengths, digest, metadata, then the tensor table (bounds and
//! alignment, overlap, encoding-implied lengths, payload contents), so each
//! kind of damage maps to its own error.

mod encoder;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{EncoderConfig, GraphError, LayerQuant};
use crate::sparse::{Sparse4x1Weight, CHUNK_COLS, GROUP_ROWS, TILE_BYTES};
use crate::tensor::{DType, QuantDType, QuantParams, Tensor, TensorData};

pub use encoder::{from_bytes, from_container, load_model, save_model, to_bytes, to_container};
pub use synthetic::{generate_synthetic_model, random_input};

pub const MAGIC: &[u8; 4] = b"SNN1";
pub const VERSION: u32 = 1;
pub const BLOB_ALIGN: usize = 64;
const HEADER: usize = 16;
const DIGEST: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("tensor `{0}` lies outside the blob section or is misaligned")]
    OutOfBounds(String),
    #[error("tensors `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("tensor `{name}`: encoding implies {expected} bytes, {actual} declared")]
    LengthMismatch { name: String, expected: u64, actual: u64 },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Activation quantization of a whole encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationQuant {
    pub layers: Vec<LayerQuant>,
    pub output: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense {
        tensor: Tensor,
        quant: Option<QuantParams>,
    },
    /// S8 `[M, K]` weight; its scales are the per-channel quantization.
    Sparse(Arc<Sparse4x1Weight>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerTensor {
    pub name: String,
    pub role: String,
    pub payload: Payload,
}

impl ContainerTensor {
    pub fn shape(&self) -> Vec<usize> {
        match &self.payload {
            Payload::Dense { tensor, .. } => tensor.shape().to_vec(),
            Payload::Sparse(w) => vec![w.rows(), w.cols()],
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.payload {
            Payload::Dense { tensor, .. } => tensor.dtype(),
            Payload::Sparse(_) => DType::S8,
        }
    }
}

/// Everything a container file holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelContainer {
    pub topology: Option<EncoderConfig>,
    pub activations: Option<ActivationQuant>,
    pub tensors: Vec<ContainerTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Encoding {
    Dense,
    Sparse4x1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    role: String,
    dtype: DType,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
    encoding: Encoding,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topology: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activations: Option<ActivationQuant>,
    tensors: Vec<Entry>,
}

fn encode_payload(p: &Payload, buf: &mut Vec<u8>) -> (DType, Vec<usize>, Option<QuantParams>, Encoding) {
    match p {
        Payload::Dense { tensor, quant } => {
            buf.extend(tensor.data().to_le_bytes());
            (tensor.dtype(), tensor.shape().to_vec(), quant.clone(), Encoding::Dense)
        }
        Payload::Sparse(w) => {
            w.group_nnz().iter().for_each(|n| buf.extend(n.to_le_bytes()));
            w.indices().iter().for_each(|i| buf.extend(i.to_le_bytes()));
            buf.extend(w.values().iter().map(|&v| v as u8));
            let q = QuantParams { dtype: QuantDType::S8, scales: w.scales().to_vec(), zero_points: vec![0; w.rows()] };
            (DType::S8, vec![w.rows(), w.cols()], Some(q), Encoding::Sparse4x1)
        }
    }
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    buf.resize(buf.len().div_ceil(align) * align, 0);
}

/// Serialize a container. Output is byte-identical for equal inputs.
pub fn write_container(c: &ModelContainer) -> Result<Vec<u8>, ModelError> {
    let mut blobs = Vec::new();
    let mut parts = Vec::with_capacity(c.tensors.len());
    for t in &c.tensors {
        pad_to(&mut blobs, BLOB_ALIGN);
        let start = blobs.len();
        let (dtype, shape, quant, encoding) = encode_payload(&t.payload, &mut blobs);
        parts.push((t, start, blobs.len() - start, dtype, shape, quant, encoding));
    }
    // Offsets are absolute, so they depend on the metadata length, which
    // depends on the offsets' digit counts. Iterate to the fixed point.
    let mut data_start = 0usize;
    let meta = loop {
        let meta = Metadata {
            topology: c.topology,
            activations: c.activations.clone(),
            tensors: parts
                .iter()
                .map(|(t, off, len, dtype, shape, quant, encoding)| Entry {
                    name: t.name.clone(),
                    role: t.role.clone(),
                    dtype: *dtype,
                    shape: shape.clone(),
                    quant: quant.clone(),
                    encoding: *encoding,
                    offset: (data_start + off) as u64,
                    length: *len as u64,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ModelError::Metadata(e.to_string()))?;
        let start = (HEADER + json.len()).next_multiple_of(BLOB_ALIGN);
        if start == data_start {
            break json;
        }
        data_start = start;
    };
    let mut out = Vec::with_capacity(data_start + blobs.len() + DIGEST);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((meta.len() as u64).to_le_bytes());
    out.extend(&meta);
    pad_to(&mut out, BLOB_ALIGN);
    out.extend(&blobs);
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

fn u32s(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Bytes a sparse blob must have, from its leading group counts.
fn sparse_len(rows: usize, cols: usize, blob: &[u8]) -> Option<u64> {
    let groups = rows.div_ceil(GROUP_ROWS);
    let counts = blob.get(..groups.checked_mul(4)?)?;
    let mut blocks = 0u64;
    for n in u32s(counts) {
        if n as usize > cols {
            return None;
        }
        blocks += (n as u64).next_multiple_of(CHUNK_COLS as u64);
    }
    Some(groups as u64 * 4 + blocks * 4 + blocks / CHUNK_COLS as u64 * TILE_BYTES as u64)
}

fn decode_entry(e: &Entry, blob: &[u8]) -> Result<Payload, ModelError> {
    let invalid = |reason: String| ModelError::InvalidTensor { name: e.name.clone(), reason };
    if let Some(q) = &e.quant {
        q.validate().map_err(|err| invalid(err.to_string()))?;
    }
    match e.encoding {
        Encoding::Dense => {
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            let expected = numel.and_then(|n| n.checked_mul(e.dtype.size_of() as u64));
            if expected != Some(e.length) {
                return Err(ModelError::LengthMismatch {
                    name: e.name.clone(),
                    expected: expected.unwrap_or(u64::MAX),
                    actual: e.length,
                });
            }
            let data = TensorData::from_le_bytes(e.dtype, blob).ok_or_else(|| invalid("ragged payload".into()))?;
            let tensor = Tensor::new(e.shape.clone(), data).map_err(|err| invalid(err.to_string()))?;
            if let Some(q) = &e.quant {
                if QuantDType::from_dtype(e.dtype) != Some(q.dtype) {
                    return Err(invalid("quantization dtype differs from tensor dtype".into()));
                }
            }
            Ok(Payload::Dense { tensor, quant: e.quant.clone() })
        }
        Encoding::Sparse4x1 => {
            let &[rows, cols] = e.shape.as_slice() else {
                return Err(invalid(format!("sparse weights are 2-D, got shape {:?}", e.shape)));
            };
            if e.dtype != DType::S8 || rows == 0 || cols == 0 {
                return Err(invalid("sparse weights are non-empty S8 matrices".into()));
            }
            let expected = sparse_len(rows, cols, blob).ok_or_else(|| invalid("bad group counts".into()))?;
            if expected != e.length {
                return Err(ModelError::LengthMismatch { name: e.name.clone(), expected, actual: e.length });
            }
            let q = e.quant.as_ref().ok_or_else(|| invalid("sparse weight without scales".into()))?;
            if q.dtype != QuantDType::S8 || q.scales.len() != rows || q.zero_points.iter().any(|&z| z != 0) {
                return Err(invalid("sparse weights need per-channel symmetric S8 scales".into()));
            }
            let groups = rows.div_ceil(GROUP_ROWS);
            let (counts, rest) = blob.split_at(groups * 4);
            let blocks = rest.len() / (4 + TILE_BYTES / CHUNK_COLS);
            let (idx, vals) = rest.split_at(blocks * 4);
            let w = Sparse4x1Weight::from_parts(
                rows,
                cols,
                u32s(counts),
                u32s(idx),
                vals.iter().map(|&v| v as i8).collect(),
                q.scales.clone(),
            )
            .map_err(|err| invalid(err.to_string()))?;
            Ok(Payload::Sparse(Arc::new(w)))
        }
    }
}

/// Parse and validate a container.
pub fn read_container(bytes: &[u8]) -> Result<ModelContainer, ModelError> {
    let have = bytes.len() as u64;
    if bytes.len() < HEADER + DIGEST {
        return Err(ModelError::Truncated { need: (HEADER + DIGEST) as u64, have });
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let need = (HEADER as u64).saturating_add(meta_len).saturating_add(DIGEST as u64);
    if need > have {
        return Err(ModelError::Truncated { need, have });
    }
    let body_end = bytes.len() - DIGEST;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(ModelError::ChecksumMismatch);
    }
    let meta_end = HEADER + meta_len as usize;
    let meta: Metadata =
        serde_json::from_slice(&bytes[HEADER..meta_end]).map_err(|e| ModelError::Metadata(e.to_string()))?;
    let data_start = meta_end.next_multiple_of(BLOB_ALIGN) as u64;

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(meta.tensors.len());
    for e in &meta.tensors {
        let end = e.offset.checked_add(e.length);
        if e.offset < data_start || end.is_none_or(|end| end > body_end as u64) || e.offset % BLOB_ALIGN as u64 != 0 {
            return Err(ModelError::OutOfBounds(e.name.clone()));
        }
        spans.push((e.offset, e.offset + e.length, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ModelError::Overlap(w[0].2.into(), w[1].2.into()));
        }
    }
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for e in &meta.tensors {
        let blob = &bytes[e.offset as usize..(e.offset + e.length) as usize];
        tensors.push(ContainerTensor { name: e.name.clone(), role: e.role.clone(), payload: decode_entry(e, blob)? });
    }
    Ok(ModelContainer { topology: meta.topology, activations: meta.activations, tensors })
}

/// Rewrite the trailing digest after editing a container in place.
pub fn reseal(bytes: &mut [u8]) {
    if bytes.len() >= DIGEST {
        let end = bytes.len() - DIGEST;
        let d = Sha256::digest(&bytes[..end]);
        bytes[end..].copy_from_slice(&d);
    }
}
