//! Binary checkpoint format.
//!
//! Layout: `"HWLM"`, format version (`u32` LE), metadata length (`u64` LE),
//! JSON metadata, then every tensor as little-endian IEEE-754 values in
//! manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmArchitecture, LmModel};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HWLM";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    arch: LmArchitecture,
    precision: Precision,
    vocab_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

/// A model of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(LmModel<f32>),
    F64(LmModel<f64>),
}

impl AnyModel {
    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn arch(&self) -> &LmArchitecture {
        match self {
            AnyModel::F32(m) => &m.arch,
            AnyModel::F64(m) => &m.arch,
        }
    }

    pub fn vocab_fingerprint(&self) -> &str {
        match self {
            AnyModel::F32(m) => &m.vocab_fingerprint,
            AnyModel::F64(m) => &m.vocab_fingerprint,
        }
    }

    /// The model in precision `T`, converting if necessary.
    pub fn into_precision<T: Real>(self) -> LmModel<T> {
        match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m.cast(),
        }
    }
}

/// A loaded checkpoint: the model and, if it was stored, the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<M> {
    pub model: M,
    pub vocab: Option<Vec<String>>,
}

/// Serializes a model (and optionally its vocabulary) into checkpoint bytes.
pub fn write_checkpoint<T: Real>(model: &LmModel<T>, vocab: Option<&[String]>) -> Result<Vec<u8>> {
    model.validate()?;
    let width = T::PRECISION.byte_width() as u64;
    let mut offset = 0u64;
    let mut entries = Vec::new();
    for (name, t) in model.tensors() {
        let bytes = t.len() as u64 * width;
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let meta = Metadata {
        arch: model.arch.clone(),
        precision: T::PRECISION,
        vocab_fingerprint: model.vocab_fingerprint.clone(),
        vocab: vocab.map(|v| v.to_vec()),
        tensors: entries,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Metadata(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.tensors() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn fill<T: Real>(meta: &Metadata, payload: &[u8]) -> Result<LmModel<T>> {
    let mut model = LmModel::<T>::new(meta.arch.clone(), 0)?;
    model.vocab_fingerprint = meta.vocab_fingerprint.clone();
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != meta.tensors.len() {
        return Err(Error::Metadata(format!(
            "manifest lists {} tensors, architecture needs {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let width = T::PRECISION.byte_width();
    for ((name, shape), (entry, t)) in expected.iter().zip(meta.tensors.iter().zip(model.tensors_mut())) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Metadata(format!(
                "manifest entry {} {:?} where {name} {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let bytes = &payload[start..start + entry.bytes as usize];
        for (x, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(width)) {
            *x = T::read_le(chunk);
        }
    }
    model.validate()?;
    Ok(model)
}

/// Parses checkpoint bytes. Header, version, metadata and payload problems
/// are reported as distinct errors.
pub fn read_checkpoint(bytes: &[u8], expected_fingerprint: Option<&str>) -> Result<Checkpoint<AnyModel>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptHeader("missing HWLM magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptHeader(format!("header is {} bytes, need {HEADER_LEN}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = (HEADER_LEN as u64).checked_add(meta_len).filter(|&e| e <= bytes.len() as u64);
    let Some(meta_end) = meta_end else {
        return Err(Error::CorruptHeader(format!(
            "metadata length {meta_len} exceeds file size {}",
            bytes.len()
        )));
    };
    let meta_end = meta_end as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| Error::Metadata(e.to_string()))?;
    let payload = &bytes[meta_end..];

    let width = meta.precision.byte_width() as u64;
    let mut cursor = 0u64;
    for e in &meta.tensors {
        let count: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.offset != cursor || e.bytes != count * width {
            return Err(Error::Metadata(format!("tensor {} has inconsistent offset or size", e.name)));
        }
        cursor += e.bytes;
    }
    if (payload.len() as u64) < cursor {
        return Err(Error::TruncatedPayload {
            needed: cursor as usize,
            available: payload.len(),
        });
    }
    if payload.len() as u64 > cursor {
        return Err(Error::Metadata(format!("{} unexpected trailing bytes", payload.len() as u64 - cursor)));
    }
    if let Some(want) = expected_fingerprint {
        if want != meta.vocab_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: want.to_string(),
                found: meta.vocab_fingerprint.clone(),
            });
        }
    }
    let model = match meta.precision {
        Precision::F32 => AnyModel::F32(fill(&meta, payload)?),
        Precision::F64 => AnyModel::F64(fill(&meta, payload)?),
    };
    Ok(Checkpoint {
        model,
        vocab: meta.vocab,
    })
}

/// Writes a checkpoint to `path` and syncs it to disk.
pub fn save_checkpoint<T: Real>(model: &LmModel<T>, vocab: Option<&[String]>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model, vocab)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint_any(path: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint<AnyModel>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, expected_fingerprint)
}

/// Loads a checkpoint in precision `T`, converting if it was stored in the
/// other precision.
pub fn load_checkpoint<T: Real>(path: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint<LmModel<T>>> {
    let ck = load_checkpoint_any(path, expected_fingerprint)?;
    Ok(Checkpoint {
        model: ck.model.into_precision(),
        vocab: ck.vocab,
    })
}
