//! Checkpoint file format.
//!
//! ```text
//! "RLAB" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header maps each parameter name to `{"dtype":"f32","shape":[..],"offset":n}`
//! and carries the model config under the reserved key `__metadata__`. The JSON
//! is right-padded with spaces so the payload starts on an 8-byte boundary.
//! `offset` is relative to the payload start; tensors are written in header
//! order as little-endian `f32`, each starting on an 8-byte boundary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CheckpointError;
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::{Checkpoint, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLAB";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const METADATA_KEY: &str = "__metadata__";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::with_capacity(checkpoint.params.len());
    let mut offset = 0usize;
    for (name, t) in checkpoint.params.iter() {
        entries.push((name, t, offset));
        offset = align8(offset + t.numel() * 4);
    }
    let payload_len = offset;

    // keys are written in canonical order, so build the object text by hand
    let mut header = String::from("{");
    let meta = serde_json::to_string(&Metadata {
        config: checkpoint.config.clone(),
    })
    .expect("config serializes");
    header.push_str(&format!("\"{METADATA_KEY}\":{meta}"));
    for (name, t, offset) in &entries {
        let entry = serde_json::to_string(&TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: *offset as u64,
        })
        .expect("entry serializes");
        header.push_str(&format!(",{}:{entry}", serde_json::to_string(name).unwrap()));
    }
    header.push('}');
    while !(PREAMBLE + header.len()).is_multiple_of(8) {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let payload_start = out.len();
    for (_, t, offset) in &entries {
        out.resize(payload_start + offset, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(payload_start + payload_len, 0);
    out
}

fn field_err(field: &str, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Field {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Parses checkpoint bytes, validating every header field against the payload.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let len = bytes.len() as u64;
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            offset: 0,
            needed: PREAMBLE as u64,
            len,
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= len)
        .ok_or(CheckpointError::Truncated {
            offset: PREAMBLE as u64,
            needed: header_len,
            len,
        })? as usize;
    let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let meta = header
        .get(METADATA_KEY)
        .ok_or_else(|| field_err(METADATA_KEY, "missing"))?;
    let meta: Metadata =
        serde_json::from_value(meta.clone()).map_err(|e| field_err(METADATA_KEY, e.to_string()))?;

    let mut params = ParamSet::new();
    for (name, value) in &header {
        if name == METADATA_KEY {
            continue;
        }
        let entry: TensorEntry =
            serde_json::from_value(value.clone()).map_err(|e| field_err(name, e.to_string()))?;
        if entry.dtype != "f32" {
            return Err(field_err(
                &format!("{name}.dtype"),
                format!("unsupported dtype `{}`", entry.dtype),
            ));
        }
        if !entry.offset.is_multiple_of(8) {
            return Err(field_err(
                &format!("{name}.offset"),
                format!("offset {} is not 8-byte aligned", entry.offset),
            ));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| field_err(&format!("{name}.shape"), "element count overflows"))?;
        let nbytes = numel * 4;
        let available = (payload.len() as u64).saturating_sub(entry.offset);
        if entry.offset > payload.len() as u64 || nbytes > available {
            return Err(CheckpointError::PayloadMismatch {
                name: name.clone(),
                shape: entry.shape,
                offset: header_end as u64 + entry.offset,
                bytes: nbytes,
                available,
            });
        }
        let start = entry.offset as usize;
        let data: Vec<f32> = payload[start..start + nbytes as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape, data).expect("length checked");
        params.insert(name.clone(), t);
    }
    Checkpoint::new(meta.config, params)
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, write_checkpoint(checkpoint)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 12,
            vocab_size: 10,
            max_seq_len: 6,
            type_vocab_size: 2,
        };
        init_model(&cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = tiny();
        let bytes = write_checkpoint(&ck);
        let back = read_checkpoint(&bytes).unwrap();
        assert!(ck.bit_eq(&back));
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = write_checkpoint(&tiny());
        assert_eq!(&bytes[..4], b"RLAB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!((16 + hl) % 8, 0);
        assert_eq!(bytes.len() % 8, 0);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = write_checkpoint(&tiny());
        for cut in [3, 12, 40, bytes.len() - 4] {
            let err = read_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::Truncated { .. }
                        | CheckpointError::PayloadMismatch { .. }
                        | CheckpointError::BadMagic { .. }
                ),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_checkpoint(&tiny());
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = write_checkpoint(&tiny());
        bytes[4] = 9;
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn declared_shape_larger_than_payload_is_rejected() {
        let bytes = write_checkpoint(&tiny());
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hl]).unwrap();
        // the last tensor in the file is layer 2's ffn.ln.beta with shape [8]
        let patched = header.replacen(
            "\"layer.2.ffn.ln.beta\":{\"dtype\":\"f32\",\"shape\":[8]",
            "\"layer.2.ffn.ln.beta\":{\"dtype\":\"f32\",\"shape\":[9]",
            1,
        );
        assert_ne!(patched, header);
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + hl..]);
        match read_checkpoint(&out).unwrap_err() {
            CheckpointError::PayloadMismatch { name, .. } => assert_eq!(name, "layer.2.ffn.ln.beta"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
