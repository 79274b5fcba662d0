//! Checkpoint layout:
//!
//! ```text
//! "CSEEK001"                  8-byte magic
//! u64 LE                      manifest length in bytes
//! manifest                    UTF-8 JSON {config, tensors: [{name, shape, offset, len}]}
//! data                        little-endian f32 arrays; `offset` is relative to here
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSEEK001";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let len = t.numel() as u64;
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len,
        });
        offset += len * 4;
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config.clone(),
        tensors,
    })?;
    let mut buf = Vec::with_capacity(16 + manifest.len() + offset as usize);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for (_, t) in params.named_tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let got = &params.config;
    let same = ModelConfig {
        seed: expected.seed,
        ..got.clone()
    } == *expected;
    if !same {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {got:?}, expected {expected:?}"
        )));
    }
    Ok(params)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "missing CSEEK001 magic"));
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| format_err(8, "truncated manifest length"))?
        .try_into()
        .unwrap();
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let data_start = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(16, format!("manifest of {manifest_len} bytes runs past end of file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| format_err(16, format!("manifest is not valid JSON: {e}")))?;

    let mut params = ModelParams::zeros(&manifest.config)
        .map_err(|e| Error::ConfigMismatch(format!("manifest config invalid: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let data = &bytes[data_start..];
    for ((slot, (name, shape)), entry) in params
        .tensors_mut()
        .into_iter()
        .zip(&expected)
        .zip(&manifest.tensors)
    {
        if entry.name != *name || entry.shape != *shape {
            return Err(Error::ConfigMismatch(format!(
                "manifest entry {} {:?} does not match config tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.len as usize != shape.iter().product::<usize>() {
            return Err(Error::ConfigMismatch(format!(
                "{name}: length {} disagrees with shape {shape:?}",
                entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        let raw = data.get(start..end).ok_or_else(|| {
            format_err(
                data_start + data.len().min(start),
                format!("tensor {name} needs bytes {start}..{end} of the data section, which has {}", data.len()),
            )
        })?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *slot = Tensor::new(shape.clone(), values)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::init_params;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 16,
            vocab_size: 18,
            max_seq_len: 16,
            seed: 0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(&small(), 9).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(q.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&init_params(&small(), 9).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 12, 40, bytes.len() - 3] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn config_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&init_params(&small(), 9).unwrap(), &path).unwrap();

        let mut other = small();
        other.d_model = 16;
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));

        // Manifest whose config disagrees with its own tensor entries.
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let tampered = text.replace("\"d_mlp\":16", "\"d_mlp\":24");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(decode(&out), Err(Error::ConfigMismatch(_))));
    }
}
