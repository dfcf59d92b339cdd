//! Little-endian `f32` blobs, checksums and the tensor checkpoint format.
//!
//! A checkpoint is a directory with `manifest.json` and `weights.f32`. The
//! manifest lists every tensor with its shape and element offset into the
//! blob, plus free-form metadata (schedule, profile, config echo).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "weights.f32";

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn f64_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn write_f32_blob(path: &Path, values: &[f64]) -> Result<()> {
    std::fs::write(path, f32_bytes(values)).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values; any other length is a layout error.
pub fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::LayoutMismatch(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(f64_from_bytes(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: String,
    pub version: String,
    pub tensors: Vec<TensorEntry>,
    pub checksum: String,
    pub meta: serde_json::Value,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorSet {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    pub fn by_name(&self) -> BTreeMap<&str, (&[usize], &[f64])> {
        self.tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect()
    }
}

pub fn save_checkpoint(dir: &Path, kind: &str, tensors: &TensorSet, meta: serde_json::Value) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in &tensors.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        blob.extend(f32_bytes(data));
    }
    let checksum = sha256_hex(&blob);
    let blob_path = dir.join(CHECKPOINT_BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = CheckpointManifest {
        format: "twohand-checkpoint".into(),
        kind: kind.into(),
        version: crate::VERSION.into(),
        tensors: entries,
        checksum: checksum.clone(),
        meta,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    Ok(checksum)
}

pub fn load_checkpoint(dir: &Path, kind: &str) -> Result<(CheckpointManifest, TensorSet)> {
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
    if manifest.kind != kind {
        return Err(Error::LayoutMismatch(format!(
            "checkpoint kind is {:?}, expected {kind:?}",
            manifest.kind
        )));
    }
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let actual = sha256_hex(&blob);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            path: blob_path,
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let mut set = TensorSet::default();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset + 4 * n;
        if t.dtype != "f32" || end > blob.len() {
            return Err(Error::LayoutMismatch(format!("tensor {} does not fit the blob", t.name)));
        }
        set.push(t.name.clone(), t.shape.clone(), f64_from_bytes(&blob[t.offset..end]));
    }
    Ok((manifest, set))
}
