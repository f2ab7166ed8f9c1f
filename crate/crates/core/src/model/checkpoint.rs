//! Tensor files: a JSON manifest next to a blob of little-endian `f32`
//! values stored in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{LmConfig, LmParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DTYPE: &str = "f32-le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte range `[offset, offset + nbytes)` within the blob.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// `<base>.json` and `<base>.bin`.
pub fn tensor_file_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes the tensors and returns the manifest path.
pub fn save_tensors(base: &Path, tensors: &[(String, &Matrix)], metadata: serde_json::Value) -> Result<PathBuf> {
    let (json_path, bin_path) = tensor_file_paths(base);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.as_slice() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            dtype: DTYPE.into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        blob: bin_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors: entries,
        metadata,
    };
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

pub fn read_manifest(json_path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(json_path, e))
}

/// Reads every tensor listed in the manifest at `json_path`.
pub fn load_tensors(json_path: &Path) -> Result<(Manifest, Vec<(String, Matrix)>)> {
    let manifest = read_manifest(json_path)?;
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::InvalidMatrix(format!(
            "{} does not match its manifest checksum",
            bin_path.display()
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(Error::InvalidMatrix(format!(
                "tensor {} has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let [r, c] = e.shape;
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if e.nbytes as usize != r * c * 4 || end > blob.len() {
            return Err(Error::InvalidMatrix(format!(
                "tensor {} has an inconsistent byte range",
                e.name
            )));
        }
        let values = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((e.name.clone(), Matrix::from_vec(r, c, values)?));
    }
    Ok((manifest, out))
}

impl LmParams {
    /// Saves to `<base>.json` / `<base>.bin`; the config travels in the
    /// manifest metadata.
    pub fn save(&self, base: &Path) -> Result<PathBuf> {
        let meta = serde_json::json!({
            "kind": "lm",
            "config": self.config,
            "checksum": self.checksum(),
        });
        save_tensors(base, &self.tensors(), meta)
    }

    /// Loads a model saved by [`LmParams::save`]. Values come back rounded
    /// to `f32` precision.
    pub fn load(json_path: &Path) -> Result<LmParams> {
        let (manifest, tensors) = load_tensors(json_path)?;
        let config: LmConfig =
            serde_json::from_value(manifest.metadata["config"].clone()).map_err(|e| Error::json(json_path, e))?;
        let mut params = LmParams::init(&config)?.zeros_like();
        let expected = params.tensor_names();
        if expected.len() != tensors.len() {
            return Err(Error::InvalidMatrix(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (name, value) in tensors {
            let slot = params
                .tensor_mut(&name)
                .ok_or_else(|| Error::InvalidMatrix(format!("unknown tensor {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "tensor {name}: checkpoint {:?}, model {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(params)
    }

    /// Rounds every value to `f32`, so the in-memory model equals what a
    /// checkpoint round trip would produce.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
