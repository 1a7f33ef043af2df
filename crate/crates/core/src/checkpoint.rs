//! Tensor archives: a JSON manifest (name, shape, dtype, byte offset, plus
//! free-form metadata) next to one little-endian raw blob.
//!
//! `path` names the blob; the manifest lives at `path` with a `.json`
//! extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub const FORMAT: &str = "xview-tensors-1";

pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes tensors in order; returns the blob's SHA-256.
pub fn write_archive(
    path: &Path,
    tensors: &[(String, &Tensor)],
    dtype: DType,
    metadata: serde_json::Value,
) -> Result<String> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype,
            offset: blob.len(),
        });
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t.data().iter().for_each(|&v| blob.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    let hash = sha256_hex(&blob);
    let manifest = Manifest {
        format: FORMAT.into(),
        tensors: entries,
        blob_sha256: hash.clone(),
        metadata,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, &blob)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(hash)
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let blob = fs::read(path)?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its manifest hash", path.display())));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * e.dtype.size();
        let bytes = blob
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} overruns the blob", e.name)))?;
        let data = match e.dtype {
            DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok(Archive { manifest, tensors })
}
