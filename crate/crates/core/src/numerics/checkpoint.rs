//! Checkpoint container: `manifest.json` plus one little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "msm-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format: String,
    /// Caller-defined metadata (model hyperparameters, optimizer step, ...).
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

impl ContainerManifest {
    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }
}

pub fn save_container(dir: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut arrays = Vec::with_capacity(params.len());
    for id in params.ids() {
        let value = params.value(id);
        arrays.push(ArrayEntry {
            name: params.name(id).to_string(),
            shape: value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
        });
        for v in value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ContainerManifest {
        format: FORMAT.into(),
        meta,
        arrays,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ContainerManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ContainerManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}` in {}",
            manifest.format,
            path.display()
        )));
    }
    Ok(manifest)
}

pub fn load_container(dir: &Path) -> Result<(ParamStore, ContainerManifest)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut params = ParamStore::new();
    for entry in &manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "array `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("array `{}` runs past end of blob", entry.name))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((params, manifest))
}
