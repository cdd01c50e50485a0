//! Tensor checkpoints: a JSON manifest plus one raw little-endian blob.
//!
//! `<stem>.json` lists `{name, shape, dtype, offset}` for every tensor, where
//! `offset` is the byte offset into `<stem>.bin`. Values are row-major.
//! Free-form configuration travels in the manifest's `config` object.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "compact-rec/tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    /// Serializes the manifest and the blob.
    pub fn to_bytes(&self, dtype: Dtype) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset: blob.len() as u64,
            });
            match dtype {
                Dtype::F64 => t
                    .data()
                    .iter()
                    .for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| blob.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            tensors: entries,
        };
        Ok((serde_json::to_vec_pretty(&manifest)?, blob))
    }

    pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!(
                "unexpected manifest format `{}`",
                manifest.format
            )));
        }
        if manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let mut tensors = IndexMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * e.dtype.width();
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Format(format!("tensor `{}` overruns the blob", e.name))
            })?;
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Checkpoint {
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, stem: &Path, dtype: Dtype) -> Result<()> {
        let (manifest, blob) = self.to_bytes(dtype)?;
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(manifest_path(stem), manifest)?;
        fs::write(blob_path(stem), blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mpath = manifest_path(stem);
        if !mpath.exists() {
            return Err(Error::MissingInput(mpath));
        }
        let manifest = fs::read(&mpath)?;
        let blob = fs::read(blob_path(stem))?;
        Checkpoint::from_bytes(&manifest, &blob)
    }
}
