//! Run manifests: what was run, with which config, on which bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_json;

/// SHA-256 of `blob <len>\0<bytes>`, the object hash git uses in its
/// SHA-256 repository format. Lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &crate::experiment::ExperimentConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg.resolved())?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: serde_json::Map::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(entry(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(entry(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: serde_json::Value) {
        self.notes.insert(key.into(), value);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn entry(path: &Path) -> Result<FileEntry> {
    Ok(FileEntry { path: path.display().to_string(), hash: file_hash(path)? })
}
