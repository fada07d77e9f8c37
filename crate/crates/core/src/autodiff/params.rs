use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Init {
    /// Normal with standard deviation `std`, resampled beyond two deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub init: Init,
    pub value: Tensor,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

fn trunc_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::TruncNormal { std } => (0..n).map(|_| trunc_normal(rng, std)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.params.push(Param { name: name.into(), init, value: Tensor { shape: shape.to_vec(), data } });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(flat.len() == self.n_values(), Shape, "flat buffer has {} values, store has {}", flat.len(), self.n_values());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    n_values: usize,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

const FORMAT: &str = "f64-le";

/// Writes `<stem>.json` (shape table) and `<stem>.bin` (little-endian f64).
pub fn save_checkpoint(store: &ParamStore, stem: &Path, meta: serde_json::Value) -> Result<()> {
    let blob_path = stem.with_extension("bin");
    let mut offset = 0;
    let params = store
        .iter()
        .map(|p| {
            let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape.clone(), offset, len: p.value.len() };
            offset += p.value.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        n_values: store.n_values(),
        params,
        meta,
    };
    let bytes: Vec<u8> = store.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    if let Some(dir) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    crate::io::write_json(&stem.with_extension("json"), &manifest)
}

/// Loads values into `store`, matching parameters by name and shape.
pub fn load_checkpoint(store: &mut ParamStore, stem: &Path) -> Result<serde_json::Value> {
    let manifest: Manifest = crate::io::read_json(&stem.with_extension("json"))?;
    ensure!(manifest.format == FORMAT, Invalid, "unsupported checkpoint format {}", manifest.format);
    let blob_path = stem.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    ensure!(bytes.len() == manifest.n_values * 8, Invalid, "checkpoint blob has {} bytes", bytes.len());
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    ensure!(manifest.params.len() == store.len(), Invalid, "checkpoint has {} tensors, model has {}", manifest.params.len(), store.len());
    for e in &manifest.params {
        let id = store.find(&e.name).ok_or_else(|| Error::Invalid(format!("checkpoint tensor {} not in model", e.name)))?;
        let p = store.get_mut(id);
        ensure!(p.value.shape == e.shape, Shape, "{}: checkpoint shape {:?}, model {:?}", e.name, e.shape, p.value.shape);
        ensure!(e.offset + e.len <= flat.len(), Invalid, "{}: blob range out of bounds", e.name);
        p.value.data.copy_from_slice(&flat[e.offset..e.offset + e.len]);
    }
    Ok(manifest.meta)
}
