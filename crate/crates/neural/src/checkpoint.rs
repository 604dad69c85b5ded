//! Model checkpoints: a JSON manifest plus one tensor file per parameter.
//!
//! A parameter named `generator/dense/kernel` is stored at
//! `<dir>/generator/dense/kernel.tensor`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::NeuralError;
use crate::layers::LayerRow;
use crate::params::ParamStore;
use crate::tensor_file::{tensor_read, tensor_write};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Builder configuration, enough to reconstruct the graph.
    pub model: serde_json::Value,
    pub seed: u64,
    pub layers: Vec<LayerRow>,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
}

fn file_for(name: &str) -> String {
    format!("{name}.tensor")
}

fn write_tensor(dir: &Path, name: &str, t: &crate::tensor::Tensor) -> Result<TensorEntry, NeuralError> {
    let file = file_for(name);
    let path: PathBuf = dir.join(&file);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    tensor_write(t, &path)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        file,
    })
}

pub fn save(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    model: serde_json::Value,
    seed: u64,
    layers: Vec<LayerRow>,
) -> Result<Manifest, NeuralError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let params = store
        .params()
        .iter()
        .map(|p| write_tensor(dir, &p.name, &p.tensor))
        .collect::<Result<Vec<_>, _>>()?;
    let buffers = store
        .buffers()
        .iter()
        .map(|(n, t)| write_tensor(dir, n, t))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        model,
        seed,
        layers,
        params,
        buffers,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, NeuralError> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrite the tensors of a freshly built `store` with the checkpoint's.
/// Names, counts and shapes must all agree.
pub fn load_into(dir: impl AsRef<Path>, store: &mut ParamStore) -> Result<Manifest, NeuralError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.params.len() != store.len() || manifest.buffers.len() != store.buffers().len() {
        return Err(NeuralError::Checkpoint(format!(
            "checkpoint has {} parameters / {} buffers, model has {} / {}",
            manifest.params.len(),
            manifest.buffers.len(),
            store.len(),
            store.buffers().len()
        )));
    }
    for (entry, p) in manifest.params.iter().zip(store.params_mut()) {
        let t = tensor_read(dir.join(&entry.file))?;
        if entry.name != p.name || t.shape() != p.tensor.shape() {
            return Err(NeuralError::Checkpoint(format!(
                "parameter {} {:?} does not match model parameter {} {:?}",
                entry.name,
                t.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = t;
    }
    for (entry, (name, buf)) in manifest.buffers.iter().zip(store.buffers_mut()) {
        let t = tensor_read(dir.join(&entry.file))?;
        if entry.name != *name || t.shape() != buf.shape() {
            return Err(NeuralError::Checkpoint(format!("buffer {} does not match {}", entry.name, name)));
        }
        *buf = t;
    }
    Ok(manifest)
}
