//! Checkpoints: named tensor sections in the binary tensor format plus a
//! JSON manifest listing every tensor's name, shape and role. Round-trips
//! are bitwise.

use super::optim::Sgd;
use crate::nn::Stateful;
use crate::tensor::io::{self, TensorIoError};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint manifest {path}: {source}")]
    BadManifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("tensor {name}: {source}")]
    Tensor {
        name: String,
        source: TensorIoError,
    },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {stored:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.epct"))
}

/// Write every slot of the given sections plus, when present, the optimizer's
/// momentum buffers.
pub fn save(
    dir: &Path,
    sections: &mut [(&str, &mut dyn Stateful)],
    sgd: Option<&Sgd>,
    meta: CheckpointMeta,
) -> Result<(), CheckpointError> {
    let tensors_dir = dir.join("tensors");
    fs::create_dir_all(&tensors_dir).map_err(|e| CheckpointError::Io {
        path: tensors_dir.clone(),
        source: e,
    })?;
    let mut entries = Vec::new();
    let mut failure: Option<CheckpointError> = None;
    for (prefix, section) in sections.iter_mut() {
        section.visit(prefix, &mut |name, role, tensor| {
            if failure.is_some() {
                return;
            }
            let path = tensor_path(dir, &name);
            if let Err(e) = io::save_tensor(&path, tensor) {
                failure = Some(CheckpointError::Tensor { name, source: e });
                return;
            }
            entries.push(TensorEntry {
                name,
                shape: tensor.shape().to_vec(),
                role: role.as_str().to_string(),
            });
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(sgd) = sgd {
        for (pname, buf) in sgd.buffers() {
            let name = format!("momentum.{pname}");
            let tensor = Tensor::from_vec(buf.clone());
            let path = tensor_path(dir, &name);
            io::save_tensor(&path, &tensor)
                .map_err(|e| CheckpointError::Tensor {
                    name: name.clone(),
                    source: e,
                })?;
            entries.push(TensorEntry {
                name,
                shape: tensor.shape().to_vec(),
                role: "momentum".to_string(),
            });
        }
    }
    let manifest = Manifest {
        meta,
        tensors: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CheckpointError::Io {
        path,
        source: e,
    })
}

/// Restore every slot of the given sections in place; every slot must be
/// present with a matching shape. Returns the checkpoint metadata.
pub fn load(
    dir: &Path,
    sections: &mut [(&str, &mut dyn Stateful)],
    mut sgd: Option<&mut Sgd>,
) -> Result<CheckpointMeta, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| CheckpointError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest {
            path: manifest_path,
            source: e,
        })?;
    let by_name: BTreeMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    let mut failure: Option<CheckpointError> = None;
    for (prefix, section) in sections.iter_mut() {
        section.visit(prefix, &mut |name, _role, tensor| {
            if failure.is_some() {
                return;
            }
            if !by_name.contains_key(name.as_str()) {
                failure = Some(CheckpointError::Missing(name));
                return;
            }
            match io::load_tensor(&tensor_path(dir, &name)) {
                Ok(loaded) => {
                    if loaded.shape() != tensor.shape() {
                        failure = Some(CheckpointError::ShapeMismatch {
                            name,
                            stored: loaded.shape().to_vec(),
                            expected: tensor.shape().to_vec(),
                        });
                        return;
                    }
                    *tensor = loaded;
                }
                Err(e) => failure = Some(CheckpointError::Tensor { name, source: e }),
            }
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(sgd) = sgd.as_deref_mut() {
        for entry in &manifest.tensors {
            if let Some(pname) = entry.name.strip_prefix("momentum.") {
                let tensor = io::load_tensor(&tensor_path(dir, &entry.name)).map_err(|e| {
                    CheckpointError::Tensor {
                        name: entry.name.clone(),
                        source: e,
                    }
                })?;
                sgd.restore_buffer(pname.to_string(), tensor.into_data());
            }
        }
    }
    Ok(manifest.meta)
}

/// True if the checkpoint manifest lists any tensor under the given section
/// prefix.
pub fn has_section(dir: &Path, prefix: &str) -> Result<bool, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| CheckpointError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest {
            path: manifest_path,
            source: e,
        })?;
    let dotted = format!("{prefix}.");
    Ok(manifest.tensors.iter().any(|e| e.name.starts_with(&dotted)))
}

/// Shape of a stored tensor, if the checkpoint has it.
pub fn stored_shape(dir: &Path, name: &str) -> Result<Option<Vec<usize>>, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| CheckpointError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest {
            path: manifest_path,
            source: e,
        })?;
    Ok(manifest
        .tensors
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.shape.clone()))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| CheckpointError::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::BadManifest {
            path: manifest_path,
            source: e,
        })?;
    Ok(manifest.meta)
}
