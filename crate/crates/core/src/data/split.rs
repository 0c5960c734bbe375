//! Dataset splits: an indexed raster set per class, plus manifest save/load.
//! Image tensors live in the binary tensor format, one file per class with
//! shape [count × ch × H × W]; the manifest is a JSON listing of classes.

use crate::tensor::io::{self, TensorIoError};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path} is not valid JSON: {source}")]
    BadManifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("split has no classes")]
    EmptySplit,
    #[error("missing tensor file {0}")]
    MissingFile(PathBuf),
    #[error("tensor file {path}: {source}")]
    BadTensor {
        path: PathBuf,
        source: TensorIoError,
    },
    #[error("class {name}: manifest count {expected} but tensor holds {got}")]
    CountMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("class {name}: expected images of shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("class {name} too small: {got} samples < required {required}")]
    ClassTooSmall {
        name: String,
        got: usize,
        required: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// One class's images: a [count × ch × H × W] tensor plus its registry name.
#[derive(Debug, Clone)]
pub struct ClassImages {
    pub name: String,
    pub images: Tensor,
}

impl ClassImages {
    pub fn count(&self) -> usize {
        self.images.shape()[0]
    }

    /// Borrow image `i` as a flat [ch·H·W] slice.
    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.images.numel() / self.count();
        &self.images.data()[i * per..(i + 1) * per]
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassImages>,
}

impl DatasetSplit {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(|c| c.count()).min().unwrap_or(0)
    }

    pub fn total_images(&self) -> usize {
        self.classes.iter().map(|c| c.count()).sum()
    }

    /// Flat (class, index) pairs over every image, class-major.
    pub fn all_items(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, imgs)| (0..imgs.count()).map(move |i| (c, i)))
            .collect()
    }

    /// Check every class can supply `required` samples, naming the first that
    /// cannot.
    pub fn require_per_class(&self, required: usize) -> Result<(), DatasetError> {
        for c in &self.classes {
            if c.count() < required {
                return Err(DatasetError::ClassTooSmall {
                    name: c.name.clone(),
                    got: c.count(),
                    required,
                });
            }
        }
        Ok(())
    }

    /// Partition the classes of a split into two disjoint splits by class
    /// index; class names travel along, keeping the registries disjoint.
    pub fn split_by_classes(mut self, first: usize, second_role: SplitRole) -> (Self, Self) {
        let rest = self.classes.split_off(first.min(self.classes.len()));
        let second = DatasetSplit {
            role: second_role,
            image_shape: self.image_shape,
            classes: rest,
        };
        (self, second)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    class: String,
    file: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    role: SplitRole,
    image_shape: [usize; 3],
    classes: Vec<ManifestEntry>,
}

/// Write the split next to its manifest: `<dir>/manifest.json` plus one
/// tensor file per class.
pub fn save_split(dir: &Path, split: &DatasetSplit) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| DatasetError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for class in &split.classes {
        let file = format!("{}.epct", class.name);
        let path = dir.join(&file);
        io::save_tensor(&path, &class.images).map_err(|e| DatasetError::BadTensor {
            path: path.clone(),
            source: e,
        })?;
        entries.push(ManifestEntry {
            class: class.name.clone(),
            file,
            count: class.count(),
        });
    }
    let manifest = Manifest {
        role: split.role,
        image_shape: split.image_shape,
        classes: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| DatasetError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

/// Load and validate a split from its manifest. `min_class_size`, when
/// given, is the episode-shape requirement (K+Q or the pre-train minimum).
pub fn load_split(
    manifest_path: &Path,
    min_class_size: Option<usize>,
) -> Result<DatasetSplit, DatasetError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DatasetError::Io {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::BadManifest {
            path: manifest_path.to_path_buf(),
            source: e,
        })?;
    if manifest.classes.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut classes = Vec::new();
    for entry in &manifest.classes {
        let path = dir.join(&entry.file);
        if !path.exists() {
            return Err(DatasetError::MissingFile(path));
        }
        let images = io::load_tensor(&path).map_err(|e| DatasetError::BadTensor {
            path: path.clone(),
            source: e,
        })?;
        let shape = images.shape().to_vec();
        let expected = [
            entry.count,
            manifest.image_shape[0],
            manifest.image_shape[1],
            manifest.image_shape[2],
        ];
        if shape != expected {
            if shape.first() != Some(&entry.count) {
                return Err(DatasetError::CountMismatch {
                    name: entry.class.clone(),
                    expected: entry.count,
                    got: shape.first().copied().unwrap_or(0),
                });
            }
            return Err(DatasetError::ShapeMismatch {
                name: entry.class.clone(),
                expected: expected.to_vec(),
                got: shape,
            });
        }
        classes.push(ClassImages {
            name: entry.class.clone(),
            images,
        });
    }
    let split = DatasetSplit {
        role: manifest.role,
        image_shape: manifest.image_shape,
        classes,
    };
    if let Some(required) = min_class_size {
        split.require_per_class(required)?;
    }
    Ok(split)
}
