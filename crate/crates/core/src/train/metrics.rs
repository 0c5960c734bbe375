//! Structured per-step metrics: newline-delimited JSON records, appended and
//! flushed as they happen.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("metrics line {line} is not valid JSON: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error("non-finite metric `{name}` at step {step}")]
    NonFinite { name: String, step: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub stage: String,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub wall_ms: f64,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn check_finite(&self) -> Result<(), MetricsError> {
        if !self.lr.is_finite() {
            return Err(MetricsError::NonFinite {
                name: "lr".to_string(),
                step: self.step,
            });
        }
        for (name, &v) in &self.losses {
            if !v.is_finite() {
                return Err(MetricsError::NonFinite {
                    name: name.clone(),
                    step: self.step,
                });
            }
        }
        Ok(())
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = File::create(path).map_err(|e| MetricsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Append after an existing prefix, for resumed runs.
    pub fn append(path: &Path) -> Result<Self, MetricsError> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| MetricsError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), MetricsError> {
        record.check_finite()?;
        let line = serde_json::to_string(record).expect("record serializes");
        let io_err = |e| MetricsError::Io {
            path: self.path.clone(),
            source: e,
        };
        self.out.write_all(line.as_bytes()).map_err(io_err)?;
        self.out.write_all(b"\n").map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let file = File::open(path).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| MetricsError::BadRecord {
                line: i + 1,
                source: e,
            })?;
        records.push(record);
    }
    Ok(records)
}
