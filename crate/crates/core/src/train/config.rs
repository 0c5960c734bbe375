//! Run configuration: a flat dotted-key = value text format. The same keys
//! work in config files and `--set` overrides; unknown keys are rejected by
//! name. Serialization emits every key with its resolved value, which is the
//! config snapshot written into each run's output directory.

use crate::meta::MetaLossConfig;
use crate::pretrain::{PretrainLossWeights, Reduction};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}` as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("config line {line} is not `key = value`: `{text}`")]
    BadLine { line: usize, text: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_manifest: String,
    pub test_manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub norm: bool,
    pub proj_dim: usize,
    /// 0 means "2 × feature dim", resolved at model construction.
    pub proj_hidden: usize,
}

impl ModelConfig {
    pub fn resolved_proj_hidden(&self) -> usize {
        if self.proj_hidden == 0 {
            2 * *self.stage_channels.last().unwrap_or(&64)
        } else {
            self.proj_hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: u64,
    pub weights: PretrainLossWeights,
    pub aug_a: String,
    pub aug_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub epochs: u64,
    pub episodes_per_epoch: u64,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub base_lr: f64,
    /// None resolves by shot count: 40 for 1-shot, 50 otherwise.
    pub step_size: Option<u64>,
    pub gamma: f64,
    pub tau5: f64,
    /// None resolves by shot count: 0.01 for 1-shot, 0.1 otherwise.
    pub beta: Option<f64>,
    pub use_cvet: bool,
    pub use_info: bool,
    pub bypass_attention: bool,
    pub squared_distance: bool,
    pub aug_a: String,
    pub aug_b: String,
}

impl MetaConfig {
    pub fn resolved_beta(&self) -> f64 {
        self.beta
            .unwrap_or(if self.shots == 1 { 0.01 } else { 0.1 })
    }

    pub fn resolved_step_size(&self) -> u64 {
        self.step_size
            .unwrap_or(if self.shots == 1 { 40 } else { 50 })
    }

    pub fn loss_config(&self) -> MetaLossConfig {
        MetaLossConfig {
            tau5: self.tau5,
            beta: self.resolved_beta(),
            use_cvet: self.use_cvet,
            use_info: self.use_info,
            bypass_attention: self.bypass_attention,
            squared_distance: self.squared_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub episodes: u64,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub train_classes: usize,
    pub image_size: usize,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub test: TestConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig {
                train_manifest: "data/train/manifest.json".to_string(),
                test_manifest: "data/test/manifest.json".to_string(),
            },
            model: ModelConfig {
                stage_channels: vec![16, 32, 64],
                blocks_per_stage: 1,
                input_size: 32,
                input_channels: 3,
                norm: true,
                proj_dim: 64,
                proj_hidden: 0,
            },
            optim: OptimConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            pretrain: PretrainConfig {
                epochs: 30,
                batch_size: 32,
                base_lr: 0.1,
                warmup_epochs: 5,
                weights: PretrainLossWeights::default(),
                aug_a: "simclr".to_string(),
                aug_b: "simclr".to_string(),
            },
            meta: MetaConfig {
                epochs: 20,
                episodes_per_epoch: 100,
                ways: 5,
                shots: 1,
                queries: 15,
                base_lr: 1e-4,
                step_size: None,
                gamma: 0.5,
                tau5: 0.1,
                beta: None,
                use_cvet: true,
                use_info: true,
                bypass_attention: false,
                squared_distance: false,
                aug_a: "standard".to_string(),
                aug_b: "simclr".to_string(),
            },
            test: TestConfig {
                episodes: 2000,
                ways: 5,
                shots: 1,
                queries: 15,
            },
            synth: SynthConfig {
                classes: 8,
                per_class: 60,
                train_classes: 3,
                image_size: 32,
                difficulty: 0.2,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, wanted: &'static str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            wanted: "bool",
        }),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let trimmed = value.trim().trim_start_matches('[').trim_end_matches(']');
    trimmed
        .split(',')
        .map(|part| parse(key, part, "list of usize"))
        .collect()
}

impl RunConfig {
    /// Apply one dotted-key override; unknown keys are rejected by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v, "u64")?,
            "data.train" => self.data.train_manifest = v.to_string(),
            "data.test" => self.data.test_manifest = v.to_string(),
            "model.stage_channels" => self.model.stage_channels = parse_usize_list(key, v)?,
            "model.blocks_per_stage" => self.model.blocks_per_stage = parse(key, v, "usize")?,
            "model.input_size" => self.model.input_size = parse(key, v, "usize")?,
            "model.input_channels" => self.model.input_channels = parse(key, v, "usize")?,
            "model.norm" => self.model.norm = parse_bool(key, v)?,
            "model.proj_dim" => self.model.proj_dim = parse(key, v, "usize")?,
            "model.proj_hidden" => self.model.proj_hidden = parse(key, v, "usize")?,
            "optim.momentum" => self.optim.momentum = parse(key, v, "f64")?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v, "f64")?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v, "u64")?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v, "usize")?,
            "pretrain.lr" => self.pretrain.base_lr = parse(key, v, "f64")?,
            "pretrain.warmup_epochs" => self.pretrain.warmup_epochs = parse(key, v, "u64")?,
            "pretrain.tau1" => self.pretrain.weights.tau1 = parse(key, v, "f64")?,
            "pretrain.tau2" => self.pretrain.weights.tau2 = parse(key, v, "f64")?,
            "pretrain.tau3" => self.pretrain.weights.tau3 = parse(key, v, "f64")?,
            "pretrain.tau4" => self.pretrain.weights.tau4 = parse(key, v, "f64")?,
            "pretrain.alpha1" => self.pretrain.weights.alpha1 = parse(key, v, "f64")?,
            "pretrain.alpha2" => self.pretrain.weights.alpha2 = parse(key, v, "f64")?,
            "pretrain.alpha3" => self.pretrain.weights.alpha3 = parse(key, v, "f64")?,
            "pretrain.use_ce" => self.pretrain.weights.use_ce = parse_bool(key, v)?,
            "pretrain.use_global_ss" => self.pretrain.weights.use_global_ss = parse_bool(key, v)?,
            "pretrain.use_local_ss" => self.pretrain.weights.use_local_ss = parse_bool(key, v)?,
            "pretrain.use_map_map" => self.pretrain.weights.use_map_map = parse_bool(key, v)?,
            "pretrain.use_vec_map" => self.pretrain.weights.use_vec_map = parse_bool(key, v)?,
            "pretrain.use_global_sup" => {
                self.pretrain.weights.use_global_sup = parse_bool(key, v)?
            }
            "pretrain.reduction" => {
                self.pretrain.weights.reduction = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: v.to_string(),
                            wanted: "sum|mean",
                        })
                    }
                }
            }
            "pretrain.aug_a" => self.pretrain.aug_a = v.to_string(),
            "pretrain.aug_b" => self.pretrain.aug_b = v.to_string(),
            "meta.epochs" => self.meta.epochs = parse(key, v, "u64")?,
            "meta.episodes_per_epoch" => self.meta.episodes_per_epoch = parse(key, v, "u64")?,
            "meta.ways" => self.meta.ways = parse(key, v, "usize")?,
            "meta.shots" => self.meta.shots = parse(key, v, "usize")?,
            "meta.queries" => self.meta.queries = parse(key, v, "usize")?,
            "meta.lr" => self.meta.base_lr = parse(key, v, "f64")?,
            "meta.step_size" => self.meta.step_size = Some(parse(key, v, "u64")?),
            "meta.gamma" => self.meta.gamma = parse(key, v, "f64")?,
            "meta.tau5" => self.meta.tau5 = parse(key, v, "f64")?,
            "meta.beta" => self.meta.beta = Some(parse(key, v, "f64")?),
            "meta.use_cvet" => self.meta.use_cvet = parse_bool(key, v)?,
            "meta.use_info" => self.meta.use_info = parse_bool(key, v)?,
            "meta.bypass_attention" => self.meta.bypass_attention = parse_bool(key, v)?,
            "meta.squared_distance" => self.meta.squared_distance = parse_bool(key, v)?,
            "meta.aug_a" => self.meta.aug_a = v.to_string(),
            "meta.aug_b" => self.meta.aug_b = v.to_string(),
            "test.episodes" => self.test.episodes = parse(key, v, "u64")?,
            "test.ways" => self.test.ways = parse(key, v, "usize")?,
            "test.shots" => self.test.shots = parse(key, v, "usize")?,
            "test.queries" => self.test.queries = parse(key, v, "usize")?,
            "synth.classes" => self.synth.classes = parse(key, v, "usize")?,
            "synth.per_class" => self.synth.per_class = parse(key, v, "usize")?,
            "synth.train_classes" => self.synth.train_classes = parse(key, v, "usize")?,
            "synth.image_size" => self.synth.image_size = parse(key, v, "usize")?,
            "synth.difficulty" => self.synth.difficulty = parse(key, v, "f64")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pretrain.batch_size == 0 {
            return Err(ConfigError::Invalid("pretrain.batch_size must be ≥ 1".into()));
        }
        if self.meta.ways == 0 || self.meta.shots == 0 || self.test.ways == 0 {
            return Err(ConfigError::Invalid("episode shape must be non-degenerate".into()));
        }
        for (name, t) in [
            ("pretrain.tau1", self.pretrain.weights.tau1),
            ("pretrain.tau2", self.pretrain.weights.tau2),
            ("pretrain.tau3", self.pretrain.weights.tau3),
            ("pretrain.tau4", self.pretrain.weights.tau4),
            ("meta.tau5", self.meta.tau5),
        ] {
            if !(t > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0, got {t}")));
            }
        }
        if self.meta.resolved_beta() < 0.0 {
            return Err(ConfigError::Invalid("meta.beta must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Serialize with every key resolved, sorted, one per line. Reading this
    /// back through [`RunConfig::apply_text`] reproduces the config.
    pub fn to_kv_string(&self) -> String {
        let channels = self
            .model
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let reduction = match self.pretrain.weights.reduction {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.train".into(), self.data.train_manifest.clone()),
            ("data.test".into(), self.data.test_manifest.clone()),
            ("model.stage_channels".into(), channels),
            ("model.blocks_per_stage".into(), self.model.blocks_per_stage.to_string()),
            ("model.input_size".into(), self.model.input_size.to_string()),
            ("model.input_channels".into(), self.model.input_channels.to_string()),
            ("model.norm".into(), self.model.norm.to_string()),
            ("model.proj_dim".into(), self.model.proj_dim.to_string()),
            ("model.proj_hidden".into(), self.model.resolved_proj_hidden().to_string()),
            ("optim.momentum".into(), self.optim.momentum.to_string()),
            ("optim.weight_decay".into(), self.optim.weight_decay.to_string()),
            ("pretrain.epochs".into(), self.pretrain.epochs.to_string()),
            ("pretrain.batch_size".into(), self.pretrain.batch_size.to_string()),
            ("pretrain.lr".into(), self.pretrain.base_lr.to_string()),
            ("pretrain.warmup_epochs".into(), self.pretrain.warmup_epochs.to_string()),
            ("pretrain.tau1".into(), self.pretrain.weights.tau1.to_string()),
            ("pretrain.tau2".into(), self.pretrain.weights.tau2.to_string()),
            ("pretrain.tau3".into(), self.pretrain.weights.tau3.to_string()),
            ("pretrain.tau4".into(), self.pretrain.weights.tau4.to_string()),
            ("pretrain.alpha1".into(), self.pretrain.weights.alpha1.to_string()),
            ("pretrain.alpha2".into(), self.pretrain.weights.alpha2.to_string()),
            ("pretrain.alpha3".into(), self.pretrain.weights.alpha3.to_string()),
            ("pretrain.use_ce".into(), self.pretrain.weights.use_ce.to_string()),
            ("pretrain.use_global_ss".into(), self.pretrain.weights.use_global_ss.to_string()),
            ("pretrain.use_local_ss".into(), self.pretrain.weights.use_local_ss.to_string()),
            ("pretrain.use_map_map".into(), self.pretrain.weights.use_map_map.to_string()),
            ("pretrain.use_vec_map".into(), self.pretrain.weights.use_vec_map.to_string()),
            ("pretrain.use_global_sup".into(), self.pretrain.weights.use_global_sup.to_string()),
            ("pretrain.reduction".into(), reduction.to_string()),
            ("pretrain.aug_a".into(), self.pretrain.aug_a.clone()),
            ("pretrain.aug_b".into(), self.pretrain.aug_b.clone()),
            ("meta.epochs".into(), self.meta.epochs.to_string()),
            ("meta.episodes_per_epoch".into(), self.meta.episodes_per_epoch.to_string()),
            ("meta.ways".into(), self.meta.ways.to_string()),
            ("meta.shots".into(), self.meta.shots.to_string()),
            ("meta.queries".into(), self.meta.queries.to_string()),
            ("meta.lr".into(), self.meta.base_lr.to_string()),
            ("meta.step_size".into(), self.meta.resolved_step_size().to_string()),
            ("meta.gamma".into(), self.meta.gamma.to_string()),
            ("meta.tau5".into(), self.meta.tau5.to_string()),
            ("meta.beta".into(), self.meta.resolved_beta().to_string()),
            ("meta.use_cvet".into(), self.meta.use_cvet.to_string()),
            ("meta.use_info".into(), self.meta.use_info.to_string()),
            ("meta.bypass_attention".into(), self.meta.bypass_attention.to_string()),
            ("meta.squared_distance".into(), self.meta.squared_distance.to_string()),
            ("meta.aug_a".into(), self.meta.aug_a.clone()),
            ("meta.aug_b".into(), self.meta.aug_b.clone()),
            ("test.episodes".into(), self.test.episodes.to_string()),
            ("test.ways".into(), self.test.ways.to_string()),
            ("test.shots".into(), self.test.shots.to_string()),
            ("test.queries".into(), self.test.queries.to_string()),
            ("synth.classes".into(), self.synth.classes.to_string()),
            ("synth.per_class".into(), self.synth.per_class.to_string()),
            ("synth.train_classes".into(), self.synth.train_classes.to_string()),
            ("synth.image_size".into(), self.synth.image_size.to_string()),
            ("synth.difficulty".into(), self.synth.difficulty.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
