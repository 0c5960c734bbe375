//! The three stage drivers: pre-training, meta-training, meta-testing.
//! Each writes a config snapshot, per-step metrics and per-epoch checkpoints
//! into its output directory; all randomness derives from the master seed.

use super::checkpoint::{self, CheckpointError, CheckpointMeta};
use super::config::{ConfigError, RunConfig};
use super::metrics::{MetricsError, MetricsRecord, MetricsWriter};
use super::optim::{lr_at, ScheduleSpec, Sgd};
use crate::data::augment::AugmentationPolicy;
use crate::data::episode::{make_viewed_episode, sample_episode, Episode, EpisodeError, EpisodeSpec};
use crate::data::split::{DatasetError, DatasetSplit};
use crate::data::synth::synth_dataset;
use crate::encoder::{Model, ModelError};
use crate::meta::{
    meta_total, meta_test_predict, AttnModule, EpisodeView, MetaError, ViewedEpisode,
};
use crate::nn::{Binder, SlotRole, Stateful};
use crate::pretrain::{pretrain_total, AugmentedBatch, PretrainError, PretrainHeads};
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}: first non-finite term `{term}`")]
    NonFinite { step: u64, term: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl TrainError {
    /// Process exit code the CLI maps this error to: 2 config, 3 data,
    /// 4 numeric/internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) | TrainError::ConfigFile(_) => 2,
            TrainError::Data(_) | TrainError::Episode(_) | TrainError::Io { .. } => 3,
            _ => 4,
        }
    }
}

pub struct StageOutput {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub episodes: u64,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

fn ensure_dir(dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_snapshot(cfg: &RunConfig, out_dir: &Path) -> Result<(), TrainError> {
    let path = out_dir.join("config.txt");
    std::fs::write(&path, cfg.to_kv_string()).map_err(|e| TrainError::Io { path, source: e })
}

fn policy(name: &str) -> Result<AugmentationPolicy, TrainError> {
    AugmentationPolicy::by_name(name)
        .ok_or_else(|| TrainError::Config(format!("unknown augmentation strategy `{name}`")))
}

fn build_model(cfg: &RunConfig, base_classes: usize) -> Result<Model, TrainError> {
    let bcfg = crate::encoder::BackboneConfig {
        stage_channels: cfg.model.stage_channels.clone(),
        blocks_per_stage: cfg.model.blocks_per_stage,
        input_size: cfg.model.input_size,
        input_channels: cfg.model.input_channels,
        norm: cfg.model.norm,
    };
    Ok(Model::new(
        bcfg,
        cfg.model.proj_dim,
        cfg.model.resolved_proj_hidden(),
        base_classes,
        seed::derive(cfg.seed, "init", &[]),
    )?)
}

/// Stack flat CHW images into a leaf batch tensor on the tape.
fn image_batch(
    tape: &mut Tape,
    images: &[&[f64]],
    shape: [usize; 3],
) -> Result<Var, TensorError> {
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend_from_slice(img);
    }
    let t = Tensor::new(vec![images.len(), c, h, w], data)?;
    Ok(tape.leaf(&t))
}

fn check_finite(
    breakdown: &BTreeMap<String, f64>,
    step: u64,
) -> Result<(), TrainError> {
    for (term, &v) in breakdown {
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: term.clone(),
            });
        }
    }
    Ok(())
}

/// Apply SGD to every visited parameter that received a gradient through the
/// binder. Parameters that were never bound (frozen heads) are untouched.
fn apply_sgd(
    tape: &Tape,
    binder_entries: &[(String, Var)],
    sections: &mut [(&str, &mut dyn Stateful)],
    sgd: &mut Sgd,
    lr: f64,
) {
    let grads: BTreeMap<&str, &[f64]> = binder_entries
        .iter()
        .filter_map(|(name, var)| tape.grad(*var).map(|g| (name.as_str(), g)))
        .collect();
    for (prefix, section) in sections.iter_mut() {
        section.visit(prefix, &mut |name, role, tensor| {
            if role == SlotRole::Param {
                if let Some(g) = grads.get(name.as_str()) {
                    sgd.step(&name, tensor, g, lr);
                }
            }
        });
    }
}

/// Generate the default synthetic dataset pair: the first
/// `synth.train_classes` classes form the base split, the rest the novel
/// split.
pub fn synthesize_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), TrainError> {
    if cfg.synth.train_classes == 0 || cfg.synth.train_classes >= cfg.synth.classes {
        return Err(TrainError::Config(format!(
            "synth.train_classes must split {} classes into two non-empty sets",
            cfg.synth.classes
        )));
    }
    let full = synth_dataset(
        cfg.synth.classes,
        cfg.synth.per_class,
        cfg.synth.image_size,
        cfg.synth.difficulty,
        seed::derive(cfg.seed, "synth", &[]),
    );
    let (train, test) =
        full.split_by_classes(cfg.synth.train_classes, crate::data::SplitRole::Test);
    let train_manifest = crate::data::split::save_split(&out_dir.join("train"), &train)?;
    let test_manifest = crate::data::split::save_split(&out_dir.join("test"), &test)?;
    Ok((train_manifest, test_manifest))
}

/// Pre-training: per step, sample a batch, build two augmented views of each
/// image, minimize the weighted contrastive objective and record metrics.
/// Checkpoints land once per epoch plus a final copy.
pub fn pretrain_loop(
    cfg: &RunConfig,
    train: &DatasetSplit,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageOutput, TrainError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let master = cfg.seed;
    let [ch, h, w] = train.image_shape;
    let mut model = build_model(cfg, train.n_classes())?;
    let mut sgd = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut start_epoch = 0u64;
    if let Some(dir) = resume {
        let meta = checkpoint::load(dir, &mut [("", &mut model)], Some(&mut sgd))?;
        start_epoch = meta.epoch + 1;
    }

    let policy_a = policy(&cfg.pretrain.aug_a)?;
    let policy_b = policy(&cfg.pretrain.aug_b)?;
    let items = train.all_items();
    if items.is_empty() {
        return Err(TrainError::Data(DatasetError::EmptySplit));
    }
    let batch = cfg.pretrain.batch_size.min(items.len());
    let steps_per_epoch = (items.len() / batch).max(1) as u64;
    let schedule = ScheduleSpec::cosine(
        cfg.pretrain.base_lr,
        cfg.pretrain.warmup_epochs * steps_per_epoch,
        cfg.pretrain.epochs * steps_per_epoch,
    );

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut global_step = start_epoch * steps_per_epoch;

    for epoch in start_epoch..cfg.pretrain.epochs {
        let mut order = items.clone();
        shuffle(&mut order, seed::derive(master, "pretrain_shuffle", &[epoch]));
        for (step_in_epoch, chunk) in order.chunks(batch).take(steps_per_epoch as usize).enumerate()
        {
            let started = Instant::now();
            let step_seed = seed::derive(master, "pretrain_step", &[epoch, step_in_epoch as u64]);

            // Two independent views per image, interleaved so that slots
            // (2t, 2t+1) form the positive pair.
            let mut views: Vec<Vec<f64>> = Vec::with_capacity(2 * chunk.len());
            let mut labels = Vec::with_capacity(2 * chunk.len());
            let mut pair = Vec::with_capacity(2 * chunk.len());
            for (t, &(class, img)) in chunk.iter().enumerate() {
                let flat = flat_index(train, class, img);
                let raw = train.classes[class].image(img);
                for (view, p) in [(0u64, &policy_a), (1u64, &policy_b)] {
                    let s = seed::derive(master, "aug", &[epoch, flat, view]);
                    views.push(crate::data::augment::augment(raw, ch, h, w, p, s));
                }
                labels.extend([class, class]);
                pair.extend([2 * t + 1, 2 * t]);
            }

            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let refs: Vec<&[f64]> = views.iter().map(|v| v.as_slice()).collect();
            let x = image_batch(binder.tape, &refs, [ch, h, w])?;
            let bound = model.backbone.bind(&mut binder, true);
            let (maps, globals) = model.backbone.forward(binder.tape, &bound, x, true)?;
            let heads = PretrainHeads {
                proj: model.proj.bind(&mut binder, "proj", true),
                spatial: model.spatial.bind(&mut binder, "spatial", true),
                vecmap: model.vecmap.bind(&mut binder, "vecmap", true),
                classifier: model.classifier.bind(&mut binder, "classifier", true),
            };
            let z = heads.proj.forward(binder.tape, globals)?;
            let batch_views = AugmentedBatch::from_parts(binder.tape, maps, z, pair, labels)?;
            let (total, breakdown) =
                pretrain_total(binder.tape, &batch_views, &heads, &cfg.pretrain.weights)?;
            check_finite(&breakdown, global_step)?;
            let entries = binder.entries().to_vec();
            tape.backward(total)?;
            let lr = lr_at(&schedule, global_step);
            apply_sgd(&tape, &entries, &mut [("", &mut model)], &mut sgd, lr);

            metrics.write(&MetricsRecord {
                step: global_step,
                epoch,
                stage: "pretrain".to_string(),
                lr,
                losses: breakdown,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                seed: step_seed,
            })?;
            global_step += 1;
        }
        checkpoint::save(
            &out_dir.join(format!("ckpt-epoch-{epoch:03}")),
            &mut [("", &mut model)],
            Some(&sgd),
            CheckpointMeta {
                stage: "pretrain".to_string(),
                epoch,
                global_step,
                seed: master,
            },
        )?;
    }
    let final_dir = out_dir.join("ckpt-final");
    checkpoint::save(
        &final_dir,
        &mut [("", &mut model)],
        Some(&sgd),
        CheckpointMeta {
            stage: "pretrain".to_string(),
            epoch: cfg.pretrain.epochs.saturating_sub(1),
            global_step,
            seed: master,
        },
    )?;
    Ok(StageOutput {
        final_checkpoint: final_dir,
        metrics_path,
    })
}

fn flat_index(split: &DatasetSplit, class: usize, img: usize) -> u64 {
    let offset: usize = split.classes[..class].iter().map(|c| c.count()).sum();
    (offset + img) as u64
}

fn shuffle<T>(items: &mut [T], seed_value: u64) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_value);
    items.shuffle(&mut rng);
}

/// Encode one view's support+query images and slice out the per-set h and z
/// matrices.
struct EncodedView {
    support_h: Var,
    support_z: Var,
    query_h: Var,
    query_z: Var,
}

#[allow(clippy::too_many_arguments)]
fn encode_view(
    model: &mut Model,
    binder: &mut Binder,
    bound: &crate::encoder::BoundBackbone,
    proj: &crate::encoder::BoundProjection,
    support: &[Vec<f64>],
    query: &[Vec<f64>],
    shape: [usize; 3],
    training: bool,
) -> Result<EncodedView, TrainError> {
    let refs: Vec<&[f64]> = support
        .iter()
        .chain(query.iter())
        .map(|v| v.as_slice())
        .collect();
    let x = image_batch(binder.tape, &refs, shape)?;
    let (_maps, globals) = model.backbone.forward(binder.tape, bound, x, training)?;
    let z = proj.forward(binder.tape, globals)?;
    let n_support = support.len();
    let n_total = refs.len();
    let support_idx: Vec<usize> = (0..n_support).collect();
    let query_idx: Vec<usize> = (n_support..n_total).collect();
    Ok(EncodedView {
        support_h: binder.tape.gather_rows(globals, &support_idx)?,
        support_z: binder.tape.gather_rows(z, &support_idx)?,
        query_h: binder.tape.gather_rows(globals, &query_idx)?,
        query_z: binder.tape.gather_rows(z, &query_idx)?,
    })
}

/// Meta-training: per episode, two augmented views, cross-view episodic
/// classification plus the distance-scaled contrastive term. Trains the
/// encoder, the inherited projection head and the attention module.
pub fn metatrain_loop(
    cfg: &RunConfig,
    train: &DatasetSplit,
    init_checkpoint: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageOutput, TrainError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let master = cfg.seed;
    let shape = train.image_shape;
    let spec = EpisodeSpec {
        ways: cfg.meta.ways,
        shots: cfg.meta.shots,
        queries: cfg.meta.queries,
    };
    train.require_per_class(spec.shots + spec.queries)?;
    if spec.ways > train.n_classes() {
        return Err(TrainError::Episode(EpisodeError::NotEnoughClasses {
            ways: spec.ways,
            available: train.n_classes(),
        }));
    }

    let mut model = build_model(cfg, train.n_classes())?;
    let mut attn = AttnModule::new(
        model.backbone.config.feature_dim(),
        seed::derive(master, "attn_init", &[]),
    );
    let mut sgd = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut start_epoch = 0u64;
    if let Some(dir) = resume {
        let meta = checkpoint::load(
            dir,
            &mut [("", &mut model), ("attn", &mut attn)],
            Some(&mut sgd),
        )?;
        start_epoch = meta.epoch + 1;
    } else {
        checkpoint::load(init_checkpoint, &mut [("", &mut model)], None)?;
    }

    let policy_a = policy(&cfg.meta.aug_a)?;
    let policy_b = policy(&cfg.meta.aug_b)?;
    let schedule = ScheduleSpec::step(cfg.meta.base_lr, cfg.meta.resolved_step_size(), cfg.meta.gamma);
    let loss_cfg = cfg.meta.loss_config();

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut global_step = start_epoch * cfg.meta.episodes_per_epoch;

    for epoch in start_epoch..cfg.meta.epochs {
        for ep_i in 0..cfg.meta.episodes_per_epoch {
            let started = Instant::now();
            let ep_seed = seed::derive(master, "meta_episode", &[epoch, ep_i]);
            let episode = sample_episode(train, &spec, ep_seed)?;
            let views = make_viewed_episode(
                train,
                episode,
                [&policy_a, &policy_b],
                [
                    seed::derive(master, "meta_view", &[epoch, ep_i, 0]),
                    seed::derive(master, "meta_view", &[epoch, ep_i, 1]),
                ],
            );

            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bound = model.backbone.bind(&mut binder, true);
            let proj = model.proj.bind(&mut binder, "proj", true);
            let attn_bound = attn.bind(&mut binder, "attn", true);
            let mut encoded = Vec::with_capacity(2);
            for v in 0..2 {
                encoded.push(encode_view(
                    &mut model,
                    &mut binder,
                    &bound,
                    &proj,
                    &views.support[v],
                    &views.query[v],
                    shape,
                    true,
                )?);
            }
            let e2 = encoded.pop().expect("two views");
            let e1 = encoded.pop().expect("two views");
            let ve = ViewedEpisode {
                ways: spec.ways,
                shots: spec.shots,
                queries: spec.queries,
                views: [
                    EpisodeView {
                        support_h: e1.support_h,
                        support_z: e1.support_z,
                        query_h: e1.query_h,
                        query_z: e1.query_z,
                        support_labels: views.episode.support_labels.clone(),
                        query_labels: views.episode.query_labels.clone(),
                    },
                    EpisodeView {
                        support_h: e2.support_h,
                        support_z: e2.support_z,
                        query_h: e2.query_h,
                        query_z: e2.query_z,
                        support_labels: views.episode.support_labels.clone(),
                        query_labels: views.episode.query_labels.clone(),
                    },
                ],
            };
            let (total, breakdown) = meta_total(binder.tape, &ve, &attn_bound, &loss_cfg)?;
            check_finite(&breakdown, global_step)?;
            let entries = binder.entries().to_vec();
            tape.backward(total)?;
            let lr = lr_at(&schedule, epoch);
            apply_sgd(
                &tape,
                &entries,
                &mut [("", &mut model), ("attn", &mut attn)],
                &mut sgd,
                lr,
            );

            metrics.write(&MetricsRecord {
                step: global_step,
                epoch,
                stage: "metatrain".to_string(),
                lr,
                losses: breakdown,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                seed: ep_seed,
            })?;
            global_step += 1;
        }
        checkpoint::save(
            &out_dir.join(format!("ckpt-epoch-{epoch:03}")),
            &mut [("", &mut model), ("attn", &mut attn)],
            Some(&sgd),
            CheckpointMeta {
                stage: "metatrain".to_string(),
                epoch,
                global_step,
                seed: master,
            },
        )?;
    }
    let final_dir = out_dir.join("ckpt-final");
    checkpoint::save(
        &final_dir,
        &mut [("", &mut model), ("attn", &mut attn)],
        Some(&sgd),
        CheckpointMeta {
            stage: "metatrain".to_string(),
            epoch: cfg.meta.epochs.saturating_sub(1),
            global_step,
            seed: master,
        },
    )?;
    Ok(StageOutput {
        final_checkpoint: final_dir,
        metrics_path,
    })
}

/// Meta-testing: sample episodes from the novel split, no augmentation, eval
/// mode throughout; report mean accuracy with its 95% confidence interval.
pub fn metatest_loop(
    cfg: &RunConfig,
    test: &DatasetSplit,
    ckpt: &Path,
    out_dir: &Path,
) -> Result<AccuracyReport, TrainError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_snapshot(cfg, out_dir)?;
    let master = cfg.seed;
    let shape = test.image_shape;
    let spec = EpisodeSpec {
        ways: cfg.test.ways,
        shots: cfg.test.shots,
        queries: cfg.test.queries,
    };
    test.require_per_class(spec.shots + spec.queries)?;
    if spec.ways > test.n_classes() {
        return Err(TrainError::Episode(EpisodeError::NotEnoughClasses {
            ways: spec.ways,
            available: test.n_classes(),
        }));
    }

    // The classifier width is training-split dependent; recover it from the
    // stored tensor rather than guessing.
    let base_classes = checkpoint::stored_shape(ckpt, "classifier.w")?
        .and_then(|s| s.last().copied())
        .ok_or_else(|| TrainError::Config("checkpoint lacks classifier.w".to_string()))?;
    let mut model = build_model(cfg, base_classes)?;
    let mut attn = AttnModule::new(
        model.backbone.config.feature_dim(),
        seed::derive(master, "attn_init", &[]),
    );
    checkpoint::load(ckpt, &mut [("", &mut model)], None)?;
    if checkpoint::has_section(ckpt, "attn")? {
        checkpoint::load(ckpt, &mut [("attn", &mut attn)], None)?;
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut accuracies = Vec::with_capacity(cfg.test.episodes as usize);
    for i in 0..cfg.test.episodes {
        let started = Instant::now();
        let ep_seed = seed::derive(master, "test_episode", &[i]);
        let episode = sample_episode(test, &spec, ep_seed)?;
        let acc = score_episode(&mut model, &mut attn, &episode, test, shape, cfg)?;
        accuracies.push(acc);
        metrics.write(&MetricsRecord {
            step: i,
            epoch: 0,
            stage: "metatest".to_string(),
            lr: 0.0,
            losses: BTreeMap::from([("accuracy".to_string(), acc)]),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: ep_seed,
        })?;
    }
    let (mean, ci95) = mean_and_ci95(&accuracies);
    let report = AccuracyReport {
        episodes: cfg.test.episodes,
        ways: spec.ways,
        shots: spec.shots,
        queries: spec.queries,
        mean_accuracy: mean,
        ci95,
    };
    let path = out_dir.join("accuracy.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| TrainError::Io { path, source: e })?;
    Ok(report)
}

fn score_episode(
    model: &mut Model,
    attn: &mut AttnModule,
    episode: &Episode,
    split: &DatasetSplit,
    shape: [usize; 3],
    cfg: &RunConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let bound = model.backbone.bind(&mut binder, false);
    let images: Vec<&[f64]> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|&(c, i)| split.classes[c].image(i))
        .collect();
    let x = image_batch(binder.tape, &images, shape)?;
    let (_maps, globals) = model.backbone.forward(binder.tape, &bound, x, false)?;
    let n_support = episode.support.len();
    let support_idx: Vec<usize> = (0..n_support).collect();
    let query_idx: Vec<usize> = (n_support..images.len()).collect();
    let support_h = binder.tape.gather_rows(globals, &support_idx)?;
    let query_h = binder.tape.gather_rows(globals, &query_idx)?;
    let attn_bound = attn.bind(&mut binder, "attn", false);
    let preds = meta_test_predict(
        binder.tape,
        support_h,
        &episode.support_labels,
        query_h,
        episode.classes.len(),
        (!cfg.meta.bypass_attention).then_some(&attn_bound),
        cfg.meta.squared_distance,
    )?;
    let correct = preds
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean and 1.96·σ/√n with σ the sample standard deviation.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}
