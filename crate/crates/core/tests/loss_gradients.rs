//! Central finite-difference checks through every loss, both w.r.t. raw
//! inputs and w.r.t. module parameters reached through the full model.

mod common;

use common::{EpisodeFixture, LossFixture};
use epct_core::encoder::{BackboneConfig, Model};
use epct_core::meta::{self, MetaLossConfig};
use epct_core::nn::{Binder, SlotRole, Stateful};
use epct_core::pretrain::{self, PretrainHeads, PretrainLossWeights, Reduction};
use epct_core::tensor::fd::{all_coords, check_gradients, rel_err, DEFAULT_STEP};
use epct_core::{Tape, Tensor, TensorError, Var};
use rand::Rng;

const TOL: f64 = 1e-4;

fn heads_from_vars(vs: &[Var], dim: usize) -> epct_core::encoder::BoundSpatialHeads {
    use epct_core::nn::BoundLinear;
    epct_core::encoder::BoundSpatialHeads {
        q: BoundLinear { w: vs[0], b: vs[1] },
        k: BoundLinear { w: vs[2], b: vs[3] },
        v: BoundLinear { w: vs[4], b: vs[5] },
        scale: 1.0 / (dim as f64).sqrt(),
    }
}

#[test]
fn global_losses_differentiate_wrt_projected_vectors() {
    for seed in 0..5 {
        let fx = LossFixture::random(seed);
        let maps = fx.maps.clone();
        let pair = fx.pair.clone();
        let labels = fx.labels.clone();
        let inputs = vec![fx.z.clone()];
        let coords = all_coords(&inputs);
        for supervised in [false, true] {
            let maps = maps.clone();
            let pair = pair.clone();
            let labels = labels.clone();
            let build = move |t: &mut Tape, vs: &[Var]| -> Result<Var, TensorError> {
                let m = t.leaf(&maps);
                let batch = pretrain::AugmentedBatch::from_parts(
                    t,
                    m,
                    vs[0],
                    pair.clone(),
                    labels.clone(),
                )
                .map_err(|_| TensorError::Empty { op: "batch" })?;
                let loss = if supervised {
                    pretrain::global_sup_loss(t, &batch, 0.1, Reduction::Sum)
                } else {
                    pretrain::global_ss_loss(t, &batch, 0.1, Reduction::Sum)
                };
                loss.map_err(|_| TensorError::Empty { op: "loss" })
            };
            let report = check_gradients(&inputs, &coords, DEFAULT_STEP, &build).unwrap();
            assert!(
                report.max_rel_err < TOL,
                "seed {seed} supervised={supervised}: {}",
                report.max_rel_err
            );
        }
    }
}

#[test]
fn map_map_loss_differentiates_wrt_heads_and_maps() {
    for seed in 10..13 {
        let fx = LossFixture::random(seed);
        let z = fx.z.clone();
        let pair = fx.pair.clone();
        let labels = fx.labels.clone();
        let dim = fx.dim;
        let inputs = vec![
            fx.spatial.q.w.value.clone(),
            fx.spatial.q.b.value.clone(),
            fx.spatial.k.w.value.clone(),
            fx.spatial.k.b.value.clone(),
            fx.spatial.v.w.value.clone(),
            fx.spatial.v.b.value.clone(),
            fx.maps.clone(),
        ];
        let coords = all_coords(&inputs);
        let build = move |t: &mut Tape, vs: &[Var]| -> Result<Var, TensorError> {
            let heads = heads_from_vars(vs, dim);
            let zv = t.leaf(&z);
            let batch =
                pretrain::AugmentedBatch::from_parts(t, vs[6], zv, pair.clone(), labels.clone())
                    .map_err(|_| TensorError::Empty { op: "batch" })?;
            pretrain::map_map_loss(t, &batch, &heads, 0.1, Reduction::Sum)
                .map_err(|_| TensorError::Empty { op: "loss" })
        };
        let report = check_gradients(&inputs, &coords, DEFAULT_STEP, &build).unwrap();
        assert!(report.max_rel_err < TOL, "seed {seed}: {}", report.max_rel_err);
    }
}

#[test]
fn vec_map_loss_differentiates_wrt_heads_and_maps() {
    for seed in 20..23 {
        let fx = LossFixture::random(seed);
        let z = fx.z.clone();
        let pair = fx.pair.clone();
        let labels = fx.labels.clone();
        let inputs = vec![
            fx.vecmap.fc.w.value.clone(),
            fx.vecmap.fc.b.value.clone(),
            fx.proj.l1.w.value.clone(),
            fx.proj.l1.b.value.clone(),
            fx.proj.l2.w.value.clone(),
            fx.proj.l2.b.value.clone(),
            fx.maps.clone(),
        ];
        let coords = all_coords(&inputs);
        let build = move |t: &mut Tape, vs: &[Var]| -> Result<Var, TensorError> {
            use epct_core::encoder::{BoundProjection, BoundVecMapHead};
            use epct_core::nn::BoundLinear;
            let vm = BoundVecMapHead {
                fc: BoundLinear { w: vs[0], b: vs[1] },
            };
            let proj = BoundProjection {
                l1: BoundLinear { w: vs[2], b: vs[3] },
                l2: BoundLinear { w: vs[4], b: vs[5] },
            };
            let zv = t.leaf(&z);
            let batch =
                pretrain::AugmentedBatch::from_parts(t, vs[6], zv, pair.clone(), labels.clone())
                    .map_err(|_| TensorError::Empty { op: "batch" })?;
            pretrain::vec_map_loss(t, &batch, &vm, &proj, 0.1, Reduction::Sum)
                .map_err(|_| TensorError::Empty { op: "loss" })
        };
        let report = check_gradients(&inputs, &coords, DEFAULT_STEP, &build).unwrap();
        assert!(report.max_rel_err < TOL, "seed {seed}: {}", report.max_rel_err);
    }
}

#[test]
fn meta_losses_differentiate_through_attention() {
    for seed in 30..33 {
        let fx = EpisodeFixture::random(seed);
        let attn = epct_core::gradcheck::lively_attn(fx.dim_h, 500 + seed);
        let inputs: Vec<Tensor> = fx.tensors.to_vec();
        let coords = all_coords(&inputs);
        let support_labels = fx.support_labels.clone();
        let query_labels = fx.query_labels.clone();
        let (ways, shots, queries) = (fx.ways, fx.shots, fx.queries);
        let build = move |t: &mut Tape, vs: &[Var]| -> Result<Var, TensorError> {
            let mut binder = Binder::new(t);
            let bound = attn.bind(&mut binder, "attn", true);
            let ve = meta::ViewedEpisode {
                ways,
                shots,
                queries,
                views: [
                    meta::EpisodeView {
                        support_h: vs[0],
                        support_z: vs[1],
                        query_h: vs[2],
                        query_z: vs[3],
                        support_labels: support_labels.clone(),
                        query_labels: query_labels.clone(),
                    },
                    meta::EpisodeView {
                        support_h: vs[4],
                        support_z: vs[5],
                        query_h: vs[6],
                        query_z: vs[7],
                        support_labels: support_labels.clone(),
                        query_labels: query_labels.clone(),
                    },
                ],
            };
            let cfg = MetaLossConfig {
                beta: 0.3,
                ..MetaLossConfig::default_for_shots(1)
            };
            let (total, _) = meta_total_local(binder.tape, &ve, &bound, &cfg)?;
            Ok(total)
        };
        let report = check_gradients(&inputs, &coords, DEFAULT_STEP, &build).unwrap();
        assert!(report.max_rel_err < TOL, "seed {seed}: {}", report.max_rel_err);
    }
}

fn meta_total_local(
    tape: &mut Tape,
    ve: &meta::ViewedEpisode,
    attn: &epct_core::meta::BoundAttn,
    cfg: &MetaLossConfig,
) -> Result<(Var, ()), TensorError> {
    meta::meta_total(tape, ve, attn, cfg)
        .map(|(v, _)| (v, ()))
        .map_err(|_| TensorError::Empty { op: "meta_total" })
}

/// Every parameter reachable through the full pre-training objective gets a
/// gradient, and sampled parameter coordinates pass finite differences
/// through the whole encoder.
#[test]
fn full_pretrain_objective_checks_against_finite_differences() {
    let config = BackboneConfig {
        stage_channels: vec![3, 4],
        blocks_per_stage: 1,
        input_size: 8,
        input_channels: 2,
        norm: true,
    };
    let mut model = Model::new(config, 5, 6, 2, 77).unwrap();
    let mut r = common::rng(99);
    let n_sources = 2;
    let images = common::rand_tensor(&[2 * n_sources, 2, 8, 8], &mut r, 0.0, 1.0);
    let labels = vec![0usize, 0, 1, 1];
    let pair: Vec<usize> = (0..4).map(|i| i ^ 1).collect();
    let weights = PretrainLossWeights::default();

    let forward = |model: &mut Model| -> (f64, Vec<(String, Vec<f64>)>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let x = binder.tape.leaf(&images);
        let bound = model.backbone.bind(&mut binder, true);
        let (maps, globals) = model.backbone.forward(binder.tape, &bound, x, true).unwrap();
        let heads = PretrainHeads {
            proj: model.proj.bind(&mut binder, "proj", true),
            spatial: model.spatial.bind(&mut binder, "spatial", true),
            vecmap: model.vecmap.bind(&mut binder, "vecmap", true),
            classifier: model.classifier.bind(&mut binder, "classifier", true),
        };
        let z = heads.proj.forward(binder.tape, globals).unwrap();
        let batch = pretrain::AugmentedBatch::from_parts(
            binder.tape,
            maps,
            z,
            pair.clone(),
            labels.clone(),
        )
        .unwrap();
        let (total, _) = pretrain::pretrain_total(binder.tape, &batch, &heads, &weights).unwrap();
        let entries = binder.entries().to_vec();
        let value = tape.value(total);
        tape.backward(total).unwrap();
        let grads = entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.grad(*v).expect("bound param has grad").to_vec()))
            .collect();
        (value, grads)
    };

    let (_, grads) = forward(&mut model);

    // Spot 1: every optimizer-visible parameter is present with a gradient.
    let mut param_names = Vec::new();
    model.visit("", &mut |name, role, _| {
        if role == SlotRole::Param {
            param_names.push(name);
        }
    });
    for name in &param_names {
        assert!(
            grads.iter().any(|(n, _)| n == name),
            "parameter {name} missing from the bound gradient list"
        );
    }

    // Spot 2: sampled coordinates across every parameter agree with central
    // finite differences through the entire graph.
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (name, grad) in &grads {
        let coords: Vec<usize> = if grad.len() <= 4 {
            (0..grad.len()).collect()
        } else {
            vec![0, grad.len() / 2, grad.len() - 1]
        };
        for &c in &coords {
            let value_at = |delta: f64| {
                let mut patched = model.clone();
                patched.visit("", &mut |n, _, tensor| {
                    if &n == name {
                        tensor.data_mut()[c] += delta;
                    }
                });
                forward(&mut patched).0
            };
            let numeric = (value_at(DEFAULT_STEP) - value_at(-DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
            max_rel = max_rel.max(rel_err(grad[c], numeric));
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} coordinates sampled");
    assert!(max_rel < TOL, "max rel err {max_rel} over {checked} coords");
}

#[test]
fn projection_through_encoder_passes_finite_differences() {
    // Gradient of sum(proj(encode(x))) w.r.t. the input image.
    let config = BackboneConfig {
        stage_channels: vec![3],
        blocks_per_stage: 1,
        input_size: 8,
        input_channels: 2,
        norm: true,
    };
    let mut model = Model::new(config, 4, 5, 2, 31).unwrap();
    let mut r = common::rng(101);
    let images = common::rand_tensor(&[2, 2, 8, 8], &mut r, 0.0, 1.0);
    let mix = common::rand_tensor(&[2, 4], &mut r, -1.0, 1.0);

    let forward = |model: &mut Model, images: &Tensor| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let x = binder.tape.param(images);
        let bound = model.backbone.bind(&mut binder, true);
        let (_maps, globals) = model.backbone.forward(binder.tape, &bound, x, true).unwrap();
        let proj = model.proj.bind(&mut binder, "proj", true);
        let z = proj.forward(binder.tape, globals).unwrap();
        let m = binder.tape.leaf(&mix);
        let p = binder.tape.mul(z, m).unwrap();
        let loss = binder.tape.sum_all(p);
        let value = tape.value(loss);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().to_vec();
        (value, g)
    };
    let (_, grad) = forward(&mut model, &images);
    let mut max_rel = 0.0f64;
    for c in (0..images.numel()).step_by(7) {
        let mut plus = images.clone();
        plus.data_mut()[c] += DEFAULT_STEP;
        let mut minus = images.clone();
        minus.data_mut()[c] -= DEFAULT_STEP;
        let numeric =
            (forward(&mut model, &plus).0 - forward(&mut model, &minus).0) / (2.0 * DEFAULT_STEP);
        max_rel = max_rel.max(rel_err(grad[c], numeric));
    }
    assert!(max_rel < TOL, "max rel err {max_rel}");
}

#[test]
fn pretrain_total_is_finite_on_random_batches() {
    for seed in 40..46 {
        let fx = LossFixture::random(seed);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = common::bind_fixture(&fx, &mut binder, true);
        let mut rr = common::rng(seed * 3 + 1);
        let classifier = common::rand_linear(fx.channels, 3, &mut rr);
        let heads = PretrainHeads {
            proj: bound.proj,
            spatial: bound.spatial,
            vecmap: bound.vecmap,
            classifier: classifier.bind(&mut binder, "classifier", true),
        };
        let maps = binder.tape.leaf(&fx.maps);
        let z = binder.tape.leaf(&fx.z);
        let mut labels = fx.labels.clone();
        for l in labels.iter_mut() {
            *l %= 3;
        }
        let batch = pretrain::AugmentedBatch::from_parts(
            binder.tape,
            maps,
            z,
            fx.pair.clone(),
            labels,
        )
        .unwrap();
        let (total, breakdown) =
            pretrain::pretrain_total(binder.tape, &batch, &heads, &PretrainLossWeights::default())
                .unwrap();
        assert!(tape.value(total).is_finite());
        assert!(breakdown.values().all(|v| v.is_finite()));
    }
}

#[test]
fn rng_smoke() {
    let mut r = common::rng(1);
    let a: f64 = r.random();
    assert!((0.0..1.0).contains(&a));
}
