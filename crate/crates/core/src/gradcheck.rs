//! Finite-difference verification suite: one row per primitive op and per
//! loss, each comparing analytic gradients against central differences on
//! random small instances. The CLI formats these rows; the acceptance suite
//! asserts them.

use crate::encoder::{BackboneConfig, BoundProjection, BoundSpatialHeads, BoundVecMapHead, Model};
use crate::meta::{self, AttnModule, MetaLossConfig};
use crate::nn::{Binder, BoundLinear, SlotRole, Stateful};
use crate::pretrain::{self, PretrainHeads, PretrainLossWeights, Reduction};
use crate::tensor::fd::{all_coords, check_gradients, rel_err, DEFAULT_STEP};
use crate::tensor::{BnStats, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub tol: f64,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

fn weighted_sum(t: &mut Tape, y: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = t.leaf(weights);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

/// One random instance per primitive op, inputs arranged so every kinked or
/// domain-restricted op stays in its smooth region.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases: Vec<GradCase> = Vec::new();

    let a = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[3, 4], &mut r, 0.5, 1.5);
    let w34 = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    for (name, which) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3)] {
        let w = w34.clone();
        cases.push(GradCase {
            name,
            inputs: vec![a.clone(), b.clone()],
            tol: 1e-6,
            build: Box::new(move |t, vs| {
                let y = match which {
                    0 => t.add(vs[0], vs[1])?,
                    1 => t.sub(vs[0], vs[1])?,
                    2 => t.mul(vs[0], vs[1])?,
                    _ => t.div(vs[0], vs[1])?,
                };
                weighted_sum(t, y, &w)
            }),
        });
    }

    let pos = rand_tensor(&[6], &mut r, 0.2, 2.0);
    let signed = {
        let mut t = rand_tensor(&[6], &mut r, 0.05, 1.0);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        t
    };
    let w6 = rand_tensor(&[6], &mut r, -1.0, 1.0);
    for (name, which) in [
        ("neg", 0usize),
        ("relu", 1),
        ("exp", 2),
        ("log", 3),
        ("sqrt", 4),
        ("add_scalar", 5),
        ("mul_scalar", 6),
    ] {
        let w = w6.clone();
        let input = if matches!(name, "log" | "sqrt") {
            pos.clone()
        } else {
            signed.clone()
        };
        cases.push(GradCase {
            name,
            inputs: vec![input],
            tol: 1e-6,
            build: Box::new(move |t, vs| {
                let y = match which {
                    0 => t.neg(vs[0]),
                    1 => t.relu(vs[0]),
                    2 => t.exp(vs[0]),
                    3 => t.log(vs[0]),
                    4 => t.sqrt(vs[0]),
                    5 => t.add_scalar(vs[0], 0.7),
                    _ => t.mul_scalar(vs[0], -1.3),
                };
                weighted_sum(t, y, &w)
            }),
        });
    }

    let ma = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    let mb = rand_tensor(&[4, 2], &mut r, -1.0, 1.0);
    let w32 = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "matmul",
        inputs: vec![ma, mb],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.matmul(vs[0], vs[1])?;
            weighted_sum(t, y, &w32)
        }),
    });

    let m = rand_tensor(&[4, 3], &mut r, -1.0, 1.0);
    let w43t = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "transpose",
        inputs: vec![m.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.transpose(vs[0])?;
            weighted_sum(t, y, &w43t)
        }),
    });

    let bias = rand_tensor(&[3], &mut r, -1.0, 1.0);
    let w43 = rand_tensor(&[4, 3], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "add_bias",
        inputs: vec![m.clone(), bias],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.add_bias(vs[0], vs[1])?;
            weighted_sum(t, y, &w43)
        }),
    });

    cases.push(GradCase {
        name: "sum_all",
        inputs: vec![m.clone()],
        tol: 1e-6,
        build: Box::new(|t, vs| Ok(t.sum_all(vs[0]))),
    });
    cases.push(GradCase {
        name: "mean_all",
        inputs: vec![m.clone()],
        tol: 1e-6,
        build: Box::new(|t, vs| Ok(t.mean_all(vs[0]))),
    });

    let w3 = rand_tensor(&[3], &mut r, -1.0, 1.0);
    for (name, mean) in [("sum_axis0", false), ("mean_axis0", true)] {
        let w = w3.clone();
        cases.push(GradCase {
            name,
            inputs: vec![m.clone()],
            tol: 1e-6,
            build: Box::new(move |t, vs| {
                let y = if mean {
                    t.mean_axis0(vs[0])?
                } else {
                    t.sum_axis0(vs[0])?
                };
                weighted_sum(t, y, &w)
            }),
        });
    }

    let logits = rand_tensor(&[3, 5], &mut r, -2.0, 2.0);
    let w35 = rand_tensor(&[3, 5], &mut r, -1.0, 1.0);
    for (name, logp) in [("softmax", false), ("log_softmax", true)] {
        let w = w35.clone();
        cases.push(GradCase {
            name,
            inputs: vec![logits.clone()],
            tol: 1e-6,
            build: Box::new(move |t, vs| {
                let y = if logp {
                    t.log_softmax_last(vs[0])?
                } else {
                    t.softmax_last(vs[0])?
                };
                weighted_sum(t, y, &w)
            }),
        });
    }

    let vec9 = rand_tensor(&[9], &mut r, -1.5, 1.5);
    cases.push(GradCase {
        name: "logsumexp",
        inputs: vec![vec9],
        tol: 1e-6,
        build: Box::new(|t, vs| t.logsumexp(vs[0])),
    });

    let rows = rand_tensor(&[4, 5], &mut r, -1.0, 1.0);
    let w45 = rand_tensor(&[4, 5], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "l2_normalize",
        inputs: vec![rows.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.l2_normalize_last(vs[0], 1e-12)?;
            weighted_sum(t, y, &w45)
        }),
    });

    let gamma = rand_tensor(&[5], &mut r, 0.5, 1.5);
    let beta = rand_tensor(&[5], &mut r, -0.5, 0.5);
    let wln = rand_tensor(&[4, 5], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "layer_norm",
        inputs: vec![rows.clone(), gamma, beta],
        tol: 1e-5,
        build: Box::new(move |t, vs| {
            let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-5)?;
            weighted_sum(t, y, &wln)
        }),
    });

    let xbn = rand_tensor(&[3, 2, 4, 4], &mut r, -1.0, 1.0);
    let gbn = rand_tensor(&[2], &mut r, 0.5, 1.5);
    let bbn = rand_tensor(&[2], &mut r, -0.5, 0.5);
    let wbn = rand_tensor(&[3, 2, 4, 4], &mut r, -1.0, 1.0);
    for (name, training) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        let w = wbn.clone();
        cases.push(GradCase {
            name,
            inputs: vec![xbn.clone(), gbn.clone(), bbn.clone()],
            tol: 1e-5,
            build: Box::new(move |t, vs| {
                let mut rm = vec![0.1, -0.2];
                let mut rv = vec![0.9, 1.1];
                let y = t.batch_norm(
                    vs[0],
                    vs[1],
                    vs[2],
                    BnStats {
                        running_mean: &mut rm,
                        running_var: &mut rv,
                        momentum: 0.9,
                    },
                    training,
                    1e-5,
                )?;
                weighted_sum(t, y, &w)
            }),
        });
    }

    let xc = rand_tensor(&[2, 3, 5, 4], &mut r, -1.0, 1.0);
    let wc = rand_tensor(&[2, 3, 3, 3], &mut r, -0.5, 0.5);
    let bc = rand_tensor(&[2], &mut r, -0.5, 0.5);
    let wconv = rand_tensor(&[2, 2, 5, 4], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "conv2d",
        inputs: vec![xc, wc, bc],
        tol: 1e-5,
        build: Box::new(move |t, vs| {
            let y = t.conv2d(vs[0], vs[1], vs[2], 1, 1)?;
            weighted_sum(t, y, &wconv)
        }),
    });

    let xp = rand_tensor(&[2, 2, 4, 4], &mut r, -1.0, 1.0);
    let wp = rand_tensor(&[2, 2, 2, 2], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "max_pool2",
        inputs: vec![xp.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.max_pool2(vs[0])?;
            weighted_sum(t, y, &wp)
        }),
    });

    let wg = rand_tensor(&[2, 2], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "global_avg_pool",
        inputs: vec![xp.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.global_avg_pool(vs[0])?;
            weighted_sum(t, y, &wg)
        }),
    });

    let w25 = rand_tensor(&[2, 5], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "gather_rows",
        inputs: vec![rows.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.gather_rows(vs[0], &[1, 1])?;
            weighted_sum(t, y, &w25)
        }),
    });

    let vec7 = rand_tensor(&[7], &mut r, -1.0, 1.0);
    let w4g = rand_tensor(&[4], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "gather_elems",
        inputs: vec![vec7],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.gather_elems(vs[0], &[0, 3, 3, 6])?;
            weighted_sum(t, y, &w4g)
        }),
    });

    let row_a = rand_tensor(&[4], &mut r, -1.0, 1.0);
    let row_b = rand_tensor(&[4], &mut r, -1.0, 1.0);
    let wstack = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "stack_rows",
        inputs: vec![row_a, row_b],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.stack_rows(&[vs[0], vs[1], vs[0]])?;
            weighted_sum(t, y, &wstack)
        }),
    });

    let s1 = rand_tensor(&[1], &mut r, -1.0, 1.0);
    let s2 = rand_tensor(&[1], &mut r, -1.0, 1.0);
    let wse = rand_tensor(&[3], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "stack_elems",
        inputs: vec![s1, s2],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.stack_elems(&[vs[0], vs[1], vs[0]])?;
            weighted_sum(t, y, &wse)
        }),
    });

    let wrs = rand_tensor(&[20], &mut r, -1.0, 1.0);
    cases.push(GradCase {
        name: "reshape",
        inputs: vec![rows.clone()],
        tol: 1e-6,
        build: Box::new(move |t, vs| {
            let y = t.reshape(vs[0], &[20])?;
            weighted_sum(t, y, &wrs)
        }),
    });

    let pa = rand_tensor(&[3, 4], &mut r, -1.0, 1.0);
    let pb = rand_tensor(&[2, 4], &mut r, 2.0, 3.0);
    let wpd = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
    for (name, squared) in [
        ("pairwise_euclidean", false),
        ("pairwise_euclidean_sq", true),
    ] {
        let w = wpd.clone();
        cases.push(GradCase {
            name,
            inputs: vec![pa.clone(), pb.clone()],
            tol: 1e-6,
            build: Box::new(move |t, vs| {
                let y = t.pairwise_euclidean(vs[0], vs[1], squared)?;
                weighted_sum(t, y, &w)
            }),
        });
    }

    cases
}

fn degrade<E: std::fmt::Display>(e: E) -> TensorError {
    let _ = e;
    TensorError::Empty { op: "loss build" }
}

/// Loss instances w.r.t. their raw inputs (projected vectors, feature maps,
/// head weights, episode tensors), each sampling at least `min_coords`
/// coordinates.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed ^ 0x5eed);
    let mut cases: Vec<GradCase> = Vec::new();

    // Shared augmented-batch fixture: 4 sources (2N = 8), 2 classes, sized
    // so even the single-tensor losses expose ≥ 50 coordinates.
    let views = 8;
    let channels = 4;
    let dim = 8;
    let maps = rand_tensor(&[views, channels, 2, 2], &mut r, -1.0, 1.0);
    let z = rand_tensor(&[views, dim], &mut r, -1.0, 1.0);
    let pair: Vec<usize> = (0..views).map(|i| i ^ 1).collect();
    let labels = vec![0, 0, 1, 1, 0, 0, 1, 1];

    {
        let maps = maps.clone();
        let pair = pair.clone();
        let labels = labels.clone();
        cases.push(GradCase {
            name: "loss_global_ss",
            inputs: vec![z.clone()],
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let m = t.leaf(&maps);
                let batch =
                    pretrain::AugmentedBatch::from_parts(t, m, vs[0], pair.clone(), labels.clone())
                        .map_err(degrade)?;
                pretrain::global_ss_loss(t, &batch, 0.1, Reduction::Sum).map_err(degrade)
            }),
        });
    }
    {
        let maps = maps.clone();
        let pair = pair.clone();
        let labels = labels.clone();
        cases.push(GradCase {
            name: "loss_global_sup",
            inputs: vec![z.clone()],
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let m = t.leaf(&maps);
                let batch =
                    pretrain::AugmentedBatch::from_parts(t, m, vs[0], pair.clone(), labels.clone())
                        .map_err(degrade)?;
                pretrain::global_sup_loss(t, &batch, 0.1, Reduction::Sum).map_err(degrade)
            }),
        });
    }

    let wq = rand_tensor(&[channels, dim], &mut r, -0.7, 0.7);
    let bq = rand_tensor(&[dim], &mut r, -0.3, 0.3);
    let wk = rand_tensor(&[channels, dim], &mut r, -0.7, 0.7);
    let bk = rand_tensor(&[dim], &mut r, -0.3, 0.3);
    let wv = rand_tensor(&[channels, dim], &mut r, -0.7, 0.7);
    let bv = rand_tensor(&[dim], &mut r, -0.3, 0.3);
    {
        let z = z.clone();
        let pair = pair.clone();
        let labels = labels.clone();
        cases.push(GradCase {
            name: "loss_map_map",
            inputs: vec![
                wq.clone(),
                bq.clone(),
                wk.clone(),
                bk.clone(),
                wv.clone(),
                bv.clone(),
                maps.clone(),
            ],
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let heads = BoundSpatialHeads {
                    q: BoundLinear { w: vs[0], b: vs[1] },
                    k: BoundLinear { w: vs[2], b: vs[3] },
                    v: BoundLinear { w: vs[4], b: vs[5] },
                    scale: 1.0 / (dim as f64).sqrt(),
                };
                let zv = t.leaf(&z);
                let batch =
                    pretrain::AugmentedBatch::from_parts(t, vs[6], zv, pair.clone(), labels.clone())
                        .map_err(degrade)?;
                pretrain::map_map_loss(t, &batch, &heads, 0.1, Reduction::Sum).map_err(degrade)
            }),
        });
    }

    let wfc = rand_tensor(&[channels, dim], &mut r, -0.7, 0.7);
    let bfc = rand_tensor(&[dim], &mut r, -0.3, 0.3);
    let hidden = channels + 1;
    let w1 = rand_tensor(&[channels, hidden], &mut r, -0.7, 0.7);
    let b1 = rand_tensor(&[hidden], &mut r, -0.3, 0.3);
    let w2 = rand_tensor(&[hidden, dim], &mut r, -0.7, 0.7);
    let b2 = rand_tensor(&[dim], &mut r, -0.3, 0.3);
    {
        let z = z.clone();
        let pair = pair.clone();
        let labels = labels.clone();
        cases.push(GradCase {
            name: "loss_vec_map",
            inputs: vec![
                wfc.clone(),
                bfc.clone(),
                w1.clone(),
                b1.clone(),
                w2.clone(),
                b2.clone(),
                maps.clone(),
            ],
            tol: 1e-4,
            build: Box::new(move |t, vs| {
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
                        .map_err(degrade)?;
                pretrain::vec_map_loss(t, &batch, &vm, &proj, 0.1, Reduction::Sum).map_err(degrade)
            }),
        });
    }
    {
        let z = z.clone();
        let pair = pair.clone();
        let labels = labels.clone();
        let wq = wq.clone();
        let bq = bq.clone();
        let wk = wk.clone();
        let bk = bk.clone();
        let wv = wv.clone();
        let bv = bv.clone();
        cases.push(GradCase {
            name: "loss_local_ss",
            inputs: vec![wfc.clone(), bfc.clone(), maps.clone()],
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let heads = BoundSpatialHeads {
                    q: BoundLinear {
                        w: t.leaf(&wq),
                        b: t.leaf(&bq),
                    },
                    k: BoundLinear {
                        w: t.leaf(&wk),
                        b: t.leaf(&bk),
                    },
                    v: BoundLinear {
                        w: t.leaf(&wv),
                        b: t.leaf(&bv),
                    },
                    scale: 1.0 / (dim as f64).sqrt(),
                };
                let vm = BoundVecMapHead {
                    fc: BoundLinear { w: vs[0], b: vs[1] },
                };
                let proj = BoundProjection {
                    l1: BoundLinear {
                        w: t.leaf(&w1),
                        b: t.leaf(&b1),
                    },
                    l2: BoundLinear {
                        w: t.leaf(&w2),
                        b: t.leaf(&b2),
                    },
                };
                let zv = t.leaf(&z);
                let batch =
                    pretrain::AugmentedBatch::from_parts(t, vs[2], zv, pair.clone(), labels.clone())
                        .map_err(degrade)?;
                pretrain::local_ss_loss(t, &batch, &heads, &vm, &proj, 0.1, 0.1, Reduction::Sum)
                    .map_err(degrade)
            }),
        });
    }

    // Episodic fixture: M = 2, K = 2, Q = 2.
    let (ways, shots, queries) = (2usize, 2usize, 2usize);
    let dim_h = 5;
    let dim_z = 4;
    let episode: Vec<Tensor> = (0..8)
        .map(|i| {
            let rows = if i % 4 < 2 { ways * shots } else { ways * queries };
            let d = if i % 2 == 0 { dim_h } else { dim_z };
            rand_tensor(&[rows, d], &mut r, -1.0, 1.0)
        })
        .collect();
    let support_labels: Vec<usize> = (0..ways).flat_map(|k| vec![k; shots]).collect();
    let query_labels: Vec<usize> = (0..ways).flat_map(|k| vec![k; queries]).collect();

    let make_ve = {
        let support_labels = support_labels.clone();
        let query_labels = query_labels.clone();
        move |vs: &[Var]| meta::ViewedEpisode {
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
        }
    };

    {
        let make_ve = make_ve.clone();
        cases.push(GradCase {
            name: "loss_distance_scaled",
            inputs: episode.clone(),
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let ve = make_ve(vs);
                meta::distance_scaled_loss(t, &ve, 0.1).map_err(degrade)
            }),
        });
    }
    {
        let make_ve = make_ve.clone();
        let attn = lively_attn(dim_h, seed ^ 0xa77);
        cases.push(GradCase {
            name: "loss_cross_view",
            inputs: episode.clone(),
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let mut binder = Binder::new(t);
                let bound = attn.bind(&mut binder, "attn", true);
                let ve = make_ve(vs);
                let aligned = meta::aligned_prototypes(binder.tape, &ve, &bound, false)
                    .map_err(degrade)?;
                meta::cross_view_loss(binder.tape, &ve, &aligned, false).map_err(degrade)
            }),
        });
    }
    {
        let attn = lively_attn(dim_h, seed ^ 0xa78);
        cases.push(GradCase {
            name: "loss_meta_total",
            inputs: episode,
            tol: 1e-4,
            build: Box::new(move |t, vs| {
                let mut binder = Binder::new(t);
                let bound = attn.bind(&mut binder, "attn", true);
                let ve = make_ve(vs);
                let cfg = MetaLossConfig {
                    beta: 0.3,
                    ..MetaLossConfig::default_for_shots(1)
                };
                meta::meta_total(binder.tape, &ve, &bound, &cfg)
                    .map(|(v, _)| v)
                    .map_err(degrade)
            }),
        });
    }

    cases
}

/// Attention module with every branch live: the identity-at-init zero
/// projections are replaced by random weights so finite differences exercise
/// the full block.
pub fn lively_attn(dim: usize, seed: u64) -> AttnModule {
    let mut attn = AttnModule::new(dim, seed);
    let mut r = rng(seed ^ 0xfeed);
    attn.wo = crate::nn::Linear {
        w: crate::nn::Param {
            value: rand_tensor(&[dim, dim], &mut r, -0.6, 0.6),
        },
        b: crate::nn::Param {
            value: rand_tensor(&[dim], &mut r, -0.2, 0.2),
        },
    };
    attn.ffn2 = crate::nn::Linear {
        w: crate::nn::Param {
            value: rand_tensor(&[dim, dim], &mut r, -0.6, 0.6),
        },
        b: crate::nn::Param {
            value: rand_tensor(&[dim], &mut r, -0.2, 0.2),
        },
    };
    attn
}

/// Sample up to `max` coordinates, evenly strided across all inputs.
fn sampled_coords(inputs: &[Tensor], max: usize) -> Vec<(usize, usize)> {
    let coords = all_coords(inputs);
    if coords.len() <= max {
        return coords;
    }
    let stride = coords.len() / max;
    coords.into_iter().step_by(stride.max(1)).take(max).collect()
}

/// Run one case with at least `min_coords` perturbed coordinates (or every
/// coordinate if fewer exist).
pub fn run_case(case: &GradCase, min_coords: usize) -> Result<GradCheckRow, TensorError> {
    let coords = sampled_coords(&case.inputs, min_coords.max(50));
    let report = check_gradients(&case.inputs, &coords, DEFAULT_STEP, case.build.as_ref())?;
    Ok(GradCheckRow {
        name: case.name.to_string(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
    })
}

/// Finite differences through the whole pre-training objective w.r.t. the
/// model parameters: one row covering the encoder, every head and the CE
/// term together.
pub fn check_pretrain_total(seed: u64) -> GradCheckRow {
    let config = BackboneConfig {
        stage_channels: vec![3, 4],
        blocks_per_stage: 1,
        input_size: 8,
        input_channels: 2,
        norm: true,
    };
    let mut model = Model::new(config, 5, 6, 2, seed).expect("valid desk-scale config");
    let mut r = rng(seed ^ 0xbeef);
    let images = rand_tensor(&[4, 2, 8, 8], &mut r, 0.0, 1.0);
    let labels = vec![0usize, 0, 1, 1];
    let pair: Vec<usize> = (0..4).map(|i| i ^ 1).collect();
    let weights = PretrainLossWeights::default();

    let forward = |model: &mut Model| -> (f64, Vec<(String, Vec<f64>)>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let x = binder.tape.leaf(&images);
        let bound = model.backbone.bind(&mut binder, true);
        let (maps, globals) = model
            .backbone
            .forward(binder.tape, &bound, x, true)
            .expect("forward");
        let heads = PretrainHeads {
            proj: model.proj.bind(&mut binder, "proj", true),
            spatial: model.spatial.bind(&mut binder, "spatial", true),
            vecmap: model.vecmap.bind(&mut binder, "vecmap", true),
            classifier: model.classifier.bind(&mut binder, "classifier", true),
        };
        let z = heads.proj.forward(binder.tape, globals).expect("project");
        let batch = pretrain::AugmentedBatch::from_parts(
            binder.tape,
            maps,
            z,
            pair.clone(),
            labels.clone(),
        )
        .expect("valid batch");
        let (total, _) =
            pretrain::pretrain_total(binder.tape, &batch, &heads, &weights).expect("total");
        let entries = binder.entries().to_vec();
        let value = tape.value(total);
        tape.backward(total).expect("backward");
        let grads = entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.grad(*v).expect("bound").to_vec()))
            .collect();
        (value, grads)
    };

    let (_, grads) = forward(&mut model);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (name, grad) in &grads {
        let coords: Vec<usize> = if grad.len() <= 3 {
            (0..grad.len()).collect()
        } else {
            vec![0, grad.len() / 2, grad.len() - 1]
        };
        for &c in &coords {
            let value_at = |delta: f64| {
                let mut patched = model.clone();
                patched.visit("", &mut |n, role, tensor| {
                    if role == SlotRole::Param && &n == name {
                        tensor.data_mut()[c] += delta;
                    }
                });
                forward(&mut patched).0
            };
            let numeric =
                (value_at(DEFAULT_STEP) - value_at(-DEFAULT_STEP)) / (2.0 * DEFAULT_STEP);
            max_rel = max_rel.max(rel_err(grad[c], numeric));
            checked += 1;
        }
    }
    GradCheckRow {
        name: "loss_pretrain_total".to_string(),
        max_rel_err: max_rel,
        checked,
    }
}

/// The full table: every op case, every loss case, plus the model-level
/// pre-training row.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckRow>, TensorError> {
    let mut rows = Vec::new();
    for case in op_cases(seed) {
        rows.push(run_case(&case, 50)?);
    }
    for case in loss_cases(seed) {
        rows.push(run_case(&case, 50)?);
    }
    rows.push(check_pretrain_total(seed));
    Ok(rows)
}
