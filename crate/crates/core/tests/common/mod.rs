//! Shared builders for the integration suites: random batches, heads with
//! inspectable raw weights, and episode fixtures.

#![allow(dead_code)]

use epct_core::encoder::{ProjectionHead, SpatialHeads, VecMapHead};
use epct_core::meta::{EpisodeView, ViewedEpisode};
use epct_core::nn::{Binder, Linear, Param};
use epct_core::pretrain::AugmentedBatch;
use epct_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_linear(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        w: Param {
            value: rand_tensor(&[in_dim, out_dim], rng, -0.8, 0.8),
        },
        b: Param {
            value: rand_tensor(&[out_dim], rng, -0.3, 0.3),
        },
    }
}

/// Everything an oracle-vs-library comparison needs, with raw tensors kept
/// alongside the modules that wrap them.
pub struct LossFixture {
    pub views: usize,
    pub channels: usize,
    pub dim: usize,
    pub hw: usize,
    pub maps: Tensor,
    pub z: Tensor,
    pub pair: Vec<usize>,
    pub labels: Vec<usize>,
    pub spatial: SpatialHeads,
    pub vecmap: VecMapHead,
    pub proj: ProjectionHead,
}

impl LossFixture {
    /// Random instance within the desk-scale envelope: `n_sources ≤ 4`
    /// source images (2N ≤ 8 views), C ≤ 6, D ≤ 8, H = W = 2.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let n_sources = 2 + (r.random::<u32>() % 3) as usize; // 2..=4
        let views = 2 * n_sources;
        let channels = 3 + (r.random::<u32>() % 4) as usize; // 3..=6
        let dim = 4 + (r.random::<u32>() % 5) as usize; // 4..=8
        let side = 2;
        let hw = side * side;
        let n_labels = 1 + (r.random::<u32>() % 2) as usize; // 1..=2 classes
        let maps = rand_tensor(&[views, channels, side, side], &mut r, -1.0, 1.0);
        let z = rand_tensor(&[views, dim], &mut r, -1.0, 1.0);
        let pair: Vec<usize> = (0..views).map(|i| i ^ 1).collect();
        let labels: Vec<usize> = (0..n_sources)
            .flat_map(|s| {
                let y = s % n_labels;
                [y, y]
            })
            .collect();
        let hidden = channels + 2;
        Self {
            views,
            channels,
            dim,
            hw,
            maps,
            z,
            pair,
            labels,
            spatial: SpatialHeads {
                q: rand_linear(channels, dim, &mut r),
                k: rand_linear(channels, dim, &mut r),
                v: rand_linear(channels, dim, &mut r),
            },
            vecmap: VecMapHead {
                fc: rand_linear(channels, dim, &mut r),
            },
            proj: ProjectionHead {
                l1: rand_linear(channels, hidden, &mut r),
                l2: rand_linear(hidden, dim, &mut r),
            },
        }
    }

    pub fn batch_on<'a>(&self, tape: &'a mut Tape) -> (AugmentedBatch, &'a mut Tape) {
        let maps = tape.leaf(&self.maps);
        let z = tape.leaf(&self.z);
        let batch = AugmentedBatch::from_parts(
            tape,
            maps,
            z,
            self.pair.clone(),
            self.labels.clone(),
        )
        .unwrap();
        (batch, tape)
    }

    /// Per-view z rows for the oracle side.
    pub fn z_rows(&self) -> Vec<Vec<f64>> {
        self.z
            .data()
            .chunks(self.dim)
            .map(|r| r.to_vec())
            .collect()
    }

    /// Per-view channel-major map slices for the oracle side.
    pub fn map_refs(&self) -> Vec<epct_oracle::MapRef<'_>> {
        let per = self.channels * self.hw;
        (0..self.views)
            .map(|i| epct_oracle::MapRef {
                data: &self.maps.data()[i * per..(i + 1) * per],
                channels: self.channels,
                hw: self.hw,
            })
            .collect()
    }

    pub fn oracle_spatial(&self) -> epct_oracle::SpatialHeadWeights<'_> {
        epct_oracle::SpatialHeadWeights {
            wq: self.spatial.q.w.value.data(),
            bq: self.spatial.q.b.value.data(),
            wk: self.spatial.k.w.value.data(),
            bk: self.spatial.k.b.value.data(),
            wv: self.spatial.v.w.value.data(),
            bv: self.spatial.v.b.value.data(),
            dim: self.dim,
        }
    }

    pub fn oracle_proj(&self) -> epct_oracle::ProjectionWeights<'_> {
        epct_oracle::ProjectionWeights {
            w1: self.proj.l1.w.value.data(),
            b1: self.proj.l1.b.value.data(),
            w2: self.proj.l2.w.value.data(),
            b2: self.proj.l2.b.value.data(),
            hidden: self.proj.l1.out_dim(),
            out: self.dim,
        }
    }
}

/// A random encoded episode plus the flat tensors behind it, for oracle
/// comparisons of the meta losses.
pub struct EpisodeFixture {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub dim_h: usize,
    pub dim_z: usize,
    pub tensors: [Tensor; 8],
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl EpisodeFixture {
    /// Random episode within M ≤ 3, K ≤ 2, Q ≤ 3.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let ways = 1 + (r.random::<u32>() % 3) as usize;
        let shots = 1 + (r.random::<u32>() % 2) as usize;
        let queries = 1 + (r.random::<u32>() % 3) as usize;
        let dim_h = 4 + (r.random::<u32>() % 3) as usize;
        let dim_z = 3 + (r.random::<u32>() % 4) as usize;
        let tensors = [
            rand_tensor(&[ways * shots, dim_h], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * shots, dim_z], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * queries, dim_h], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * queries, dim_z], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * shots, dim_h], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * shots, dim_z], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * queries, dim_h], &mut r, -1.0, 1.0),
            rand_tensor(&[ways * queries, dim_z], &mut r, -1.0, 1.0),
        ];
        let support_labels: Vec<usize> = (0..ways).flat_map(|k| vec![k; shots]).collect();
        let query_labels: Vec<usize> = (0..ways).flat_map(|k| vec![k; queries]).collect();
        Self {
            ways,
            shots,
            queries,
            dim_h,
            dim_z,
            tensors,
            support_labels,
            query_labels,
        }
    }

    pub fn episode_on(&self, tape: &mut Tape) -> ViewedEpisode {
        let [s1h, s1z, q1h, q1z, s2h, s2z, q2h, q2z] = &self.tensors;
        ViewedEpisode {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            views: [
                EpisodeView {
                    support_h: tape.leaf(s1h),
                    support_z: tape.leaf(s1z),
                    query_h: tape.leaf(q1h),
                    query_z: tape.leaf(q1z),
                    support_labels: self.support_labels.clone(),
                    query_labels: self.query_labels.clone(),
                },
                EpisodeView {
                    support_h: tape.leaf(s2h),
                    support_z: tape.leaf(s2z),
                    query_h: tape.leaf(q2h),
                    query_z: tape.leaf(q2z),
                    support_labels: self.support_labels.clone(),
                    query_labels: self.query_labels.clone(),
                },
            ],
        }
    }

    pub fn rows(&self, idx: usize) -> Vec<Vec<f64>> {
        let dim = self.tensors[idx].shape()[1];
        self.tensors[idx]
            .data()
            .chunks(dim)
            .map(|r| r.to_vec())
            .collect()
    }
}

/// Bound heads over one fixture, ready for the pretrain losses.
pub struct BoundFixture {
    pub spatial: epct_core::encoder::BoundSpatialHeads,
    pub vecmap: epct_core::encoder::BoundVecMapHead,
    pub proj: epct_core::encoder::BoundProjection,
}

pub fn bind_fixture(fx: &LossFixture, binder: &mut Binder, trainable: bool) -> BoundFixture {
    BoundFixture {
        spatial: fx.spatial.bind(binder, "spatial", trainable),
        vecmap: fx.vecmap.bind(binder, "vecmap", trainable),
        proj: fx.proj.bind(binder, "proj", trainable),
    }
}
