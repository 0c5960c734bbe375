//! Oracle fixtures: a batch of feature maps, projected vectors and head
//! weights, plus one encoded episode, stored as tensor files under a JSON
//! manifest with per-file checksums.

use epct_core::encoder::{BoundProjection, BoundSpatialHeads, BoundVecMapHead};
use epct_core::meta::{self, EpisodeView, ViewedEpisode};
use epct_core::nn::BoundLinear;
use epct_core::pretrain::{self, AugmentedBatch, Reduction};
use epct_core::tensor::io;
use epct_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum FixtureError {
    Io(PathBuf, std::io::Error),
    Tensor(PathBuf, io::TensorIoError),
    BadManifest(PathBuf, serde_json::Error),
    Empty(PathBuf),
    Checksum { file: String },
    Loss(String),
}

impl fmt::Display for FixtureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureError::Io(p, e) => write!(f, "io error on {}: {e}", p.display()),
            FixtureError::Tensor(p, e) => write!(f, "tensor file {}: {e}", p.display()),
            FixtureError::BadManifest(p, e) => {
                write!(f, "fixture manifest {}: {e}", p.display())
            }
            FixtureError::Empty(p) => {
                write!(f, "fixture directory {} has no manifest.json", p.display())
            }
            FixtureError::Checksum { file } => {
                write!(f, "checksum mismatch on fixture file {file} (corrupted fixture)")
            }
            FixtureError::Loss(msg) => write!(f, "loss evaluation failed: {msg}"),
        }
    }
}

impl std::error::Error for FixtureError {}

/// FNV-1a over the file bytes; cheap and stable.
pub fn checksum(bytes: &[u8]) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    format!("{h:016x}")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub views: usize,
    pub channels: usize,
    pub dim: usize,
    pub side: usize,
    pub pair: Vec<usize>,
    pub labels: Vec<usize>,
    pub taus: [f64; 5],
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub checksums: BTreeMap<String, String>,
}

const BATCH_TENSORS: [&str; 14] = [
    "maps", "z", "spatial_q_w", "spatial_q_b", "spatial_k_w", "spatial_k_b", "spatial_v_w",
    "spatial_v_b", "vecmap_w", "vecmap_b", "proj_w1", "proj_b1", "proj_w2", "proj_b2",
];
const EPISODE_TENSORS: [&str; 8] = [
    "ep_s1_h", "ep_s1_z", "ep_q1_h", "ep_q1_z", "ep_s2_h", "ep_s2_z", "ep_q2_h", "ep_q2_z",
];

pub struct FixtureSet {
    pub manifest: FixtureManifest,
    pub tensors: BTreeMap<String, Tensor>,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

/// Deterministically generate a fixture set within the desk-scale envelope.
pub fn generate(seed: u64) -> FixtureSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let sources = 3;
    let views = 2 * sources;
    let channels = 4;
    let dim = 6;
    let side = 2;
    let pair: Vec<usize> = (0..views).map(|i| i ^ 1).collect();
    let labels = vec![0, 0, 1, 1, 0, 0];
    let hidden = channels + 2;
    let (ways, shots, queries) = (2usize, 2usize, 2usize);

    let mut tensors = BTreeMap::new();
    tensors.insert(
        "maps".to_string(),
        rand_tensor(&[views, channels, side, side], &mut r, -1.0, 1.0),
    );
    tensors.insert("z".to_string(), rand_tensor(&[views, dim], &mut r, -1.0, 1.0));
    for head in ["spatial_q", "spatial_k", "spatial_v"] {
        tensors.insert(
            format!("{head}_w"),
            rand_tensor(&[channels, dim], &mut r, -0.8, 0.8),
        );
        tensors.insert(format!("{head}_b"), rand_tensor(&[dim], &mut r, -0.3, 0.3));
    }
    tensors.insert(
        "vecmap_w".to_string(),
        rand_tensor(&[channels, dim], &mut r, -0.8, 0.8),
    );
    tensors.insert("vecmap_b".to_string(), rand_tensor(&[dim], &mut r, -0.3, 0.3));
    tensors.insert(
        "proj_w1".to_string(),
        rand_tensor(&[channels, hidden], &mut r, -0.8, 0.8),
    );
    tensors.insert("proj_b1".to_string(), rand_tensor(&[hidden], &mut r, -0.3, 0.3));
    tensors.insert(
        "proj_w2".to_string(),
        rand_tensor(&[hidden, dim], &mut r, -0.8, 0.8),
    );
    tensors.insert("proj_b2".to_string(), rand_tensor(&[dim], &mut r, -0.3, 0.3));

    let dim_z = 5;
    for name in EPISODE_TENSORS {
        let rows = if name.contains("_s") { ways * shots } else { ways * queries };
        tensors.insert(name.to_string(), rand_tensor(&[rows, dim_z], &mut r, -1.0, 1.0));
    }

    FixtureSet {
        manifest: FixtureManifest {
            seed,
            views,
            channels,
            dim,
            side,
            pair,
            labels,
            taus: [0.1; 5],
            ways,
            shots,
            queries,
            checksums: BTreeMap::new(),
        },
        tensors,
    }
}

pub fn save(set: &mut FixtureSet, dir: &Path) -> Result<(), FixtureError> {
    fs::create_dir_all(dir).map_err(|e| FixtureError::Io(dir.to_path_buf(), e))?;
    set.manifest.checksums.clear();
    for (name, tensor) in &set.tensors {
        let mut bytes = Vec::new();
        io::write_tensor(&mut bytes, tensor)
            .map_err(|e| FixtureError::Tensor(dir.join(name), e))?;
        set.manifest
            .checksums
            .insert(format!("{name}.epct"), checksum(&bytes));
        let path = dir.join(format!("{name}.epct"));
        fs::write(&path, bytes).map_err(|e| FixtureError::Io(path.clone(), e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&set.manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| FixtureError::Io(path, e))
}

pub fn load(dir: &Path) -> Result<FixtureSet, FixtureError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(FixtureError::Empty(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| FixtureError::Io(manifest_path.clone(), e))?;
    let manifest: FixtureManifest =
        serde_json::from_str(&text).map_err(|e| FixtureError::BadManifest(manifest_path, e))?;
    let mut tensors = BTreeMap::new();
    for name in BATCH_TENSORS.iter().chain(EPISODE_TENSORS.iter()) {
        let file = format!("{name}.epct");
        let path = dir.join(&file);
        let bytes = fs::read(&path).map_err(|e| FixtureError::Io(path.clone(), e))?;
        let expected = manifest
            .checksums
            .get(&file)
            .ok_or_else(|| FixtureError::Checksum { file: file.clone() })?;
        if checksum(&bytes) != *expected {
            return Err(FixtureError::Checksum { file });
        }
        let tensor =
            io::read_tensor(bytes.as_slice()).map_err(|e| FixtureError::Tensor(path, e))?;
        tensors.insert(name.to_string(), tensor);
    }
    Ok(FixtureSet { manifest, tensors })
}

pub struct LossComparison {
    pub name: &'static str,
    pub library: f64,
    pub oracle: f64,
}

impl LossComparison {
    pub fn delta(&self) -> f64 {
        (self.library - self.oracle).abs()
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.delta() < tol
    }
}

/// Evaluate every fixture-covered loss through the library and through the
/// literal-summation reference.
pub fn compare(set: &FixtureSet) -> Result<Vec<LossComparison>, FixtureError> {
    let m = &set.manifest;
    let t = &set.tensors;
    let loss_err = |e: &dyn fmt::Display| FixtureError::Loss(e.to_string());

    let mut tape = Tape::new();
    let bind = |tape: &mut Tape, name: &str| tape.leaf(&t[name]);
    let maps = bind(&mut tape, "maps");
    let z = bind(&mut tape, "z");
    let batch = AugmentedBatch::from_parts(&mut tape, maps, z, m.pair.clone(), m.labels.clone())
        .map_err(|e| loss_err(&e))?;
    let spatial = BoundSpatialHeads {
        q: BoundLinear {
            w: bind(&mut tape, "spatial_q_w"),
            b: bind(&mut tape, "spatial_q_b"),
        },
        k: BoundLinear {
            w: bind(&mut tape, "spatial_k_w"),
            b: bind(&mut tape, "spatial_k_b"),
        },
        v: BoundLinear {
            w: bind(&mut tape, "spatial_v_w"),
            b: bind(&mut tape, "spatial_v_b"),
        },
        scale: 1.0 / (m.dim as f64).sqrt(),
    };
    let vecmap = BoundVecMapHead {
        fc: BoundLinear {
            w: bind(&mut tape, "vecmap_w"),
            b: bind(&mut tape, "vecmap_b"),
        },
    };
    let proj = BoundProjection {
        l1: BoundLinear {
            w: bind(&mut tape, "proj_w1"),
            b: bind(&mut tape, "proj_b1"),
        },
        l2: BoundLinear {
            w: bind(&mut tape, "proj_w2"),
            b: bind(&mut tape, "proj_b2"),
        },
    };

    let lib_global =
        pretrain::global_ss_loss(&mut tape, &batch, m.taus[0], Reduction::Sum)
            .map_err(|e| loss_err(&e))?;
    let lib_map_map = pretrain::map_map_loss(&mut tape, &batch, &spatial, m.taus[1], Reduction::Sum)
        .map_err(|e| loss_err(&e))?;
    let lib_vec_map =
        pretrain::vec_map_loss(&mut tape, &batch, &vecmap, &proj, m.taus[2], Reduction::Sum)
            .map_err(|e| loss_err(&e))?;
    let lib_sup = pretrain::global_sup_loss(&mut tape, &batch, m.taus[3], Reduction::Sum)
        .map_err(|e| loss_err(&e))?;

    let support_labels: Vec<usize> = (0..m.ways).flat_map(|k| vec![k; m.shots]).collect();
    let query_labels: Vec<usize> = (0..m.ways).flat_map(|k| vec![k; m.queries]).collect();
    let ve = ViewedEpisode {
        ways: m.ways,
        shots: m.shots,
        queries: m.queries,
        views: [
            EpisodeView {
                support_h: bind(&mut tape, "ep_s1_h"),
                support_z: bind(&mut tape, "ep_s1_z"),
                query_h: bind(&mut tape, "ep_q1_h"),
                query_z: bind(&mut tape, "ep_q1_z"),
                support_labels: support_labels.clone(),
                query_labels: query_labels.clone(),
            },
            EpisodeView {
                support_h: bind(&mut tape, "ep_s2_h"),
                support_z: bind(&mut tape, "ep_s2_z"),
                query_h: bind(&mut tape, "ep_q2_h"),
                query_z: bind(&mut tape, "ep_q2_z"),
                support_labels,
                query_labels,
            },
        ],
    };
    let lib_info =
        meta::distance_scaled_loss(&mut tape, &ve, m.taus[4]).map_err(|e| loss_err(&e))?;

    // Reference side, straight from the raw tensors.
    let z_rows: Vec<Vec<f64>> = t["z"].data().chunks(m.dim).map(|r| r.to_vec()).collect();
    let per = m.channels * m.side * m.side;
    let map_refs: Vec<epct_oracle::MapRef> = (0..m.views)
        .map(|i| epct_oracle::MapRef {
            data: &t["maps"].data()[i * per..(i + 1) * per],
            channels: m.channels,
            hw: m.side * m.side,
        })
        .collect();
    let spatial_w = epct_oracle::SpatialHeadWeights {
        wq: t["spatial_q_w"].data(),
        bq: t["spatial_q_b"].data(),
        wk: t["spatial_k_w"].data(),
        bk: t["spatial_k_b"].data(),
        wv: t["spatial_v_w"].data(),
        bv: t["spatial_v_b"].data(),
        dim: m.dim,
    };
    let proj_w = epct_oracle::ProjectionWeights {
        w1: t["proj_w1"].data(),
        b1: t["proj_b1"].data(),
        w2: t["proj_w2"].data(),
        b2: t["proj_b2"].data(),
        hidden: t["proj_b1"].numel(),
        out: m.dim,
    };
    let rows = |name: &str| -> Vec<Vec<f64>> {
        let d = t[name].shape()[1];
        t[name].data().chunks(d).map(|r| r.to_vec()).collect()
    };
    let s_labels: Vec<usize> = (0..m.ways).flat_map(|k| vec![k; m.shots]).collect();
    let q_labels: Vec<usize> = (0..m.ways).flat_map(|k| vec![k; m.queries]).collect();
    let (s1, q1, s2, q2) = (rows("ep_s1_z"), rows("ep_q1_z"), rows("ep_s2_z"), rows("ep_q2_z"));
    let v1 = epct_oracle::EpisodeZView {
        support: &s1,
        support_labels: &s_labels,
        query: &q1,
        query_labels: &q_labels,
    };
    let v2 = epct_oracle::EpisodeZView {
        support: &s2,
        support_labels: &s_labels,
        query: &q2,
        query_labels: &q_labels,
    };

    Ok(vec![
        LossComparison {
            name: "global_self_supervised",
            library: tape.value(lib_global),
            oracle: epct_oracle::global_ss_loss(&z_rows, &m.pair, m.taus[0]),
        },
        LossComparison {
            name: "map_map",
            library: tape.value(lib_map_map),
            oracle: epct_oracle::map_map_loss(&map_refs, &m.pair, &spatial_w, m.taus[1]),
        },
        LossComparison {
            name: "vec_map",
            library: tape.value(lib_vec_map),
            oracle: epct_oracle::vec_map_loss(
                &map_refs,
                &m.pair,
                t["vecmap_w"].data(),
                t["vecmap_b"].data(),
                m.dim,
                &proj_w,
                m.taus[2],
            ),
        },
        LossComparison {
            name: "global_supervised",
            library: tape.value(lib_sup),
            oracle: epct_oracle::global_sup_loss(&z_rows, &m.labels, m.taus[3]),
        },
        LossComparison {
            name: "distance_scaled",
            library: tape.value(lib_info),
            oracle: epct_oracle::distance_scaled_loss(&v1, &v2, m.ways, m.taus[4]),
        },
    ])
}
