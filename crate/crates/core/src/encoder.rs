//! The feature extractor and its attached heads: global average pooling,
//! the projection MLP, the three shared spatial projection heads, the
//! position-wise FC map head and the base-class classifier.

use crate::nn::{
    join_name, BatchNorm2d, Binder, BoundConv2d, BoundLinear, Conv2d, Linear, SlotRole, Stateful,
};
use crate::tensor::{BnStats, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("backbone config: input {input}×{input} shrinks below 2×2 after {stages} pooling stages")]
    MapTooSmall { input: usize, stages: usize },
    #[error("backbone config: needs at least one stage")]
    NoStages,
    #[error("label {label} out of range for {classes} base classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Desk-scale convolutional backbone: per stage, `blocks_per_stage` rounds of
/// conv3×3 → batch-norm → ReLU, then a 2×2 max-pool.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            input_size: 32,
            input_channels: 3,
            norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_channels.is_empty() {
            return Err(ModelError::NoStages);
        }
        // Local losses need more than one spatial position in the final map.
        if self.input_size >> self.stage_channels.len() < 2 {
            return Err(ModelError::MapTooSmall {
                input: self.input_size,
                stages: self.stage_channels.len(),
            });
        }
        Ok(())
    }

    /// Channel count of the final feature map.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// Spatial side of the final feature map.
    pub fn map_side(&self) -> usize {
        self.input_size >> self.stage_channels.len()
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Vec<Block>>,
}

/// Parameter bindings of one backbone, reusable across several forward
/// passes on the same tape so gradients from all of them accumulate into a
/// single copy of each parameter.
pub struct BoundBackbone {
    blocks: Vec<Vec<(BoundConv2d, Option<(Var, Var)>)>>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = config.input_channels;
        for &out_ch in &config.stage_channels {
            let mut blocks = Vec::new();
            for _ in 0..config.blocks_per_stage.max(1) {
                blocks.push(Block {
                    conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
                    bn: config.norm.then(|| BatchNorm2d::new(out_ch)),
                });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(Self { config, stages })
    }

    pub fn bind(&self, binder: &mut Binder, trainable: bool) -> BoundBackbone {
        let mut blocks = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let mut bound_stage = Vec::new();
            for (bi, block) in stage.iter().enumerate() {
                let name = format!("encoder.stage{si}.block{bi}");
                let conv = block.conv.bind(binder, &format!("{name}.conv"), trainable);
                let bn = block.bn.as_ref().map(|bn| {
                    if trainable {
                        (
                            binder.bind(format!("{name}.bn.gamma"), &bn.gamma),
                            binder.bind(format!("{name}.bn.beta"), &bn.beta),
                        )
                    } else {
                        (binder.bind_frozen(&bn.gamma), binder.bind_frozen(&bn.beta))
                    }
                });
                bound_stage.push((conv, bn));
            }
            blocks.push(bound_stage);
        }
        BoundBackbone { blocks }
    }

    /// Run the backbone through existing bindings: returns the final feature
    /// maps [B×C×h×w] and their globally pooled vectors [B×C]. Running BN
    /// statistics update only when `training` is true.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        x: Var,
        training: bool,
    ) -> Result<(Var, Var), TensorError> {
        let expected = [
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        let got = tape.shape(x);
        if got.len() != 4 || got[1..] != expected {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: got.to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let mut cur = x;
        for (stage, bound_stage) in self.stages.iter_mut().zip(&bound.blocks) {
            for (block, (conv, bn_vars)) in stage.iter_mut().zip(bound_stage) {
                cur = conv.forward(tape, cur)?;
                if let (Some(bn), Some((gamma, beta))) = (&mut block.bn, bn_vars) {
                    let stats = BnStats {
                        running_mean: bn.running_mean.data_mut(),
                        running_var: bn.running_var.data_mut(),
                        momentum: bn.momentum,
                    };
                    cur = tape.batch_norm(cur, *gamma, *beta, stats, training, bn.eps)?;
                }
                cur = tape.relu(cur);
            }
            cur = tape.max_pool2(cur)?;
        }
        let globals = tape.global_avg_pool(cur)?;
        Ok((cur, globals))
    }

    /// Bind and run in one go, for single-batch callers.
    pub fn encode(
        &mut self,
        binder: &mut Binder,
        x: Var,
        training: bool,
        trainable: bool,
    ) -> Result<(Var, Var), TensorError> {
        let bound = self.bind(binder, trainable);
        self.forward(binder.tape, &bound, x, training)
    }
}

impl Stateful for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let name = join_name(prefix, &format!("stage{si}.block{bi}"));
                block.conv.visit(&format!("{name}.conv"), f);
                if let Some(bn) = &mut block.bn {
                    bn.visit(&format!("{name}.bn"), f);
                }
            }
        }
    }
}

/// MLP with one hidden layer mapping pooled features into projection space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::he(in_dim, hidden, rng),
            l2: Linear::he(hidden, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundProjection {
        BoundProjection {
            l1: self.l1.bind(b, &format!("{name}.l1"), trainable),
            l2: self.l2.bind(b, &format!("{name}.l2"), trainable),
        }
    }
}

impl Stateful for ProjectionHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BoundProjection {
    pub l1: BoundLinear,
    pub l2: BoundLinear,
}

impl BoundProjection {
    /// z = proj(h); no normalization here, each loss normalizes internally.
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var, TensorError> {
        let mid = self.l1.forward(tape, h)?;
        let mid = tape.relu(mid);
        self.l2.forward(tape, mid)
    }
}

/// The three spatial projection heads shared by both maps of a contrast pair,
/// applied at every spatial position.
#[derive(Debug, Clone)]
pub struct SpatialHeads {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl SpatialHeads {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::xavier(in_dim, out_dim, rng),
            k: Linear::xavier(in_dim, out_dim, rng),
            v: Linear::xavier(in_dim, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.q.out_dim()
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundSpatialHeads {
        BoundSpatialHeads {
            q: self.q.bind(b, &format!("{name}.q"), trainable),
            k: self.k.bind(b, &format!("{name}.k"), trainable),
            v: self.v.bind(b, &format!("{name}.v"), trainable),
            scale: 1.0 / (self.out_dim() as f64).sqrt(),
        }
    }
}

impl Stateful for SpatialHeads {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BoundSpatialHeads {
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub scale: f64,
}

/// Position-wise FC layer with ReLU producing the map side of the
/// vector-map similarity.
#[derive(Debug, Clone)]
pub struct VecMapHead {
    pub fc: Linear,
}

impl VecMapHead {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: Linear::he(in_dim, out_dim, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundVecMapHead {
        BoundVecMapHead {
            fc: self.fc.bind(b, &format!("{name}.fc"), trainable),
        }
    }
}

impl Stateful for VecMapHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BoundVecMapHead {
    pub fc: BoundLinear,
}

impl BoundVecMapHead {
    /// u = σ(W x̂) applied per position; input rows are positions.
    pub fn forward(&self, tape: &mut Tape, map_rows: Var) -> Result<Var, TensorError> {
        let u = self.fc.forward(tape, map_rows)?;
        Ok(tape.relu(u))
    }
}

/// Affine classifier over the base classes, used by the pre-train CE term.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub fc: Linear,
}

impl ClassifierHead {
    pub fn new(in_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: Linear::xavier(in_dim, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundLinear {
        self.fc.bind(b, name, trainable)
    }
}

impl Stateful for ClassifierHead {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.fc.visit(prefix, f);
    }
}

/// Everything trained in the pre-training stage.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub proj: ProjectionHead,
    pub spatial: SpatialHeads,
    pub vecmap: VecMapHead,
    pub classifier: ClassifierHead,
}

impl Model {
    pub fn new(
        config: BackboneConfig,
        proj_dim: usize,
        proj_hidden: usize,
        base_classes: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config, &mut rng)?;
        let c = backbone.config.feature_dim();
        Ok(Self {
            backbone,
            proj: ProjectionHead::new(c, proj_hidden, proj_dim, &mut rng),
            spatial: SpatialHeads::new(c, proj_dim, &mut rng),
            vecmap: VecMapHead::new(c, proj_dim, &mut rng),
            classifier: ClassifierHead::new(c, base_classes, &mut rng),
        })
    }
}

impl Stateful for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.backbone.visit(&join_name(prefix, "encoder"), f);
        self.proj.visit(&join_name(prefix, "proj"), f);
        self.spatial.visit(&join_name(prefix, "spatial"), f);
        self.vecmap.visit(&join_name(prefix, "vecmap"), f);
        self.classifier.visit(&join_name(prefix, "classifier"), f);
    }
}

/// Mean cross-entropy of logits [B×K] against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let shape = tape.shape(logits).to_vec();
    let classes = shape[1];
    for &y in labels {
        if y >= classes {
            return Err(ModelError::LabelOutOfRange { label: y, classes });
        }
    }
    let logp = tape.log_softmax_last(logits)?;
    let flat = tape.reshape(logp, &[shape[0] * classes])?;
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * classes + y).collect();
    let chosen = tape.gather_elems(flat, &picks)?;
    let mean = tape.mean_all(chosen);
    Ok(tape.neg(mean))
}

/// Extract sample `i`'s feature map from a batch [B×C×h×w] as position-major
/// rows [hw×C], the layout the spatial heads operate on.
pub fn sample_map_rows(tape: &mut Tape, maps: Var, i: usize) -> Result<Var, TensorError> {
    let s = tape.shape(maps).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(maps, &[b, c * h * w])?;
    let row = tape.gather_rows(flat, &[i])?;
    let by_channel = tape.reshape(row, &[c, h * w])?;
    tape.transpose(by_channel)
}
