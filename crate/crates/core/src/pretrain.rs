//! The four pre-training loss families and their weighted total: global
//! self-supervised, map-map and vector-map local self-supervised, global
//! supervised, plus the base-class cross-entropy term.

use crate::encoder::{
    cross_entropy, sample_map_rows, BoundProjection, BoundSpatialHeads, BoundVecMapHead,
    ModelError,
};
use crate::nn::BoundLinear;
use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("augmented batch needs at least one positive pair, got {0} views")]
    DegenerateBatch(usize),
    #[error("pairing must be a fixed-point-free involution: slot {0}")]
    BadPairing(usize),
    #[error("paired views {0} and {1} carry different labels")]
    PairLabelMismatch(usize, usize),
    #[error("anchor {0} has an empty positive set")]
    EmptyPositiveSet(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How anchor contributions combine into the final loss value. The written
/// summations use `Sum`; `Mean` divides by the anchor count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Temperatures, balance scalars and per-term switches of the pre-training
/// objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainLossWeights {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub use_ce: bool,
    pub use_global_ss: bool,
    pub use_local_ss: bool,
    pub use_map_map: bool,
    pub use_vec_map: bool,
    pub use_global_sup: bool,
    pub reduction: Reduction,
}

impl Default for PretrainLossWeights {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            tau2: 0.1,
            tau3: 0.1,
            tau4: 0.1,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            use_ce: true,
            use_global_ss: true,
            use_local_ss: true,
            use_map_map: true,
            use_vec_map: true,
            use_global_sup: true,
            reduction: Reduction::Sum,
        }
    }
}

impl PretrainLossWeights {
    pub fn validate(&self) -> Result<(), PretrainError> {
        for &t in &[self.tau1, self.tau2, self.tau3, self.tau4] {
            if !(t > 0.0) {
                return Err(PretrainError::BadTemperature(t));
            }
        }
        Ok(())
    }
}

/// One augmented batch on the tape: 2N feature maps, their pooled globals,
/// 2N projected vectors, the view pairing and the labels.
pub struct AugmentedBatch {
    pub maps: Var,
    pub globals: Var,
    pub z: Var,
    pub pair: Vec<usize>,
    pub labels: Vec<usize>,
}

impl AugmentedBatch {
    /// Wraps encoder outputs; `globals` is recomputed from the maps so it can
    /// never drift from them.
    pub fn from_parts(
        tape: &mut Tape,
        maps: Var,
        z: Var,
        pair: Vec<usize>,
        labels: Vec<usize>,
    ) -> Result<Self, PretrainError> {
        let n = pair.len();
        if n < 2 || n % 2 != 0 {
            return Err(PretrainError::DegenerateBatch(n));
        }
        if labels.len() != n || tape.shape(maps)[0] != n || tape.shape(z)[0] != n {
            return Err(PretrainError::DegenerateBatch(n));
        }
        for i in 0..n {
            let p = pair[i];
            if p >= n || p == i || pair[p] != i {
                return Err(PretrainError::BadPairing(i));
            }
            if labels[p] != labels[i] {
                return Err(PretrainError::PairLabelMismatch(i, p));
            }
        }
        let globals = tape.global_avg_pool(maps)?;
        Ok(Self {
            maps,
            globals,
            z,
            pair,
            labels,
        })
    }

    pub fn views(&self) -> usize {
        self.pair.len()
    }
}

fn reduce(tape: &mut Tape, total: Var, anchors: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.mul_scalar(total, 1.0 / anchors as f64),
    }
}

/// Anchor-excluded NT-Xent over a full similarity matrix: for each anchor
/// row, −sim(i, pair(i))/τ plus the log-sum-exp over every other column.
/// With stabilized log-sum-exp the single-pair case is exactly zero.
fn nt_xent(
    tape: &mut Tape,
    sims: Var,
    pair: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    if !(tau > 0.0) {
        return Err(PretrainError::BadTemperature(tau));
    }
    let n = pair.len();
    let inv_tau = 1.0 / tau;
    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let row2 = tape.gather_rows(sims, &[i])?;
        let row = tape.reshape(row2, &[n])?;
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let negs = tape.gather_elems(row, &others)?;
        let negs = tape.mul_scalar(negs, inv_tau);
        let lse = tape.logsumexp(negs)?;
        let pos = tape.gather_elems(row, &[pair[i]])?;
        let pos = tape.mul_scalar(pos, inv_tau);
        per_anchor.push(tape.sub(lse, pos)?);
    }
    let stacked = tape.stack_elems(&per_anchor)?;
    let total = tape.sum_all(stacked);
    Ok(reduce(tape, total, n, reduction))
}

/// Cosine-similarity matrix of the batch's projected vectors.
fn z_similarity(tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
    let zn = tape.l2_normalize_last(z, NORM_EPS)?;
    let znt = tape.transpose(zn)?;
    tape.matmul(zn, znt)
}

/// Global self-supervised contrastive loss over the projected vectors.
pub fn global_ss_loss(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    tau: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    let sims = z_similarity(tape, batch.z)?;
    nt_xent(tape, sims, &batch.pair, tau, reduction)
}

/// Global supervised contrastive loss: every other same-label view is a
/// positive, each anchor averaged over its positive set.
pub fn global_sup_loss(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    tau: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    if !(tau > 0.0) {
        return Err(PretrainError::BadTemperature(tau));
    }
    let n = batch.views();
    let inv_tau = 1.0 / tau;
    let sims = z_similarity(tape, batch.z)?;
    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && batch.labels[p] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            return Err(PretrainError::EmptyPositiveSet(i));
        }
        let row2 = tape.gather_rows(sims, &[i])?;
        let row = tape.reshape(row2, &[n])?;
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let negs = tape.gather_elems(row, &others)?;
        let negs = tape.mul_scalar(negs, inv_tau);
        let lse = tape.logsumexp(negs)?;
        let pos = tape.gather_elems(row, &positives)?;
        let pos_sum = tape.sum_all(pos);
        let pos_mean = tape.mul_scalar(pos_sum, inv_tau / positives.len() as f64);
        per_anchor.push(tape.sub(lse, pos_mean)?);
    }
    let stacked = tape.stack_elems(&per_anchor)?;
    let total = tape.sum_all(stacked);
    Ok(reduce(tape, total, n, reduction))
}

/// Query/key/value projections of one sample's feature map, positions as rows.
pub struct SpatialProjection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub positions: usize,
}

pub fn project_map(
    tape: &mut Tape,
    map_rows: Var,
    heads: &BoundSpatialHeads,
) -> Result<SpatialProjection, TensorError> {
    let positions = tape.shape(map_rows)[0];
    Ok(SpatialProjection {
        q: heads.q.forward(tape, map_rows)?,
        k: heads.k.forward(tape, map_rows)?,
        v: heads.v.forward(tape, map_rows)?,
        positions,
    })
}

/// Cross-attention map-map similarity of two projected maps: each map is
/// aligned onto the other's positions, both aligned maps are ℓ₂-normalized
/// per position, and their inner products are averaged over positions.
pub fn map_map_similarity_projected(
    tape: &mut Tape,
    a: &SpatialProjection,
    b: &SpatialProjection,
    scale: f64,
) -> Result<Var, TensorError> {
    if a.positions != b.positions {
        return Err(TensorError::ShapeMismatch {
            op: "map_map_similarity",
            lhs: vec![a.positions],
            rhs: vec![b.positions],
        });
    }
    let align = |tape: &mut Tape, q: Var, k: Var, v: Var| -> Result<Var, TensorError> {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.mul_scalar(logits, scale);
        let attn = tape.softmax_last(logits)?;
        let aligned = tape.matmul(attn, v)?;
        tape.l2_normalize_last(aligned, NORM_EPS)
    };
    let a_given_b = align(tape, b.q, a.k, a.v)?;
    let b_given_a = align(tape, a.q, b.k, b.v)?;
    let prod = tape.mul(a_given_b, b_given_a)?;
    let total = tape.sum_all(prod);
    Ok(tape.mul_scalar(total, 1.0 / a.positions as f64))
}

/// Map-map similarity straight from two feature maps in position-major rows.
pub fn map_map_similarity(
    tape: &mut Tape,
    map_rows_a: Var,
    map_rows_b: Var,
    heads: &BoundSpatialHeads,
) -> Result<Var, TensorError> {
    let pa = project_map(tape, map_rows_a, heads)?;
    let pb = project_map(tape, map_rows_b, heads)?;
    map_map_similarity_projected(tape, &pa, &pb, heads.scale)
}

/// Map-map contrastive loss over all views of the batch. The similarity is
/// symmetric in its arguments, so only unordered pairs are evaluated.
pub fn map_map_loss(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    heads: &BoundSpatialHeads,
    tau: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    let n = batch.views();
    let mut projected = Vec::with_capacity(n);
    for i in 0..n {
        let rows = sample_map_rows(tape, batch.maps, i)?;
        projected.push(project_map(tape, rows, heads)?);
    }
    let zero = tape.scalar(0.0);
    let mut cells: Vec<Vec<Var>> = vec![vec![zero; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = map_map_similarity_projected(tape, &projected[i], &projected[j], heads.scale)?;
            cells[i][j] = s;
            cells[j][i] = s;
        }
    }
    let sims = assemble_matrix(tape, &cells)?;
    nt_xent(tape, sims, &batch.pair, tau, reduction)
}

fn assemble_matrix(tape: &mut Tape, cells: &[Vec<Var>]) -> Result<Var, TensorError> {
    let mut rows = Vec::with_capacity(cells.len());
    for row in cells {
        rows.push(tape.stack_elems(row)?);
    }
    tape.stack_rows(&rows)
}

/// Vector-map similarity: anchor's projected global vector against the
/// candidate map through the FC head, both sides ℓ₂-normalized, averaged
/// over the candidate's positions.
pub fn vec_map_similarity(
    tape: &mut Tape,
    map_rows_a: Var,
    map_rows_b: Var,
    vmhead: &BoundVecMapHead,
    proj: &BoundProjection,
) -> Result<Var, TensorError> {
    let h_a = tape.mean_axis0(map_rows_a)?;
    let h_a = tape.reshape(h_a, &[1, tape.shape(h_a)[0]])?;
    let z_a = proj.forward(tape, h_a)?;
    let z_a = tape.l2_normalize_last(z_a, NORM_EPS)?;
    let u_b = vmhead.forward(tape, map_rows_b)?;
    let u_b = tape.l2_normalize_last(u_b, NORM_EPS)?;
    let z_col = tape.transpose(z_a)?;
    let dots = tape.matmul(u_b, z_col)?;
    let total = tape.sum_all(dots);
    let positions = tape.shape(map_rows_b)[0];
    Ok(tape.mul_scalar(total, 1.0 / positions as f64))
}

/// Vector-map contrastive loss: anchors supply the projected vector, every
/// other view supplies the map side.
pub fn vec_map_loss(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    vmhead: &BoundVecMapHead,
    proj: &BoundProjection,
    tau: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    let n = batch.views();
    // z_i = proj(GAP(x̂_i)) for every anchor, normalized once.
    let z = proj.forward(tape, batch.globals)?;
    let zn = tape.l2_normalize_last(z, NORM_EPS)?;
    let znt = tape.transpose(zn)?;
    let mut sim_cols = Vec::with_capacity(n);
    for j in 0..n {
        let rows = sample_map_rows(tape, batch.maps, j)?;
        let u = vmhead.forward(tape, rows)?;
        let un = tape.l2_normalize_last(u, NORM_EPS)?;
        let dots = tape.matmul(un, znt)?;
        sim_cols.push(tape.mean_axis0(dots)?);
    }
    let by_candidate = tape.stack_rows(&sim_cols)?;
    let sims = tape.transpose(by_candidate)?;
    nt_xent(tape, sims, &batch.pair, tau, reduction)
}

/// Local self-supervised loss: vector-map plus map-map.
pub fn local_ss_loss(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    heads: &BoundSpatialHeads,
    vmhead: &BoundVecMapHead,
    proj: &BoundProjection,
    tau2: f64,
    tau3: f64,
    reduction: Reduction,
) -> Result<Var, PretrainError> {
    let mm = map_map_loss(tape, batch, heads, tau2, reduction)?;
    let vm = vec_map_loss(tape, batch, vmhead, proj, tau3, reduction)?;
    Ok(tape.add(vm, mm)?)
}

/// The heads the total pre-training objective draws on.
pub struct PretrainHeads {
    pub proj: BoundProjection,
    pub spatial: BoundSpatialHeads,
    pub vecmap: BoundVecMapHead,
    pub classifier: BoundLinear,
}

/// Weighted total objective plus the per-term breakdown (weighted values, as
/// they enter the total).
pub fn pretrain_total(
    tape: &mut Tape,
    batch: &AugmentedBatch,
    heads: &PretrainHeads,
    weights: &PretrainLossWeights,
) -> Result<(Var, BTreeMap<String, f64>), PretrainError> {
    weights.validate()?;
    let mut breakdown = BTreeMap::new();
    let mut total = tape.scalar(0.0);

    if weights.use_ce {
        let logits = heads.classifier.forward(tape, batch.globals)?;
        let ce = cross_entropy(tape, logits, &batch.labels)?;
        breakdown.insert("ce".to_string(), tape.value(ce));
        total = tape.add(total, ce)?;
    }
    if weights.use_global_ss {
        let l = global_ss_loss(tape, batch, weights.tau1, weights.reduction)?;
        let l = tape.mul_scalar(l, weights.alpha1);
        breakdown.insert("global_ss".to_string(), tape.value(l));
        total = tape.add(total, l)?;
    }
    if weights.use_local_ss && (weights.use_map_map || weights.use_vec_map) {
        let mut local = tape.scalar(0.0);
        if weights.use_map_map {
            let mm = map_map_loss(tape, batch, &heads.spatial, weights.tau2, weights.reduction)?;
            breakdown.insert("map_map".to_string(), tape.value(mm));
            local = tape.add(local, mm)?;
        }
        if weights.use_vec_map {
            let vm = vec_map_loss(
                tape,
                batch,
                &heads.vecmap,
                &heads.proj,
                weights.tau3,
                weights.reduction,
            )?;
            breakdown.insert("vec_map".to_string(), tape.value(vm));
            local = tape.add(local, vm)?;
        }
        let local = tape.mul_scalar(local, weights.alpha2);
        breakdown.insert("local_ss".to_string(), tape.value(local));
        total = tape.add(total, local)?;
    }
    if weights.use_global_sup {
        let l = global_sup_loss(tape, batch, weights.tau4, weights.reduction)?;
        let l = tape.mul_scalar(l, weights.alpha3);
        breakdown.insert("global_sup".to_string(), tape.value(l));
        total = tape.add(total, l)?;
    }
    breakdown.insert("total".to_string(), tape.value(total));
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ClassifierHead, ProjectionHead, SpatialHeads, VecMapHead};
    use crate::nn::Binder;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn batch_on(
        tape: &mut Tape,
        maps: &Tensor,
        z: &Tensor,
        labels: Vec<usize>,
    ) -> AugmentedBatch {
        let n = labels.len();
        let pair: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
        let maps = tape.leaf(maps);
        let z = tape.leaf(z);
        AugmentedBatch::from_parts(tape, maps, z, pair, labels).unwrap()
    }

    fn identity_linear(dim: usize) -> crate::nn::Linear {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        crate::nn::Linear {
            w: crate::nn::Param {
                value: Tensor::new(vec![dim, dim], eye).unwrap(),
            },
            b: crate::nn::Param {
                value: Tensor::zeros(vec![dim]),
            },
        }
    }

    fn identity_spatial_heads(dim: usize) -> SpatialHeads {
        SpatialHeads {
            q: identity_linear(dim),
            k: identity_linear(dim),
            v: identity_linear(dim),
        }
    }

    fn identity_projection(dim: usize) -> ProjectionHead {
        ProjectionHead {
            l1: identity_linear(dim),
            l2: identity_linear(dim),
        }
    }

    #[test]
    fn single_pair_global_loss_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let maps = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let z = rand_tensor(&[2, 4], &mut rng);
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0]);
        let loss = global_ss_loss(&mut tape, &batch, 0.1, Reduction::Sum).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn all_equal_similarities_give_four_ln_three() {
        let mut tape = Tape::new();
        let maps = Tensor::zeros(vec![4, 2, 2, 2]);
        let z = Tensor::new(vec![4, 3], vec![1.0, 2.0, -0.5].repeat(4)).unwrap();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0, 1, 1]);
        let loss = global_ss_loss(&mut tape, &batch, 0.1, Reduction::Sum).unwrap();
        assert!((tape.value(loss) - 4.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mean_reduction_divides_by_anchor_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = rand_tensor(&[4, 2, 2, 2], &mut rng);
        let z = rand_tensor(&[4, 5], &mut rng);
        let mut tape = Tape::new();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0, 1, 1]);
        let sum = global_ss_loss(&mut tape, &batch, 0.1, Reduction::Sum).unwrap();
        let mean = global_ss_loss(&mut tape, &batch, 0.1, Reduction::Mean).unwrap();
        assert!((tape.value(sum) / 4.0 - tape.value(mean)).abs() < 1e-12);
    }

    #[test]
    fn temperature_monotonicity_for_separated_batch() {
        // Positives nearly parallel, negatives nearly orthogonal: sharper
        // temperatures must lower the loss.
        let z = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.995, 0.1, 0.0, 1.0, 0.1, 0.995],
        )
        .unwrap();
        let maps = Tensor::zeros(vec![4, 2, 2, 2]);
        let mut tape = Tape::new();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0, 1, 1]);
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.1] {
            let loss = global_ss_loss(&mut tape, &batch, tau, Reduction::Sum).unwrap();
            let v = tape.value(loss);
            assert!(v < last, "τ={tau}: {v} should be below {last}");
            last = v;
        }
    }

    #[test]
    fn sup_loss_single_source_reduces_to_self_supervised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let z = rand_tensor(&[2, 4], &mut rng);
        let mut tape = Tape::new();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0]);
        let sup = global_sup_loss(&mut tape, &batch, 0.1, Reduction::Sum).unwrap();
        assert_eq!(tape.value(sup), 0.0);
    }

    #[test]
    fn sup_loss_uniform_case_matches_closed_form() {
        let mut tape = Tape::new();
        let maps = Tensor::zeros(vec![4, 2, 2, 2]);
        let z = Tensor::new(vec![4, 3], vec![0.5, -1.0, 2.0].repeat(4)).unwrap();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0, 0, 0]);
        let sup = global_sup_loss(&mut tape, &batch, 0.1, Reduction::Sum).unwrap();
        assert!((tape.value(sup) - 4.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn map_map_similarity_of_identical_maps_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = identity_spatial_heads(3);
        let map = rand_tensor(&[2, 3], &mut rng); // 2 positions × 3 channels
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = heads.bind(&mut binder, "spatial", false);
        let rows = binder.tape.leaf(&map);
        let sim = map_map_similarity(binder.tape, rows, rows, &bound).unwrap();
        assert!((tape.value(sim) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_position_map_similarity_is_value_cosine() {
        // H = W = 1: the attention softmax is a no-op and the similarity is
        // the cosine of the two f_v outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = SpatialHeads::new(3, 4, &mut rng);
        let a = rand_tensor(&[1, 3], &mut rng);
        let b = rand_tensor(&[1, 3], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = heads.bind(&mut binder, "spatial", false);
        let ra = binder.tape.leaf(&a);
        let rb = binder.tape.leaf(&b);
        let sim = map_map_similarity(binder.tape, ra, rb, &bound).unwrap();

        let va = bound.v.forward(binder.tape, ra).unwrap();
        let vb = bound.v.forward(binder.tape, rb).unwrap();
        let sa = binder.tape.reshape(va, &[4]).unwrap();
        let sb = binder.tape.reshape(vb, &[4]).unwrap();
        let cos = binder.tape.cosine_similarity(sa, sb).unwrap();
        assert!((tape.value(sim) - tape.value(cos)).abs() < 1e-12);
    }

    #[test]
    fn map_map_loss_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let heads = identity_spatial_heads(2);

        // Single pair: exactly zero.
        let maps = rand_tensor(&[2, 2, 2, 1], &mut rng);
        let z = rand_tensor(&[2, 2], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = heads.bind(&mut binder, "spatial", false);
        let batch = batch_on(binder.tape, &maps, &z, vec![0, 0]);
        let loss = map_map_loss(binder.tape, &batch, &bound, 0.1, Reduction::Sum).unwrap();
        assert_eq!(tape.value(loss), 0.0);

        // All maps identical: every similarity equal, 2N·ln(2N−1).
        let one_map = rand_tensor(&[1, 2, 2, 1], &mut rng);
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(one_map.data());
        }
        let maps4 = Tensor::new(vec![4, 2, 2, 1], rep).unwrap();
        let z4 = rand_tensor(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = heads.bind(&mut binder, "spatial", false);
        let batch = batch_on(binder.tape, &maps4, &z4, vec![0, 0, 1, 1]);
        let loss = map_map_loss(binder.tape, &batch, &bound, 0.1, Reduction::Sum).unwrap();
        assert!((tape.value(loss) - 4.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn vec_map_similarity_trivial_cases() {
        // Zero FC weights: u is all-zero, similarity 0.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut vm = VecMapHead::new(2, 2, &mut rng);
        vm.fc.w.value.data_mut().fill(0.0);
        vm.fc.b.value.data_mut().fill(0.0);
        let proj = identity_projection(2);
        let map = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bvm = vm.bind(&mut binder, "vecmap", false);
        let bproj = proj.bind(&mut binder, "proj", false);
        let rows = binder.tape.leaf(&map);
        let sim = vec_map_similarity(binder.tape, rows, rows, &bvm, &bproj).unwrap();
        assert_eq!(tape.value(sim), 0.0);

        // Identity FC: every u column equals z_a = [0.6, 0.8], similarity 1.
        let vm_id = VecMapHead {
            fc: identity_linear(2),
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bvm = vm_id.bind(&mut binder, "vecmap", false);
        let bproj = proj.bind(&mut binder, "proj", false);
        let rows = binder.tape.leaf(&map);
        let sim = vec_map_similarity(binder.tape, rows, rows, &bvm, &bproj).unwrap();
        assert!((tape.value(sim) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vec_map_loss_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vm = VecMapHead::new(2, 3, &mut rng);
        let proj = ProjectionHead::new(2, 4, 3, &mut rng);

        let maps = rand_tensor(&[2, 2, 2, 1], &mut rng);
        let z = rand_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bvm = vm.bind(&mut binder, "vecmap", false);
        let bproj = proj.bind(&mut binder, "proj", false);
        let batch = batch_on(binder.tape, &maps, &z, vec![0, 0]);
        let loss = vec_map_loss(binder.tape, &batch, &bvm, &bproj, 0.1, Reduction::Sum).unwrap();
        assert_eq!(tape.value(loss), 0.0);

        let one_map = rand_tensor(&[1, 2, 2, 1], &mut rng);
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(one_map.data());
        }
        let maps4 = Tensor::new(vec![4, 2, 2, 1], rep).unwrap();
        let z4 = rand_tensor(&[4, 3], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bvm = vm.bind(&mut binder, "vecmap", false);
        let bproj = proj.bind(&mut binder, "proj", false);
        let batch = batch_on(binder.tape, &maps4, &z4, vec![0, 0, 1, 1]);
        let loss = vec_map_loss(binder.tape, &batch, &bvm, &bproj, 0.1, Reduction::Sum).unwrap();
        assert!((tape.value(loss) - 4.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn local_loss_is_sum_of_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let heads = SpatialHeads::new(3, 4, &mut rng);
        let vm = VecMapHead::new(3, 4, &mut rng);
        let proj = ProjectionHead::new(3, 6, 4, &mut rng);
        let maps = rand_tensor(&[4, 3, 2, 2], &mut rng);
        let z = rand_tensor(&[4, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bh = heads.bind(&mut binder, "spatial", false);
        let bvm = vm.bind(&mut binder, "vecmap", false);
        let bproj = proj.bind(&mut binder, "proj", false);
        let batch = batch_on(binder.tape, &maps, &z, vec![0, 0, 1, 1]);
        let local = local_ss_loss(
            binder.tape,
            &batch,
            &bh,
            &bvm,
            &bproj,
            0.1,
            0.1,
            Reduction::Sum,
        )
        .unwrap();
        let mm = map_map_loss(binder.tape, &batch, &bh, 0.1, Reduction::Sum).unwrap();
        let vmv = vec_map_loss(binder.tape, &batch, &bvm, &bproj, 0.1, Reduction::Sum).unwrap();
        assert!(
            (tape.value(local) - tape.value(mm) - tape.value(vmv)).abs() < 1e-12
        );
    }

    fn full_heads(
        binder: &mut Binder,
        c: usize,
        d: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> PretrainHeads {
        let proj = ProjectionHead::new(c, 2 * c, d, rng);
        let spatial = SpatialHeads::new(c, d, rng);
        let vecmap = VecMapHead::new(c, d, rng);
        let classifier = ClassifierHead::new(c, classes, rng);
        PretrainHeads {
            proj: proj.bind(binder, "proj", false),
            spatial: spatial.bind(binder, "spatial", false),
            vecmap: vecmap.bind(binder, "vecmap", false),
            classifier: classifier.bind(binder, "classifier", false),
        }
    }

    #[test]
    fn total_reduces_to_ce_when_terms_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let maps = rand_tensor(&[4, 3, 2, 2], &mut rng);
        let z = rand_tensor(&[4, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let heads = full_heads(&mut binder, 3, 4, 2, &mut rng);
        let batch = batch_on(binder.tape, &maps, &z, vec![0, 0, 1, 1]);

        let mut flags_off = PretrainLossWeights {
            use_global_ss: false,
            use_local_ss: false,
            use_global_sup: false,
            ..Default::default()
        };
        let (total, breakdown) =
            pretrain_total(binder.tape, &batch, &heads, &flags_off).unwrap();
        assert_eq!(tape.value(total), breakdown["ce"]);
        assert_eq!(breakdown.len(), 2); // ce + total

        // α = 0 keeps the terms in the breakdown but zeroes their effect.
        flags_off = PretrainLossWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            ..Default::default()
        };
        let mut tape2 = Tape::new();
        let mut binder2 = Binder::new(&mut tape2);
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let heads2 = full_heads(&mut binder2, 3, 4, 2, &mut rng2);
        let batch2 = batch_on(binder2.tape, &maps, &z, vec![0, 0, 1, 1]);
        let (total2, breakdown2) =
            pretrain_total(binder2.tape, &batch2, &heads2, &flags_off).unwrap();
        assert!((tape2.value(total2) - breakdown2["ce"]).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_logged_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps = rand_tensor(&[4, 3, 2, 2], &mut rng);
        let z = rand_tensor(&[4, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let heads = full_heads(&mut binder, 3, 4, 2, &mut rng);
        let batch = batch_on(binder.tape, &maps, &z, vec![0, 0, 1, 1]);
        let (total, bd) =
            pretrain_total(binder.tape, &batch, &heads, &PretrainLossWeights::default()).unwrap();
        let sum = bd["ce"] + bd["global_ss"] + bd["local_ss"] + bd["global_sup"];
        assert!((tape.value(total) - sum).abs() < 1e-12);
        // The local term is itself the sum of its logged sub-parts (α₂ = 1).
        assert!((bd["local_ss"] - bd["map_map"] - bd["vec_map"]).abs() < 1e-12);
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let z = rand_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let m = tape.leaf(&maps);
        let zv = tape.leaf(&z);
        // Fixed point in the pairing.
        assert!(matches!(
            AugmentedBatch::from_parts(&mut tape, m, zv, vec![0, 1], vec![0, 0]),
            Err(PretrainError::BadPairing(_))
        ));
        // Paired views with different labels.
        assert!(matches!(
            AugmentedBatch::from_parts(&mut tape, m, zv, vec![1, 0], vec![0, 1]),
            Err(PretrainError::PairLabelMismatch(..))
        ));
        // A single view is degenerate.
        let maps1 = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let z1 = rand_tensor(&[1, 3], &mut rng);
        let m1 = tape.leaf(&maps1);
        let zv1 = tape.leaf(&z1);
        assert!(matches!(
            AugmentedBatch::from_parts(&mut tape, m1, zv1, vec![0], vec![0]),
            Err(PretrainError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let maps = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let z = rand_tensor(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let batch = batch_on(&mut tape, &maps, &z, vec![0, 0]);
        assert!(matches!(
            global_ss_loss(&mut tape, &batch, 0.0, Reduction::Sum),
            Err(PretrainError::BadTemperature(_))
        ));
    }
}
