//! Meta-training machinery: prototypes, the task-specific attention
//! alignment, cross-view episodic classification, the distance-scaled
//! contrastive loss and the meta-test nearest-centroid evaluator.

use crate::nn::{Binder, BoundLayerNorm, BoundLinear, LayerNorm, Linear, SlotRole, Stateful};
use crate::pretrain::NORM_EPS;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("episode class {0} has no support samples")]
    EmptyClass(usize),
    #[error("episode labels do not form {ways} classes × {per_class} samples: class {class} has {got}")]
    BadLabelStructure {
        ways: usize,
        per_class: usize,
        class: usize,
        got: usize,
    },
    #[error("the two views disagree in label structure at slot {0}")]
    ViewMismatch(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// τ₅, β and the ablation switches of the meta objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaLossConfig {
    pub tau5: f64,
    pub beta: f64,
    pub use_cvet: bool,
    pub use_info: bool,
    pub bypass_attention: bool,
    pub squared_distance: bool,
}

impl MetaLossConfig {
    /// Defaults follow the shot count: β = 0.01 for 1-shot, 0.1 otherwise.
    pub fn default_for_shots(shots: usize) -> Self {
        Self {
            tau5: 0.1,
            beta: if shots == 1 { 0.01 } else { 0.1 },
            use_cvet: true,
            use_info: true,
            bypass_attention: false,
            squared_distance: false,
        }
    }
}

/// One encoded view of an episode: pooled vectors and projected vectors for
/// support and query sets, labels renumbered 1..M as 0-based class indices.
pub struct EpisodeView {
    pub support_h: Var,
    pub support_z: Var,
    pub query_h: Var,
    pub query_z: Var,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Two augmented realizations of one base episode, slot-aligned.
pub struct ViewedEpisode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub views: [EpisodeView; 2],
}

impl ViewedEpisode {
    pub fn validate(&self) -> Result<(), MetaError> {
        for view in &self.views {
            check_structure(&view.support_labels, self.ways, self.shots)?;
            check_structure(&view.query_labels, self.ways, self.queries)?;
        }
        let [a, b] = &self.views;
        for (i, (x, y)) in a
            .support_labels
            .iter()
            .chain(&a.query_labels)
            .zip(b.support_labels.iter().chain(&b.query_labels))
            .enumerate()
        {
            if x != y {
                return Err(MetaError::ViewMismatch(i));
            }
        }
        Ok(())
    }
}

fn check_structure(labels: &[usize], ways: usize, per_class: usize) -> Result<(), MetaError> {
    let mut counts = vec![0usize; ways];
    for &y in labels {
        if y >= ways {
            return Err(MetaError::BadLabelStructure {
                ways,
                per_class,
                class: y,
                got: 0,
            });
        }
        counts[y] += 1;
    }
    for (class, &got) in counts.iter().enumerate() {
        if got != per_class {
            return Err(MetaError::BadLabelStructure {
                ways,
                per_class,
                class,
                got,
            });
        }
    }
    Ok(())
}

/// Per-class means of support vectors: rows 0..M of the result.
pub fn prototypes(
    tape: &mut Tape,
    support: Var,
    labels: &[usize],
    ways: usize,
) -> Result<Var, MetaError> {
    let mut rows = Vec::with_capacity(ways);
    for k in 0..ways {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == k).then_some(i))
            .collect();
        if members.is_empty() {
            return Err(MetaError::EmptyClass(k));
        }
        let picked = tape.gather_rows(support, &members)?;
        rows.push(tape.mean_axis0(picked)?);
    }
    Ok(tape.stack_rows(&rows)?)
}

/// Single-head task-specific attention block: scaled dot-product
/// self-attention over the prototypes with residual connections, layer
/// normalization and a position-wise feed-forward sublayer, in pre-norm
/// order. The residual-branch output projections start at zero, so a fresh
/// module is exactly the identity on the prototypes and training moves it
/// away only as the episodic loss demands.
#[derive(Debug, Clone)]
pub struct AttnModule {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
    pub dim: usize,
}

impl AttnModule {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = |d: usize| Linear {
            w: crate::nn::Param::zeros(vec![d, d]),
            b: crate::nn::Param::zeros(vec![d]),
        };
        Self {
            wq: Linear::xavier(dim, dim, &mut rng),
            wk: Linear::xavier(dim, dim, &mut rng),
            wv: Linear::xavier(dim, dim, &mut rng),
            wo: zero(dim),
            ln1: LayerNorm::new(dim),
            ffn1: Linear::he(dim, dim, &mut rng),
            ffn2: zero(dim),
            ln2: LayerNorm::new(dim),
            dim,
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundAttn {
        BoundAttn {
            wq: self.wq.bind(b, &format!("{name}.wq"), trainable),
            wk: self.wk.bind(b, &format!("{name}.wk"), trainable),
            wv: self.wv.bind(b, &format!("{name}.wv"), trainable),
            wo: self.wo.bind(b, &format!("{name}.wo"), trainable),
            ln1: self.ln1.bind(b, &format!("{name}.ln1"), trainable),
            ffn1: self.ffn1.bind(b, &format!("{name}.ffn1"), trainable),
            ffn2: self.ffn2.bind(b, &format!("{name}.ffn2"), trainable),
            ln2: self.ln2.bind(b, &format!("{name}.ln2"), trainable),
            scale: 1.0 / (self.dim as f64).sqrt(),
        }
    }
}

impl Stateful for AttnModule {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ffn1.visit(&format!("{prefix}.ffn1"), f);
        self.ffn2.visit(&format!("{prefix}.ffn2"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BoundAttn {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub ln1: BoundLayerNorm,
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
    pub ln2: BoundLayerNorm,
    pub scale: f64,
}

impl BoundAttn {
    /// T(r) = Attn(c¹, …, cᴹ): permutation-equivariant set transform of the
    /// raw prototypes. Pre-norm: each sublayer reads a layer-normalized copy
    /// and adds its projection back onto the untouched residual stream.
    pub fn align(&self, tape: &mut Tape, raw: Var) -> Result<Var, TensorError> {
        let normed = self.ln1.forward(tape, raw)?;
        let q = self.wq.forward(tape, normed)?;
        let k = self.wk.forward(tape, normed)?;
        let v = self.wv.forward(tape, normed)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.mul_scalar(logits, self.scale);
        let attn = tape.softmax_last(logits)?;
        let mixed = tape.matmul(attn, v)?;
        let mixed = self.wo.forward(tape, mixed)?;
        let res = tape.add(raw, mixed)?;
        let normed2 = self.ln2.forward(tape, res)?;
        let ff = self.ffn1.forward(tape, normed2)?;
        let ff = tape.relu(ff);
        let ff = self.ffn2.forward(tape, ff)?;
        tape.add(res, ff)
    }
}

/// Attention weights of [`BoundAttn::align`]'s softmax for one prototype set,
/// exposed for structural checks.
pub fn attention_rows(tape: &mut Tape, attn: &BoundAttn, raw: Var) -> Result<Var, TensorError> {
    let normed = attn.ln1.forward(tape, raw)?;
    let q = attn.wq.forward(tape, normed)?;
    let k = attn.wk.forward(tape, normed)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.mul_scalar(logits, attn.scale);
    tape.softmax_last(logits)
}

/// Softmax over negative distances: rows of `distances` are queries, columns
/// classes. Adding a constant to every distance in a row leaves that row's
/// probabilities unchanged.
pub fn probs_from_distances(tape: &mut Tape, distances: Var) -> Result<Var, TensorError> {
    let neg = tape.neg(distances);
    tape.softmax_last(neg)
}

/// Class probabilities of each query against the aligned prototypes.
pub fn classify_queries(
    tape: &mut Tape,
    queries: Var,
    aligned: Var,
    squared: bool,
) -> Result<Var, TensorError> {
    let d = tape.pairwise_euclidean(queries, aligned, squared)?;
    probs_from_distances(tape, d)
}

/// Mean negative log-likelihood of one query set against one aligned
/// prototype set.
fn ncm_loss(
    tape: &mut Tape,
    queries: Var,
    labels: &[usize],
    aligned: Var,
    squared: bool,
) -> Result<Var, MetaError> {
    let d = tape.pairwise_euclidean(queries, aligned, squared)?;
    let logits = tape.neg(d);
    let logp = tape.log_softmax_last(logits)?;
    let shape = tape.shape(logp).to_vec();
    let flat = tape.reshape(logp, &[shape[0] * shape[1]])?;
    let picks: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| i * shape[1] + y)
        .collect();
    let chosen = tape.gather_elems(flat, &picks)?;
    let mean = tape.mean_all(chosen);
    Ok(tape.neg(mean))
}

/// One view's class centroids: the raw per-class means of the pooled
/// vectors, the attention-aligned set, and the projected-space means.
pub struct PrototypeSet {
    pub raw: Var,
    pub aligned: Var,
    pub z_space: Var,
}

impl PrototypeSet {
    pub fn compute(
        tape: &mut Tape,
        view: &EpisodeView,
        ways: usize,
        attn: &BoundAttn,
        bypass_attention: bool,
    ) -> Result<Self, MetaError> {
        let raw = prototypes(tape, view.support_h, &view.support_labels, ways)?;
        let aligned = if bypass_attention {
            raw
        } else {
            attn.align(tape, raw)?
        };
        let z_space = prototypes(tape, view.support_z, &view.support_labels, ways)?;
        Ok(Self {
            raw,
            aligned,
            z_space,
        })
    }
}

/// Aligned prototype sets of both views (or the raw ones when attention is
/// bypassed).
pub fn aligned_prototypes(
    tape: &mut Tape,
    ve: &ViewedEpisode,
    attn: &BoundAttn,
    bypass_attention: bool,
) -> Result<[Var; 2], MetaError> {
    let mut out = Vec::with_capacity(2);
    for view in &ve.views {
        let set = PrototypeSet::compute(tape, view, ve.ways, attn, bypass_attention)?;
        out.push(set.aligned);
    }
    Ok([out[0], out[1]])
}

/// Cross-view classification loss: the average of the four query-set ×
/// prototype-set nearest-centroid losses.
pub fn cross_view_loss(
    tape: &mut Tape,
    ve: &ViewedEpisode,
    aligned: &[Var; 2],
    squared: bool,
) -> Result<Var, MetaError> {
    let mut total = tape.scalar(0.0);
    for view in &ve.views {
        for t in aligned {
            let l = ncm_loss(tape, view.query_h, &view.query_labels, *t, squared)?;
            total = tape.add(total, l)?;
        }
    }
    Ok(tape.mul_scalar(total, 0.25))
}

/// Distance-scaled contrastive loss over the projected vectors of both views.
///
/// Anchors are all queries of both views. For anchor zᵢ the positive set is
/// its other-view counterpart plus both views' same-class supports; the
/// candidate set adds all supports and both views' projected-space
/// prototypes. Every exponential is weighted by λ = 2 − cos.
pub fn distance_scaled_loss(
    tape: &mut Tape,
    ve: &ViewedEpisode,
    tau5: f64,
) -> Result<Var, MetaError> {
    if !(tau5 > 0.0) {
        return Err(MetaError::BadTemperature(tau5));
    }
    let inv_tau = 1.0 / tau5;
    let [v1, v2] = &ve.views;
    let mk = ve.ways * ve.shots;

    let o1 = prototypes(tape, v1.support_z, &v1.support_labels, ve.ways)?;
    let o2 = prototypes(tape, v2.support_z, &v2.support_labels, ve.ways)?;
    let s1n = tape.l2_normalize_last(v1.support_z, NORM_EPS)?;
    let s2n = tape.l2_normalize_last(v2.support_z, NORM_EPS)?;
    let q1n = tape.l2_normalize_last(v1.query_z, NORM_EPS)?;
    let q2n = tape.l2_normalize_last(v2.query_z, NORM_EPS)?;
    let o1n = tape.l2_normalize_last(o1, NORM_EPS)?;
    let o2n = tape.l2_normalize_last(o2, NORM_EPS)?;

    let mut total = tape.scalar(0.0);
    for (qn, counterpart, q_labels) in [
        (q1n, q2n, &v1.query_labels),
        (q2n, q1n, &v2.query_labels),
    ] {
        for (qi, &yi) in q_labels.iter().enumerate() {
            let anchor2 = tape.gather_rows(qn, &[qi])?;
            let anchor = tape.transpose(anchor2)?; // [D×1]

            // Candidate matrix A(zᵢ): counterpart first, then both views'
            // supports, then both views' prototypes.
            let cp = tape.gather_rows(counterpart, &[qi])?;
            let cp = {
                let d = tape.shape(cp)[1];
                tape.reshape(cp, &[d])?
            };
            let mut cand_rows = vec![cp];
            let mut positive_idx = vec![0usize];
            for (offset, (sn, s_labels)) in [
                (1, (s1n, &v1.support_labels)),
                (1 + mk, (s2n, &v2.support_labels)),
            ] {
                for (si, &ys) in s_labels.iter().enumerate() {
                    if ys == yi {
                        positive_idx.push(offset + si);
                    }
                }
                for si in 0..s_labels.len() {
                    let r = tape.gather_rows(sn, &[si])?;
                    let d = tape.shape(r)[1];
                    cand_rows.push(tape.reshape(r, &[d])?);
                }
            }
            for on in [o1n, o2n] {
                for k in 0..ve.ways {
                    let r = tape.gather_rows(on, &[k])?;
                    let d = tape.shape(r)[1];
                    cand_rows.push(tape.reshape(r, &[d])?);
                }
            }
            let cands = tape.stack_rows(&cand_rows)?;

            // Per-candidate term s/τ + ln λ so Σ λe^{s/τ} = Σ e^{s/τ + ln λ}.
            let sims2 = tape.matmul(cands, anchor)?;
            let n_cands = tape.shape(sims2)[0];
            let sims = tape.reshape(sims2, &[n_cands])?;
            let neg_sims = tape.neg(sims);
            let lambda = tape.add_scalar(neg_sims, 2.0);
            let ln_lambda = tape.log(lambda);
            let scaled = tape.mul_scalar(sims, inv_tau);
            let terms = tape.add(scaled, ln_lambda)?;
            let lse = tape.logsumexp(terms)?;

            let pos_terms = tape.gather_elems(terms, &positive_idx)?;
            let pos_sum = tape.sum_all(pos_terms);
            let pos_mean = tape.mul_scalar(pos_sum, 1.0 / positive_idx.len() as f64);
            let li = tape.sub(lse, pos_mean)?;
            total = tape.add(total, li)?;
        }
    }
    Ok(total)
}

/// Total meta-training objective with its logged breakdown. With CVET off the
/// single-view loss L₁₁ stands in for the cross-view average; with the
/// contrastive term off (or β = 0) the objective is the classification loss
/// alone.
pub fn meta_total(
    tape: &mut Tape,
    ve: &ViewedEpisode,
    attn: &BoundAttn,
    cfg: &MetaLossConfig,
) -> Result<(Var, BTreeMap<String, f64>), MetaError> {
    ve.validate()?;
    let aligned = aligned_prototypes(tape, ve, attn, cfg.bypass_attention)?;
    let l_meta = if cfg.use_cvet {
        cross_view_loss(tape, ve, &aligned, cfg.squared_distance)?
    } else {
        ncm_loss(
            tape,
            ve.views[0].query_h,
            &ve.views[0].query_labels,
            aligned[0],
            cfg.squared_distance,
        )?
    };
    let mut breakdown = BTreeMap::new();
    breakdown.insert("meta".to_string(), tape.value(l_meta));
    let mut total = l_meta;
    if cfg.use_info && cfg.beta != 0.0 {
        let info = distance_scaled_loss(tape, ve, cfg.tau5)?;
        breakdown.insert("info_raw".to_string(), tape.value(info));
        let info = tape.mul_scalar(info, cfg.beta);
        breakdown.insert("info".to_string(), tape.value(info));
        total = tape.add(total, info)?;
    }
    breakdown.insert("total".to_string(), tape.value(total));
    Ok((total, breakdown))
}

/// Nearest-centroid prediction for a single-view episode in eval mode.
/// Ties break toward the smallest class index.
pub fn meta_test_predict(
    tape: &mut Tape,
    support_h: Var,
    support_labels: &[usize],
    query_h: Var,
    ways: usize,
    attn: Option<&BoundAttn>,
    squared: bool,
) -> Result<Vec<usize>, MetaError> {
    let raw = prototypes(tape, support_h, support_labels, ways)?;
    let aligned = match attn {
        Some(a) => a.align(tape, raw)?,
        None => raw,
    };
    let probs = classify_queries(tape, query_h, aligned, squared)?;
    let data = tape.data(probs);
    let n = tape.shape(probs)[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * ways..(i + 1) * ways];
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn episode_from(
        tape: &mut Tape,
        ways: usize,
        shots: usize,
        queries: usize,
        tensors: [&Tensor; 8],
    ) -> ViewedEpisode {
        let labels_s: Vec<usize> = (0..ways).flat_map(|k| vec![k; shots]).collect();
        let labels_q: Vec<usize> = (0..ways).flat_map(|k| vec![k; queries]).collect();
        let [s1h, s1z, q1h, q1z, s2h, s2z, q2h, q2z] = tensors;
        ViewedEpisode {
            ways,
            shots,
            queries,
            views: [
                EpisodeView {
                    support_h: tape.leaf(s1h),
                    support_z: tape.leaf(s1z),
                    query_h: tape.leaf(q1h),
                    query_z: tape.leaf(q1z),
                    support_labels: labels_s.clone(),
                    query_labels: labels_q.clone(),
                },
                EpisodeView {
                    support_h: tape.leaf(s2h),
                    support_z: tape.leaf(s2z),
                    query_h: tape.leaf(q2h),
                    query_z: tape.leaf(q2z),
                    support_labels: labels_s,
                    query_labels: labels_q,
                },
            ],
        }
    }

    fn rand_episode(
        tape: &mut Tape,
        ways: usize,
        shots: usize,
        queries: usize,
        c: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> ViewedEpisode {
        let sh = [
            rand_tensor(&[ways * shots, c], rng),
            rand_tensor(&[ways * shots, d], rng),
            rand_tensor(&[ways * queries, c], rng),
            rand_tensor(&[ways * queries, d], rng),
            rand_tensor(&[ways * shots, c], rng),
            rand_tensor(&[ways * shots, d], rng),
            rand_tensor(&[ways * queries, c], rng),
            rand_tensor(&[ways * queries, d], rng),
        ];
        episode_from(
            tape,
            ways,
            shots,
            queries,
            [&sh[0], &sh[1], &sh[2], &sh[3], &sh[4], &sh[5], &sh[6], &sh[7]],
        )
    }

    #[test]
    fn prototype_of_single_shot_is_the_support_vector() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.5]).unwrap());
        let p = prototypes(&mut tape, s, &[0, 1], 2).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, -1.0, 0.5, 2.5]);
    }

    #[test]
    fn prototype_of_identical_vectors_is_that_vector() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![2, 2], vec![0.5, -2.0, 0.5, -2.0]).unwrap());
        let p = prototypes(&mut tape, s, &[0, 0], 1).unwrap();
        assert_eq!(tape.data(p), &[0.5, -2.0]);
    }

    #[test]
    fn prototypes_match_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ways = 3;
        let shots = 5;
        let s = rand_tensor(&[ways * shots, 4], &mut rng);
        let labels: Vec<usize> = (0..ways).flat_map(|k| vec![k; shots]).collect();
        let mut tape = Tape::new();
        let sv = tape.leaf(&s);
        let p = prototypes(&mut tape, sv, &labels, ways).unwrap();
        for k in 0..ways {
            for j in 0..4 {
                let mean: f64 = (0..shots)
                    .map(|i| s.data()[(k * shots + i) * 4 + j])
                    .sum::<f64>()
                    / shots as f64;
                assert!((tape.data(p)[k * 4 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototype_is_stable_under_within_class_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = rand_tensor(&[4, 6], &mut rng);
        let mut tape = Tape::new();
        let sv = tape.leaf(&s);
        let p1 = prototypes(&mut tape, sv, &[0, 0, 0, 0], 1).unwrap();
        // Reverse the sample order inside the class.
        let mut rev = Vec::new();
        for i in (0..4).rev() {
            rev.extend_from_slice(&s.data()[i * 6..(i + 1) * 6]);
        }
        let rv = tape.leaf(&Tensor::new(vec![4, 6], rev).unwrap());
        let p2 = prototypes(&mut tape, rv, &[0, 0, 0, 0], 1).unwrap();
        for (a, b) in tape.data(p1).to_vec().iter().zip(tape.data(p2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(matches!(
            prototypes(&mut tape, s, &[0, 0], 2),
            Err(MetaError::EmptyClass(1))
        ));
    }

    #[test]
    fn fresh_attention_is_exactly_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let attn = AttnModule::new(6, 123);
        let raw = rand_tensor(&[4, 6], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let rv = binder.tape.leaf(&raw);
        let out = bound.align(binder.tape, rv).unwrap();
        assert_eq!(tape.data(out), raw.data());
    }

    #[test]
    fn align_preserves_shape_for_single_prototype() {
        let attn = AttnModule::new(4, 7);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let raw = binder.tape.leaf(&Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let out = bound.align(binder.tape, raw).unwrap();
        assert_eq!(tape.shape(out), &[1, 4]);
        assert!(tape.data(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn align_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = AttnModule::new(5, 8);
        let raw = rand_tensor(&[4, 5], &mut rng);
        let run = |input: &Tensor| {
            let attn = attn.clone();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bound = attn.bind(&mut binder, "attn", false);
            let rv = binder.tape.leaf(input);
            let out = bound.align(binder.tape, rv).unwrap();
            tape.data(out).to_vec()
        };
        let base = run(&raw);
        let perm = [3usize, 0, 2, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&raw.data()[i * 5..(i + 1) * 5]);
        }
        let out = run(&Tensor::new(vec![4, 5], permuted).unwrap());
        for (slot, &src) in perm.iter().enumerate() {
            for j in 0..5 {
                assert!((out[slot * 5 + j] - base[src * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = AttnModule::new(4, 9);
        let raw = rand_tensor(&[3, 4], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let rv = binder.tape.leaf(&raw);
        let rows = attention_rows(binder.tape, &bound, rv).unwrap();
        for row in tape.data(rows).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_equidistant_queries_uniformly() {
        let mut tape = Tape::new();
        let r = 3.0f64.sqrt() / 2.0;
        let aligned =
            tape.leaf(&Tensor::new(vec![3, 2], vec![1.0, 0.0, -0.5, r, -0.5, -r]).unwrap());
        // The origin is equidistant from all three unit-norm prototypes.
        let q = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let probs = classify_queries(&mut tape, q, aligned, false).unwrap();
        for &p in tape.data(probs) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let total: f64 = tape.data(probs).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_collapses_onto_coincident_prototype() {
        let mut tape = Tape::new();
        let aligned = tape.leaf(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 50.0, 0.0]).unwrap());
        let q = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let probs = classify_queries(&mut tape, q, aligned, false).unwrap();
        assert!(tape.data(probs)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn classify_two_way_hand_computed() {
        // Distances 1 and 2: softmax(−d) = [e⁻¹, e⁻²] normalized.
        let mut tape = Tape::new();
        let aligned = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let q = tape.leaf(&Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let probs = classify_queries(&mut tape, q, aligned, false).unwrap();
        assert!((tape.data(probs)[0] - 0.7311).abs() < 1e-4);
        assert!((tape.data(probs)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn distance_shift_leaves_probabilities_and_argmax_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = rand_tensor(&[3, 4], &mut rng);
        let mut shifted = d.clone();
        for v in shifted.data_mut() {
            *v += 2.5;
        }
        let mut tape = Tape::new();
        let dv = tape.leaf(&d);
        let sv = tape.leaf(&shifted);
        let p1 = probs_from_distances(&mut tape, dv).unwrap();
        let p2 = probs_from_distances(&mut tape, sv).unwrap();
        for (a, b) in tape.data(p1).iter().zip(tape.data(p2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_views_make_all_four_terms_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = AttnModule::new(4, 11);
        let sh = rand_tensor(&[2, 4], &mut rng);
        let sz = rand_tensor(&[2, 3], &mut rng);
        let qh = rand_tensor(&[4, 4], &mut rng);
        let qz = rand_tensor(&[4, 3], &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let ve = episode_from(binder.tape, 2, 1, 2, [&sh, &sz, &qh, &qz, &sh, &sz, &qh, &qz]);
        let aligned = aligned_prototypes(binder.tape, &ve, &bound, false).unwrap();
        let cross = cross_view_loss(binder.tape, &ve, &aligned, false).unwrap();
        let l11 = {
            let cfg = MetaLossConfig {
                use_cvet: false,
                use_info: false,
                ..MetaLossConfig::default_for_shots(1)
            };
            let (l, _) = meta_total(binder.tape, &ve, &bound, &cfg).unwrap();
            l
        };
        assert!((tape.value(cross) - tape.value(l11)).abs() < 1e-12);
    }

    #[test]
    fn view_swap_leaves_cross_view_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let attn = AttnModule::new(4, 12);
        let t: Vec<Tensor> = (0..8)
            .map(|i| {
                let shape = if i % 4 < 2 { [3usize, 4] } else { [6, 4] };
                let dims = if i % 2 == 0 { shape } else { [shape[0], 3] };
                rand_tensor(&[dims[0], dims[1]], &mut rng)
            })
            .collect();
        let run = |order: [usize; 8]| {
            let attn = attn.clone();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bound = attn.bind(&mut binder, "attn", false);
            let ve = episode_from(
                binder.tape,
                3,
                1,
                2,
                [
                    &t[order[0]], &t[order[1]], &t[order[2]], &t[order[3]],
                    &t[order[4]], &t[order[5]], &t[order[6]], &t[order[7]],
                ],
            );
            let aligned = aligned_prototypes(binder.tape, &ve, &bound, false).unwrap();
            let l = cross_view_loss(binder.tape, &ve, &aligned, false).unwrap();
            tape.value(l)
        };
        let a = run([0, 1, 2, 3, 4, 5, 6, 7]);
        let b = run([4, 5, 6, 7, 0, 1, 2, 3]);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn distance_coefficient_matches_its_definition() {
        // λ = 2 − cos on normalized vectors: 1 for a vector with itself,
        // 2 for orthogonal pairs, 3 for antipodal pairs.
        let cases = [
            (vec![0.3, 0.4], vec![0.3, 0.4], 1.0),
            (vec![1.0, 0.0], vec![0.0, 2.5], 2.0),
            (vec![0.6, -0.8], vec![-0.6, 0.8], 3.0),
        ];
        for (a, b, expected) in cases {
            let mut tape = Tape::new();
            let av = tape.leaf(&Tensor::from_vec(a));
            let bv = tape.leaf(&Tensor::from_vec(b));
            let cos = tape.cosine_similarity(av, bv).unwrap();
            let lambda = 2.0 - tape.value(cos);
            assert!((lambda - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_distance_scaled_loss_is_two_ln_five() {
        let v = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let mut tape = Tape::new();
        let ve = episode_from(&mut tape, 1, 1, 1, [&v, &v, &v, &v, &v, &v, &v, &v]);
        let loss = distance_scaled_loss(&mut tape, &ve, 0.1).unwrap();
        assert!((tape.value(loss) - 2.0 * 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn meta_total_composition_and_ablations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = AttnModule::new(4, 13);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let ve = rand_episode(binder.tape, 2, 2, 3, 4, 3, &mut rng);

        let full = MetaLossConfig {
            beta: 0.25,
            ..MetaLossConfig::default_for_shots(1)
        };
        let (total, bd) = meta_total(binder.tape, &ve, &bound, &full).unwrap();
        let total_v = binder.tape.value(total);
        assert!((total_v - bd["meta"] - bd["info"]).abs() < 1e-12);
        assert!((bd["info"] - 0.25 * bd["info_raw"]).abs() < 1e-12);

        let no_info = MetaLossConfig {
            beta: 0.0,
            ..MetaLossConfig::default_for_shots(1)
        };
        let (total_b0, bd_b0) = meta_total(binder.tape, &ve, &bound, &no_info).unwrap();
        assert_eq!(binder.tape.value(total_b0), bd_b0["meta"]);
        assert!((bd_b0["meta"] - bd["meta"]).abs() < 1e-12);
    }

    #[test]
    fn bypass_attention_reduces_to_raw_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let attn = AttnModule::new(4, 14);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = attn.bind(&mut binder, "attn", false);
        let ve = rand_episode(binder.tape, 2, 1, 2, 4, 3, &mut rng);
        let bypass = aligned_prototypes(binder.tape, &ve, &bound, true).unwrap();
        let raw = prototypes(
            binder.tape,
            ve.views[0].support_h,
            &ve.views[0].support_labels,
            2,
        )
        .unwrap();
        assert_eq!(tape.data(bypass[0]), tape.data(raw));
    }

    #[test]
    fn meta_test_predict_recovers_support_class() {
        // K = 1 and a query equal to a support vector, attention bypassed.
        let mut tape = Tape::new();
        let support =
            tape.leaf(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap());
        let query = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let preds =
            meta_test_predict(&mut tape, support, &[0, 1, 2], query, 3, None, false).unwrap();
        assert_eq!(preds, vec![1]);
    }

    #[test]
    fn ties_break_toward_the_smallest_class_index() {
        let mut tape = Tape::new();
        // Two identical prototypes: both distances tie.
        let support = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let query = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let preds =
            meta_test_predict(&mut tape, support, &[0, 1], query, 2, None, false).unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn validate_rejects_mismatched_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let mut ve = rand_episode(&mut tape, 2, 1, 1, 3, 3, &mut rng);
        ve.views[1].query_labels = vec![0, 0];
        assert!(matches!(
            ve.validate(),
            Err(MetaError::BadLabelStructure { .. }) | Err(MetaError::ViewMismatch(_))
        ));
    }
}
