//! Literal-summation reference implementations of the contrastive and episodic
//! losses, written as direct transcriptions of their defining sums.
//!
//! Everything here operates on plain `f64` slices with explicit nested loops and
//! shares no kernels with the main crate: no tape, no fused ops, no stabilized
//! log-sum-exp. The main crate's tests and the `oracle` CLI subcommand compare
//! its results against these functions.

/// ℓ₂-normalize a vector; vectors with norm below `eps` are scaled by `1/eps`.
pub fn normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = if norm < eps { eps } else { norm };
    v.iter().map(|x| x / denom).collect()
}

/// Inner product after ℓ₂ normalization of both arguments.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = normalize(a, 1e-12);
    let nb = normalize(b, 1e-12);
    na.iter().zip(&nb).map(|(x, y)| x * y).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anchor-excluded NT-Xent over a precomputed similarity matrix.
///
/// `sim[i][j]` is the similarity between anchor `i` and candidate `j`;
/// `pair[i]` is the index of the positive for anchor `i`. The sum runs over
/// all anchors; the denominator excludes only the anchor itself.
pub fn nt_xent(sim: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (sim[i][pair[i]] / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            if j != i {
                den += (sim[i][j] / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total
}

/// Global self-supervised contrastive loss over projected vectors.
///
/// `z` is the augmented batch of 2N unnormalized vectors, `pair[i]` the index
/// of the other view of the same source image.
pub fn global_ss_loss(z: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
    let zn: Vec<Vec<f64>> = z.iter().map(|v| normalize(v, 1e-12)).collect();
    let n = zn.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = dot(&zn[i], &zn[j]);
        }
    }
    nt_xent(&sim, pair, tau)
}

/// Supervised contrastive loss: positives are every other sample sharing the
/// anchor's label, each anchor's contribution averaged over its positive set.
pub fn global_sup_loss(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let zn: Vec<Vec<f64>> = z.iter().map(|v| normalize(v, 1e-12)).collect();
    let n = zn.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        assert!(!positives.is_empty(), "anchor {i} has an empty positive set");
        let mut den = 0.0;
        for j in 0..n {
            if j != i {
                den += (dot(&zn[i], &zn[j]) / tau).exp();
            }
        }
        let mut li = 0.0;
        for &p in &positives {
            let num = (dot(&zn[i], &zn[p]) / tau).exp();
            li += -(num / den).ln();
        }
        total += li / positives.len() as f64;
    }
    total
}

/// Mean cross-entropy of logits against integer labels, softmax computed by
/// direct exponentiation.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let den: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[y].exp() / den).ln();
    }
    total / logits.len() as f64
}

/// A feature map stored channel-major: `data[c * hw + p]` for channel `c`,
/// position `p` in `0..hw`.
#[derive(Clone)]
pub struct MapRef<'a> {
    pub data: &'a [f64],
    pub channels: usize,
    pub hw: usize,
}

impl MapRef<'_> {
    /// The C-vector at spatial position `p`.
    pub fn column(&self, p: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.data[c * self.hw + p]).collect()
    }

    /// Global average pool: per-channel mean over positions.
    pub fn gap(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                (0..self.hw).map(|p| self.data[c * self.hw + p]).sum::<f64>() / self.hw as f64
            })
            .collect()
    }
}

/// Position-wise affine map: at every position, `out = xᵀW + b` with
/// `w` laid out row-major `[in × out]`. Returns positions × out.
pub fn positionwise_affine(map: &MapRef, w: &[f64], b: &[f64], out_dim: usize) -> Vec<Vec<f64>> {
    (0..map.hw)
        .map(|p| {
            let x = map.column(p);
            (0..out_dim)
                .map(|d| {
                    let mut acc = b[d];
                    for (c, xv) in x.iter().enumerate() {
                        acc += xv * w[c * out_dim + d];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Weights of the three shared spatial projection heads, each `[C × D]`
/// row-major with a `[D]` bias.
pub struct SpatialHeadWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub dim: usize,
}

/// Map-map similarity: cross-attention alignment of two feature maps followed
/// by the position-averaged inner product of the per-position normalized
/// aligned values.
pub fn map_map_similarity(a: &MapRef, b: &MapRef, heads: &SpatialHeadWeights) -> f64 {
    let d = heads.dim;
    let scale = 1.0 / (d as f64).sqrt();
    let qa = positionwise_affine(a, heads.wq, heads.bq, d);
    let ka = positionwise_affine(a, heads.wk, heads.bk, d);
    let va = positionwise_affine(a, heads.wv, heads.bv, d);
    let qb = positionwise_affine(b, heads.wq, heads.bq, d);
    let kb = positionwise_affine(b, heads.wk, heads.bk, d);
    let vb = positionwise_affine(b, heads.wv, heads.bv, d);

    // v'_{a|b}[p] = Σ_r softmax_r(q_b[p]·k_a[r]/√d) v_a[r]
    let align = |q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let hw = q.len();
        (0..hw)
            .map(|p| {
                let logits: Vec<f64> = (0..hw).map(|r| dot(&q[p], &k[r]) * scale).collect();
                let den: f64 = logits.iter().map(|x| x.exp()).sum();
                let mut out = vec![0.0; d];
                for (r, vr) in v.iter().enumerate() {
                    let weight = logits[r].exp() / den;
                    for (o, vv) in out.iter_mut().zip(vr) {
                        *o += weight * vv;
                    }
                }
                out
            })
            .collect()
    };

    let v_a_given_b = align(&qb, &ka, &va);
    let v_b_given_a = align(&qa, &kb, &vb);

    let hw = a.hw;
    let mut total = 0.0;
    for p in 0..hw {
        let x = normalize(&v_a_given_b[p], 1e-12);
        let y = normalize(&v_b_given_a[p], 1e-12);
        total += dot(&x, &y);
    }
    total / hw as f64
}

/// Map-map contrastive loss: NT-Xent over pairwise map-map similarities.
pub fn map_map_loss(
    maps: &[MapRef],
    pair: &[usize],
    heads: &SpatialHeadWeights,
    tau: f64,
) -> f64 {
    let n = maps.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = map_map_similarity(&maps[i], &maps[j], heads);
        }
    }
    nt_xent(&sim, pair, tau)
}

/// Projection head: affine → ReLU → affine, weights row-major `[in × out]`.
pub struct ProjectionWeights<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub hidden: usize,
    pub out: usize,
}

pub fn project(h: &[f64], p: &ProjectionWeights) -> Vec<f64> {
    let mid: Vec<f64> = (0..p.hidden)
        .map(|j| {
            let mut acc = p.b1[j];
            for (c, hv) in h.iter().enumerate() {
                acc += hv * p.w1[c * p.hidden + j];
            }
            acc.max(0.0)
        })
        .collect();
    (0..p.out)
        .map(|d| {
            let mut acc = p.b2[d];
            for (j, mv) in mid.iter().enumerate() {
                acc += mv * p.w2[j * p.out + d];
            }
            acc
        })
        .collect()
}

/// Vector-map similarity: the first argument supplies the projected global
/// vector, the second the ReLU feature map through the FC layer; both sides
/// ℓ₂-normalized before the position-averaged inner product.
pub fn vec_map_similarity(
    a: &MapRef,
    b: &MapRef,
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    proj: &ProjectionWeights,
) -> f64 {
    let z_a = normalize(&project(&a.gap(), proj), 1e-12);
    let u_b: Vec<Vec<f64>> = positionwise_affine(b, w, bias, out_dim)
        .into_iter()
        .map(|col| col.into_iter().map(|x| x.max(0.0)).collect())
        .collect();
    let hw = b.hw;
    let mut total = 0.0;
    for col in &u_b {
        total += dot(&normalize(col, 1e-12), &z_a);
    }
    total / hw as f64
}

/// Vector-map contrastive loss: NT-Xent over pairwise vector-map similarities,
/// anchors on the vector side.
#[allow(clippy::too_many_arguments)]
pub fn vec_map_loss(
    maps: &[MapRef],
    pair: &[usize],
    w: &[f64],
    bias: &[f64],
    out_dim: usize,
    proj: &ProjectionWeights,
    tau: f64,
) -> f64 {
    let n = maps.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = vec_map_similarity(&maps[i], &maps[j], w, bias, out_dim, proj);
        }
    }
    nt_xent(&sim, pair, tau)
}

/// Per-class means of support vectors, classes `0..ways`.
pub fn prototypes(support: &[Vec<f64>], labels: &[usize], ways: usize) -> Vec<Vec<f64>> {
    let dim = support[0].len();
    let mut sums = vec![vec![0.0; dim]; ways];
    let mut counts = vec![0usize; ways];
    for (v, &y) in support.iter().zip(labels) {
        for (s, x) in sums[y].iter_mut().zip(v) {
            *s += x;
        }
        counts[y] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        assert!(c > 0, "empty class in support set");
        for x in s.iter_mut() {
            *x /= c as f64;
        }
    }
    sums
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class distribution of a query against aligned prototypes: softmax over
/// negative Euclidean distances, computed by direct exponentiation.
pub fn classify_query(h: &[f64], aligned: &[Vec<f64>]) -> Vec<f64> {
    let weights: Vec<f64> = aligned.iter().map(|c| (-euclidean(h, c)).exp()).collect();
    let den: f64 = weights.iter().sum();
    weights.iter().map(|w| w / den).collect()
}

/// Mean negative log-likelihood of one query set against one aligned
/// prototype set.
pub fn ncm_loss(queries: &[Vec<f64>], labels: &[usize], aligned: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (q, &y) in queries.iter().zip(labels) {
        let probs = classify_query(q, aligned);
        total += -probs[y].ln();
    }
    total / queries.len() as f64
}

/// Cross-view classification loss: the average of the four query-set ×
/// prototype-set combinations across the two views.
pub fn cross_view_loss(
    queries: [&[Vec<f64>]; 2],
    query_labels: [&[usize]; 2],
    aligned: [&[Vec<f64>]; 2],
) -> f64 {
    let mut total = 0.0;
    for m in 0..2 {
        for n in 0..2 {
            total += ncm_loss(queries[m], query_labels[m], aligned[n]);
        }
    }
    total / 4.0
}

/// One episode view in projected space, used by the distance-scaled loss.
pub struct EpisodeZView<'a> {
    pub support: &'a [Vec<f64>],
    pub support_labels: &'a [usize],
    pub query: &'a [Vec<f64>],
    pub query_labels: &'a [usize],
}

/// Distance-scaled contrastive loss over both views of an episode.
///
/// For each query anchor the positive set is its other-view counterpart plus
/// both views' same-class supports; the candidate set is the counterpart, all
/// supports of both views and the per-view projected-space prototypes. Every
/// term is scaled by λ = 2 − cos.
pub fn distance_scaled_loss(view1: &EpisodeZView, view2: &EpisodeZView, ways: usize, tau: f64) -> f64 {
    let o1 = prototypes(view1.support, view1.support_labels, ways);
    let o2 = prototypes(view2.support, view2.support_labels, ways);

    let norm_all = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        vs.iter().map(|v| normalize(v, 1e-12)).collect()
    };
    let s1n = norm_all(view1.support);
    let s2n = norm_all(view2.support);
    let q1n = norm_all(view1.query);
    let q2n = norm_all(view2.query);
    let o1n = norm_all(&o1);
    let o2n = norm_all(&o2);

    let mut total = 0.0;
    for (anchor_view, other_view) in [(0, 1), (1, 0)] {
        let (qn, q_labels) = if anchor_view == 0 {
            (&q1n, view1.query_labels)
        } else {
            (&q2n, view2.query_labels)
        };
        let counterpart = if other_view == 0 { &q1n } else { &q2n };
        for (qi, (zi, &yi)) in qn.iter().zip(q_labels).enumerate() {
            // H(z_i): counterpart view of the same query, then same-class supports.
            let mut positives: Vec<&Vec<f64>> = vec![&counterpart[qi]];
            for (s, &ys) in s1n.iter().zip(view1.support_labels) {
                if ys == yi {
                    positives.push(s);
                }
            }
            for (s, &ys) in s2n.iter().zip(view2.support_labels) {
                if ys == yi {
                    positives.push(s);
                }
            }
            // A(z_i): counterpart, all supports of both views, all prototypes.
            let mut candidates: Vec<&Vec<f64>> = vec![&counterpart[qi]];
            candidates.extend(s1n.iter());
            candidates.extend(s2n.iter());
            candidates.extend(o1n.iter());
            candidates.extend(o2n.iter());

            let lambda = |a: &[f64], b: &[f64]| 2.0 - dot(a, b);
            let mut den = 0.0;
            for cand in &candidates {
                den += lambda(zi, cand) * (dot(zi, cand) / tau).exp();
            }
            let mut li = 0.0;
            for pos in &positives {
                let num = lambda(zi, pos) * (dot(zi, pos) / tau).exp();
                li += -(num / den).ln();
            }
            total += li / positives.len() as f64;
        }
    }
    total
}
