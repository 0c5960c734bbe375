//! M-way K-shot episode sampling and cross-view pairing.

use super::augment::{augment, AugmentationPolicy};
use super::split::DatasetSplit;
use crate::seed;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("episode wants {ways} ways but split has {available} classes")]
    NotEnoughClasses { ways: usize, available: usize },
    #[error("class {name} has {got} samples, episode needs {required}")]
    NotEnoughSamples {
        name: String,
        got: usize,
        required: usize,
    },
    #[error("episode shape must be non-degenerate (ways ≥ 1, shots ≥ 1)")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

/// Index-level episode: (class, image) references into a split, grouped by
/// episode label. Support and query indices are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub support_labels: Vec<usize>,
    pub query: Vec<(usize, usize)>,
    pub query_labels: Vec<usize>,
}

/// Sample M classes then K+Q distinct instances per class, deterministically
/// from the seed.
pub fn sample_episode(
    split: &DatasetSplit,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<Episode, EpisodeError> {
    if spec.ways == 0 || spec.shots == 0 {
        return Err(EpisodeError::Degenerate);
    }
    if spec.ways > split.n_classes() {
        return Err(EpisodeError::NotEnoughClasses {
            ways: spec.ways,
            available: split.n_classes(),
        });
    }
    let per_class = spec.shots + spec.queries;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = index::sample(&mut rng, split.n_classes(), spec.ways).into_vec();
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut support_labels = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries);
    let mut query_labels = Vec::with_capacity(spec.ways * spec.queries);
    for (label, &class) in classes.iter().enumerate() {
        let available = split.classes[class].count();
        if available < per_class {
            return Err(EpisodeError::NotEnoughSamples {
                name: split.classes[class].name.clone(),
                got: available,
                required: per_class,
            });
        }
        let picks = index::sample(&mut rng, available, per_class).into_vec();
        for &img in &picks[..spec.shots] {
            support.push((class, img));
            support_labels.push(label);
        }
        for &img in &picks[spec.shots..] {
            query.push((class, img));
            query_labels.push(label);
        }
    }
    Ok(Episode {
        classes,
        support,
        support_labels,
        query,
        query_labels,
    })
}

/// The pixel-level views of one episode: each view augments every episode
/// image independently; both views share source indices and labels
/// slot-for-slot.
pub struct EpisodeViews {
    pub episode: Episode,
    /// Per view: augmented support images then query images, flat CHW each.
    pub support: [Vec<Vec<f64>>; 2],
    pub query: [Vec<Vec<f64>>; 2],
}

/// Augment one base episode under two policies. Per-image seeds derive from
/// the given view seeds and the slot index, so views are reproducible and
/// independent.
pub fn make_viewed_episode(
    split: &DatasetSplit,
    episode: Episode,
    policies: [&AugmentationPolicy; 2],
    view_seeds: [u64; 2],
) -> EpisodeViews {
    let [ch, h, w] = split.image_shape;
    let mut support = [Vec::new(), Vec::new()];
    let mut query = [Vec::new(), Vec::new()];
    for (v, (policy, view_seed)) in policies.iter().zip(view_seeds).enumerate() {
        for (slot, &(class, img)) in episode.support.iter().enumerate() {
            let s = seed::derive(view_seed, "support", &[slot as u64]);
            support[v].push(augment(split.classes[class].image(img), ch, h, w, policy, s));
        }
        for (slot, &(class, img)) in episode.query.iter().enumerate() {
            let s = seed::derive(view_seed, "query", &[slot as u64]);
            query[v].push(augment(split.classes[class].image(img), ch, h, w, policy, s));
        }
    }
    EpisodeViews {
        episode,
        support,
        query,
    }
}
