//! Bag-of-words place recognition: vocabulary, keyframe database, loop detection and
//! correction, and relocalization.

mod loop_closing;
mod relocalization;
mod vocabulary;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::features::DescriptorKind;
use crate::mapping::KeyFrameId;

pub use loop_closing::{
    compute_loop_transform, correct_loop, LoopCandidate, LoopConfig, LoopCorrection, LoopDetector, LoopTransform,
};
pub use relocalization::{relocalize, solve_pnp_dlt, Relocalization};
pub use vocabulary::{
    score, train_vocabulary, validate_training, BowVector, FeatureVector, VocabNode, Vocabulary, WordId, VOCAB_MAGIC, VOCAB_VERSION,
};

#[derive(Debug, Error)]
pub enum PlaceError {
    #[error("invalid vocabulary parameters: {0}")]
    InvalidParameters(String),
    #[error("training corpus of {size} descriptors is smaller than the branching factor {k}")]
    CorpusTooSmall { size: usize, k: usize },
    #[error("descriptor variant {1:?} does not match vocabulary variant {0:?}")]
    VariantMismatch(DescriptorKind, DescriptorKind),
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error("{0}: {1}")]
    Io(String, String),
}

/// Inverted index from words to the keyframes containing them.
#[derive(Clone, Debug, Default)]
pub struct KeyFrameDatabase {
    inverted: BTreeMap<WordId, BTreeSet<KeyFrameId>>,
    bows: BTreeMap<KeyFrameId, BowVector>,
}

impl KeyFrameDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: KeyFrameId, bow: &BowVector) {
        self.erase(id);
        for w in bow.0.keys() {
            self.inverted.entry(*w).or_default().insert(id);
        }
        self.bows.insert(id, bow.clone());
    }

    pub fn erase(&mut self, id: KeyFrameId) {
        if let Some(bow) = self.bows.remove(&id) {
            for w in bow.0.keys() {
                if let Some(set) = self.inverted.get_mut(w) {
                    set.remove(&id);
                    if set.is_empty() {
                        self.inverted.remove(w);
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.bows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bows.is_empty()
    }

    pub fn contains(&self, id: KeyFrameId) -> bool {
        self.bows.contains_key(&id)
    }

    /// Keyframes sharing at least one word with `bow`, outside `exclude`, scoring at least
    /// `min_score`. Sorted by score descending, ties by ascending id.
    pub fn query(&self, bow: &BowVector, exclude: &BTreeSet<KeyFrameId>, min_score: f64) -> Vec<(KeyFrameId, f64)> {
        let mut shared: BTreeSet<KeyFrameId> = BTreeSet::new();
        for w in bow.0.keys() {
            if let Some(set) = self.inverted.get(w) {
                shared.extend(set.iter().filter(|k| !exclude.contains(k)));
            }
        }
        let mut out: Vec<(KeyFrameId, f64)> = shared
            .into_iter()
            .map(|k| (k, score(bow, &self.bows[&k])))
            .filter(|(_, s)| *s >= min_score && *s > 0.0)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

/// Index pairs worth comparing between two feature sets: grouped by shared vocabulary
/// branch when both sides have feature vectors, exhaustive otherwise. Only indices
/// accepted by the filters are kept.
pub(crate) fn guided_pairs(
    fa: &FeatureVector,
    na: usize,
    fb: &FeatureVector,
    nb: usize,
    keep_a: impl Fn(usize) -> bool,
    keep_b: impl Fn(usize) -> bool,
) -> Vec<(usize, Vec<usize>)> {
    if !fa.0.is_empty() && !fb.0.is_empty() {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (ia, ib) in fa.shared(fb) {
            let js: Vec<usize> = ib.iter().copied().filter(|j| keep_b(*j)).collect();
            if js.is_empty() {
                continue;
            }
            for i in ia.iter().copied().filter(|i| keep_a(*i)) {
                out.entry(i).or_default().extend(&js);
            }
        }
        out.into_iter().collect()
    } else {
        let js: Vec<usize> = (0..nb).filter(|j| keep_b(*j)).collect();
        (0..na).filter(|i| keep_a(*i)).map(|i| (i, js.clone())).collect()
    }
}
