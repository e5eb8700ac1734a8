use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, View};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// SP batch shape: `identities` (P) per batch, `samples` (S) per identity
/// and view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub identities: usize,
    pub samples: usize,
    /// Also treat target-view samples as anchors.
    pub symmetric_anchors: bool,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            identities: 32,
            samples: 2,
            symmetric_anchors: false,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Validation(format!(
                "batch needs at least 2 identities for negatives, got {}",
                self.identities
            )));
        }
        if self.samples == 0 {
            return Err(Error::Validation("batch needs at least 1 sample per identity".into()));
        }
        Ok(())
    }
}

/// Source-view anchors against target-view candidates drawn from one SP batch.
///
/// Every (anchor, candidate) pair is labelled: 1 when the identities match
/// (the candidate is in `P(x_s)`), 0 otherwise (`N(x_s)`).
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub identities: Vec<usize>,
    /// Dataset indices of source-view samples (anchors).
    pub source: Vec<usize>,
    /// Dataset indices of target-view samples (candidates).
    pub target: Vec<usize>,
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub symmetric_anchors: bool,
}

impl PairBatch {
    pub fn num_anchors(&self) -> usize {
        self.source.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.target.len()
    }

    pub fn label(&self, anchor: usize, candidate: usize) -> f64 {
        if self.source_ids[anchor] == self.target_ids[candidate] {
            1.0
        } else {
            0.0
        }
    }

    /// Row-major `anchors x candidates` label matrix.
    pub fn labels(&self) -> Tensor {
        let (a, t) = (self.num_anchors(), self.num_candidates());
        let data = (0..a * t).map(|k| self.label(k / t, k % t)).collect();
        Tensor::matrix(a, t, data).expect("sized")
    }

    /// Candidate positions positive to `anchor`.
    pub fn positives(&self, anchor: usize) -> Vec<usize> {
        (0..self.num_candidates())
            .filter(|&t| self.label(anchor, t) == 1.0)
            .collect()
    }

    pub fn negatives(&self, anchor: usize) -> Vec<usize> {
        (0..self.num_candidates())
            .filter(|&t| self.label(anchor, t) == 0.0)
            .collect()
    }

    /// All `(anchor, candidate)` positions with label 1, anchor-major.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_anchors())
            .flat_map(|a| self.positives(a).into_iter().map(move |t| (a, t)))
            .collect()
    }

    pub fn negative_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_anchors())
            .flat_map(|a| self.negatives(a).into_iter().map(move |t| (a, t)))
            .collect()
    }
}

/// Order in which identities act as the batch cursor during one epoch.
pub fn epoch_order<R: Rng>(ds: &Dataset, rng: &mut R) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..ds.num_identities()).collect();
    ids.shuffle(rng);
    ids
}

fn pick_samples<R: Rng>(pool: &[usize], s: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= s {
        index::sample(rng, pool.len(), s)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..s).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Builds the SP batch anchored at `cursor`: the cursor identity plus `P - 1`
/// others drawn uniformly without replacement, and `S` samples per identity
/// and view (with replacement only when an identity has fewer than `S`).
pub fn sample_sp_batch<R: Rng>(
    ds: &Dataset,
    spec: &BatchSpec,
    cursor: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    spec.validate()?;
    let k = ds.num_identities();
    if k < spec.identities {
        return Err(Error::Contract(format!(
            "SP batch needs {} identities, dataset has {k}",
            spec.identities
        )));
    }
    if cursor >= k {
        return Err(Error::Contract(format!("cursor identity {cursor} out of range 0..{k}")));
    }
    let mut identities = vec![cursor];
    identities.extend(
        index::sample(rng, k - 1, spec.identities - 1)
            .into_iter()
            .map(|i| if i >= cursor { i + 1 } else { i }),
    );

    let mut batch = PairBatch {
        identities: identities.clone(),
        source: Vec::new(),
        target: Vec::new(),
        source_ids: Vec::new(),
        target_ids: Vec::new(),
        symmetric_anchors: spec.symmetric_anchors,
    };
    for &id in &identities {
        for view in View::BOTH {
            let picked = pick_samples(ds.samples_of(id, view), spec.samples, rng);
            let (idx, ids) = match view {
                View::Source => (&mut batch.source, &mut batch.source_ids),
                View::Target => (&mut batch.target, &mut batch.target_ids),
            };
            ids.extend(std::iter::repeat_n(id, picked.len()));
            idx.extend(picked);
        }
    }
    Ok(batch)
}
