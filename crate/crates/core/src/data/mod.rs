//! Identity-labelled two-view datasets: generation, storage, splits and
//! SP batch sampling.

mod io;
mod sampler;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub(crate) use io::fmt_f64;
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, SAMPLES_FILE};
pub use sampler::{epoch_order, sample_sp_batch, BatchSpec, PairBatch};
pub use synth::{gen_synthetic, GeneratorParams};

/// Camera view: the probe (source) or the gallery (target).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "s")]
    Source,
    #[serde(rename = "t")]
    Target,
}

impl View {
    pub const BOTH: [View; 2] = [View::Source, View::Target];

    pub fn code(self) -> &'static str {
        match self {
            View::Source => "s",
            View::Target => "t",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "s" => Some(View::Source),
            "t" => Some(View::Target),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub view: View,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_identities: usize,
    feature_dim: usize,
    generator: Option<GeneratorParams>,
    // per identity, sample indices for [source, target]
    index: Vec<[Vec<usize>; 2]>,
}

impl Dataset {
    /// Validates that ids are dense in `0..num_identities`, every identity is
    /// seen in both views, and feature lengths agree.
    pub fn new(samples: Vec<Sample>, num_identities: usize, feature_dim: usize) -> Result<Self> {
        let mut index = vec![[Vec::new(), Vec::new()]; num_identities];
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::dim("dataset features", &[feature_dim], &[s.features.len()]));
            }
            if s.identity >= num_identities {
                return Err(Error::Contract(format!(
                    "identity {} out of range 0..{num_identities}",
                    s.identity
                )));
            }
            index[s.identity][s.view.slot()].push(i);
        }
        if let Some(id) = index.iter().position(|v| v[0].is_empty() || v[1].is_empty()) {
            return Err(Error::Contract(format!("identity {id} is missing a view")));
        }
        Ok(Self {
            samples,
            num_identities,
            feature_dim,
            generator: None,
            index,
        })
    }

    pub fn with_generator(mut self, params: GeneratorParams) -> Self {
        self.generator = Some(params);
        self
    }

    pub fn generator(&self) -> Option<&GeneratorParams> {
        self.generator.as_ref()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Sample indices of `identity` in `view`.
    pub fn samples_of(&self, identity: usize, view: View) -> &[usize] {
        &self.index[identity][view.slot()]
    }

    /// Indices of all samples in `view`, in storage order.
    pub fn view_indices(&self, view: View) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].view == view)
            .collect()
    }

    /// Stacks the features of the given samples into a matrix.
    pub fn features(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::matrix(indices.len(), self.feature_dim, data).expect("consistent feature dim")
    }

    /// Keeps only the listed identities and renumbers them `0..ids.len()` in
    /// the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let mut remap = vec![usize::MAX; self.num_identities];
        for (new, &old) in ids.iter().enumerate() {
            remap[old] = new;
        }
        let samples = self
            .samples
            .iter()
            .filter(|s| remap[s.identity] != usize::MAX)
            .map(|s| Sample {
                identity: remap[s.identity],
                ..s.clone()
            })
            .collect();
        Dataset::new(samples, ids.len(), self.feature_dim)
    }
}

/// Identity counts for the disjoint train / validation / test partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 100,
            valid: 50,
            test: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Identity-disjoint partition. Identities are shuffled with the split
/// stream, and each part keeps its identities in ascending original order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    let need = spec.train + spec.valid + spec.test;
    if need > ds.num_identities() {
        return Err(Error::Contract(format!(
            "split needs {need} identities but the dataset has {}",
            ds.num_identities()
        )));
    }
    if spec.train == 0 || spec.valid == 0 || spec.test == 0 {
        return Err(Error::Contract("every split part needs at least one identity".into()));
    }
    let mut ids: Vec<usize> = (0..ds.num_identities()).collect();
    ids.shuffle(&mut stream_rng(spec.seed, Stream::Split));
    let part = |range: std::ops::Range<usize>| {
        let mut p = ids[range].to_vec();
        p.sort_unstable();
        ds.subset(&p)
    };
    Ok(Splits {
        train: part(0..spec.train)?,
        valid: part(spec.train..spec.train + spec.valid)?,
        test: part(spec.train + spec.valid..need)?,
    })
}
