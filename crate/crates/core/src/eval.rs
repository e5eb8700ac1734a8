//! Retrieval evaluation: embeddings, gallery ranking, single-shot CMC, mAP,
//! and view-discriminator accuracy.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, View};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::rng::{stream_rng, Stream};

pub const REPORT_FILE: &str = "report.json";
pub const CMC_FILE: &str = "cmc.csv";
/// Ranks reported alongside the full curve.
pub const REPORTED_RANKS: [usize; 3] = [1, 5, 20];

/// Embeddings of every sample in dataset order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub vectors: Tensor,
    pub identities: Vec<usize>,
    pub views: Vec<View>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn indices(&self, view: View) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.views[i] == view).collect()
    }

    fn rows(&self, idx: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.vectors.row(i).to_vec()).collect();
        let cols = self.vectors.cols();
        Tensor::matrix(idx.len(), cols, rows.concat()).expect("sized")
    }

    fn ids(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.identities[i]).collect()
    }
}

/// Source-view samples through `M_s`, target-view samples through `M_t`.
pub fn embed_all(model: &Model, ds: &Dataset) -> Result<Embeddings> {
    if ds.feature_dim() != model.feature_dim() {
        return Err(Error::dim("embed_all", &[ds.feature_dim()], &[model.feature_dim()]));
    }
    embed_with(ds, |view, x| model.mapping(view).embed(x))
}

/// The raw features as embeddings, for the no-adaptation baseline.
pub fn raw_embeddings(ds: &Dataset) -> Embeddings {
    embed_with(ds, |_, x| Ok(x.clone())).expect("identity map")
}

fn embed_with(ds: &Dataset, f: impl Fn(View, &Tensor) -> Result<Tensor>) -> Result<Embeddings> {
    let n = ds.len();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut dim = 0;
    for view in View::BOTH {
        let idx = ds.view_indices(view);
        let e = f(view, &ds.features(&idx))?;
        dim = e.cols();
        for (r, &i) in idx.iter().enumerate() {
            out[i] = Some(e.row(r).to_vec());
        }
    }
    let data: Vec<f64> = out.into_iter().flat_map(|r| r.expect("every sample has a view")).collect();
    Ok(Embeddings {
        vectors: Tensor::matrix(n, dim, data)?,
        identities: ds.samples().iter().map(|s| s.identity).collect(),
        views: ds.samples().iter().map(|s| s.view).collect(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery rows ordered by ascending Euclidean distance to `probe`; equal
/// distances keep ascending gallery index.
pub fn rank_gallery(probe: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    if gallery.shape().len() != 2 || gallery.rows() == 0 {
        return Err(Error::Contract("cannot rank an empty gallery".into()));
    }
    if gallery.cols() != probe.len() {
        return Err(Error::dim("rank_gallery", &[probe.len()], gallery.shape()));
    }
    let d: Vec<f64> = (0..gallery.rows()).map(|j| sq_dist(probe, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order)
}

/// `cmc[r]` is the fraction of probes whose identity appears among the
/// first `r + 1` ranked gallery entries.
pub fn cmc(probes: &Tensor, probe_ids: &[usize], gallery: &Tensor, gallery_ids: &[usize]) -> Result<Vec<f64>> {
    if probe_ids.is_empty() {
        return Err(Error::Contract("no probes to evaluate".into()));
    }
    let g = gallery_ids.len();
    let mut hits = vec![0usize; g];
    for (p, &pid) in probe_ids.iter().enumerate() {
        let order = rank_gallery(probes.row(p), gallery)?;
        let first = order
            .iter()
            .position(|&j| gallery_ids[j] == pid)
            .ok_or_else(|| Error::Contract(format!("probe identity {pid} is absent from the gallery")))?;
        hits[first] += 1;
    }
    let n = probe_ids.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Average precision of one ranked list, `None` if it holds no match.
pub fn average_precision(ranked_matches: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut total = 0.0;
    for (rank, &m) in ranked_matches.iter().enumerate() {
        if m {
            found += 1;
            total += found as f64 / (rank + 1) as f64;
        }
    }
    (found > 0).then(|| total / found as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub score: f64,
    /// Probes with no true match in the gallery, left out of the mean.
    pub excluded: usize,
}

pub fn mean_average_precision(
    probes: &Tensor,
    probe_ids: &[usize],
    gallery: &Tensor,
    gallery_ids: &[usize],
) -> Result<MapScore> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (p, &pid) in probe_ids.iter().enumerate() {
        let order = rank_gallery(probes.row(p), gallery)?;
        let matches: Vec<bool> = order.iter().map(|&j| gallery_ids[j] == pid).collect();
        if let Some(ap) = average_precision(&matches) {
            sum += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Contract("no probe has a true match in the gallery".into()));
    }
    Ok(MapScore {
        score: sum / counted as f64,
        excluded: probe_ids.len() - counted,
    })
}

/// One target-view sample per identity, drawn with the gallery stream.
/// Returned as dataset indices, ordered by identity.
pub fn single_shot_gallery(ds: &Dataset, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Gallery);
    (0..ds.num_identities())
        .map(|id| *ds.samples_of(id, View::Target).choose(&mut rng).expect("both views present"))
        .collect()
}

/// Fraction of samples whose view D_d predicts correctly (`p > 0.5` means
/// source).
pub fn view_accuracy(source_probs: &[f64], target_probs: &[f64]) -> Result<f64> {
    if source_probs.is_empty() || target_probs.is_empty() {
        return Err(Error::Contract("view accuracy needs samples from both views".into()));
    }
    let correct = source_probs.iter().filter(|&&p| p > 0.5).count()
        + target_probs.iter().filter(|&&p| p <= 0.5).count();
    Ok(correct as f64 / (source_probs.len() + target_probs.len()) as f64)
}

pub fn view_confusion_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let emb = embed_all(model, ds)?;
    let ps = model.view_disc.prob(&emb.rows(&emb.indices(View::Source)))?;
    let pt = model.view_disc.prob(&emb.rows(&emb.indices(View::Target)))?;
    view_accuracy(ps.data(), pt.data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankValue {
    pub rank: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub rank_values: Vec<RankValue>,
    pub map_score: f64,
    pub map_excluded: usize,
    /// Absent for the raw-feature baseline, which has no discriminator.
    pub dd_confusion_accuracy: Option<f64>,
    pub num_probes: usize,
    pub num_gallery: usize,
    pub num_map_gallery: usize,
    pub gallery_seed: u64,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: dir.join(REPORT_FILE),
            detail: e.to_string(),
        })?;
        let rp = dir.join(REPORT_FILE);
        fs::write(&rp, json + "\n").map_err(|e| Error::io(&rp, e))?;
        let mut csv = String::from("rank,accuracy\n");
        for (r, a) in self.cmc.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", r + 1, crate::data::fmt_f64(*a)));
        }
        let cp = dir.join(CMC_FILE);
        fs::write(&cp, csv).map_err(|e| Error::io(&cp, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rp = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: rp,
            detail: e.to_string(),
        })
    }
}

/// Evaluation protocol over precomputed embeddings: every source sample is a
/// probe; CMC uses a single-shot gallery, mAP the full target view.
pub fn evaluate_embeddings(emb: &Embeddings, ds: &Dataset, gallery_seed: u64) -> Result<EvalReport> {
    let probes = emb.indices(View::Source);
    let shot = single_shot_gallery(ds, gallery_seed);
    let full = emb.indices(View::Target);
    let (pv, pid) = (emb.rows(&probes), emb.ids(&probes));
    let curve = cmc(&pv, &pid, &emb.rows(&shot), &emb.ids(&shot))?;
    let map = mean_average_precision(&pv, &pid, &emb.rows(&full), &emb.ids(&full))?;
    let rank_values = REPORTED_RANKS
        .iter()
        .filter(|&&r| r <= curve.len())
        .map(|&r| RankValue { rank: r, accuracy: curve[r - 1] })
        .collect();
    Ok(EvalReport {
        cmc: curve,
        rank_values,
        map_score: map.score,
        map_excluded: map.excluded,
        dd_confusion_accuracy: None,
        num_probes: probes.len(),
        num_gallery: shot.len(),
        num_map_gallery: full.len(),
        gallery_seed,
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, gallery_seed: u64) -> Result<EvalReport> {
    let emb = embed_all(model, ds)?;
    let mut report = evaluate_embeddings(&emb, ds, gallery_seed)?;
    report.dd_confusion_accuracy = Some(view_confusion_accuracy(model, ds)?);
    Ok(report)
}

pub fn evaluate_raw(ds: &Dataset, gallery_seed: u64) -> Result<EvalReport> {
    evaluate_embeddings(&raw_embeddings(ds), ds, gallery_seed)
}
