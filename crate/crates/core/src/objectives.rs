//! Interchangeable training objectives, selected by name from a registry.
//!
//! The similarity stage minimises a [`SimilarityObjective`] over
//! `(M_s, M_t, D_s)`; the adversarial loop updates the mappings with a
//! [`MappingObjective`] against a frozen view discriminator.

use std::fmt;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};

/// Tape handles for one SP batch, anchors along rows.
pub struct SimilarityInputs<'a> {
    /// Pairwise embedding distances, `anchors x candidates`.
    pub distances: Var,
    pub labels: &'a Tensor,
    /// `D_s` on the positive pairs, row-major label order.
    pub pos_sim: Var,
    /// `D_s` on the negative pairs, present when the objective asked for it.
    pub neg_sim: Option<Var>,
    pub symmetric_anchors: bool,
}

pub trait SimilarityObjective: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether `D_s` must also score the negative pairs.
    fn scores_negatives(&self, cfg: &LossConfig) -> bool;
    fn loss(&self, tape: &mut Tape, inputs: &SimilarityInputs, cfg: &LossConfig) -> Result<Var>;
}

/// Margin contrastive loss averaged over every pair in the batch.
#[derive(Debug, Default)]
pub struct Contrastive;

impl SimilarityObjective for Contrastive {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn scores_negatives(&self, cfg: &LossConfig) -> bool {
        cfg.full_bce_sim
    }

    fn loss(&self, tape: &mut Tape, inputs: &SimilarityInputs, cfg: &LossConfig) -> Result<Var> {
        losses::contrastive_sim_loss(tape, inputs.distances, inputs.labels, inputs.pos_sim, inputs.neg_sim, cfg)
    }
}

/// Hard-pair weighted loss; weights come from the current distances and are
/// held constant in the backward pass.
#[derive(Debug, Default)]
pub struct AdaptiveWeighted;

impl SimilarityObjective for AdaptiveWeighted {
    fn name(&self) -> &'static str {
        "adaptive"
    }

    fn scores_negatives(&self, _cfg: &LossConfig) -> bool {
        false
    }

    fn loss(&self, tape: &mut Tape, inputs: &SimilarityInputs, cfg: &LossConfig) -> Result<Var> {
        let d = tape.value(inputs.distances).clone();
        let rows = losses::pair_weights(&d, inputs.labels, true)?;
        let cols = if inputs.symmetric_anchors {
            Some(losses::pair_weights(&d, inputs.labels, false)?)
        } else {
            None
        };
        losses::weighted_sim_loss(
            tape,
            inputs.distances,
            inputs.labels,
            inputs.pos_sim,
            &rows,
            cols.as_ref(),
            cfg,
        )
    }
}

/// D_d outputs for one batch, plus the similarity loss when the objective
/// wants it.
pub struct MappingInputs {
    pub source_probs: Var,
    pub target_probs: Var,
    pub similarity: Option<Var>,
}

pub trait MappingObjective: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn uses_similarity(&self) -> bool;
    fn loss(&self, tape: &mut Tape, inputs: &MappingInputs) -> Result<Var>;
}

/// Cross-entropy against the uniform view label.
#[derive(Debug, Default)]
pub struct Confusion;

impl MappingObjective for Confusion {
    fn name(&self) -> &'static str {
        "confusion"
    }

    fn uses_similarity(&self) -> bool {
        false
    }

    fn loss(&self, tape: &mut Tape, inputs: &MappingInputs) -> Result<Var> {
        losses::view_confusion_loss(tape, &[inputs.source_probs, inputs.target_probs])
    }
}

/// View confusion plus the similarity loss, so the mappings stay
/// discriminative while confusing D_d.
#[derive(Debug, Default)]
pub struct ConfusionWithSimilarity;

impl MappingObjective for ConfusionWithSimilarity {
    fn name(&self) -> &'static str {
        "confusion+similarity"
    }

    fn uses_similarity(&self) -> bool {
        true
    }

    fn loss(&self, tape: &mut Tape, inputs: &MappingInputs) -> Result<Var> {
        let c = losses::view_confusion_loss(tape, &[inputs.source_probs, inputs.target_probs])?;
        let s = inputs
            .similarity
            .ok_or_else(|| Error::Contract("combined mapping update needs the similarity loss".into()))?;
        tape.add(c, s)
    }
}

type Factory<T> = fn() -> Box<T>;

/// Name-keyed factories for one family of strategies.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Factory<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    /// Adds or replaces the factory registered under `name`.
    pub fn register(&mut self, name: &'static str, factory: Factory<T>) -> &mut Self {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = factory,
            None => self.entries.push((name, factory)),
        }
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown {} {name:?}; expected one of {:?}",
                    self.kind,
                    self.names()
                ))
            })
    }
}

pub fn similarity_objectives() -> Registry<dyn SimilarityObjective> {
    let mut r = Registry::<dyn SimilarityObjective>::new("similarity objective");
    r.register("contrastive", || Box::new(Contrastive));
    r.register("adaptive", || Box::new(AdaptiveWeighted));
    r
}

pub fn mapping_objectives() -> Registry<dyn MappingObjective> {
    let mut r = Registry::<dyn MappingObjective>::new("mapping objective");
    r.register("confusion", || Box::new(Confusion));
    r.register("confusion+similarity", || Box::new(ConfusionWithSimilarity));
    r
}
