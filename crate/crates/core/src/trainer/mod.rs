//! Staged training: similarity stage over `(M_s, M_t, D_s)`, then rounds of
//! view-discriminator updates alternating with mapping updates, stopped
//! early on the validation loss.

mod history;
mod optim;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::{epoch_order, sample_sp_batch, BatchSpec, Dataset, PairBatch};
use crate::error::{Error, Result};
use crate::eval::view_confusion_accuracy;
use crate::losses::{self, LossConfig};
use crate::nets::{sim_disc_forward, BoundMlp, Group, Model, ModelConfig};
use crate::objectives::{
    mapping_objectives, similarity_objectives, MappingInputs, MappingObjective, SimilarityInputs,
    SimilarityObjective,
};
use crate::rng::{stream_rng, Stream};

pub use history::{EpochRecord, Stage, TrainHistory, HISTORY_HEADER};
pub use optim::{param_names, sgd_update, LrSchedule, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs between learning-rate divisions.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    /// Rescale each step's gradient to at most this global L2 norm (0: off).
    pub grad_clip_norm: f64,
    pub sim_epochs: usize,
    pub adv_rounds: usize,
    /// D_d steps per round; absent means one epoch.
    pub dd_steps_per_round: Option<usize>,
    /// Mapping steps per round; absent means one epoch.
    pub map_steps_per_round: Option<usize>,
    pub patience: usize,
    /// Registered name of the similarity objective.
    pub similarity_objective: String,
    /// Registered name of the mapping objective used against D_d.
    pub mapping_objective: String,
    /// Run one extra similarity epoch after every this many rounds (0: never).
    pub refresh_sim_every: usize,
    /// Fixed validation SP batches used for early stopping.
    pub valid_batches: usize,
    /// Weight of the view-confusion term in the validation loss.
    pub valid_confusion_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_decay_every: 10,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            grad_clip_norm: 0.0,
            sim_epochs: 10,
            adv_rounds: 50,
            dd_steps_per_round: None,
            map_steps_per_round: None,
            patience: 5,
            similarity_objective: "contrastive".into(),
            mapping_objective: "confusion".into(),
            refresh_sim_every: 0,
            valid_batches: 10,
            valid_confusion_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.lr_decay_every == 0 || !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_every and lr_decay_factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm must be >= 0, got {}", self.grad_clip_norm));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.valid_batches == 0 {
            return bad("valid_batches must be >= 1".into());
        }
        if self.dd_steps_per_round == Some(0) || self.map_steps_per_round == Some(0) {
            return bad("steps per round must be >= 1 when given".into());
        }
        if !(self.valid_confusion_weight >= 0.0) {
            return bad("valid_confusion_weight must be >= 0".into());
        }
        similarity_objectives().create(&self.similarity_objective)?;
        mapping_objectives().create(&self.mapping_objective)?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.learning_rate,
            every: self.lr_decay_every,
            factor: self.lr_decay_factor,
        }
    }
}

/// Everything `fit` needs besides the data.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Setup {
    pub model: ModelConfig,
    pub batch: BatchSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.batch.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

/// Per-group handles of networks recorded on a tape.
pub struct Bound {
    nets: [Option<BoundMlp>; 4],
}

impl Bound {
    /// Records the `needed` networks; those in `trainable` become parameters,
    /// the rest constants.
    pub fn new(tape: &mut Tape, model: &Model, needed: &[Group], trainable: &[Group]) -> Self {
        let mut nets: [Option<BoundMlp>; 4] = Default::default();
        for &g in needed {
            nets[g as usize] = Some(model.net(g).bind(tape, trainable.contains(&g)));
        }
        Self { nets }
    }

    pub fn get(&self, group: Group) -> Result<&BoundMlp> {
        self.nets[group as usize]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} is not recorded on this tape", group.name())))
    }

    pub fn vars(&self, group: Group) -> Vec<Var> {
        self.nets[group as usize].as_ref().map(|b| b.vars().collect()).unwrap_or_default()
    }

    pub fn grads(&self, group: Group, grads: &Gradients) -> Vec<Tensor> {
        self.vars(group).into_iter().map(|v| grads.wrt(v)).collect()
    }
}

fn embed_batch(tape: &mut Tape, bound: &Bound, ds: &Dataset, batch: &PairBatch) -> Result<(Var, Var)> {
    let xs = tape.constant(ds.features(&batch.source));
    let xt = tape.constant(ds.features(&batch.target));
    let es = bound.get(Group::SourceMap)?.forward(tape, xs)?;
    let et = bound.get(Group::TargetMap)?.forward(tape, xt)?;
    Ok((es, et))
}

fn score_pairs(tape: &mut Tape, d_s: &BoundMlp, es: Var, et: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ga = tape.gather_rows(es, &a)?;
    let gb = tape.gather_rows(et, &b)?;
    sim_disc_forward(tape, d_s, ga, gb)
}

fn similarity_from_embeddings(
    tape: &mut Tape,
    bound: &Bound,
    es: Var,
    et: Var,
    batch: &PairBatch,
    objective: &dyn SimilarityObjective,
    cfg: &LossConfig,
) -> Result<Var> {
    let d_s = bound.get(Group::SimDisc)?;
    let distances = tape.pairwise_distances(es, et)?;
    let labels = batch.labels();
    let pos_sim = score_pairs(tape, d_s, es, et, &batch.positive_pairs())?;
    let neg_sim = if objective.scores_negatives(cfg) {
        Some(score_pairs(tape, d_s, es, et, &batch.negative_pairs())?)
    } else {
        None
    };
    let inputs = SimilarityInputs {
        distances,
        labels: &labels,
        pos_sim,
        neg_sim,
        symmetric_anchors: batch.symmetric_anchors,
    };
    objective.loss(tape, &inputs, cfg)
}

/// Records the similarity loss of one batch. Needs both mappings and `D_s`.
pub fn record_similarity(
    tape: &mut Tape,
    bound: &Bound,
    ds: &Dataset,
    batch: &PairBatch,
    objective: &dyn SimilarityObjective,
    cfg: &LossConfig,
) -> Result<Var> {
    let (es, et) = embed_batch(tape, bound, ds, batch)?;
    similarity_from_embeddings(tape, bound, es, et, batch, objective, cfg)
}

/// Records the view-discriminator loss of one batch. Needs both mappings and `D_d`.
pub fn record_view_disc(tape: &mut Tape, bound: &Bound, ds: &Dataset, batch: &PairBatch) -> Result<Var> {
    let (es, et) = embed_batch(tape, bound, ds, batch)?;
    let d_d = bound.get(Group::ViewDisc)?;
    let ps = d_d.forward(tape, es)?;
    let pt = d_d.forward(tape, et)?;
    losses::view_disc_loss(tape, ps, pt)
}

/// Records the mapping objective of one batch. Needs both mappings, `D_d`,
/// and `D_s` when the objective uses the similarity loss.
pub fn record_mapping(
    tape: &mut Tape,
    bound: &Bound,
    ds: &Dataset,
    batch: &PairBatch,
    objective: &dyn MappingObjective,
    similarity: &dyn SimilarityObjective,
    cfg: &LossConfig,
) -> Result<Var> {
    let (es, et) = embed_batch(tape, bound, ds, batch)?;
    let d_d = bound.get(Group::ViewDisc)?;
    let source_probs = d_d.forward(tape, es)?;
    let target_probs = d_d.forward(tape, et)?;
    let sim = if objective.uses_similarity() {
        Some(similarity_from_embeddings(tape, bound, es, et, batch, similarity, cfg)?)
    } else {
        None
    };
    objective.loss(
        tape,
        &MappingInputs {
            source_probs,
            target_probs,
            similarity: sim,
        },
    )
}

/// Yields batch cursors epoch after epoch, reshuffling at each wrap.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new() -> Self {
        Self { order: Vec::new(), pos: 0 }
    }

    fn next(&mut self, ds: &Dataset, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = epoch_order(ds, rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundStats {
    pub loss_eq1: f64,
    pub loss_eq3: f64,
}

/// Drives the optimisation over one training set. Holds the batching
/// stream, so successive calls continue the same deterministic sequence.
pub struct Trainer<'a> {
    data: &'a Dataset,
    setup: Setup,
    similarity: Box<dyn SimilarityObjective>,
    mapping: Box<dyn MappingObjective>,
    rng: ChaCha8Rng,
    cursor: Cursor,
    tape: Tape,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, setup: &Setup) -> Result<Self> {
        setup.validate()?;
        if data.num_identities() < setup.batch.identities {
            return Err(Error::Contract(format!(
                "training set has {} identities, batches need {}",
                data.num_identities(),
                setup.batch.identities
            )));
        }
        Ok(Self {
            data,
            similarity: similarity_objectives().create(&setup.train.similarity_objective)?,
            mapping: mapping_objectives().create(&setup.train.mapping_objective)?,
            setup: setup.clone(),
            rng: stream_rng(setup.seed, Stream::Batching),
            cursor: Cursor::new(),
            tape: Tape::new(),
        })
    }

    pub fn similarity_objective(&self) -> &dyn SimilarityObjective {
        self.similarity.as_ref()
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        let c = self.cursor.next(self.data, &mut self.rng);
        sample_sp_batch(self.data, &self.setup.batch, c, &mut self.rng)
    }

    /// Gradients of `groups`, jointly rescaled to the clip norm, then applied.
    fn apply(
        &self,
        model: &mut Model,
        opt: &mut OptimizerState,
        bound: &Bound,
        grads: &Gradients,
        groups: &[Group],
    ) -> Result<()> {
        let mut per_group: Vec<Vec<Tensor>> = groups.iter().map(|&g| bound.grads(g, grads)).collect();
        let clip = self.setup.train.grad_clip_norm;
        if clip > 0.0 {
            let norm = per_group
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for t in per_group.iter_mut().flatten() {
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        for (&g, gr) in groups.iter().zip(&per_group) {
            opt.step(model, g, gr)?;
        }
        Ok(())
    }

    fn check_finite(&self, what: &str, value: f64, batch: &PairBatch) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{what} loss is {value} on the batch of identities {:?}",
                batch.identities
            )))
        }
    }

    /// One step on the similarity loss over `(M_s, M_t, D_s)`. D_d is not
    /// recorded.
    pub fn similarity_step(&mut self, model: &mut Model, opt: &mut OptimizerState, batch: &PairBatch) -> Result<f64> {
        let groups = [Group::SourceMap, Group::TargetMap, Group::SimDisc];
        self.tape.reset();
        let bound = Bound::new(&mut self.tape, model, &groups, &groups);
        let loss = record_similarity(&mut self.tape, &bound, self.data, batch, self.similarity.as_ref(), &self.setup.loss)?;
        let value = self.tape.value(loss).item();
        self.check_finite("similarity", value, batch)?;
        let grads = self.tape.backward(loss)?;
        self.apply(model, opt, &bound, &grads, &groups)?;
        Ok(value)
    }

    /// One step on the view-discriminator loss; the mappings are constants.
    pub fn view_disc_step(&mut self, model: &mut Model, opt: &mut OptimizerState, batch: &PairBatch) -> Result<f64> {
        self.tape.reset();
        let bound = Bound::new(
            &mut self.tape,
            model,
            &[Group::SourceMap, Group::TargetMap, Group::ViewDisc],
            &[Group::ViewDisc],
        );
        let loss = record_view_disc(&mut self.tape, &bound, self.data, batch)?;
        let value = self.tape.value(loss).item();
        self.check_finite("view discriminator", value, batch)?;
        let grads = self.tape.backward(loss)?;
        self.apply(model, opt, &bound, &grads, &[Group::ViewDisc])?;
        Ok(value)
    }

    /// One step of the mapping objective; D_d (and D_s) are constants.
    pub fn mapping_step(&mut self, model: &mut Model, opt: &mut OptimizerState, batch: &PairBatch) -> Result<f64> {
        let mut needed = vec![Group::SourceMap, Group::TargetMap, Group::ViewDisc];
        if self.mapping.uses_similarity() {
            needed.push(Group::SimDisc);
        }
        let trainable = [Group::SourceMap, Group::TargetMap];
        self.tape.reset();
        let bound = Bound::new(&mut self.tape, model, &needed, &trainable);
        let loss = record_mapping(
            &mut self.tape,
            &bound,
            self.data,
            batch,
            self.mapping.as_ref(),
            self.similarity.as_ref(),
            &self.setup.loss,
        )?;
        let value = self.tape.value(loss).item();
        self.check_finite("mapping", value, batch)?;
        let grads = self.tape.backward(loss)?;
        self.apply(model, opt, &bound, &grads, &trainable)?;
        Ok(value)
    }

    /// One pass with every training identity as cursor once. Returns the mean
    /// batch loss.
    pub fn similarity_epoch(&mut self, model: &mut Model, opt: &mut OptimizerState) -> Result<f64> {
        let steps = self.data.num_identities();
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = self.next_batch()?;
            total += self.similarity_step(model, opt, &batch)?;
        }
        Ok(total / steps as f64)
    }

    /// D_d steps with the mappings frozen, then mapping steps with D_d frozen.
    pub fn adversarial_round(
        &mut self,
        model: &mut Model,
        dd_opt: &mut OptimizerState,
        map_opt: &mut OptimizerState,
    ) -> Result<RoundStats> {
        let epoch = self.data.num_identities();
        let dd_steps = self.setup.train.dd_steps_per_round.unwrap_or(epoch);
        let map_steps = self.setup.train.map_steps_per_round.unwrap_or(epoch);
        let mut eq1 = 0.0;
        for _ in 0..dd_steps {
            let batch = self.next_batch()?;
            eq1 += self.view_disc_step(model, dd_opt, &batch)?;
        }
        let mut eq3 = 0.0;
        for _ in 0..map_steps {
            let batch = self.next_batch()?;
            eq3 += self.mapping_step(model, map_opt, &batch)?;
        }
        Ok(RoundStats {
            loss_eq1: eq1 / dd_steps as f64,
            loss_eq3: eq3 / map_steps as f64,
        })
    }
}

/// Fixed validation batches, drawn once from the validation stream.
pub struct Validator<'a> {
    data: &'a Dataset,
    batches: Vec<PairBatch>,
    loss: LossConfig,
    confusion_weight: f64,
    similarity: Box<dyn SimilarityObjective>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidLoss {
    pub similarity: f64,
    pub confusion: f64,
}

impl<'a> Validator<'a> {
    pub fn new(data: &'a Dataset, setup: &Setup) -> Result<Self> {
        if data.num_identities() < 2 {
            return Err(Error::Contract("validation set needs at least 2 identities".into()));
        }
        let spec = BatchSpec {
            identities: setup.batch.identities.min(data.num_identities()),
            ..setup.batch.clone()
        };
        let mut rng = stream_rng(setup.seed, Stream::Validation);
        let mut cursor = Cursor::new();
        let batches = (0..setup.train.valid_batches)
            .map(|_| {
                let c = cursor.next(data, &mut rng);
                sample_sp_batch(data, &spec, c, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            data,
            batches,
            loss: setup.loss.clone(),
            confusion_weight: setup.train.valid_confusion_weight,
            similarity: similarity_objectives().create(&setup.train.similarity_objective)?,
        })
    }

    /// Mean similarity and view-confusion losses over the validation batches.
    pub fn measure(&self, model: &Model) -> Result<ValidLoss> {
        let mut tape = Tape::new();
        let (mut sim, mut conf) = (0.0, 0.0);
        for batch in &self.batches {
            tape.reset();
            let bound = Bound::new(&mut tape, model, &Group::ALL, &[]);
            let (es, et) = embed_batch(&mut tape, &bound, self.data, batch)?;
            let s = similarity_from_embeddings(&mut tape, &bound, es, et, batch, self.similarity.as_ref(), &self.loss)?;
            let d_d = bound.get(Group::ViewDisc)?;
            let ps = d_d.forward(&mut tape, es)?;
            let pt = d_d.forward(&mut tape, et)?;
            let c = losses::view_confusion_loss(&mut tape, &[ps, pt])?;
            sim += tape.value(s).item();
            conf += tape.value(c).item();
        }
        let n = self.batches.len() as f64;
        Ok(ValidLoss {
            similarity: sim / n,
            confusion: conf / n,
        })
    }

    /// Early-stopping criterion: similarity plus weighted confusion.
    pub fn total(&self, v: ValidLoss) -> f64 {
        v.similarity + self.confusion_weight * v.confusion
    }
}

/// What the observer wants after a completed epoch or round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// Skip the rest of the current stage.
    EndStage,
}

pub struct FitResult {
    pub model: Model,
    pub history: TrainHistory,
    /// Round whose snapshot was returned, if any round ran.
    pub best_round: Option<usize>,
    pub best_valid_loss: Option<f64>,
}

pub fn init_models(setup: &Setup, feature_dim: usize) -> Result<Model> {
    Model::init(&setup.model, feature_dim, setup.seed)
}

pub fn fit(train: &Dataset, valid: &Dataset, setup: &Setup) -> Result<FitResult> {
    fit_observed(train, valid, setup, &mut |_, _, _| Ok(Control::Continue))
}

/// [`fit`] with a callback after every similarity epoch and adversarial
/// round, given the stage, the current model and the new history record.
pub fn fit_observed(
    train: &Dataset,
    valid: &Dataset,
    setup: &Setup,
    observer: &mut dyn FnMut(Stage, &Model, &EpochRecord) -> Result<Control>,
) -> Result<FitResult> {
    setup.validate()?;
    if valid.feature_dim() != train.feature_dim() {
        return Err(Error::dim("fit", &[train.feature_dim()], &[valid.feature_dim()]));
    }
    let mut model = init_models(setup, train.feature_dim())?;
    let mut trainer = Trainer::new(train, setup)?;
    let validator = Validator::new(valid, setup)?;
    let cfg = &setup.train;
    let mut history = TrainHistory::default();

    let mut sim_opt = OptimizerState::new(cfg.schedule(), cfg.momentum);
    for e in 0..cfg.sim_epochs {
        sim_opt.epoch = e;
        let loss = trainer.similarity_epoch(&mut model, &mut sim_opt)?;
        let v = validator.measure(&model)?;
        let rec = history.push(Stage::Similarity, None, Some(loss), None, Some(v.similarity), None, sim_opt.lr());
        if observer(Stage::Similarity, &model, &rec)? == Control::EndStage {
            break;
        }
    }

    let mut dd_opt = OptimizerState::new(cfg.schedule(), cfg.momentum);
    let mut map_opt = OptimizerState::new(cfg.schedule(), cfg.momentum);
    let mut best: Option<(f64, Model, usize)> = None;
    let mut stale = 0;
    for r in 0..cfg.adv_rounds {
        dd_opt.epoch = r;
        map_opt.epoch = r;
        let stats = trainer.adversarial_round(&mut model, &mut dd_opt, &mut map_opt)?;
        let mut sim_loss = None;
        if cfg.refresh_sim_every > 0 && (r + 1) % cfg.refresh_sim_every == 0 {
            sim_opt.epoch += 1;
            sim_loss = Some(trainer.similarity_epoch(&mut model, &mut sim_opt)?);
        }
        let v = validator.measure(&model)?;
        let total = validator.total(v);
        let acc = view_confusion_accuracy(&model, valid)?;
        let rec = history.push(
            Stage::Adversarial,
            Some(stats.loss_eq1),
            sim_loss,
            Some(stats.loss_eq3),
            Some(total),
            Some(acc),
            map_opt.lr(),
        );
        match &best {
            Some((b, _, _)) if total >= *b => stale += 1,
            _ => {
                best = Some((total, model.clone(), r));
                stale = 0;
            }
        }
        if observer(Stage::Adversarial, &model, &rec)? == Control::EndStage || stale >= cfg.patience {
            break;
        }
    }

    Ok(match best {
        Some((loss, snapshot, round)) => FitResult {
            model: snapshot,
            history,
            best_round: Some(round),
            best_valid_loss: Some(loss),
        },
        None => FitResult {
            model,
            history,
            best_round: None,
            best_valid_loss: None,
        },
    })
}

#[cfg(test)]
mod tests;
