//! End-to-end runs shared by the CLI and the acceptance suite.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::data::{fmt_f64, Dataset, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_raw, view_confusion_accuracy, EvalReport};
use crate::nets::Model;
use crate::rng::{stream_rng, Stream};
use crate::trainer::{fit, fit_observed, Control, FitResult, OptimizerState, Setup, Stage, Trainer};
use rand::Rng;

pub struct PipelineOutcome {
    /// Euclidean matching on the unmapped test features.
    pub raw: EvalReport,
    pub report: EvalReport,
    pub fit: FitResult,
    pub train_seconds: f64,
}

/// Trains on `splits.train`, early-stops on `splits.valid` and evaluates the
/// selected snapshot on `splits.test`. The gallery draw uses `setup.seed`.
pub fn run_pipeline(splits: &Splits, setup: &Setup) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let fit = fit(&splits.train, &splits.valid, setup)?;
    let train_seconds = start.elapsed().as_secs_f64();
    Ok(PipelineOutcome {
        raw: evaluate_raw(&splits.test, setup.seed)?,
        report: evaluate(&fit.model, &splits.test, setup.seed)?,
        fit,
        train_seconds,
    })
}

/// Similarity epochs until test rank-1 first reaches `target`, or `None`
/// within `setup.train.sim_epochs`. The adversarial stage is skipped.
pub fn epochs_to_reach(splits: &Splits, setup: &Setup, target: f64) -> Result<Option<usize>> {
    let mut setup = setup.clone();
    setup.train.adv_rounds = 0;
    let mut reached = None;
    let mut epochs = 0;
    fit_observed(&splits.train, &splits.valid, &setup, &mut |stage, model, _| {
        if stage != Stage::Similarity {
            return Ok(Control::Continue);
        }
        epochs += 1;
        if evaluate(model, &splits.test, setup.seed)?.rank1() >= target {
            reached = Some(epochs);
            return Ok(Control::EndStage);
        }
        Ok(Control::Continue)
    })?;
    Ok(reached)
}

/// Trains a freshly initialised D_d against frozen mappings taken from
/// `model` and reports its view accuracy on `held_out`. Used to check that
/// the view shift is detectable at all, and that adaptation removed it.
pub fn fresh_view_disc_accuracy(
    model: &Model,
    train: &Dataset,
    held_out: &Dataset,
    setup: &Setup,
    epochs: usize,
    learning_rate: f64,
) -> Result<f64> {
    let init_seed = stream_rng(setup.seed, Stream::Probe).random::<u64>() >> 1;
    let mut probe = model.clone();
    probe.view_disc = Model::init(&model.config, model.feature_dim(), init_seed)?.view_disc;
    let mut setup = setup.clone();
    setup.train.learning_rate = learning_rate;
    // constant rate: the probe should converge, not follow the training schedule
    setup.train.lr_decay_every = usize::MAX;
    let mut trainer = Trainer::new(train, &setup)?;
    let mut opt = OptimizerState::new(setup.train.schedule(), setup.train.momentum);
    for _ in 0..epochs * train.num_identities() {
        let batch = trainer.next_batch()?;
        trainer.view_disc_step(&mut probe, &mut opt, &batch)?;
    }
    view_confusion_accuracy(&probe, held_out)
}

pub const GAMMA_HEADER: &str = "gamma,rank1,map";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPoint {
    pub gamma: f64,
    pub rank1: f64,
    pub map: f64,
}

/// One full pipeline per gamma, everything else fixed.
pub fn sweep_gamma(splits: &Splits, setup: &Setup, gammas: &[f64]) -> Result<Vec<GammaPoint>> {
    if gammas.is_empty() {
        return Err(Error::Validation("no gamma values given".into()));
    }
    gammas
        .iter()
        .map(|&gamma| {
            let mut s = setup.clone();
            s.loss.gamma = gamma;
            s.validate()?;
            let out = run_pipeline(splits, &s)?;
            Ok(GammaPoint {
                gamma,
                rank1: out.report.rank1(),
                map: out.report.map_score,
            })
        })
        .collect()
}

pub fn gamma_csv(points: &[GammaPoint]) -> String {
    let mut out = format!("{GAMMA_HEADER}\n");
    for p in points {
        // gamma is an input; shortest round-trip form reads back as typed
        out.push_str(&format!("{},{},{}\n", p.gamma, fmt_f64(p.rank1), fmt_f64(p.map)));
    }
    out
}

pub fn write_gamma_csv(path: &Path, points: &[GammaPoint]) -> Result<()> {
    fs::write(path, gamma_csv(points)).map_err(|e| Error::io(path, e))
}
