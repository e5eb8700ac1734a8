//! Objective terms of the adversarial view-adaptation model.
//!
//! All losses are recorded on a [`Tape`] and reduce with a mean over the
//! batch. Probabilities are validated to lie in `[0, 1]` and clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Contrastive margin `m` in embedding-distance units.
    pub margin: f64,
    /// Weight `gamma` of the distance terms against the similarity log term.
    pub gamma: f64,
    /// Use the hinge `max(0, m - w_n d)^2` for weighted negatives instead of
    /// `w_n max(0, m - d)^2`.
    pub eq5_literal: bool,
    /// Add `-(1 - y) log(1 - D_s)` to the contrastive similarity loss.
    pub full_bce_sim: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 2.0,
            gamma: 2.5,
            eq5_literal: false,
            full_bce_sim: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Validation(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_probs(tape: &Tape, p: Var, op: &'static str) -> Result<()> {
    match tape.value(p).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::domain(op, format!("probability {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `log p` with `p` clamped away from 0 and 1.
pub fn log_prob(tape: &mut Tape, p: Var) -> Result<Var> {
    check_probs(tape, p, "log_prob")?;
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    tape.log(c)
}

/// `log(1 - p)` with `p` clamped away from 0 and 1.
pub fn log_one_minus(tape: &mut Tape, p: Var) -> Result<Var> {
    check_probs(tape, p, "log_one_minus")?;
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = tape.scalar_mul(c, -1.0);
    let q = tape.add_scalar(q, 1.0);
    tape.log(q)
}

/// View discriminator loss: `-mean(log D_d(M_s x_s)) - mean(log(1 - D_d(M_t x_t)))`.
pub fn view_disc_loss(tape: &mut Tape, source_probs: Var, target_probs: Var) -> Result<Var> {
    let ls = log_prob(tape, source_probs)?;
    let lt = log_one_minus(tape, target_probs)?;
    let ms = tape.mean(ls);
    let mt = tape.mean(lt);
    let s = tape.add(ms, mt)?;
    Ok(tape.neg(s))
}

/// View confusion loss against the uniform label:
/// `-mean(0.5 log p + 0.5 log(1 - p))` pooled over every probability given.
pub fn view_confusion_loss(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for &p in probs {
        count += tape.value(p).len();
        let a = log_prob(tape, p)?;
        let b = log_one_minus(tape, p)?;
        let ab = tape.add(a, b)?;
        let s = tape.sum(ab);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("view confusion loss over no samples".into()))?;
    if count == 0 {
        return Err(Error::Contract("view confusion loss over no samples".into()));
    }
    Ok(tape.scalar_mul(total, -0.5 / count as f64))
}

fn check_labels(labels: &Tensor) -> Result<usize> {
    let mut pos = 0;
    for y in labels.data() {
        match *y {
            1.0 => pos += 1,
            0.0 => {}
            v => return Err(Error::domain("pair labels", format!("label {v} is not 0 or 1"))),
        }
    }
    Ok(pos)
}

fn check_distances(tape: &Tape, d: Var) -> Result<()> {
    match tape.value(d).data().iter().find(|v| !(**v >= 0.0)) {
        Some(bad) => Err(Error::domain("pair distances", format!("distance {bad} is negative"))),
        None => Ok(()),
    }
}

/// `max(0, m - x)^2`.
fn squared_hinge(tape: &mut Tape, x: Var, margin: f64) -> Var {
    let neg = tape.scalar_mul(x, -1.0);
    let gap = tape.add_scalar(neg, margin);
    let h = tape.relu(gap);
    tape.square(h)
}

/// Contrastive similarity loss, mean over all pairs:
/// `-y log D_s + gamma (y d^2 + (1 - y) max(0, m - d)^2)`.
///
/// `distances` and `labels` share a shape (any layout, one entry per pair).
/// `pos_sim` holds `D_s` on the positive pairs in row-major label order;
/// `neg_sim` is required only with `full_bce_sim` and holds `D_s` on the
/// negatives in the same order.
pub fn contrastive_sim_loss(
    tape: &mut Tape,
    distances: Var,
    labels: &Tensor,
    pos_sim: Var,
    neg_sim: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = labels.len();
    if tape.value(distances).len() != n {
        return Err(Error::dim("contrastive_sim_loss", tape.value(distances).shape(), labels.shape()));
    }
    let n_pos = check_labels(labels)?;
    if tape.value(pos_sim).len() != n_pos {
        return Err(Error::dim("contrastive_sim_loss positives", tape.value(pos_sim).shape(), &[n_pos]));
    }
    check_distances(tape, distances)?;

    let lp = log_prob(tape, pos_sim)?;
    let mut log_term = tape.sum(lp);
    if cfg.full_bce_sim {
        let ns = neg_sim.ok_or_else(|| {
            Error::Contract("full_bce_sim needs similarity scores for negative pairs".into())
        })?;
        if tape.value(ns).len() != n - n_pos {
            return Err(Error::dim("contrastive_sim_loss negatives", tape.value(ns).shape(), &[n - n_pos]));
        }
        let ln = log_one_minus(tape, ns)?;
        let sn = tape.sum(ln);
        log_term = tape.add(log_term, sn)?;
    }

    let shape = tape.value(distances).shape().to_vec();
    let y = tape.constant(labels.clone().reshape(shape.clone())?);
    let not_y = tape.constant(labels.map(|v| 1.0 - v).reshape(shape)?);
    let d2 = tape.square(distances);
    let pull = tape.mul(y, d2)?;
    let hinge = squared_hinge(tape, distances, cfg.margin);
    let push = tape.mul(not_y, hinge)?;
    let metric = tape.add(pull, push)?;
    let metric = tape.sum(metric);
    let metric = tape.scalar_mul(metric, cfg.gamma);

    let neg_log = tape.neg(log_term);
    let total = tape.add(neg_log, metric)?;
    Ok(tape.scalar_mul(total, 1.0 / n.max(1) as f64))
}

/// `exp(x_i) / sum_j exp(x_j)`, shifted by the max for stability.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `exp(-x_i) / sum_j exp(-x_j)`.
pub fn softmin(xs: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    softmax(&neg)
}

/// Hard-pair weights for one anchor: softmax over positive distances (far
/// positives weigh more) and softmin over negative distances (close
/// negatives weigh more). Each list sums to one.
pub fn adaptive_weights(pos_dists: &[f64], neg_dists: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pos_dists.is_empty() || neg_dists.is_empty() {
        return Err(Error::Contract(format!(
            "adaptive weights need positives and negatives, got {} and {}",
            pos_dists.len(),
            neg_dists.len()
        )));
    }
    if let Some(bad) = pos_dists.iter().chain(neg_dists).find(|d| !d.is_finite()) {
        return Err(Error::domain("adaptive_weights", format!("distance {bad} is not finite")));
    }
    Ok((softmax(pos_dists), softmin(neg_dists)))
}

/// Per-pair weight matrices for a `anchors x candidates` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeights {
    /// `w_p` at positive positions, zero elsewhere.
    pub pos: Tensor,
    /// `w_n` at negative positions, zero elsewhere.
    pub neg: Tensor,
}

/// Computes [`adaptive_weights`] for every anchor. With `by_rows` the rows
/// are anchors (source anchoring); otherwise the columns are.
pub fn pair_weights(distances: &Tensor, labels: &Tensor, by_rows: bool) -> Result<PairWeights> {
    if distances.shape() != labels.shape() || distances.shape().len() != 2 {
        return Err(Error::dim("pair_weights", distances.shape(), labels.shape()));
    }
    let (r, c) = (distances.shape()[0], distances.shape()[1]);
    let mut pos = Tensor::zeros(vec![r, c]);
    let mut neg = Tensor::zeros(vec![r, c]);
    let (outer, inner) = if by_rows { (r, c) } else { (c, r) };
    let at = |o: usize, i: usize| if by_rows { o * c + i } else { i * c + o };
    for o in 0..outer {
        let (mut p_idx, mut n_idx) = (Vec::new(), Vec::new());
        for i in 0..inner {
            if labels.data()[at(o, i)] == 1.0 {
                p_idx.push(at(o, i));
            } else {
                n_idx.push(at(o, i));
            }
        }
        let pd: Vec<f64> = p_idx.iter().map(|&k| distances.data()[k]).collect();
        let nd: Vec<f64> = n_idx.iter().map(|&k| distances.data()[k]).collect();
        let (wp, wn) = adaptive_weights(&pd, &nd)?;
        for (k, w) in p_idx.into_iter().zip(wp) {
            pos.data_mut()[k] = w;
        }
        for (k, w) in n_idx.into_iter().zip(wn) {
            neg.data_mut()[k] = w;
        }
    }
    Ok(PairWeights { pos, neg })
}

/// Adaptive weighted similarity loss, mean over anchors of
/// `sum_pos(-log D_s + gamma w_p d^2) + sum_neg gamma w_n max(0, m - d)^2`.
///
/// With `eq5_literal` the negative term is `gamma max(0, m - w_n d)^2`.
/// `row_weights` treats rows as anchors; `col_weights`, when given, adds the
/// target-anchored terms as well (symmetric anchoring). Weights are constants
/// of the recording.
pub fn weighted_sim_loss(
    tape: &mut Tape,
    distances: Var,
    labels: &Tensor,
    pos_sim: Var,
    row_weights: &PairWeights,
    col_weights: Option<&PairWeights>,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = tape.value(distances).shape().to_vec();
    if shape.len() != 2 || labels.shape() != shape.as_slice() {
        return Err(Error::dim("weighted_sim_loss", &shape, labels.shape()));
    }
    let n_pos = check_labels(labels)?;
    if tape.value(pos_sim).len() != n_pos {
        return Err(Error::dim("weighted_sim_loss positives", tape.value(pos_sim).shape(), &[n_pos]));
    }
    check_distances(tape, distances)?;

    let d2 = tape.square(distances);
    let neg_mask = tape.constant(labels.map(|v| 1.0 - v));
    let lp = log_prob(tape, pos_sim)?;
    let log_sum = tape.sum(lp);

    let weighted = |tape: &mut Tape, w: &PairWeights| -> Result<Var> {
        if w.pos.shape() != shape.as_slice() || w.neg.shape() != shape.as_slice() {
            return Err(Error::dim("weighted_sim_loss weights", w.pos.shape(), &shape));
        }
        let wp = tape.constant(w.pos.clone());
        let wn = tape.constant(w.neg.clone());
        let pull = tape.mul(wp, d2)?;
        let push = if cfg.eq5_literal {
            let scaled = tape.mul(wn, distances)?;
            let h = squared_hinge(tape, scaled, cfg.margin);
            tape.mul(neg_mask, h)?
        } else {
            let h = squared_hinge(tape, distances, cfg.margin);
            tape.mul(wn, h)?
        };
        let both = tape.add(pull, push)?;
        let s = tape.sum(both);
        let metric = tape.scalar_mul(s, cfg.gamma);
        let nl = tape.neg(log_sum);
        tape.add(nl, metric)
    };

    let mut total = weighted(tape, row_weights)?;
    let mut anchors = shape[0];
    if let Some(cw) = col_weights {
        let extra = weighted(tape, cw)?;
        total = tape.add(total, extra)?;
        anchors += shape[1];
    }
    Ok(tape.scalar_mul(total, 1.0 / anchors.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_check, DEFAULT_STEP};

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn view_disc_loss_at_one_half() {
        let mut t = Tape::new();
        let s = vec_var(&mut t, &[0.5; 4]);
        let g = vec_var(&mut t, &[0.5; 3]);
        let l = view_disc_loss(&mut t, s, g).unwrap();
        assert!((value(&t, l) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((value(&t, l) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn view_disc_loss_limits_and_monotonicity() {
        let mut t = Tape::new();
        let s = vec_var(&mut t, &[1.0 - 1e-13]);
        let g = vec_var(&mut t, &[1e-13]);
        let l = view_disc_loss(&mut t, s, g).unwrap();
        assert!(value(&t, l) < 1e-11);

        let mut prev = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let s = vec_var(&mut t, &[p, p]);
            let g = vec_var(&mut t, &[0.4]);
            let l = view_disc_loss(&mut t, s, g).unwrap();
            assert!(value(&t, l) < prev);
            prev = value(&t, l);
        }
    }

    #[test]
    fn probabilities_outside_unit_interval_are_domain_errors() {
        let mut t = Tape::new();
        let s = vec_var(&mut t, &[1.2]);
        let g = vec_var(&mut t, &[0.5]);
        assert!(matches!(view_disc_loss(&mut t, s, g), Err(Error::Domain { .. })));
        let bad = vec_var(&mut t, &[-0.1]);
        assert!(matches!(view_confusion_loss(&mut t, &[bad]), Err(Error::Domain { .. })));
        let nan = vec_var(&mut t, &[f64::NAN]);
        assert!(view_confusion_loss(&mut t, &[nan]).is_err());
    }

    #[test]
    fn saturated_probabilities_give_finite_losses() {
        let mut t = Tape::new();
        let s = vec_var(&mut t, &[0.0, 1.0]);
        let g = vec_var(&mut t, &[1.0, 0.0]);
        let l = view_disc_loss(&mut t, s, g).unwrap();
        assert!(value(&t, l).is_finite());
        let c = view_confusion_loss(&mut t, &[s, g]).unwrap();
        assert!(value(&t, c).is_finite());
    }

    #[test]
    fn view_confusion_minimum_and_reference_value() {
        let mut t = Tape::new();
        let p = vec_var(&mut t, &[0.5; 5]);
        let l = view_confusion_loss(&mut t, &[p]).unwrap();
        assert!((value(&t, l) - 2f64.ln()).abs() < 1e-15);

        let p = vec_var(&mut t, &[0.9]);
        let l = view_confusion_loss(&mut t, &[p]).unwrap();
        // -(0.5 ln 0.9 + 0.5 ln 0.1)
        let expect = -(0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln());
        assert!((value(&t, l) - expect).abs() < 1e-15);
        assert!((value(&t, l) - 1.2040).abs() < 1e-4);

        // minimum over a grid is at one half
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let mut best = (f64::INFINITY, 0.0);
        for &q in &grid {
            let v = vec_var(&mut t, &[q]);
            let l = view_confusion_loss(&mut t, &[v]).unwrap();
            if value(&t, l) < best.0 {
                best = (value(&t, l), q);
            }
        }
        assert_eq!(best.1, 0.5);
    }

    #[test]
    fn contrastive_reference_cases() {
        let cfg = LossConfig::default();
        let mut t = Tape::new();

        // perfect positive
        let d = vec_var(&mut t, &[0.0]);
        let p = vec_var(&mut t, &[1.0 - 1e-12]);
        let l = contrastive_sim_loss(&mut t, d, &Tensor::vector(vec![1.0]), p, None, &cfg).unwrap();
        assert!(value(&t, l) < 1e-11);

        // negative beyond the margin contributes nothing
        let d = vec_var(&mut t, &[3.0]);
        let none = vec_var(&mut t, &[]);
        let l = contrastive_sim_loss(&mut t, d, &Tensor::vector(vec![0.0]), none, None, &cfg).unwrap();
        assert_eq!(value(&t, l), 0.0);

        // negative inside the margin: gamma * (2 - 0.5)^2 = 2.5 * 2.25
        let d = vec_var(&mut t, &[0.5]);
        let l = contrastive_sim_loss(&mut t, d, &Tensor::vector(vec![0.0]), none, None, &cfg).unwrap();
        assert!((value(&t, l) - 5.625).abs() < 1e-15);
    }

    #[test]
    fn contrastive_zero_iff_margin_satisfied() {
        let cfg = LossConfig::default();
        let labels = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let mut t = Tape::new();
        let p = vec_var(&mut t, &[1.0]);
        let d = vec_var(&mut t, &[0.0, 2.0, 7.0]);
        let l = contrastive_sim_loss(&mut t, d, &labels, p, None, &cfg).unwrap();
        assert!(value(&t, l) < 1e-11);
        let d = vec_var(&mut t, &[0.0, 1.99, 7.0]);
        let l = contrastive_sim_loss(&mut t, d, &labels, p, None, &cfg).unwrap();
        assert!(value(&t, l) > 0.0);
    }

    #[test]
    fn full_bce_adds_negative_log_term() {
        let cfg = LossConfig { full_bce_sim: true, ..Default::default() };
        let labels = Tensor::vector(vec![1.0, 0.0]);
        let mut t = Tape::new();
        let d = vec_var(&mut t, &[0.0, 5.0]);
        let p = vec_var(&mut t, &[0.8]);
        let n = vec_var(&mut t, &[0.3]);
        let l = contrastive_sim_loss(&mut t, d, &labels, p, Some(n), &cfg).unwrap();
        let expect = (-(0.8f64.ln()) - 0.7f64.ln()) / 2.0;
        assert!((value(&t, l) - expect).abs() < 1e-15);
        assert!(contrastive_sim_loss(&mut t, d, &labels, p, None, &cfg).is_err());
    }

    #[test]
    fn adaptive_weight_reference_values() {
        let (wp, wn) = adaptive_weights(&[1.0], &[0.3, 0.3]).unwrap();
        assert_eq!(wp, vec![1.0]);
        assert_eq!(wn, vec![0.5, 0.5]);

        let (wp, _) = adaptive_weights(&[1.0, 2.0], &[1.0]).unwrap();
        // e / (e + e^2) and e^2 / (e + e^2)
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((wp[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((wp[0] - 0.2689).abs() < 1e-4 && (wp[1] - 0.7311).abs() < 1e-4);

        let mut negs = vec![5.0; 31];
        negs[7] = 0.1;
        let (_, wn) = adaptive_weights(&[1.0], &negs).unwrap();
        // oracle: e^-0.1 / (e^-0.1 + 30 e^-5)
        let hard = (-0.1f64).exp() / ((-0.1f64).exp() + 30.0 * (-5.0f64).exp());
        assert!((wn[7] - hard).abs() < 1e-12);

        assert!(matches!(adaptive_weights(&[], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(adaptive_weights(&[1.0], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn hard_negative_dominates_among_easy_ones() {
        let negs = [0.1, 5.0, 5.0];
        let (_, wn) = adaptive_weights(&[1.0], &negs).unwrap();
        let oracle = 1.0 / (1.0 + 2.0 * (-4.9f64).exp());
        assert!((wn[0] - oracle).abs() < 1e-12);
        assert!(wn[0] > 0.98);
        let (_, wn) = adaptive_weights(&[1.0], &[0.1, 5.0]).unwrap();
        assert!(wn[0] > 0.99);
    }

    #[test]
    fn positive_weight_grows_with_distance() {
        let base = [0.5, 1.0, 1.5];
        let (w0, _) = adaptive_weights(&base, &[1.0]).unwrap();
        let (w1, _) = adaptive_weights(&[0.5, 1.0, 1.6], &[1.0]).unwrap();
        assert!(w1[2] > w0[2]);
    }

    #[test]
    fn uniform_weights_reduce_to_scaled_contrastive_terms() {
        // 1 anchor, 2 positives, 3 negatives with equal distances per class
        let cfg = LossConfig::default();
        let labels = Tensor::matrix(1, 5, vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let dist = Tensor::matrix(1, 5, vec![0.7, 0.7, 1.2, 1.2, 1.2]).unwrap();
        let w = pair_weights(&dist, &labels, true).unwrap();
        assert_eq!(w.pos.data()[..2], [0.5, 0.5]);
        let mut t = Tape::new();
        let d = t.constant(dist);
        let p = vec_var(&mut t, &[0.6, 0.6]);
        let l = weighted_sim_loss(&mut t, d, &labels, p, &w, None, &cfg).unwrap();
        let expect = -2.0 * 0.6f64.ln()
            + cfg.gamma * (2.0 * 0.49 / 2.0 + 3.0 * (0.8f64 * 0.8) / 3.0);
        assert!((value(&t, l) - expect).abs() < 1e-14);
    }

    #[test]
    fn literal_hinge_variant() {
        let cfg = LossConfig { eq5_literal: true, ..Default::default() };
        let labels = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let dist = Tensor::matrix(1, 3, vec![0.5, 1.0, 3.0]).unwrap();
        let w = pair_weights(&dist, &labels, true).unwrap();
        let wn1 = w.neg.data()[1];
        let wn2 = w.neg.data()[2];
        let mut t = Tape::new();
        let d = t.constant(dist);
        let p = vec_var(&mut t, &[0.9]);
        let l = weighted_sim_loss(&mut t, d, &labels, p, &w, None, &cfg).unwrap();
        let hinge = |x: f64| (2.0 - x).max(0.0).powi(2);
        let expect = -(0.9f64.ln()) + 2.5 * (0.25 + hinge(wn1 * 1.0) + hinge(wn2 * 3.0));
        assert!((value(&t, l) - expect).abs() < 1e-14);
    }

    fn random_batch(seed: u64) -> (Tensor, Tensor, Tensor) {
        // 2 anchors x 3 candidates; candidate j has identity j, anchors 0 and 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let es = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let et = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        (es, et, labels)
    }

    #[test]
    fn contrastive_loss_on_four_pair_batch_passes_gradient_check() {
        // 2 anchors x 2 candidates with a tiny D_s on the positives
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let es = Tensor::matrix(2, 3, r(6)).unwrap();
        let et = Tensor::matrix(2, 3, r(6)).unwrap();
        let w1 = Tensor::matrix(6, 4, r(24)).unwrap();
        let w2 = Tensor::matrix(4, 1, r(4)).unwrap();
        let labels = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for full_bce in [false, true] {
            let cfg = LossConfig { full_bce_sim: full_bce, margin: 5.0, ..Default::default() };
            let labels = labels.clone();
            let f = move |t: &mut Tape, v: &[Var]| {
                let d = t.pairwise_distances(v[0], v[1])?;
                let score = |t: &mut Tape, pairs: &[(usize, usize)]| -> crate::Result<Var> {
                    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                    let ga = t.gather_rows(v[0], &a)?;
                    let gb = t.gather_rows(v[1], &b)?;
                    let x = t.concat(&[ga, gb])?;
                    let h = t.matmul(x, v[2])?;
                    let h = t.relu(h);
                    let o = t.matmul(h, v[3])?;
                    Ok(t.logistic(o))
                };
                let ps = score(t, &[(0, 0), (1, 1)])?;
                let ns = score(t, &[(0, 1), (1, 0)])?;
                contrastive_sim_loss(t, d, &labels, ps, Some(ns), &cfg)
            };
            let err = finite_diff_check(&f, &[es.clone(), et.clone(), w1.clone(), w2.clone()], DEFAULT_STEP)
                .unwrap();
            assert!(err < 1e-5, "full_bce={full_bce}: max rel err {err}");
        }
    }

    #[test]
    fn weighted_loss_gradient_check_with_fixed_weights() {
        for literal in [false, true] {
            let (es, et, labels) = random_batch(3);
            let cfg = LossConfig { eq5_literal: literal, ..Default::default() };
            // weights are constants computed at the base point
            let mut t = Tape::new();
            let a = t.constant(es.clone());
            let b = t.constant(et.clone());
            let d = t.pairwise_distances(a, b).unwrap();
            let w = pair_weights(t.value(d), &labels, true).unwrap();
            let cw = {
                // column anchoring needs a positive in every column; column 2 has none
                let l2 = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
                pair_weights(t.value(d), &l2, false).unwrap()
            };
            let probs = Tensor::vector(vec![0.35, 0.8]);
            let labels2 = labels.clone();
            let f = move |t: &mut Tape, v: &[Var]| {
                let d = t.pairwise_distances(v[0], v[1])?;
                weighted_sim_loss(t, d, &labels2, v[2], &w, Some(&cw), &cfg)
            };
            let err = finite_diff_check(&f, &[es, et, probs], DEFAULT_STEP).unwrap();
            assert!(err < 1e-5, "literal={literal}: max rel err {err}");
        }
    }

    #[test]
    fn discriminator_losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits_s = Tensor::vector((0..5).map(|_| rng.random_range(-2.0..2.0)).collect());
        let logits_t = Tensor::vector((0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
        let f1 = |t: &mut Tape, v: &[Var]| {
            let ps = t.logistic(v[0]);
            let pt = t.logistic(v[1]);
            view_disc_loss(t, ps, pt)
        };
        let f3 = |t: &mut Tape, v: &[Var]| {
            let ps = t.logistic(v[0]);
            let pt = t.logistic(v[1]);
            view_confusion_loss(t, &[ps, pt])
        };
        let params = [logits_s, logits_t];
        assert!(finite_diff_check(&f1, &params, DEFAULT_STEP).unwrap() < 1e-5);
        assert!(finite_diff_check(&f3, &params, DEFAULT_STEP).unwrap() < 1e-5);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_are_permutation_equivariant(
            pos in prop::collection::vec(0.0f64..20.0, 1..12),
            neg in prop::collection::vec(0.0f64..20.0, 1..40),
            rot in 0usize..40,
        ) {
            let (wp, wn) = adaptive_weights(&pos, &neg).unwrap();
            prop_assert!((wp.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((wn.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

            let k = rot % neg.len();
            let mut rotated = neg.clone();
            rotated.rotate_left(k);
            let (_, wr) = adaptive_weights(&pos, &rotated).unwrap();
            let mut expect = wn.clone();
            expect.rotate_left(k);
            for (a, b) in wr.iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn confusion_loss_is_symmetric(p in 1e-6f64..(1.0 - 1e-6)) {
            let mut t = Tape::new();
            let a = t.constant(Tensor::vector(vec![p]));
            let b = t.constant(Tensor::vector(vec![1.0 - p]));
            let la = view_confusion_loss(&mut t, &[a]).unwrap();
            let lb = view_confusion_loss(&mut t, &[b]).unwrap();
            prop_assert!((t.value(la).item() - t.value(lb).item()).abs() < 1e-9);
        }
    }
}
