use std::fs;
use std::path::Path;

use crate::data::fmt_f64;
use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,loss_eq1,loss_sim,loss_eq3,valid_loss,dd_accuracy,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Similarity,
    Adversarial,
}

/// One completed similarity epoch or adversarial round. Terms that the
/// stage does not compute are `None` and written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Position in the whole run, counting from 0.
    pub epoch: usize,
    pub stage: Stage,
    pub loss_eq1: Option<f64>,
    pub loss_sim: Option<f64>,
    pub loss_eq3: Option<f64>,
    pub valid_loss: Option<f64>,
    pub dd_accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        stage: Stage,
        loss_eq1: Option<f64>,
        loss_sim: Option<f64>,
        loss_eq3: Option<f64>,
        valid_loss: Option<f64>,
        dd_accuracy: Option<f64>,
        lr: f64,
    ) -> EpochRecord {
        let rec = EpochRecord {
            epoch: self.records.len(),
            stage,
            loss_eq1,
            loss_sim,
            loss_eq3,
            valid_loss,
            dd_accuracy,
            lr,
        };
        self.records.push(rec.clone());
        rec
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                opt(r.loss_eq1),
                opt(r.loss_sim),
                opt(r.loss_eq3),
                opt(r.valid_loss),
                opt(r.dd_accuracy),
                fmt_f64(r.lr)
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let mut h = TrainHistory::default();
        h.push(Stage::Similarity, None, Some(1.5), None, Some(1.25), None, 0.001);
        h.push(Stage::Adversarial, Some(1.0), None, Some(0.75), Some(2.0), Some(0.5), 0.001);
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,,1.5000000000000000e0,,"));
        assert_eq!(lines[2].split(',').count(), 7);
        assert_eq!(h.stage(Stage::Adversarial).count(), 1);
    }
}
