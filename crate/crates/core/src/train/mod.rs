//! Training loop for every perturbation mode, optimizer, and schedule.

mod sgd;
mod trainer;

pub use sgd::{lr_at, sgd_nesterov_step, LrSchedule};
pub use trainer::{
    label_overlap, train, train_fgs, train_ours, train_random, IterationInfo, NoObserver,
    StepOutcome, TrainObserver, Trainer,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    /// Plain training on clean data.
    Baseline,
    /// Joint loss on clean and FGS-perturbed inputs.
    FgsOrig,
    /// FGS sign-gradients of the current batch applied at the gradacc layers.
    FgsInter,
    /// Cached layerwise perturbations only (α = 0).
    OursOrig,
    /// Cached layerwise perturbations with the joint loss.
    OursJoint,
    /// Layerwise Gaussian noise at the gradacc layers.
    Random,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Baseline,
        TrainMode::FgsOrig,
        TrainMode::FgsInter,
        TrainMode::OursOrig,
        TrainMode::OursJoint,
        TrainMode::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::FgsOrig => "fgs-orig",
            TrainMode::FgsInter => "fgs-inter",
            TrainMode::OursOrig => "ours-orig",
            TrainMode::OursJoint => "ours-joint",
            TrainMode::Random => "random",
        }
    }

    /// Modes whose perturbation is carried over from the previous batch and
    /// therefore needs equal batch extents.
    pub fn uses_cache(self) -> bool {
        matches!(
            self,
            TrainMode::OursOrig | TrainMode::OursJoint | TrainMode::Random
        )
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Base perturbation size ε.
    pub eps: f64,
    /// Weight of the clean term in the joint loss.
    pub alpha: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Scale ε by each tap gradient's range `max − min`.
    pub eps_normalize: bool,
    /// Random horizontal flips.
    pub flip: bool,
    /// `None` drops the last partial batch exactly when the mode uses cached
    /// perturbations.
    pub drop_last: Option<bool>,
    /// Batch size for test-error evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Baseline,
            eps: 0.0,
            alpha: 0.5,
            epochs: 10,
            batch: 128,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eps_normalize: false,
            flip: false,
            drop_last: None,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("{} outside [0, 1]", self.alpha));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(
                "eps",
                format!("{} must be finite and non-negative", self.eps),
            );
        }
        if self.batch == 0 {
            return bad("batch", "must be positive".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch", "must be positive".into());
        }
        if !(self.lr.base > 0.0 && self.lr.factor > 0.0) {
            return bad("lr", "base and factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative".into());
        }
        Ok(())
    }

    /// Clean-term weight actually used: 0 for ours-orig and random, 1 for
    /// baseline, the configured α otherwise.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainMode::Baseline => 1.0,
            TrainMode::OursOrig | TrainMode::Random => 0.0,
            TrainMode::FgsOrig | TrainMode::FgsInter | TrainMode::OursJoint => self.alpha,
        }
    }

    pub fn drop_last(&self) -> bool {
        self.drop_last.unwrap_or(self.mode.uses_cache())
    }
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent misclassified on the (last) perturbed pass of each batch.
    pub train_err: f64,
    /// Percent misclassified on the test split, in eval mode.
    pub test_err: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every iteration, in order.
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_err,test_err,wall_secs";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let test = r.test_err.map(|e| e.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.train_err, test, r.wall_secs
            ));
        }
        out
    }

    /// Bitwise equality of the per-iteration losses.
    pub fn same_losses(&self, other: &TrainTrace) -> bool {
        self.losses.len() == other.losses.len()
            && self
                .losses
                .iter()
                .zip(&other.losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn final_test_err(&self) -> Option<f64> {
        self.epochs.last()?.test_err
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("fgs".parse::<TrainMode>().is_err());
    }

    #[test]
    fn alpha_rules() {
        let mut c = TrainConfig {
            mode: TrainMode::OursOrig,
            alpha: 0.7,
            ..Default::default()
        };
        assert_eq!(c.effective_alpha(), 0.0);
        c.mode = TrainMode::OursJoint;
        assert_eq!(c.effective_alpha(), 0.7);
        c.alpha = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn drop_last_default_follows_mode() {
        let mut c = TrainConfig::default();
        assert!(!c.drop_last());
        c.mode = TrainMode::OursJoint;
        assert!(c.drop_last());
        c.drop_last = Some(false);
        assert!(!c.drop_last());
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let t = TrainTrace {
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 0.1,
                train_loss: 2.0,
                train_err: 50.0,
                test_err: Some(40.0),
                wall_secs: 1.0,
            }],
            losses: vec![2.0],
        };
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("epoch,lr,train_loss,train_err,test_err"));
    }
}
