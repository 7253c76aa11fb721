//! FPR95 threshold selection on ID-only calibration scores.
//!
//! The threshold is always a realised calibration score: the
//! `ceil(target * n)`-th smallest one. A detection is ID iff its score is
//! `<= tau`, so ties at the threshold all stay ID and the retention can
//! exceed the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T> {
    pub tau: T,
    /// Fraction of calibration scores classified ID.
    pub retention: f64,
    pub n_cali: usize,
    pub target_tpr: f64,
    #[serde(skip)]
    pub sorted_scores: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Id,
    Ood,
}

/// Smallest `k` with `k / n >= target`, robust to the representation
/// error of decimal targets such as 0.95.
pub fn required_rank(n: usize, target: f64) -> usize {
    let raw = target * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n.max(1))
}

fn check_inputs<T: PartialOrd>(scores: &[T], target: f64) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("calibration scores"));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter(format!("target_tpr {target} must lie in (0, 1)")));
    }
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(Error::InvalidParameter("calibration scores must be finite".into()));
    }
    Ok(())
}

fn sorted<T: PartialOrd + Copy>(scores: &[T]) -> Vec<T> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("scores are comparable"));
    v
}

pub fn calibrate_threshold<T: PartialOrd + Copy>(scores: &[T], target_tpr: f64) -> Result<CalibrationResult<T>> {
    check_inputs(scores, target_tpr)?;
    let sorted_scores = sorted(scores);
    let n = sorted_scores.len();
    let tau = sorted_scores[required_rank(n, target_tpr) - 1];
    let retained = sorted_scores.partition_point(|s| *s <= tau);
    Ok(CalibrationResult {
        tau,
        retention: retained as f64 / n as f64,
        n_cali: n,
        target_tpr,
        sorted_scores,
    })
}

/// Threshold by radius shrinking: start at the largest score and step down
/// through the realised scores while the fraction of calibration scores
/// classified OoD stays within `1 - target_tpr`.
pub fn greedy_threshold<T: PartialOrd + Copy>(scores: &[T], target_tpr: f64) -> Result<T> {
    check_inputs(scores, target_tpr)?;
    let mut desc = sorted(scores);
    desc.reverse();
    let n = desc.len() as f64;
    let budget = 1.0 - target_tpr + 1e-12;

    let mut tau = desc[0];
    let mut i = 0;
    loop {
        // skip the block of scores equal to tau
        while i < desc.len() && !(desc[i] < tau) {
            i += 1;
        }
        let Some(&candidate) = desc.get(i) else { break };
        // every score above the candidate would be classified OoD
        let rejected = i as f64;
        if rejected / n > budget {
            break;
        }
        tau = candidate;
    }
    Ok(tau)
}

pub fn classify<T: PartialOrd>(score: T, result: &CalibrationResult<T>) -> Verdict {
    if score <= result.tau {
        Verdict::Id
    } else {
        Verdict::Ood
    }
}

impl<T: PartialOrd + Copy> CalibrationResult<T> {
    pub fn classify(&self, score: T) -> Verdict {
        classify(score, self)
    }

    /// Number of calibration scores classified ID.
    pub fn retained(&self) -> usize {
        self.sorted_scores.partition_point(|s| *s <= self.tau)
    }
}
