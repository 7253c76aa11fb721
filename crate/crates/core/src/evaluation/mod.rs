//! Reported metrics: hallucination counts, FPR95, Type-1 inflation,
//! detection quality, reductions, confidence trends and KDE curves.
//!
//! FPR95 is computed on detections: every detection with confidence at or
//! above the evaluation threshold contributes one score.

mod kde;
mod metrics;

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kde::{kde_report, silverman_bandwidth, KdeReport, DEFAULT_GRID_POINTS};
pub use metrics::{detection_metrics, ClassAp, DetectionMetrics, DEFAULT_MATCH_IOU};

use crate::audit::{AuditKind, AuditReport};
use crate::calibration::{calibrate_threshold, CalibrationResult, Verdict, DEFAULT_TARGET_TPR};
use crate::dump::{Dump, SplitKind};
use crate::error::{Error, Result};
use crate::filters::{score_record, FilterModel};
use crate::Scalar;

pub const DEFAULT_EVAL_CONF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: String,
    /// Detections at or above the confidence threshold.
    pub detections: usize,
    pub flagged_ood: usize,
    pub hallucinations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub conf_threshold: f64,
    pub filtered: bool,
    pub total: usize,
    pub total_detections: usize,
    pub per_image: Vec<ImageCount>,
}

/// Counts, per OoD-test image, the confident detections the filter keeps
/// as ID. Without a filter every confident detection is a hallucination.
pub fn count_hallucinations<T: Scalar>(
    dump: &Dump,
    filter: Option<(&FilterModel<T>, &CalibrationResult<T>)>,
    conf_threshold: f64,
) -> Result<HallucinationReport> {
    dump.expect_split(&[SplitKind::OodTest])?;
    let per_image: Vec<ImageCount> = dump
        .records
        .par_iter()
        .map(|rec| {
            let detections = rec.detections.iter().filter(|d| d.confidence >= conf_threshold).count();
            let flagged_ood = match filter {
                None => 0,
                Some((model, calib)) => score_record(model, rec, conf_threshold)?
                    .iter()
                    .filter(|s| calib.classify(s.score) == Verdict::Ood)
                    .count(),
            };
            Ok(ImageCount {
                image_id: rec.image_id.clone(),
                detections,
                flagged_ood,
                hallucinations: detections - flagged_ood,
            })
        })
        .collect::<Result<_>>()?;
    Ok(HallucinationReport {
        conf_threshold,
        filtered: filter.is_some(),
        total: per_image.iter().map(|c| c.hallucinations).sum(),
        total_detections: per_image.iter().map(|c| c.detections).sum(),
        per_image,
    })
}

/// Fraction of OoD scores classified ID (`<= tau`).
pub fn fpr_at<T: PartialOrd>(tau: &T, ood_scores: &[T]) -> f64 {
    if ood_scores.is_empty() {
        return 0.0;
    }
    ood_scores.iter().filter(|s| *s <= tau).count() as f64 / ood_scores.len() as f64
}

/// False-positive rate on OoD scores at the threshold that retains 95% of
/// the ID scores.
pub fn fpr95<T: PartialOrd + Copy>(id_scores: &[T], ood_scores: &[T]) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    let calib = calibrate_threshold(id_scores, DEFAULT_TARGET_TPR)?;
    Ok(fpr_at(&calib.tau, ood_scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    pub fpr95_full: f64,
    pub fpr95_clean: f64,
    /// `(full - clean) * 100`.
    pub inflation_pp: f64,
    pub n_full: usize,
    pub n_clean: usize,
    pub excluded_images: usize,
}

/// FPR95 over all OoD detections versus FPR95 without the images a Type-1
/// audit flagged.
pub fn inflation_report<T: Scalar>(
    dump: &Dump,
    audit: &AuditReport,
    model: &FilterModel<T>,
    calib: &CalibrationResult<T>,
    conf_threshold: f64,
) -> Result<InflationReport> {
    dump.expect_split(&[SplitKind::OodTest])?;
    if audit.kind != AuditKind::Type1 {
        return Err(Error::InvalidParameter("inflation needs a type1 audit".into()));
    }
    let ids: HashSet<&str> = dump.records.iter().map(|r| r.image_id.as_str()).collect();
    let flagged = audit.flagged_ids();
    if let Some(unknown) = flagged.iter().find(|id| !ids.contains(*id)) {
        return Err(Error::UnknownImage(unknown.to_string()));
    }

    let per_record: Vec<(bool, Vec<T>)> = dump
        .records
        .par_iter()
        .map(|rec| {
            let scores = score_record(model, rec, conf_threshold)?.into_iter().map(|s| s.score).collect();
            Ok((flagged.contains(rec.image_id.as_str()), scores))
        })
        .collect::<Result<_>>()?;
    let full: Vec<T> = per_record.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let clean: Vec<T> = per_record
        .iter()
        .filter(|(f, _)| !f)
        .flat_map(|(_, s)| s.iter().copied())
        .collect();
    if full.is_empty() {
        return Err(Error::EmptyInput("ood detections"));
    }
    if clean.is_empty() {
        return Err(Error::EmptyInput("ood detections outside flagged images"));
    }
    let fpr95_full = fpr_at(&calib.tau, &full);
    let fpr95_clean = fpr_at(&calib.tau, &clean);
    Ok(InflationReport {
        fpr95_full,
        fpr95_clean,
        inflation_pp: (fpr95_full - fpr95_clean) * 100.0,
        n_full: full.len(),
        n_clean: clean.len(),
        excluded_images: flagged.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReduction {
    pub split: String,
    pub before: u64,
    pub after: u64,
    /// `(before - after) / before`.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub splits: Vec<SplitReduction>,
    pub pooled_before: u64,
    pub pooled_after: u64,
    pub pooled: f64,
}

impl ReductionReport {
    pub fn pooled_pct(&self) -> f64 {
        self.pooled * 100.0
    }
}

/// Relative reduction per split and pooled over all splits. Splits are
/// matched by name.
pub fn reduction_stats(before: &[(String, u64)], after: &[(String, u64)]) -> Result<ReductionReport> {
    if before.is_empty() {
        return Err(Error::EmptyInput("splits"));
    }
    if before.len() != after.len() {
        return Err(Error::InvalidParameter("before/after split lists differ".into()));
    }
    let mut splits = Vec::with_capacity(before.len());
    for (name, b) in before {
        let a = after
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::InvalidParameter(format!("split `{name}` missing from after")))?;
        if *b == 0 {
            return Err(Error::ZeroBaseline(name.clone()));
        }
        splits.push(SplitReduction {
            split: name.clone(),
            before: *b,
            after: a,
            reduction: (*b as f64 - a as f64) / *b as f64,
        });
    }
    let pooled_before: u64 = splits.iter().map(|s| s.before).sum();
    let pooled_after: u64 = splits.iter().map(|s| s.after).sum();
    Ok(ReductionReport {
        pooled: (pooled_before as f64 - pooled_after as f64) / pooled_before as f64,
        splits,
        pooled_before,
        pooled_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub checkpoint: usize,
    pub count: usize,
    pub mean_confidence: Option<f64>,
}

/// Mean confidence and count of confident detections per checkpoint.
pub fn confidence_trend(dumps: &[Dump], conf_threshold: f64) -> Result<Vec<TrendPoint>> {
    let first = dumps.first().ok_or(Error::EmptyInput("checkpoint dumps"))?;
    let mut out = Vec::with_capacity(dumps.len());
    for (i, dump) in dumps.iter().enumerate() {
        dump.expect_split(&[SplitKind::OodTest])?;
        if dump.header.class_list != first.header.class_list {
            return Err(Error::InconsistentHeaders(format!(
                "checkpoint {i} has a different class_list"
            )));
        }
        let confs: Vec<f64> = dump
            .detections()
            .map(|(_, _, d)| d.confidence)
            .filter(|&c| c >= conf_threshold)
            .collect();
        out.push(TrendPoint {
            checkpoint: i,
            count: confs.len(),
            mean_confidence: crate::numeric::mean(&confs),
        });
    }
    Ok(out)
}

pub const TREND_CSV_HEADER: &str = "checkpoint,count,mean_confidence";

pub fn write_trend_csv<W: Write>(points: &[TrendPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TREND_CSV_HEADER}")?;
    for p in points {
        match p.mean_confidence {
            Some(m) => writeln!(out, "{},{},{m}", p.checkpoint, p.count)?,
            None => writeln!(out, "{},{},", p.checkpoint, p.count)?,
        }
    }
    Ok(())
}
