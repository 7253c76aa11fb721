//! Evaluation, auditing and repair of out-of-distribution benchmarks for
//! object detection.
//!
//! The crate consumes detector dumps (line-delimited JSON), scores
//! detections with post-hoc OoD filters, calibrates thresholds for a target
//! true-positive rate, counts hallucinations, audits benchmarks for
//! contamination, curates replacement data and simulates the effect of
//! contamination on the threshold.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`.

// negated float comparisons are deliberate: they treat NaN as failing
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod calibration;
pub mod class_map;
pub mod curation;
pub mod dump;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod geometry;
pub mod linalg;
pub mod numeric;
pub mod scalar;
pub mod simulator;

pub use class_map::ClassMap;
pub use dump::{Detection, Dump, DumpHeader, GroundTruthObject, ImageRecord, LinearHead, SplitKind};
pub use error::{Error, Result};
pub use filters::{FilterMethod, FilterSpec};
pub use scalar::Scalar;

pub type BoundingBox = geometry::BoundingBox<f64>;
pub type FilterModel = filters::FilterModel<f64>;
pub type CalibrationResult = calibration::CalibrationResult<f64>;
pub type DetectionScore = filters::DetectionScore<f64>;
pub type KdeReport = evaluation::KdeReport<f64>;
pub type OutlierAudit = audit::OutlierAudit<f64>;
