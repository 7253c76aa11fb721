//! Benchmark contamination audits.
//!
//! * Type 1: ID objects inside an OoD-only test split.
//! * Type 2: unlabeled OoD objects inside an ID split.
//! * Outliers: ID detections whose OoD score lies beyond the Tukey fence
//!   of their category.
//!
//! Type 1 and Type 2 rely on an auxiliary broad-vocabulary detector whose
//! output is carried in each record's `aux_detections`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::class_map::ClassMap;
use crate::dump::{Detection, Dump, ImageRecord, SplitKind};
use crate::error::{Error, Result};
use crate::filters::{score_dump, DetectionScore, FilterModel};
use crate::geometry::compute_iou;
use crate::numeric::{quantile_sorted, sort_floats};
use crate::Scalar;

pub const DEFAULT_AUDIT_CONF: f64 = 0.25;
pub const TUKEY_MULTIPLIER: f64 = 1.5;
/// Aux detections overlapping a labeled ID box at least this much are
/// re-detections of that object, not unlabeled OoD objects.
pub const TYPE2_GT_IOU: f64 = 0.5;
/// Categories with fewer scores are skipped by the outlier audit.
pub const MIN_CATEGORY_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Type1,
    Type2,
    Outlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    /// Index into `aux_detections` (type 1/2) or `detections` (outlier).
    pub index: usize,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapped_class: Option<String>,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedImage {
    pub image_id: String,
    pub objects: Vec<ObjectRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub kind: AuditKind,
    pub conf_threshold: f64,
    pub total_images: usize,
    pub flagged_images: Vec<FlaggedImage>,
    pub flagged_objects: usize,
    /// Denominator of `prevalence`: primary detections (type 1), aux
    /// detections above threshold (type 2), scored detections (outlier).
    pub total_objects: usize,
    pub prevalence: f64,
    pub image_prevalence: f64,
    /// Type 2 only: aux detections that map into the ID classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_objects: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AuditReport {
    fn assemble(
        kind: AuditKind,
        conf_threshold: f64,
        total_images: usize,
        flagged_images: Vec<FlaggedImage>,
        total_objects: usize,
    ) -> Self {
        let flagged_objects = flagged_images.iter().map(|f| f.objects.len()).sum();
        AuditReport {
            kind,
            conf_threshold,
            total_images,
            image_prevalence: ratio(flagged_images.len(), total_images),
            flagged_images,
            flagged_objects,
            total_objects,
            prevalence: ratio(flagged_objects, total_objects).min(1.0),
            id_objects: None,
            warnings: Vec::new(),
        }
    }

    pub fn flagged_ids(&self) -> HashSet<&str> {
        self.flagged_images.iter().map(|f| f.image_id.as_str()).collect()
    }

    pub fn num_flagged_images(&self) -> usize {
        self.flagged_images.len()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn aux_of(rec: &ImageRecord) -> Result<&[Detection]> {
    rec.aux_detections.as_deref().ok_or_else(|| Error::MissingRecordField {
        image_id: rec.image_id.clone(),
        field: "aux_detections",
    })
}

fn object_ref(index: usize, det: &Detection, mapped: Option<&str>) -> ObjectRef {
    ObjectRef {
        index,
        class_name: det.class_name.clone(),
        mapped_class: mapped.map(str::to_string),
        confidence: det.confidence,
        score: None,
    }
}

/// Flags OoD-test images in which the auxiliary detector finds an ID object.
pub fn audit_type1(dump: &Dump, class_map: &ClassMap, conf_threshold: f64) -> Result<AuditReport> {
    dump.expect_split(&[SplitKind::OodTest])?;
    let mut flagged = Vec::new();
    let mut total_objects = 0;
    for rec in &dump.records {
        let aux = aux_of(rec)?;
        total_objects += rec.detections.iter().filter(|d| d.confidence >= conf_threshold).count();
        let objects: Vec<ObjectRef> = aux
            .iter()
            .enumerate()
            .filter(|(_, d)| d.confidence >= conf_threshold)
            .filter_map(|(i, d)| class_map.resolve(&d.class_name).map(|m| object_ref(i, d, Some(m))))
            .collect();
        if !objects.is_empty() {
            flagged.push(FlaggedImage { image_id: rec.image_id.clone(), objects });
        }
    }
    Ok(AuditReport::assemble(
        AuditKind::Type1,
        conf_threshold,
        dump.records.len(),
        flagged,
        total_objects,
    ))
}

/// Flags ID-split images in which the auxiliary detector finds a non-ID
/// object that does not coincide with any labeled ID box.
pub fn audit_type2(dump: &Dump, class_map: &ClassMap, conf_threshold: f64) -> Result<AuditReport> {
    dump.expect_split(&[SplitKind::IdCali, SplitKind::IdTest])?;
    let mut flagged = Vec::new();
    let mut total_objects = 0;
    let mut id_objects = 0;
    for rec in &dump.records {
        let aux = aux_of(rec)?;
        let gt = rec.ground_truth.as_deref().ok_or_else(|| Error::MissingRecordField {
            image_id: rec.image_id.clone(),
            field: "ground_truth",
        })?;
        let mut objects = Vec::new();
        for (i, det) in aux.iter().enumerate().filter(|(_, d)| d.confidence >= conf_threshold) {
            total_objects += 1;
            if class_map.is_id(&det.class_name) {
                id_objects += 1;
                continue;
            }
            let redetected = gt
                .iter()
                .filter(|g| !g.is_ood)
                .any(|g| compute_iou(&g.bbox, &det.bbox) >= TYPE2_GT_IOU);
            if !redetected {
                objects.push(object_ref(i, det, None));
            }
        }
        if !objects.is_empty() {
            flagged.push(FlaggedImage { image_id: rec.image_id.clone(), objects });
        }
    }
    let mut report = AuditReport::assemble(AuditKind::Type2, conf_threshold, dump.records.len(), flagged, total_objects);
    report.id_objects = Some(id_objects);
    Ok(report)
}

/// Set of `(image_id, detection index)` pairs excluded from calibration.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutlierMask {
    pub schema_version: String,
    pub outliers: BTreeSet<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskEntry {
    pub image_id: String,
    pub detection: usize,
}

impl OutlierMask {
    pub fn new() -> Self {
        OutlierMask { schema_version: crate::dump::SCHEMA_VERSION.into(), outliers: BTreeSet::new() }
    }

    pub fn insert(&mut self, image_id: &str, detection: usize) {
        self.outliers.insert(MaskEntry { image_id: image_id.to_string(), detection });
    }

    pub fn contains(&self, image_id: &str, detection: usize) -> bool {
        // BTreeSet lookup needs an owned key
        self.outliers.contains(&MaskEntry { image_id: image_id.to_string(), detection })
    }

    pub fn len(&self) -> usize {
        self.outliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outliers.is_empty()
    }

    /// Scores whose detection is not masked, in input order.
    pub fn retain_scores<T: Copy>(&self, scores: &[DetectionScore<T>]) -> Vec<T> {
        scores
            .iter()
            .filter(|s| !self.contains(&s.image_id, s.detection))
            .map(|s| s.score)
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_reader(BufReader::new(File::open(path.as_ref()).map_err(Error::file(path.as_ref()))?))
            .map_err(|e| Error::Schema { line: e.line(), message: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref()).map_err(Error::file(path.as_ref()))?);
        serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Per-category box-plot statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryFence {
    pub class_id: usize,
    pub count: usize,
    pub q1: f64,
    pub q3: f64,
    pub fence: f64,
    pub outliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierAudit<T> {
    pub report: AuditReport,
    pub mask: OutlierMask,
    pub fences: Vec<CategoryFence>,
    pub scores: Vec<DetectionScore<T>>,
}

/// Marks a detection as an outlier iff its score exceeds `Q3 + 1.5 IQR`
/// of its category (type-7 quartiles).
pub fn tukey_outliers<T: Scalar>(scores: &[T]) -> Option<(T, T, T, Vec<bool>)> {
    let mut sorted = scores.to_vec();
    sort_floats(&mut sorted);
    let q1 = quantile_sorted(&sorted, 0.25)?;
    let q3 = quantile_sorted(&sorted, 0.75)?;
    let fence = q3 + T::of(TUKEY_MULTIPLIER) * (q3 - q1);
    Some((q1, q3, fence, scores.iter().map(|&s| s > fence).collect()))
}

pub fn detect_outliers<T: Scalar>(dump: &Dump, model: &FilterModel<T>, conf_threshold: f64) -> Result<OutlierAudit<T>> {
    dump.expect_split(&[SplitKind::IdCali, SplitKind::IdTrain, SplitKind::IdTest])?;
    let scores = score_dump(model, dump, conf_threshold)?;

    let class_of: BTreeMap<(&str, usize), usize> = dump
        .detections()
        .map(|(r, i, d)| ((r.image_id.as_str(), i), d.class_id))
        .collect();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, s) in scores.iter().enumerate() {
        by_class.entry(class_of[&(s.image_id.as_str(), s.detection)]).or_default().push(k);
    }

    let mut is_outlier = vec![false; scores.len()];
    let mut fences = Vec::new();
    let mut warnings = Vec::new();
    for (class_id, members) in &by_class {
        if members.len() < MIN_CATEGORY_SIZE {
            warnings.push(format!(
                "class {class_id} skipped: {} detections (< {MIN_CATEGORY_SIZE})",
                members.len()
            ));
            continue;
        }
        let vals: Vec<T> = members.iter().map(|&k| scores[k].score).collect();
        let (q1, q3, fence, flags) = tukey_outliers(&vals).expect("non-empty category");
        for (&k, f) in members.iter().zip(&flags) {
            is_outlier[k] = *f;
        }
        fences.push(CategoryFence {
            class_id: *class_id,
            count: members.len(),
            q1: q1.to_f64_lossy(),
            q3: q3.to_f64_lossy(),
            fence: fence.to_f64_lossy(),
            outliers: flags.iter().filter(|f| **f).count(),
        });
    }

    let mut mask = OutlierMask::new();
    let mut per_image: BTreeMap<usize, Vec<ObjectRef>> = BTreeMap::new();
    let rec_index: BTreeMap<&str, usize> =
        dump.records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect();
    for (s, _) in scores.iter().zip(&is_outlier).filter(|(_, o)| **o) {
        mask.insert(&s.image_id, s.detection);
        let ri = rec_index[s.image_id.as_str()];
        let det = &dump.records[ri].detections[s.detection];
        let mut obj = object_ref(s.detection, det, None);
        obj.score = Some(s.score.to_f64_lossy());
        per_image.entry(ri).or_default().push(obj);
    }
    let flagged = per_image
        .into_iter()
        .map(|(ri, objects)| FlaggedImage { image_id: dump.records[ri].image_id.clone(), objects })
        .collect();

    let mut report = AuditReport::assemble(AuditKind::Outlier, conf_threshold, dump.records.len(), flagged, scores.len());
    report.warnings = warnings;
    Ok(OutlierAudit { report, mask, fences, scores })
}
