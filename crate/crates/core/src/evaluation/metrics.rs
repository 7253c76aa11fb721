//! Detection quality: per-class AP with all-point interpolation, mAP, and
//! micro-averaged precision / recall / F at a confidence threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dump::{Dump, SplitKind};
use crate::error::{Error, Result};
use crate::geometry::{compute_iou, BoundingBox};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_name: String,
    pub ap: f64,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub notes: Vec<String>,
}

struct Pred<'a> {
    image: &'a str,
    index: usize,
    confidence: f64,
    bbox: BoundingBox,
}

/// Greedy matching in descending confidence; each prediction takes the
/// unmatched same-class GT with the highest IoU, if it reaches the
/// threshold. Returns the TP flag per prediction in visiting order.
fn match_class(preds: &mut [Pred<'_>], gts: &BTreeMap<&str, Vec<BoundingBox>>, iou_threshold: f64) -> Vec<bool> {
    preds.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.image.cmp(b.image))
            .then_with(|| a.index.cmp(&b.index))
    });
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    preds
        .iter()
        .map(|p| {
            let Some(boxes) = gts.get(p.image) else { return false };
            let taken = used.get_mut(p.image).unwrap();
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, compute_iou(g, &p.bbox)))
                .filter(|(_, iou)| *iou >= iou_threshold)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision envelope, summed over recall increments.
pub(crate) fn all_point_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

pub fn detection_metrics(dump: &Dump, iou_threshold: f64, conf_threshold: f64) -> Result<DetectionMetrics> {
    dump.expect_split(&[SplitKind::IdTest, SplitKind::IdCali, SplitKind::IdTrain])?;
    if dump.records.iter().all(|r| r.ground_truth.is_none()) {
        return Err(Error::EmptyInput("ground truth"));
    }

    let mut gts: BTreeMap<&str, BTreeMap<&str, Vec<BoundingBox>>> = BTreeMap::new();
    let mut preds: BTreeMap<&str, Vec<Pred<'_>>> = BTreeMap::new();
    for rec in &dump.records {
        for g in rec.gt().iter().filter(|g| !g.is_ood) {
            gts.entry(g.class_name.as_str())
                .or_default()
                .entry(rec.image_id.as_str())
                .or_default()
                .push(g.bbox);
        }
        for (i, d) in rec.detections.iter().enumerate() {
            preds.entry(d.class_name.as_str()).or_default().push(Pred {
                image: &rec.image_id,
                index: i,
                confidence: d.confidence,
                bbox: d.bbox,
            });
        }
    }

    let empty = BTreeMap::new();
    let mut per_class = Vec::new();
    let (mut tp_at, mut pred_at, mut total_gt) = (0usize, 0usize, 0usize);
    let classes: std::collections::BTreeSet<&str> = gts.keys().chain(preds.keys()).copied().collect();
    for class in classes {
        let class_gts = gts.get(class).unwrap_or(&empty);
        let n_gt: usize = class_gts.values().map(Vec::len).sum();
        let mut class_preds = preds.remove(class).unwrap_or_default();
        let tp = match_class(&mut class_preds, class_gts, iou_threshold);
        // greedy matching is prefix-consistent, so the thresholded matches
        // are the leading block of the full ranking
        let above = class_preds.iter().take_while(|p| p.confidence >= conf_threshold).count();
        tp_at += tp[..above].iter().filter(|t| **t).count();
        pred_at += above;
        total_gt += n_gt;
        if n_gt > 0 {
            per_class.push(ClassAp {
                class_name: class.to_string(),
                ap: all_point_ap(&tp, n_gt),
                n_gt,
                n_pred: class_preds.len(),
            });
        }
    }

    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    let precision = if pred_at == 0 { 0.0 } else { tp_at as f64 / pred_at as f64 };
    let recall = if total_gt == 0 { 0.0 } else { tp_at as f64 / total_gt as f64 };
    let f_score = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(DetectionMetrics {
        map,
        precision,
        recall,
        f_score,
        iou_threshold,
        conf_threshold,
        per_class,
        notes: vec!["accuracy is not defined for detection and is not reported".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::{Detection, DumpHeader, GroundTruthObject, ImageRecord};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    fn gt(b: BoundingBox, name: &str) -> GroundTruthObject {
        GroundTruthObject { bbox: b, class_name: name.into(), is_ood: false }
    }

    fn dump(records: Vec<ImageRecord>) -> Dump {
        Dump { header: DumpHeader::new(vec!["car".into(), "person".into()], SplitKind::IdTest), records }
    }

    #[test]
    fn ap_hand_trace() {
        // P = [1, 0.5], R = [0.5, 0.5] -> AP = 0.5
        assert_eq!(all_point_ap(&[true, false], 2), 0.5);
        assert_eq!(all_point_ap(&[false, true], 1), 0.5);
        assert_eq!(all_point_ap(&[], 3), 0.0);
    }

    #[test]
    fn one_tp_one_fp_two_gt() {
        let mut r = ImageRecord::new("a", 100, 100);
        r.ground_truth = Some(vec![gt(bb(0.0, 0.0, 10.0, 10.0), "car"), gt(bb(50.0, 50.0, 60.0, 60.0), "car")]);
        // IoU 0.6 with the first GT: inter 60, union 100
        r.detections = vec![
            Detection::new(bb(0.0, 0.0, 10.0, 6.0), 0, "car", 0.9),
            Detection::new(bb(80.0, 80.0, 90.0, 90.0), 0, "car", 0.8),
        ];
        let m = detection_metrics(&dump(vec![r]), 0.5, 0.25).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn no_predictions() {
        let mut r = ImageRecord::new("a", 100, 100);
        r.ground_truth = Some(vec![gt(bb(0.0, 0.0, 10.0, 10.0), "car")]);
        let m = detection_metrics(&dump(vec![r]), 0.5, 0.25).unwrap();
        assert_eq!((m.map, m.precision, m.recall, m.f_score), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let mut r = ImageRecord::new("a", 100, 100);
        let b = bb(0.0, 0.0, 10.0, 10.0);
        r.ground_truth = Some(vec![gt(b, "car")]);
        r.detections = vec![Detection::new(b, 0, "car", 0.9), Detection::new(b, 0, "car", 0.7)];
        let m = detection_metrics(&dump(vec![r]), 0.5, 0.25).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.precision, 0.5);
    }

    #[test]
    fn wrong_class_does_not_match_and_classes_without_gt_are_excluded() {
        let mut r = ImageRecord::new("a", 100, 100);
        let b = bb(0.0, 0.0, 10.0, 10.0);
        r.ground_truth = Some(vec![gt(b, "car")]);
        r.detections = vec![Detection::new(b, 1, "person", 0.9)];
        let m = detection_metrics(&dump(vec![r]), 0.5, 0.25).unwrap();
        assert_eq!(m.per_class.len(), 1);
        assert_eq!(m.map, 0.0);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        assert!(matches!(
            detection_metrics(&dump(vec![ImageRecord::new("a", 10, 10)]), 0.5, 0.25),
            Err(Error::EmptyInput(_))
        ));
    }
}
