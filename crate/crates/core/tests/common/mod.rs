#![allow(dead_code)]

use ood_audit::{BoundingBox, Detection, Dump, DumpHeader, ImageRecord, SplitKind};

pub fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox { x1, y1, x2, y2 }
}

pub fn feature_det(class_id: usize, f: &[f64]) -> Detection {
    let mut d = Detection::new(bb(0.0, 0.0, 10.0, 10.0), class_id, format!("c{class_id}"), 0.9);
    d.feature = Some(f.iter().map(|&x| x as f32).collect());
    d
}

pub fn logit_det(logits: &[f64]) -> Detection {
    let mut d = Detection::new(bb(0.0, 0.0, 10.0, 10.0), 0, "c0", 0.9);
    d.logits = Some(logits.to_vec());
    d
}

/// One-record dump holding the given detections.
pub fn dump_of(classes: usize, split: SplitKind, dets: Vec<Detection>) -> Dump {
    let names = (0..classes).map(|i| format!("c{i}")).collect();
    let mut d = Dump::new(DumpHeader::new(names, split));
    let mut rec = ImageRecord::new("img", 100, 100);
    rec.detections = dets;
    d.records.push(rec);
    d
}
