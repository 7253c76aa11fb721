use crate::dump::ImageRecord;
use crate::error::{Error, Result};

/// Drops every detection whose background logit beats all class logits.
/// The input record is left untouched.
pub fn apply_background_rule(record: &ImageRecord) -> Result<ImageRecord> {
    let mut kept = Vec::with_capacity(record.detections.len());
    for (i, det) in record.detections.iter().enumerate() {
        let missing = |field| Error::MissingField {
            image_id: record.image_id.clone(),
            detection: i,
            field,
        };
        let bg = det.bg_logit.ok_or_else(|| missing("bg_logit"))?;
        let logits = det.logits.as_ref().ok_or_else(|| missing("logits"))?;
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(bg > top) {
            kept.push(det.clone());
        }
    }
    Ok(ImageRecord { detections: kept, ..record.clone() })
}
