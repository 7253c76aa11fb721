//! Score files: CSV with a `score` column (optionally `image_id` and
//! `detection`), or bare numbers one per line.

use std::io::Write;
use std::path::Path;

use ood_audit::audit::OutlierMask;
use ood_audit::{DetectionScore, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub image_id: Option<String>,
    pub detection: Option<usize>,
    pub score: f64,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let bad = |line: usize, message: String| Error::Schema { line, message: format!("{}: {message}", path.display()) };

    if first.trim().parse::<f64>().is_ok() {
        return text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let score = l.trim().parse().map_err(|_| bad(i + 1, format!("`{l}` is not a number")))?;
                Ok(ScoreRow { image_id: None, detection: None, score })
            })
            .collect();
    }

    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let score_col = col("score").ok_or_else(|| bad(1, "missing `score` column".into()))?;
    let (id_col, det_col) = (col("image_id"), col("detection"));
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let score = field(score_col).parse().map_err(|_| bad(line, "bad score".into()))?;
        let detection = match det_col {
            Some(c) => Some(field(c).parse().map_err(|_| bad(line, "bad detection index".into()))?),
            None => None,
        };
        out.push(ScoreRow { image_id: id_col.map(|c| field(c).to_string()), detection, score });
    }
    Ok(out)
}

/// Outlier flags aligned with `rows`; rows without a locator are never masked.
pub fn mask_rows(rows: &[ScoreRow], mask: &OutlierMask) -> Vec<bool> {
    rows.iter()
        .map(|r| match (&r.image_id, r.detection) {
            (Some(id), Some(d)) => mask.contains(id, d),
            _ => false,
        })
        .collect()
}

pub fn write_scores<W: Write>(scores: &[DetectionScore], mut out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["image_id", "detection", "confidence", "score"]).map_err(csv_err)?;
    for s in scores {
        w.write_record([s.image_id.clone(), s.detection.to_string(), s.confidence.to_string(), s.score.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
