//! Line-delimited JSON interchange format for detector outputs.
//!
//! A dump is one header object on the first line followed by one
//! [`ImageRecord`] per line. Loading only rejects malformed syntax or
//! records that do not fit the schema; semantic problems are reported by
//! [`validate_dump`] so that contaminated benchmarks can still be audited.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const SCHEMA_VERSION: &str = "1";

/// Pixel tolerance when checking boxes against the image extent.
const EXTENT_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    IdTrain,
    IdCali,
    IdTest,
    OodTest,
    Candidate,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::IdTrain => "id_train",
            SplitKind::IdCali => "id_cali",
            SplitKind::IdTest => "id_test",
            SplitKind::OodTest => "ood_test",
            SplitKind::Candidate => "candidate",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id_train" => Ok(SplitKind::IdTrain),
            "id_cali" => Ok(SplitKind::IdCali),
            "id_test" => Ok(SplitKind::IdTest),
            "ood_test" => Ok(SplitKind::OodTest),
            "candidate" => Ok(SplitKind::Candidate),
            other => Err(Error::InvalidParameter(format!("unknown split kind `{other}`"))),
        }
    }
}

/// Linear classification head (`|class_list| x feature_dim` weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub schema_version: String,
    pub class_list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_layer: Option<String>,
    pub split_kind: SplitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<LinearHead>,
    /// Free-form provenance (exporter versions, prompts, simulator seed).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DumpHeader {
    pub fn new(class_list: Vec<String>, split_kind: SplitKind) -> Self {
        DumpHeader {
            schema_version: SCHEMA_VERSION.to_string(),
            class_list,
            feature_dim: None,
            feature_layer: None,
            split_kind,
            head: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_list.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub class_name: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bg_logit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: usize, class_name: impl Into<String>, confidence: f64) -> Self {
        Detection {
            bbox,
            class_id,
            class_name: class_name.into(),
            confidence,
            logits: None,
            bg_logit: None,
            feature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_name: String,
    #[serde(default)]
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthObject>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_detections: Option<Vec<Detection>>,
    /// Source category of a candidate image, used for curation quotas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            width,
            height,
            detections: Vec::new(),
            ground_truth: None,
            aux_detections: None,
            category: None,
        }
    }

    pub fn gt(&self) -> &[GroundTruthObject] {
        self.ground_truth.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub header: DumpHeader,
    pub records: Vec<ImageRecord>,
}

impl Dump {
    pub fn new(header: DumpHeader) -> Self {
        Dump { header, records: Vec::new() }
    }

    pub fn split_kind(&self) -> SplitKind {
        self.header.split_kind
    }

    pub fn expect_split(&self, allowed: &[SplitKind]) -> Result<()> {
        if allowed.contains(&self.header.split_kind) {
            Ok(())
        } else {
            Err(Error::SplitMismatch {
                expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or "),
                found: self.header.split_kind,
            })
        }
    }

    pub fn detections(&self) -> impl Iterator<Item = (&ImageRecord, usize, &Detection)> {
        self.records
            .iter()
            .flat_map(|r| r.detections.iter().enumerate().map(move |(i, d)| (r, i, d)))
    }

    pub fn num_detections(&self) -> usize {
        self.records.iter().map(|r| r.detections.len()).sum()
    }
}

/// Streaming reader: parses the header eagerly and records lazily.
pub struct DumpReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    header: DumpHeader,
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut line_no = 0;
        loop {
            line_no += 1;
            let line = match lines.next() {
                Some(l) => l?,
                None => {
                    return Err(Error::Schema {
                        line: line_no,
                        message: "missing header line".into(),
                    })
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let header: DumpHeader = parse_line(&line, line_no)?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(Error::Schema {
                    line: line_no,
                    message: format!("unsupported schema_version `{}`", header.schema_version),
                });
            }
            return Ok(DumpReader { lines, line_no, header });
        }
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn into_dump(self) -> Result<Dump> {
        let header = self.header.clone();
        let records = self.collect::<Result<Vec<_>>>()?;
        Ok(Dump { header, records })
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_line(&line, self.line_no));
        }
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => Error::Schema { line: line_no, message: e.to_string() },
            _ => Error::Syntax { line: line_no, message: e.to_string() },
        }
    })
}

pub fn read_dump<R: BufRead>(reader: R) -> Result<Dump> {
    DumpReader::new(reader)?.into_dump()
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<Dump> {
    read_dump(BufReader::new(File::open(path.as_ref()).map_err(Error::file(path.as_ref()))?))
}

pub fn write_dump<W: Write>(dump: &Dump, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, &dump.header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for record in &dump.records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_dump(path: impl AsRef<Path>, dump: &Dump) -> Result<()> {
    write_dump(dump, BufWriter::new(File::create(path.as_ref()).map_err(Error::file(path.as_ref()))?))
}

/// One broken invariant, located by record index and image id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// `None` for header-level problems.
    pub record: Option<usize>,
    pub image_id: Option<String>,
    pub detection: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.image_id, self.detection) {
            (Some(id), Some(d)) => write!(f, "image {id} detection {d}: {}", self.message),
            (Some(id), None) => write!(f, "image {id}: {}", self.message),
            _ => write!(f, "header: {}", self.message),
        }
    }
}

pub fn validate_dump(dump: &Dump) -> Vec<Violation> {
    let mut out = Vec::new();
    let header = &dump.header;
    let header_violation = |message: String| Violation {
        record: None,
        image_id: None,
        detection: None,
        message,
    };

    if header.class_list.is_empty() {
        out.push(header_violation("class_list is empty".into()));
    }
    let mut names = HashSet::new();
    for name in &header.class_list {
        if !names.insert(name.as_str()) {
            out.push(header_violation(format!("duplicate class name `{name}`")));
        }
    }
    if let (Some(head), Some(dim)) = (&header.head, header.feature_dim) {
        if head.weight.len() != header.class_list.len() || head.bias.len() != header.class_list.len() {
            out.push(header_violation("head rows do not match class_list".into()));
        }
        if head.weight.iter().any(|row| row.len() != dim) {
            out.push(header_violation("head columns do not match feature_dim".into()));
        }
    }

    let mut seen = HashSet::new();
    for (ri, rec) in dump.records.iter().enumerate() {
        let mut push = |detection: Option<usize>, message: String| {
            out.push(Violation {
                record: Some(ri),
                image_id: Some(rec.image_id.clone()),
                detection,
                message,
            })
        };
        if !seen.insert(rec.image_id.as_str()) {
            push(None, "duplicate image_id".into());
        }
        let check_box = |b: &BoundingBox| -> Option<String> {
            if let Some(v) = b.violation() {
                return Some(v);
            }
            if b.x2 > rec.width as f64 + EXTENT_TOLERANCE || b.y2 > rec.height as f64 + EXTENT_TOLERANCE {
                return Some(format!("box exceeds image extent {}x{}", rec.width, rec.height));
            }
            None
        };

        for (di, det) in rec.detections.iter().enumerate() {
            if let Some(v) = check_box(&det.bbox) {
                push(Some(di), v);
            }
            if !(0.0..=1.0).contains(&det.confidence) {
                push(Some(di), format!("confidence {} outside [0, 1]", det.confidence));
            }
            if det.class_id >= header.class_list.len() {
                push(Some(di), format!("class_id {} outside class_list", det.class_id));
            } else if header.class_list[det.class_id] != det.class_name {
                push(Some(di), format!("class_name `{}` does not match class_id {}", det.class_name, det.class_id));
            }
            if let Some(logits) = &det.logits {
                if logits.len() != header.class_list.len() {
                    push(
                        Some(di),
                        format!("logits length {} != class_list size {}", logits.len(), header.class_list.len()),
                    );
                }
            }
            if let (Some(feat), Some(dim)) = (&det.feature, header.feature_dim) {
                if feat.len() != dim {
                    push(Some(di), format!("feature length {} != feature_dim {dim}", feat.len()));
                }
            }
        }
        for (ai, det) in rec.aux_detections.iter().flatten().enumerate() {
            if let Some(v) = check_box(&det.bbox) {
                push(Some(ai), format!("aux detection: {v}"));
            }
            if !(0.0..=1.0).contains(&det.confidence) {
                push(Some(ai), format!("aux detection: confidence {} outside [0, 1]", det.confidence));
            }
        }
        for gt in rec.gt() {
            if gt.class_name.is_empty() {
                push(None, "ground-truth object with empty class_name".into());
            }
            if let Some(v) = check_box(&gt.bbox) {
                push(None, format!("ground truth: {v}"));
            }
            if header.split_kind == SplitKind::OodTest && !gt.is_ood {
                push(None, format!("OoD-only split contains ID ground truth `{}`", gt.class_name));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> DumpHeader {
        let mut h = DumpHeader::new(vec!["car".into(), "person".into()], SplitKind::IdCali);
        h.feature_dim = Some(16);
        h
    }

    fn det() -> Detection {
        Detection::new(BoundingBox { x1: 1.0, y1: 2.0, x2: 30.0, y2: 40.0 }, 0, "car", 0.9)
    }

    fn round_trip(dump: &Dump) -> Dump {
        let mut buf = Vec::new();
        write_dump(dump, &mut buf).unwrap();
        read_dump(&buf[..]).unwrap()
    }

    #[test]
    fn empty_dump_is_valid() {
        let dump = Dump::new(header());
        let back = round_trip(&dump);
        assert!(back.records.is_empty());
        assert!(validate_dump(&back).is_empty());
    }

    #[test]
    fn logits_length_violation_names_image() {
        let mut dump = Dump::new(header());
        let mut rec = ImageRecord::new("img-7", 100, 100);
        let mut d = det();
        d.logits = Some(vec![0.1, 0.2, 0.3]);
        rec.detections.push(d);
        dump.records.push(rec);
        let v = validate_dump(&dump);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].image_id.as_deref(), Some("img-7"));
        assert!(v[0].message.contains("logits"));
    }

    #[test]
    fn feature_dim_violation() {
        let mut dump = Dump::new(header());
        let mut rec = ImageRecord::new("a", 100, 100);
        let mut d = det();
        d.feature = Some(vec![0.0; 15]);
        rec.detections.push(d);
        dump.records.push(rec);
        let v = validate_dump(&dump);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("feature_dim"));
    }

    #[test]
    fn extent_tolerance_is_one_pixel() {
        let mut dump = Dump::new(header());
        let mut rec = ImageRecord::new("a", 30, 40);
        let mut d = det();
        d.bbox.x2 = 30.9;
        rec.detections.push(d.clone());
        d.bbox.x2 = 31.5;
        rec.detections.push(d);
        dump.records.push(rec);
        let v = validate_dump(&dump);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].detection, Some(1));
    }

    #[test]
    fn duplicate_ids_and_ood_ground_truth_are_reported() {
        let mut h = header();
        h.split_kind = SplitKind::OodTest;
        let mut dump = Dump::new(h);
        let mut rec = ImageRecord::new("a", 100, 100);
        rec.ground_truth = Some(vec![GroundTruthObject {
            bbox: BoundingBox { x1: 0.0, y1: 0.0, x2: 5.0, y2: 5.0 },
            class_name: "car".into(),
            is_ood: false,
        }]);
        dump.records.push(rec.clone());
        dump.records.push(ImageRecord::new("a", 100, 100));
        let v = validate_dump(&dump);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn syntax_error_carries_line_number() {
        let text = "{\"schema_version\":\"1\",\"class_list\":[\"car\"],\"split_kind\":\"id_cali\"}\n\
                    {\"image_id\":\"a\",\"width\":10,\"height\":10}\n\
                    {\"image_id\": oops}\n";
        match read_dump(text.as_bytes()) {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_mismatch_is_distinguished() {
        let text = "{\"schema_version\":\"1\",\"class_list\":[\"car\"],\"split_kind\":\"id_cali\"}\n\
                    {\"image_id\":\"a\",\"width\":\"wide\",\"height\":10}\n";
        assert!(matches!(read_dump(text.as_bytes()), Err(Error::Schema { line: 2, .. })));
        let text = "{\"schema_version\":\"2\",\"class_list\":[\"car\"],\"split_kind\":\"id_cali\"}\n";
        assert!(matches!(read_dump(text.as_bytes()), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn streaming_reader_exposes_header_first() {
        let mut dump = Dump::new(header());
        dump.records.push(ImageRecord::new("a", 10, 10));
        dump.records.push(ImageRecord::new("b", 10, 10));
        let mut buf = Vec::new();
        write_dump(&dump, &mut buf).unwrap();
        let reader = DumpReader::new(&buf[..]).unwrap();
        assert_eq!(reader.header().feature_dim, Some(16));
        let ids: Vec<String> = reader.map(|r| r.unwrap().image_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn box_field_is_named_box() {
        let json = serde_json::to_string(&det()).unwrap();
        assert!(json.starts_with("{\"box\":{\"x1\":1.0"));
    }
}
