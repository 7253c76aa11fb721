//! Dataset curation: rejects candidate images containing ID content,
//! prepares fine-tuning manifests that treat proximal OoD images as
//! background, and ranks proxy categories by similarity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::class_map::ClassMap;
use crate::dump::{Detection, Dump, GroundTruthObject, SplitKind};
use crate::error::{Error, Result};
use crate::geometry::nms_indices;

pub const DEFAULT_CURATION_CONF: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const UNCATEGORIZED: &str = "uncategorized";

fn default_conf() -> f64 {
    DEFAULT_CURATION_CONF
}
fn default_nms() -> f64 {
    DEFAULT_NMS_IOU
}
fn yes() -> bool {
    true
}

/// Curation settings, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub id_class_list: Vec<String>,
    /// Auxiliary-vocabulary name -> ID class; ID names map to themselves.
    #[serde(default)]
    pub class_map: BTreeMap<String, String>,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default = "default_nms")]
    pub nms_iou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_category_quota: Option<usize>,
    /// Also reject images whose annotations contain an ID class. Vacuous
    /// for unannotated sources.
    #[serde(default = "yes")]
    pub require_no_gt_id: bool,
    #[serde(default = "yes")]
    pub class_aware_nms: bool,
    /// Visit candidates in a seeded random order when filling quotas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl CurationConfig {
    pub fn new(id_class_list: Vec<String>) -> Self {
        CurationConfig {
            id_class_list,
            class_map: BTreeMap::new(),
            conf_threshold: DEFAULT_CURATION_CONF,
            nms_iou: DEFAULT_NMS_IOU,
            per_category_quota: None,
            require_no_gt_id: true,
            class_aware_nms: true,
            shuffle_seed: None,
        }
    }

    pub fn validate(&self) -> Result<ClassMap> {
        for (name, v) in [("conf_threshold", self.conf_threshold), ("nms_iou", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        if self.id_class_list.is_empty() {
            return Err(Error::EmptyInput("id_class_list"));
        }
        ClassMap::new(&self.id_class_list, &self.class_map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    IdDetection {
        index: usize,
        mapped_class: String,
        detection: Detection,
    },
    IdAnnotation {
        index: usize,
        mapped_class: String,
        object: GroundTruthObject,
    },
    QuotaExceeded {
        category: String,
        quota: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedEntry {
    pub image_id: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedEntry {
    pub image_id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurationOutcome {
    /// In candidate-dump order.
    pub retained: Vec<RetainedEntry>,
    pub rejected: Vec<RejectedEntry>,
}

/// Survivors of threshold + NMS whose class maps into the ID vocabulary.
fn id_survivors<'a>(aux: &'a [Detection], cfg: &CurationConfig, map: &ClassMap) -> Vec<(usize, &'a Detection, String)> {
    let idx: Vec<usize> = (0..aux.len()).filter(|&i| aux[i].confidence >= cfg.conf_threshold).collect();
    let boxes: Vec<_> = idx.iter().map(|&i| aux[i].bbox).collect();
    let scores: Vec<f64> = idx.iter().map(|&i| aux[i].confidence).collect();
    // class-aware NMS groups by the detector's own label
    let mut labels: HashMap<String, usize> = HashMap::new();
    let classes: Vec<usize> = idx
        .iter()
        .map(|&i| {
            let n = labels.len();
            *labels.entry(aux[i].class_name.to_lowercase()).or_insert(n)
        })
        .collect();
    let kept = nms_indices(&boxes, &scores, cfg.class_aware_nms.then_some(classes.as_slice()), cfg.nms_iou);
    let mut out: Vec<(usize, &Detection, String)> = kept
        .into_iter()
        .map(|k| idx[k])
        .filter_map(|i| map.resolve(&aux[i].class_name).map(|m| (i, &aux[i], m.to_string())))
        .collect();
    out.sort_by_key(|(i, _, _)| *i);
    out
}

pub fn curate_dataset(candidates: &Dump, config: &CurationConfig) -> Result<CurationOutcome> {
    candidates.expect_split(&[SplitKind::Candidate])?;
    let map = config.validate()?;

    // per-image content decision, independent of quotas
    let mut decisions: Vec<Option<RejectReason>> = Vec::with_capacity(candidates.records.len());
    for rec in &candidates.records {
        let aux = rec.aux_detections.as_deref().ok_or_else(|| Error::MissingRecordField {
            image_id: rec.image_id.clone(),
            field: "aux_detections",
        })?;
        let mut reason = id_survivors(aux, config, &map)
            .into_iter()
            .next()
            .map(|(index, det, mapped_class)| RejectReason::IdDetection { index, mapped_class, detection: det.clone() });
        if reason.is_none() && config.require_no_gt_id {
            reason = rec
                .gt()
                .iter()
                .enumerate()
                .find_map(|(index, g)| {
                    map.resolve(&g.class_name).map(|m| RejectReason::IdAnnotation {
                        index,
                        mapped_class: m.to_string(),
                        object: g.clone(),
                    })
                });
        }
        decisions.push(reason);
    }

    let category_of = |i: usize| -> String {
        let rec = &candidates.records[i];
        rec.category
            .clone()
            .or_else(|| rec.gt().first().map(|g| g.class_name.clone()))
            .unwrap_or_else(|| UNCATEGORIZED.to_string())
    };

    if let Some(quota) = config.per_category_quota {
        let mut order: Vec<usize> = (0..candidates.records.len()).collect();
        if let Some(seed) = config.shuffle_seed {
            order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        }
        let mut filled: HashMap<String, usize> = HashMap::new();
        for i in order {
            if decisions[i].is_some() {
                continue;
            }
            let category = category_of(i);
            let n = filled.entry(category.clone()).or_insert(0);
            if *n >= quota {
                decisions[i] = Some(RejectReason::QuotaExceeded { category, quota });
            } else {
                *n += 1;
            }
        }
    }

    let mut outcome = CurationOutcome::default();
    for (i, decision) in decisions.into_iter().enumerate() {
        let image_id = candidates.records[i].image_id.clone();
        match decision {
            None => outcome.retained.push(RetainedEntry { image_id, category: category_of(i) }),
            Some(reason) => outcome.rejected.push(RejectedEntry { image_id, reason }),
        }
    }
    Ok(outcome)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    IdTrain,
    Proximal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub source: EntrySource,
    /// Empty for proximal images: every box they produce is background.
    pub labels: Vec<GroundTruthObject>,
}

/// Training manifest for `L_train + lambda * L_proximal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub schema_version: String,
    pub lambda: f64,
    pub entries: Vec<ManifestEntry>,
}

impl FinetuneManifest {
    pub fn count(&self, source: EntrySource) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }
}

/// Merges the labeled ID training set with retained proximal images,
/// ordered by image id.
pub fn prep_finetune_manifest(id_train: &Dump, proximal: &[RetainedEntry], lambda: f64) -> Result<FinetuneManifest> {
    id_train.expect_split(&[SplitKind::IdTrain])?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be > 0")));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(id_train.records.len() + proximal.len());
    for rec in &id_train.records {
        if !seen.insert(rec.image_id.as_str()) {
            return Err(Error::IdCollision(rec.image_id.clone()));
        }
        entries.push(ManifestEntry {
            image_id: rec.image_id.clone(),
            source: EntrySource::IdTrain,
            labels: rec.gt().to_vec(),
        });
    }
    for p in proximal {
        if !seen.insert(p.image_id.as_str()) {
            return Err(Error::IdCollision(p.image_id.clone()));
        }
        entries.push(ManifestEntry { image_id: p.image_id.clone(), source: EntrySource::Proximal, labels: Vec::new() });
    }
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(FinetuneManifest { schema_version: crate::dump::SCHEMA_VERSION.into(), lambda, entries })
}

/// Similarity scores between ID categories and candidate proxy categories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityTable {
    rows: Vec<(String, String, f64)>,
}

impl SimilarityTable {
    pub fn new(rows: Vec<(String, String, f64)>) -> Self {
        SimilarityTable { rows }
    }

    /// CSV with header `id_category,candidate,similarity`.
    pub fn from_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Schema { line: i + 1, message: "expected id_category,candidate,similarity".into() };
            if cols.len() != 3 {
                return Err(bad());
            }
            rows.push((cols[0].to_string(), cols[1].to_string(), cols[2].parse().map_err(|_| bad())?));
        }
        Ok(SimilarityTable { rows })
    }

    fn best_for(&self, candidate: &str, id_categories: &[String]) -> Option<(f64, &str)> {
        self.rows
            .iter()
            .filter(|(id, c, _)| c.eq_ignore_ascii_case(candidate) && id_categories.iter().any(|x| x.eq_ignore_ascii_case(id)))
            .map(|(id, _, s)| (*s, id.as_str()))
            .fold(None, |best: Option<(f64, &str)>, cur| match best {
                Some(b) if b.0 >= cur.0 => Some(b),
                _ => Some(cur),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    Top(usize),
    Bottom(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCategory {
    pub name: String,
    pub similarity: f64,
    pub closest_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// The candidate is, or maps onto, an ID category.
    InIdClasses { mapped_class: String },
    NoSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProximalSelection {
    /// All eligible candidates, most similar first.
    pub ranked: Vec<RankedCategory>,
    pub selected: Vec<RankedCategory>,
    pub excluded: Vec<(String, ExclusionReason)>,
}

pub fn select_proximal_categories(
    id_categories: &[String],
    candidates: &[String],
    table: &SimilarityTable,
    class_map: &ClassMap,
    selection: Selection,
) -> Result<ProximalSelection> {
    if id_categories.is_empty() {
        return Err(Error::EmptyInput("id categories"));
    }
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for cand in candidates {
        if let Some(m) = class_map
            .resolve(cand)
            .map(str::to_string)
            .or_else(|| id_categories.iter().find(|i| i.eq_ignore_ascii_case(cand)).cloned())
        {
            excluded.push((cand.clone(), ExclusionReason::InIdClasses { mapped_class: m }));
            continue;
        }
        match table.best_for(cand, id_categories) {
            Some((similarity, id)) => ranked.push(RankedCategory { name: cand.clone(), similarity, closest_id: id.to_string() }),
            None => excluded.push((cand.clone(), ExclusionReason::NoSimilarity)),
        }
    }
    ranked.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    let selected = match selection {
        Selection::All => ranked.clone(),
        Selection::Top(n) => ranked.iter().take(n).cloned().collect(),
        Selection::Bottom(n) => ranked.iter().skip(ranked.len().saturating_sub(n)).cloned().collect(),
    };
    Ok(ProximalSelection { ranked, selected, excluded })
}
