//! Synthetic verification: Monte Carlo for the expected hallucination
//! count, the threshold shift caused by unlabeled OoD contamination of the
//! calibration set, and generation of synthetic dumps.
//!
//! All randomness comes from ChaCha20 seeded with `seed_from_u64(seed)`;
//! independent purposes and trials use distinct stream ids.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_threshold, DEFAULT_TARGET_TPR};
use crate::dump::{Detection, Dump, DumpHeader, GroundTruthObject, ImageRecord, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::fpr_at;
use crate::filters::{fit_filter, score_dump, FilterMethod, FilterSpec};
use crate::geometry::BoundingBox;

pub const CANVAS: u32 = 1000;

const STREAM_ID_POOL: u64 = 1;
const STREAM_CONTAMINATION: u64 = 2;
const STREAM_OOD_EVAL: u64 = 3;
const STREAM_DUMP_BASE: u64 = 16;

fn unit_weight() -> f64 {
    1.0
}
fn default_dets_per_image() -> usize {
    4
}
fn default_alpha() -> f64 {
    1.0
}

/// Isotropic Gaussian feature cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Relative mixture weight; ID weights are normalized by their sum.
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

impl Cluster {
    pub fn new(mean: Vec<f64>, sigma: f64, weight: f64) -> Self {
        Cluster { mean, sigma, weight }
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub id_clusters: Vec<Cluster>,
    pub ood_cluster: Cluster,
    pub n_cali: usize,
    pub n_ood: usize,
    /// Probability that a present object is detected.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Fraction of calibration detections drawn from the OoD cluster.
    #[serde(default)]
    pub contamination_rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default = "default_dets_per_image")]
    pub detections_per_image: usize,
    /// Probability that a non-ID-split image hides one ID object, reported
    /// only in `aux_detections`.
    #[serde(default)]
    pub aux_id_rate: f64,
}

impl SynthConfig {
    /// One ID cluster at the origin and an OoD cluster `separation` sigmas
    /// away along the first axis.
    pub fn two_cluster(feature_dim: usize, sigma: f64, separation: f64, n_cali: usize, n_ood: usize, seed: u64) -> Self {
        let mut ood = vec![0.0; feature_dim];
        if let Some(x) = ood.first_mut() {
            *x = separation * sigma;
        }
        SynthConfig {
            feature_dim,
            id_clusters: vec![Cluster::new(vec![0.0; feature_dim], sigma, 1.0)],
            ood_cluster: Cluster::new(ood, sigma, 1.0),
            n_cali,
            n_ood,
            alpha: 1.0,
            contamination_rate: 0.0,
            seed,
            class_names: None,
            detections_per_image: default_dets_per_image(),
            aux_id_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.id_clusters.is_empty() {
            return Err(Error::EmptyInput("id_clusters"));
        }
        for c in self.id_clusters.iter().chain(std::iter::once(&self.ood_cluster)) {
            if c.mean.len() != self.feature_dim {
                return Err(Error::DimensionMismatch { expected: self.feature_dim, found: c.mean.len() });
            }
            if !(c.sigma >= 0.0 && c.sigma.is_finite()) {
                return bad(format!("sigma {} must be finite and non-negative", c.sigma));
            }
        }
        let total: f64 = self.id_clusters.iter().map(|c| c.weight).sum();
        if self.id_clusters.iter().any(|c| !(c.weight >= 0.0)) || !(total > 0.0 && total.is_finite()) {
            return bad(format!("id cluster weights must be non-negative with a positive sum, got {total}"));
        }
        for (name, r) in [
            ("alpha", self.alpha),
            ("contamination_rate", self.contamination_rate),
            ("aux_id_rate", self.aux_id_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} must lie in [0, 1]"));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.id_clusters.len() {
                return bad(format!("{} class names for {} id clusters", names.len(), self.id_clusters.len()));
            }
        }
        if self.detections_per_image == 0 {
            return bad("detections_per_image must be positive".into());
        }
        Ok(())
    }

    pub fn class_list(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.id_clusters.len()).map(|i| format!("class_{i}")).collect())
    }

    fn pick_id_cluster(&self, rng: &mut ChaCha20Rng) -> usize {
        let u = rng.random::<f64>() * self.weight_total();
        let mut acc = 0.0;
        for (i, c) in self.id_clusters.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        self.id_clusters.len() - 1
    }

    fn weight_total(&self) -> f64 {
        self.id_clusters.iter().map(|c| c.weight).sum()
    }

    fn id_centroid(&self) -> Vec<f64> {
        let total = self.weight_total();
        let mut c = vec![0.0; self.feature_dim];
        for cl in &self.id_clusters {
            for (a, m) in c.iter_mut().zip(&cl.mean) {
                *a += cl.weight / total * m;
            }
        }
        c
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma1Result {
    pub alpha: f64,
    pub g_count: usize,
    pub trials: usize,
    pub seed: u64,
    pub mean: f64,
    pub std_error: f64,
    /// `alpha * g_count`.
    pub expected: f64,
}

/// Each trial draws one Bernoulli(alpha) per ID object in an OoD-labeled
/// image and counts successes.
pub fn simulate_lemma1(alpha: f64, g_count: usize, trials: usize, seed: u64) -> Result<Lemma1Result> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} must lie in [0, 1]")));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let counts: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, t);
            (0..g_count).filter(|_| rng.random::<f64>() < alpha).count() as u64
        })
        .collect();
    let n = trials as f64;
    let sum: u64 = counts.iter().sum();
    let sum_sq: u64 = counts.iter().map(|c| c * c).sum();
    let mean = sum as f64 / n;
    let std_error = if trials > 1 {
        let var = (sum_sq as f64 - n * mean * mean) / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(Lemma1Result { alpha, g_count, trials, seed, mean, std_error, expected: alpha * g_count as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauShiftRow {
    pub contamination_rate: f64,
    pub n_contaminated: usize,
    pub tau: f64,
    pub fpr95: f64,
    pub retention: f64,
}

fn features_dump(class_list: &[String], split: SplitKind, rows: &[Vec<f64>]) -> Dump {
    let mut header = DumpHeader::new(class_list.to_vec(), split);
    header.feature_dim = rows.first().map(Vec::len);
    let mut dump = Dump::new(header);
    let mut rec = ImageRecord::new(format!("{split}-features"), CANVAS, CANVAS);
    rec.detections = rows
        .iter()
        .map(|f| {
            let mut d = Detection::new(BoundingBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0 }, 0, class_list[0].clone(), 1.0);
            d.feature = Some(f.iter().map(|&x| x as f32).collect());
            d
        })
        .collect();
    dump.records.push(rec);
    dump
}

/// Calibrates centroid-L2 on progressively contaminated calibration sets.
///
/// Calibration rate `r` replaces the first `round(r * n_cali)` ID draws
/// with OoD draws; all rates share the same underlying samples.
pub fn simulate_tau_shift(config: &SynthConfig, rates: &[f64]) -> Result<Vec<TauShiftRow>> {
    config.validate()?;
    if config.id_clusters.iter().chain(std::iter::once(&config.ood_cluster)).all(|c| c.sigma == 0.0) {
        return Err(Error::Degenerate("every cluster has sigma = 0".into()));
    }
    if config.n_cali == 0 || config.n_ood == 0 {
        return Err(Error::InsufficientData("n_cali and n_ood must be positive".into()));
    }
    let centroid = config.id_centroid();
    let dist = |m: &[f64]| crate::numeric::euclidean(m, &centroid);
    let ood_dist = dist(&config.ood_cluster.mean);
    if let Some(c) = config.id_clusters.iter().find(|c| dist(&c.mean) >= ood_dist) {
        return Err(Error::InvalidParameter(format!(
            "ood cluster ({ood_dist}) must be farther from the id centroid than every id cluster ({})",
            dist(&c.mean)
        )));
    }
    let mut rates = rates.to_vec();
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidParameter(format!("rate {r} must lie in [0, 1]")));
    }
    rates.sort_by(|a, b| a.total_cmp(b));
    rates.dedup();

    let mut id_rng = rng_for(config.seed, STREAM_ID_POOL);
    let id_pool: Vec<Vec<f64>> = (0..config.n_cali)
        .map(|_| {
            let c = config.pick_id_cluster(&mut id_rng);
            config.id_clusters[c].sample(&mut id_rng)
        })
        .collect();
    let mut c_rng = rng_for(config.seed, STREAM_CONTAMINATION);
    let contamination: Vec<Vec<f64>> = (0..config.n_cali).map(|_| config.ood_cluster.sample(&mut c_rng)).collect();
    let mut e_rng = rng_for(config.seed, STREAM_OOD_EVAL);
    let ood_eval: Vec<Vec<f64>> = (0..config.n_ood).map(|_| config.ood_cluster.sample(&mut e_rng)).collect();

    let classes = config.class_list();
    let eval_dump = features_dump(&classes, SplitKind::OodTest, &ood_eval);
    rates
        .into_iter()
        .map(|rate| {
            let m = ((rate * config.n_cali as f64).round() as usize).min(config.n_cali);
            let cali: Vec<Vec<f64>> = contamination[..m].iter().chain(&id_pool[m..]).cloned().collect();
            let cali_dump = features_dump(&classes, SplitKind::IdCali, &cali);
            let model = fit_filter::<f64>(FilterSpec::new(FilterMethod::CentroidL2), &cali_dump, None)?;
            let scores: Vec<f64> = score_dump(&model, &cali_dump, 0.0)?.into_iter().map(|s| s.score).collect();
            let calib = calibrate_threshold(&scores, DEFAULT_TARGET_TPR)?;
            let ood: Vec<f64> = score_dump(&model, &eval_dump, 0.0)?.into_iter().map(|s| s.score).collect();
            Ok(TauShiftRow {
                contamination_rate: rate,
                n_contaminated: m,
                tau: calib.tau,
                fpr95: fpr_at(&calib.tau, &ood),
                retention: calib.retention,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "seed,contamination_rate,n_contaminated,tau,fpr95,retention";

pub fn write_sweep_csv<W: Write>(rows: &[TauShiftRow], seed: u64, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{seed},{},{},{},{},{}", r.contamination_rate, r.n_contaminated, r.tau, r.fpr95, r.retention)?;
    }
    Ok(())
}

fn split_stream(split: SplitKind) -> u64 {
    STREAM_DUMP_BASE
        + match split {
            SplitKind::IdTrain => 0,
            SplitKind::IdCali => 1,
            SplitKind::IdTest => 2,
            SplitKind::OodTest => 3,
            SplitKind::Candidate => 4,
        }
}

fn random_box(rng: &mut ChaCha20Rng) -> BoundingBox {
    let w = rng.random_range(20.0..120.0);
    let h = rng.random_range(20.0..120.0);
    let x1 = rng.random_range(0.0..(CANVAS as f64 - w));
    let y1 = rng.random_range(0.0..(CANVAS as f64 - h));
    BoundingBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

/// Synthetic dump of the given split.
///
/// ID splits hold `n_cali` objects drawn from the ID mixture, a
/// `contamination_rate` fraction of which are replaced by unlabeled OoD
/// draws; `ood_test` and `candidate` splits hold `n_ood` OoD draws. Each
/// labeled object is detected with probability `alpha`.
pub fn generate_dump(config: &SynthConfig, split: SplitKind) -> Result<Dump> {
    config.validate()?;
    let classes = config.class_list();
    let mut rng = rng_for(config.seed, split_stream(split));
    let id_split = matches!(split, SplitKind::IdTrain | SplitKind::IdCali | SplitKind::IdTest);
    let n = if id_split { config.n_cali } else { config.n_ood };
    let n_contaminated = if id_split { (config.contamination_rate * n as f64).round() as usize } else { n };

    let mut header = DumpHeader::new(classes.clone(), split);
    header.feature_dim = Some(config.feature_dim);
    header.feature_layer = Some("synthetic".into());
    header.metadata.insert("generator".into(), "ood-audit simulator".into());
    header.metadata.insert("seed".into(), config.seed.into());
    header.metadata.insert("prng".into(), "chacha20".into());
    let mut dump = Dump::new(header);

    let per_image = config.detections_per_image;
    for img in 0..n.div_ceil(per_image) {
        let mut rec = ImageRecord::new(format!("{split}-{img:06}"), CANVAS, CANVAS);
        let mut gt = Vec::new();
        for j in (img * per_image)..((img + 1) * per_image).min(n) {
            let bbox = random_box(&mut rng);
            let (feature, cluster) = if j < n_contaminated {
                (config.ood_cluster.sample(&mut rng), None)
            } else {
                let c = config.pick_id_cluster(&mut rng);
                (config.id_clusters[c].sample(&mut rng), Some(c))
            };
            let logits: Vec<f64> = config
                .id_clusters
                .iter()
                .map(|c| -c.mean.iter().zip(&feature).map(|(m, x)| (m - x) * (m - x)).sum::<f64>())
                .collect();
            let predicted = logits
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
            if id_split {
                gt.push(GroundTruthObject {
                    bbox,
                    class_name: classes[cluster.unwrap_or(predicted)].clone(),
                    is_ood: cluster.is_none(),
                });
            }
            if id_split && cluster.is_some() && j >= n_contaminated && rng.random::<f64>() >= config.alpha {
                continue;
            }
            let mut det = Detection::new(bbox, predicted, classes[predicted].clone(), rng.random_range(0.3..1.0));
            det.bg_logit = Some(logits[predicted] - 1.0);
            det.logits = Some(logits);
            det.feature = Some(feature.iter().map(|&x| x as f32).collect());
            rec.detections.push(det);
        }
        if id_split {
            rec.ground_truth = Some(gt);
        } else {
            let mut aux = Vec::new();
            if config.aux_id_rate > 0.0 && rng.random::<f64>() < config.aux_id_rate {
                let c = config.pick_id_cluster(&mut rng);
                aux.push(Detection::new(random_box(&mut rng), c, classes[c].clone(), rng.random_range(0.5..1.0)));
            }
            rec.aux_detections = Some(aux);
        }
        dump.records.push(rec);
    }
    Ok(dump)
}
