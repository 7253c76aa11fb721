//! OoD scoring functions. Every score is oriented so that larger values
//! mean "more OoD-like"; a detection is kept as ID when its score does not
//! exceed the calibrated threshold.

mod background;
pub mod sidecar;
mod spec;

use rayon::prelude::*;

pub use background::apply_background_rule;
pub use spec::{FilterMethod, FilterSpec, DEFAULT_KNN_K, DEFAULT_MDS_SHRINKAGE, DEFAULT_SCALE_PERCENTILE};

use crate::dump::{Detection, Dump, ImageRecord, LinearHead, SplitKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::numeric::{self, euclidean, l2_norm, logsumexp, softmax};
use crate::Scalar;

/// Fitted state of one scoring method.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterModel<T> {
    spec: FilterSpec,
    dim: usize,
    state: FilterState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum FilterState<T> {
    /// msp / mls / ebo read logits only.
    Logits,
    Centroid(Vec<T>),
    /// Row-major bank of unit-norm ID features.
    Knn { bank: Vec<T>, rows: usize },
    Mds {
        /// `(class_id, mean)`; a pooled model stores one entry.
        means: Vec<(usize, Vec<T>)>,
        precision: Vec<T>,
    },
    Scale { weight: Vec<T>, bias: Vec<T> },
}

impl<T: Scalar> FilterModel<T> {
    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn method(&self) -> FilterMethod {
        self.spec.method
    }

    /// Feature dimension the model expects; 0 for logit-only methods.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self) -> Option<&[T]> {
        match &self.state {
            FilterState::Centroid(c) => Some(c),
            _ => None,
        }
    }

    pub fn bank_rows(&self) -> Option<impl Iterator<Item = &[T]>> {
        match &self.state {
            FilterState::Knn { bank, .. } => Some(bank.chunks(self.dim.max(1))),
            _ => None,
        }
    }

    /// Effective neighbour rank: `k` capped at the bank size.
    pub fn effective_k(&self) -> Option<usize> {
        match &self.state {
            FilterState::Knn { rows, .. } => Some(self.spec.k.min(*rows)),
            _ => None,
        }
    }

    pub fn class_means(&self) -> Option<&[(usize, Vec<T>)]> {
        match &self.state {
            FilterState::Mds { means, .. } => Some(means),
            _ => None,
        }
    }

    /// Row-major inverse of the shared covariance.
    pub fn precision(&self) -> Option<&[T]> {
        match &self.state {
            FilterState::Mds { precision, .. } => Some(precision),
            _ => None,
        }
    }

    pub(crate) fn from_parts(spec: FilterSpec, dim: usize, state: FilterState<T>) -> Result<Self> {
        spec.validate()?;
        let model = FilterModel { spec, dim, state };
        model.check()?;
        Ok(model)
    }

    pub(crate) fn state(&self) -> &FilterState<T> {
        &self.state
    }

    fn check(&self) -> Result<()> {
        let d = self.dim;
        let dim_err = |found: usize| Error::DimensionMismatch { expected: d, found };
        match &self.state {
            FilterState::Logits => Ok(()),
            FilterState::Centroid(c) if c.len() != d => Err(dim_err(c.len())),
            FilterState::Knn { bank, rows } if bank.len() != rows * d || *rows == 0 => {
                Err(dim_err(bank.len()))
            }
            FilterState::Mds { means, precision } => {
                if let Some((_, m)) = means.iter().find(|(_, m)| m.len() != d) {
                    return Err(dim_err(m.len()));
                }
                if precision.len() != d * d {
                    return Err(dim_err(precision.len()));
                }
                linalg::cholesky(precision, d).map(|_| ()).ok_or(Error::SingularCovariance)
            }
            FilterState::Scale { weight, bias } if weight.len() != bias.len() * d => {
                Err(dim_err(weight.len()))
            }
            _ => Ok(()),
        }
    }

    /// OoD score of one detection; larger is more OoD-like.
    pub fn score(&self, det: &Detection) -> Result<T> {
        self.score_located(det, "", 0)
    }

    fn score_located(&self, det: &Detection, image_id: &str, index: usize) -> Result<T> {
        let missing = |field: &'static str| Error::MissingField {
            image_id: image_id.to_string(),
            detection: index,
            field,
        };
        if !self.spec.method.needs_features() {
            let logits: Vec<T> = det
                .logits
                .as_ref()
                .ok_or_else(|| missing("logits"))?
                .iter()
                .map(|&l| T::of(l))
                .collect();
            return match self.spec.method {
                FilterMethod::Msp => {
                    let p = softmax(&logits)?;
                    Ok(T::one() - p.into_iter().fold(T::neg_infinity(), T::max))
                }
                FilterMethod::Mls => Ok(-logits.iter().copied().fold(T::neg_infinity(), T::max)),
                _ => Ok(-logsumexp(&logits)?),
            };
        }

        let raw = det.feature.as_ref().ok_or_else(|| missing("feature"))?;
        if raw.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: raw.len() });
        }
        let feature: Vec<T> = raw.iter().map(|&x| T::of_f32(x)).collect();
        Ok(match &self.state {
            FilterState::Centroid(c) => euclidean(&feature, c),
            FilterState::Knn { bank, rows } => {
                let q = unit(&feature);
                let mut dists: Vec<T> = bank.chunks(self.dim).map(|row| euclidean(&q, row)).collect();
                let k = self.spec.k.min(*rows);
                let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| {
                    a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
                });
                *kth
            }
            FilterState::Mds { means, precision } => {
                let mut best = T::infinity();
                let mut diff = vec![T::zero(); self.dim];
                for (_, mu) in means {
                    for ((d, &x), &m) in diff.iter_mut().zip(&feature).zip(mu) {
                        *d = x - m;
                    }
                    best = best.min(linalg::quadratic_form(precision, &diff).max(T::zero()).sqrt());
                }
                best
            }
            FilterState::Scale { weight, bias } => {
                let r = scale_factor(&feature, self.spec.percentile);
                let logits: Vec<T> = weight
                    .chunks(self.dim)
                    .zip(bias)
                    .map(|(row, &b)| {
                        row.iter().zip(&feature).map(|(&w, &z)| w * z * r).sum::<T>() + b
                    })
                    .collect();
                -logsumexp(&logits)?
            }
            FilterState::Logits => unreachable!("logit methods handled above"),
        })
    }
}

/// `Σz / Σ{z_i : z_i ≥ q_p(z)}`: ratio of the total activation to the
/// activation mass at or above the `p`-th percentile. Returns 1 when the
/// upper mass is not positive.
pub fn scale_factor<T: Scalar>(z: &[T], percentile: f64) -> T {
    let mut sorted = z.to_vec();
    numeric::sort_floats(&mut sorted);
    let Some(threshold) = numeric::quantile_sorted(&sorted, percentile / 100.0) else {
        return T::one();
    };
    let total: T = z.iter().copied().sum();
    let top: T = z.iter().copied().filter(|&x| x >= threshold).sum();
    if top > T::zero() && (total / top).is_finite() {
        total / top
    } else {
        T::one()
    }
}

fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = l2_norm(v);
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Fits a scoring method on ID calibration detections.
///
/// Feature-based methods require every detection to carry a feature. The
/// scale method takes its linear head from `head` or, failing that, from
/// the dump header.
pub fn fit_filter<T: Scalar>(spec: FilterSpec, cali: &Dump, head: Option<&LinearHead>) -> Result<FilterModel<T>> {
    spec.validate()?;
    cali.expect_split(&[SplitKind::IdCali, SplitKind::IdTrain])?;
    if !spec.method.needs_features() {
        return FilterModel::from_parts(spec, 0, FilterState::Logits);
    }

    let (dim, rows) = collect_features::<T>(cali)?;
    let n = rows.len();
    let flat = |it: &mut dyn Iterator<Item = &Vec<T>>| it.flat_map(|r| r.iter().copied()).collect::<Vec<T>>();

    let state = match spec.method {
        FilterMethod::CentroidL2 => {
            if n == 0 {
                return Err(Error::InsufficientData("no calibration detections".into()));
            }
            FilterState::Centroid(column_mean(rows.iter().map(|(_, f)| f.as_slice()), dim))
        }
        FilterMethod::Knn => {
            if n < spec.k {
                return Err(Error::InsufficientData(format!("knn needs at least k={} detections, found {n}", spec.k)));
            }
            let normed: Vec<Vec<T>> = rows.iter().map(|(_, f)| unit(f)).collect();
            FilterState::Knn { bank: flat(&mut normed.iter()), rows: n }
        }
        FilterMethod::Mds => fit_mds(&rows, dim, &spec)?,
        FilterMethod::Scale => {
            let head = head.or(cali.header.head.as_ref()).ok_or_else(|| {
                Error::InvalidParameter("scale filter requires a linear head".into())
            })?;
            if head.weight.len() != head.bias.len() {
                return Err(Error::DimensionMismatch { expected: head.weight.len(), found: head.bias.len() });
            }
            if let Some(row) = head.weight.iter().find(|r| r.len() != dim) {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
            FilterState::Scale {
                weight: head.weight.iter().flatten().map(|&w| T::of_f32(w)).collect(),
                bias: head.bias.iter().map(|&b| T::of_f32(b)).collect(),
            }
        }
        _ => unreachable!(),
    };
    FilterModel::from_parts(spec, dim, state)
}

/// `(class_id, feature)` per detection.
type LabeledRows<T> = Vec<(usize, Vec<T>)>;

fn collect_features<T: Scalar>(dump: &Dump) -> Result<(usize, LabeledRows<T>)> {
    let mut dim = dump.header.feature_dim;
    let mut rows = Vec::with_capacity(dump.num_detections());
    for (rec, i, det) in dump.detections() {
        let f = det.feature.as_ref().ok_or_else(|| Error::MissingField {
            image_id: rec.image_id.clone(),
            detection: i,
            field: "feature",
        })?;
        let d = *dim.get_or_insert(f.len());
        if f.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: f.len() });
        }
        rows.push((det.class_id, f.iter().map(|&x| T::of_f32(x)).collect()));
    }
    let dim = dim.ok_or_else(|| Error::InsufficientData("no feature vectors in calibration dump".into()))?;
    if dim == 0 {
        return Err(Error::InvalidParameter("feature_dim must be positive".into()));
    }
    Ok((dim, rows))
}

fn column_mean<'a, T: Scalar>(rows: impl Iterator<Item = &'a [T]>, dim: usize) -> Vec<T> {
    let mut sum = vec![T::zero(); dim];
    let mut n = 0usize;
    for r in rows {
        for (s, &x) in sum.iter_mut().zip(r) {
            *s = *s + x;
        }
        n += 1;
    }
    let n = T::from_usize(n.max(1)).unwrap();
    sum.into_iter().map(|s| s / n).collect()
}

fn fit_mds<T: Scalar>(rows: &[(usize, Vec<T>)], dim: usize, spec: &FilterSpec) -> Result<FilterState<T>> {
    use std::collections::BTreeMap;

    let mut groups: BTreeMap<usize, Vec<&[T]>> = BTreeMap::new();
    for (class, f) in rows {
        let key = if spec.pooled { 0 } else { *class };
        groups.entry(key).or_default().push(f);
    }
    if groups.is_empty() {
        return Err(Error::InsufficientData("no calibration detections".into()));
    }
    if let Some((class, members)) = groups.iter().find(|(_, m)| m.len() < dim + 1) {
        return Err(Error::InsufficientData(format!(
            "mds needs at least feature_dim+1={} detections per class; class {class} has {}",
            dim + 1,
            members.len()
        )));
    }

    let means: Vec<(usize, Vec<T>)> = groups
        .iter()
        .map(|(&c, members)| (c, column_mean(members.iter().copied(), dim)))
        .collect();

    // shared within-class covariance, unbiased by the number of fitted means
    let mut cov = vec![T::zero(); dim * dim];
    let mut diff = vec![T::zero(); dim];
    for ((_, members), (_, mu)) in groups.iter().zip(&means) {
        for f in members {
            for ((d, &x), &m) in diff.iter_mut().zip(f.iter()).zip(mu) {
                *d = x - m;
            }
            for i in 0..dim {
                for j in 0..=i {
                    cov[i * dim + j] = cov[i * dim + j] + diff[i] * diff[j];
                }
            }
        }
    }
    let denom = T::from_usize(rows.len() - means.len()).unwrap();
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: T = (0..dim).map(|i| cov[i * dim + i]).sum();
    let eps = T::of(spec.shrinkage) * trace / T::from_usize(dim).unwrap();
    for i in 0..dim {
        cov[i * dim + i] = cov[i * dim + i] + eps;
    }
    let precision = linalg::spd_inverse(&cov, dim).ok_or(Error::SingularCovariance)?;
    Ok(FilterState::Mds { means, precision })
}

/// Score of one detection, located within its dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScore<T> {
    pub image_id: String,
    pub detection: usize,
    pub confidence: f64,
    pub score: T,
}

/// Scores every detection with `confidence >= conf_threshold`, in dump order.
pub fn score_dump<T: Scalar>(model: &FilterModel<T>, dump: &Dump, conf_threshold: f64) -> Result<Vec<DetectionScore<T>>> {
    let per_record: Vec<Result<Vec<DetectionScore<T>>>> = dump
        .records
        .par_iter()
        .map(|rec| score_record(model, rec, conf_threshold))
        .collect();
    let mut out = Vec::new();
    for r in per_record {
        out.extend(r?);
    }
    Ok(out)
}

pub fn score_record<T: Scalar>(
    model: &FilterModel<T>,
    rec: &ImageRecord,
    conf_threshold: f64,
) -> Result<Vec<DetectionScore<T>>> {
    rec.detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.confidence >= conf_threshold)
        .map(|(i, d)| {
            Ok(DetectionScore {
                image_id: rec.image_id.clone(),
                detection: i,
                confidence: d.confidence,
                score: model.score_located(d, &rec.image_id, i)?,
            })
        })
        .collect()
}
