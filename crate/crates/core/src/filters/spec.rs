use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_SCALE_PERCENTILE: f64 = 85.0;
/// Shrinkage added to the covariance diagonal, relative to `trace / d`.
pub const DEFAULT_MDS_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Msp,
    Mls,
    Ebo,
    Scale,
    Mds,
    Knn,
    CentroidL2,
}

impl FilterMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMethod::Msp => "msp",
            FilterMethod::Mls => "mls",
            FilterMethod::Ebo => "ebo",
            FilterMethod::Scale => "scale",
            FilterMethod::Mds => "mds",
            FilterMethod::Knn => "knn",
            FilterMethod::CentroidL2 => "centroid_l2",
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            FilterMethod::Msp => 0,
            FilterMethod::Mls => 1,
            FilterMethod::Ebo => 2,
            FilterMethod::Scale => 3,
            FilterMethod::Mds => 4,
            FilterMethod::Knn => 5,
            FilterMethod::CentroidL2 => 6,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FilterMethod::Msp,
            1 => FilterMethod::Mls,
            2 => FilterMethod::Ebo,
            3 => FilterMethod::Scale,
            4 => FilterMethod::Mds,
            5 => FilterMethod::Knn,
            6 => FilterMethod::CentroidL2,
            _ => return None,
        })
    }

    /// Whether scoring reads the per-box feature vector.
    pub fn needs_features(&self) -> bool {
        matches!(
            self,
            FilterMethod::Scale | FilterMethod::Mds | FilterMethod::Knn | FilterMethod::CentroidL2
        )
    }
}

/// Scoring method plus its parameters, written on the command line as
/// `method[:key=value[,key=value]]`, e.g. `knn:k=10` or `mds:eps=1e-6,pooled=true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub method: FilterMethod,
    /// knn: neighbour rank.
    pub k: usize,
    /// scale: percentile `p` in (0, 100).
    pub percentile: f64,
    /// mds: relative diagonal shrinkage.
    pub shrinkage: f64,
    /// mds: single pooled mean instead of per-class means.
    pub pooled: bool,
}

impl FilterSpec {
    pub fn new(method: FilterMethod) -> Self {
        FilterSpec {
            method,
            k: DEFAULT_KNN_K,
            percentile: DEFAULT_SCALE_PERCENTILE,
            shrinkage: DEFAULT_MDS_SHRINKAGE,
            pooled: false,
        }
    }

    pub fn knn(k: usize) -> Self {
        FilterSpec { k, ..Self::new(FilterMethod::Knn) }
    }

    pub fn scale(percentile: f64) -> Self {
        FilterSpec { percentile, ..Self::new(FilterMethod::Scale) }
    }

    pub fn mds(shrinkage: f64, pooled: bool) -> Self {
        FilterSpec { shrinkage, pooled, ..Self::new(FilterMethod::Mds) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidParameter("knn k must be >= 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::InvalidParameter(format!(
                "scale percentile {} must lie in (0, 100)",
                self.percentile
            )));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage.is_finite()) {
            return Err(Error::InvalidParameter("mds shrinkage must be > 0".into()));
        }
        Ok(())
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.method.as_str();
        match self.method {
            FilterMethod::Knn => write!(f, "{m}:k={}", self.k),
            FilterMethod::Scale => write!(f, "{m}:p={}", self.percentile),
            FilterMethod::Mds => write!(f, "{m}:eps={:e},pooled={}", self.shrinkage, self.pooled),
            _ => f.write_str(m),
        }
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let method = match name.trim().to_lowercase().as_str() {
            "msp" => FilterMethod::Msp,
            "mls" => FilterMethod::Mls,
            "ebo" | "energy" => FilterMethod::Ebo,
            "scale" => FilterMethod::Scale,
            "mds" | "mahalanobis" => FilterMethod::Mds,
            "knn" => FilterMethod::Knn,
            "centroid_l2" | "centroid" | "l2" => FilterMethod::CentroidL2,
            other => return Err(Error::InvalidParameter(format!("unknown filter `{other}`"))),
        };
        let mut spec = FilterSpec::new(method);
        let bad = |kv: &str| Error::InvalidParameter(format!("bad filter parameter `{kv}` for {name}"));
        for kv in params.into_iter().flat_map(|p| p.split(',')).filter(|kv| !kv.trim().is_empty()) {
            let (key, value) = kv.split_once('=').ok_or_else(|| bad(kv))?;
            match (method, key.trim()) {
                (FilterMethod::Knn, "k") => spec.k = value.trim().parse().map_err(|_| bad(kv))?,
                (FilterMethod::Scale, "p") => spec.percentile = value.trim().parse().map_err(|_| bad(kv))?,
                (FilterMethod::Mds, "eps") => spec.shrinkage = value.trim().parse().map_err(|_| bad(kv))?,
                (FilterMethod::Mds, "pooled") => spec.pooled = value.trim().parse().map_err(|_| bad(kv))?,
                _ => return Err(bad(kv)),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
