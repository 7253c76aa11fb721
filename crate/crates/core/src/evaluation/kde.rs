//! Gaussian kernel density curves of ID and OoD scores on a shared grid.

use std::io::Write;

use serde::Serialize;

use crate::calibration::{calibrate_threshold, DEFAULT_TARGET_TPR};
use crate::error::{Error, Result};
use crate::numeric::{quantile_sorted, sample_std, sort_floats};
use crate::Scalar;

pub const DEFAULT_GRID_POINTS: usize = 256;
/// The grid extends this many bandwidths beyond the pooled data range.
pub const GRID_CUT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeReport<T> {
    pub grid: Vec<T>,
    pub id_density: Vec<T>,
    pub ood_density: Vec<T>,
    pub id_bandwidth: T,
    pub ood_bandwidth: T,
    /// Threshold calibrated on all ID scores.
    pub tau_with_outliers: T,
    /// Threshold calibrated after dropping masked ID scores.
    pub tau_without_outliers: Option<T>,
}

/// Silverman's rule of thumb, `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`,
/// falling back to the standard deviation when the IQR vanishes.
/// `None` when the sample has fewer than two points or zero variance.
pub fn silverman_bandwidth<T: Scalar>(scores: &[T]) -> Option<T> {
    let sd = sample_std(scores)?;
    if !(sd > T::zero()) {
        return None;
    }
    let mut sorted = scores.to_vec();
    sort_floats(&mut sorted);
    let iqr = quantile_sorted(&sorted, 0.75)? - quantile_sorted(&sorted, 0.25)?;
    let spread = if iqr > T::zero() { sd.min(iqr / T::of(1.34)) } else { sd };
    Some(T::of(0.9) * spread * T::from_usize(scores.len())?.powf(T::of(-0.2)))
}

fn density<T: Scalar>(scores: &[T], bandwidth: T, grid: &[T]) -> Vec<T> {
    let norm = T::one() / (T::from_usize(scores.len()).unwrap() * bandwidth * T::of((2.0 * std::f64::consts::PI).sqrt()));
    let half = T::of(0.5);
    grid.iter()
        .map(|&x| {
            let s: T = scores
                .iter()
                .map(|&v| {
                    let u = (x - v) / bandwidth;
                    (-half * u * u).exp()
                })
                .sum();
            s * norm
        })
        .collect()
}

/// Density curves over `[min, max]` of the pooled scores, widened by
/// [`GRID_CUT`] bandwidths on each side, plus the FPR95
/// thresholds with and without the masked ID scores (`true` = outlier).
pub fn kde_report<T: Scalar>(
    id_scores: &[T],
    ood_scores: &[T],
    grid_points: usize,
    id_outlier_mask: Option<&[bool]>,
) -> Result<KdeReport<T>> {
    if id_scores.len() < 2 || ood_scores.len() < 2 {
        return Err(Error::InsufficientData("kde needs at least two scores per set".into()));
    }
    if grid_points < 2 {
        return Err(Error::InvalidParameter("grid needs at least two points".into()));
    }
    let degenerate = |which: &str| {
        Error::Degenerate(format!("{which} scores have zero variance; use a histogram instead"))
    };
    let id_bandwidth = silverman_bandwidth(id_scores).ok_or_else(|| degenerate("ID"))?;
    let ood_bandwidth = silverman_bandwidth(ood_scores).ok_or_else(|| degenerate("OoD"))?;

    let (lo, hi) = id_scores
        .iter()
        .chain(ood_scores)
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cut = T::of(GRID_CUT) * id_bandwidth.max(ood_bandwidth);
    let (lo, hi) = (lo - cut, hi + cut);
    let step = (hi - lo) / T::from_usize(grid_points - 1).unwrap();
    let grid: Vec<T> = (0..grid_points).map(|i| lo + step * T::from_usize(i).unwrap()).collect();

    let tau_with_outliers = calibrate_threshold(id_scores, DEFAULT_TARGET_TPR)?.tau;
    let tau_without_outliers = match id_outlier_mask {
        None => None,
        Some(mask) => {
            if mask.len() != id_scores.len() {
                return Err(Error::DimensionMismatch { expected: id_scores.len(), found: mask.len() });
            }
            let kept: Vec<T> = id_scores.iter().zip(mask).filter(|(_, m)| !**m).map(|(s, _)| *s).collect();
            Some(calibrate_threshold(&kept, DEFAULT_TARGET_TPR)?.tau)
        }
    };

    Ok(KdeReport {
        id_density: density(id_scores, id_bandwidth, &grid),
        ood_density: density(ood_scores, ood_bandwidth, &grid),
        grid,
        id_bandwidth,
        ood_bandwidth,
        tau_with_outliers,
        tau_without_outliers,
    })
}

impl<T: Scalar> KdeReport<T> {
    /// Trapezoid integral of a curve over the grid.
    pub fn integrate(&self, curve: &[T]) -> T {
        self.grid
            .windows(2)
            .zip(curve.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) * T::of(0.5))
            .sum()
    }

    /// `∫ min(id, ood)` over the grid.
    pub fn overlap(&self) -> T {
        let m: Vec<T> = self.id_density.iter().zip(&self.ood_density).map(|(a, b)| a.min(*b)).collect();
        self.integrate(&m)
    }

    pub fn write_curves_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "score,id_density,ood_density")?;
        for ((x, a), b) in self.grid.iter().zip(&self.id_density).zip(&self.ood_density) {
            writeln!(out, "{x:?},{a:?},{b:?}")?;
        }
        Ok(())
    }

    pub fn write_markers_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "marker,tau")?;
        writeln!(out, "tau_with_outliers,{}", self.tau_with_outliers)?;
        if let Some(t) = self.tau_without_outliers {
            writeln!(out, "tau_without_outliers,{t}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_degenerate() {
        assert!(matches!(
            kde_report(&[1.0, 1.0, 1.0], &[0.0, 2.0], 64, None),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(kde_report(&[1.0], &[0.0, 2.0], 64, None), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn mask_lowers_threshold() {
        let mut id: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        id.extend([50.0, 60.0, 70.0]);
        let mask: Vec<bool> = id.iter().map(|&s| s > 20.0).collect();
        let r = kde_report(&id, &[1.0, 5.0, 9.0], 32, Some(&mask)).unwrap();
        assert!(r.tau_without_outliers.unwrap() < r.tau_with_outliers);
    }

    #[test]
    fn csv_layout() {
        let r = kde_report(&[0.0f64, 1.0, 2.0], &[1.0, 3.0], 3, None).unwrap();
        let mut buf = Vec::new();
        r.write_curves_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("score,id_density,ood_density\n-"));
        assert!(r.grid[0] < 0.0 && r.grid[2] > 3.0);
    }
}
