//! Stabilised softmax / log-sum-exp and order-statistic helpers.

use crate::error::{Error, Result};
use crate::Scalar;

/// `ln Σ exp(v_i)`, computed with max-subtraction.
pub fn logsumexp<T: Scalar>(v: &[T]) -> Result<T> {
    let max = max_finite(v)?;
    let sum: T = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let max = max_finite(v)?;
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn max_finite<T: Scalar>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("vector has non-finite entries".into()));
    }
    Ok(v.iter().copied().fold(T::neg_infinity(), T::max))
}

/// Quantile of an ascending-sorted slice by linear interpolation between
/// order statistics (Hyndman-Fan type 7).
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::of(h - lo as f64);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn mean<T: Scalar>(v: &[T]) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    let sum: T = v.iter().copied().sum();
    Some(sum / T::from_usize(v.len())?)
}

/// Unbiased sample standard deviation.
pub fn sample_std<T: Scalar>(v: &[T]) -> Option<T> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    let ss: T = v.iter().map(|&x| (x - m) * (x - m)).sum();
    Some((ss / T::from_usize(v.len() - 1)?).sqrt())
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

pub(crate) fn sort_floats<T: PartialOrd>(v: &mut [T]) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
}
