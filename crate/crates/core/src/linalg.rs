//! Dense row-major helpers for the small symmetric systems the
//! Mahalanobis filter needs.

use crate::Scalar;

/// Lower Cholesky factor of a symmetric positive-definite `n x n` matrix,
/// or `None` when a pivot is not strictly positive.
pub fn cholesky<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum = sum - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > T::zero()) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    let l = cholesky(a, n)?;
    let mut inv = vec![T::zero(); n * n];
    let mut col = vec![T::zero(); n];
    for c in 0..n {
        col.iter_mut().for_each(|x| *x = T::zero());
        col[c] = T::one();
        // forward: L y = e_c
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s = s - l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s = s - l[k * n + i] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    // symmetrise round-off
    for i in 0..n {
        for j in 0..i {
            let m = (inv[i * n + j] + inv[j * n + i]) / T::of(2.0);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    Some(inv)
}

/// `v^T M v` for a row-major `n x n` matrix.
pub fn quadratic_form<T: Scalar>(m: &[T], v: &[T]) -> T {
    let n = v.len();
    let mut acc = T::zero();
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let dot: T = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
        acc = acc + v[i] * dot;
    }
    acc
}
