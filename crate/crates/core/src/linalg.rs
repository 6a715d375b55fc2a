//! Dense row-major helpers for the small (m ≤ 4) matrices carried along paths.
//!
//! Hot loops work on flat `&[f64]` slices so that per-step updates never
//! allocate; the occasional factorization goes through `nalgebra`.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn identity(m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
    }
    out
}

/// `out = a (n×k) · b (k×p)`.
#[inline]
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), n * p);
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for r in 0..k {
                acc += a[i * k + r] * b[r * p + j];
            }
            out[i * p + j] = acc;
        }
    }
}

/// `out = a (n×k) · bᵀ` where `b` is stored as (p×k).
#[inline]
pub fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), p * k);
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for r in 0..k {
                acc += a[i * k + r] * b[j * k + r];
            }
            out[i * p + j] = acc;
        }
    }
}

/// `y = a (n×k) · x`.
#[inline]
pub fn matvec(a: &[f64], x: &[f64], y: &mut [f64], n: usize, k: usize) {
    for i in 0..n {
        let mut acc = 0.0;
        for r in 0..k {
            acc += a[i * k + r] * x[r];
        }
        y[i] = acc;
    }
}

pub fn transpose(a: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[j * n + i] = a[i * k + j];
        }
    }
    out
}

pub fn symmetrize(a: &mut [f64], m: usize) {
    for i in 0..m {
        for j in (i + 1)..m {
            let s = 0.5 * (a[i * m + j] + a[j * m + i]);
            a[i * m + j] = s;
            a[j * m + i] = s;
        }
    }
}

pub fn trace(a: &[f64], m: usize) -> f64 {
    (0..m).map(|i| a[i * m + i]).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Inverse of a general small matrix by Gauss-Jordan elimination with
/// partial pivoting. Returns `None` when a pivot vanishes.
pub fn inverse(a: &[f64], m: usize) -> Option<Vec<f64>> {
    if m == 1 {
        return if a[0] != 0.0 { Some(vec![1.0 / a[0]]) } else { None };
    }
    let mut work = a.to_vec();
    let mut inv = identity(m);
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| work[i * m + col].abs().total_cmp(&work[j * m + col].abs()))?;
        if work[pivot * m + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for j in 0..m {
                work.swap(pivot * m + j, col * m + j);
                inv.swap(pivot * m + j, col * m + j);
            }
        }
        let d = work[col * m + col];
        for j in 0..m {
            work[col * m + j] /= d;
            inv[col * m + j] /= d;
        }
        for i in 0..m {
            if i == col {
                continue;
            }
            let f = work[i * m + col];
            if f != 0.0 {
                for j in 0..m {
                    work[i * m + j] -= f * work[col * m + j];
                    inv[i * m + j] -= f * inv[col * m + j];
                }
            }
        }
    }
    Some(inv)
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor. `None` if the factorization fails.
pub fn spd_inverse(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mat = DMatrix::from_row_slice(m, m, a);
    let chol = mat.cholesky()?;
    let inv = chol.inverse();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = inv[(i, j)];
        }
    }
    symmetrize(&mut out, m);
    Some(out)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &[f64], m: usize) -> Vec<f64> {
    let mat = DMatrix::from_row_slice(m, m, a);
    let mut ev: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm2(a: &[f64], m: usize) -> f64 {
    sym_eigenvalues(a, m)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max)
}

/// 2-norm condition number of a symmetric matrix (∞ when singular).
pub fn sym_condition(a: &[f64], m: usize) -> f64 {
    let ev = sym_eigenvalues(a, m);
    let lo = ev.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let hi = ev.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// log-determinant and inverse of an SPD matrix, used by the Gaussian
/// mixture code.
pub fn spd_logdet_inverse(a: &[f64], m: usize) -> Option<(f64, Vec<f64>)> {
    let mat = DMatrix::from_row_slice(m, m, a);
    let chol = mat.cholesky()?;
    let l = chol.l();
    let logdet = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
    let inv = chol.inverse();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = inv[(i, j)];
        }
    }
    symmetrize(&mut out, m);
    Some((logdet, out))
}

/// Lower Cholesky factor (row-major), `None` if not positive definite.
pub fn cholesky_lower(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mat = DMatrix::from_row_slice(m, m, a);
    let chol = mat.cholesky()?;
    let l = chol.l();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            out[i * m + j] = l[(i, j)];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_jordan_inverse_roundtrip() {
        let a = [4.0, 1.0, 0.5, 2.0, 3.0, 0.1, -1.0, 0.2, 5.0];
        let inv = inverse(&a, 3).unwrap();
        let mut prod = [0.0; 9];
        matmul(&a, &inv, &mut prod, 3, 3, 3);
        assert!(max_abs_diff(&prod, &identity(3)) < 1e-14);
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
        assert!(spd_inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 1.5, 0.0, 1.0];
        let mut x = [0.0; 4];
        let mut y = [0.0; 4];
        matmul_bt(&a, &b, &mut x, 2, 3, 2);
        matmul(&a, &transpose(&b, 2, 3), &mut y, 2, 3, 2);
        assert_eq!(x, y);
    }

    #[test]
    fn norm_of_scaled_identity() {
        let a = [3.0, 0.0, 0.0, 3.0];
        assert!((sym_norm2(&a, 2) - 3.0).abs() < 1e-14);
        assert!((sym_condition(&a, 2) - 1.0).abs() < 1e-14);
    }
}
