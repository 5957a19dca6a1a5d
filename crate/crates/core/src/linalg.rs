//! Small dense symmetric eigenproblems (cyclic Jacobi) and helpers.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Largest `|a_ij − a_ji|`, relative to `max(1, max |a_ij|)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// All eigenvalues of a symmetric matrix, ascending.
///
/// Cyclic Jacobi sweeps run until the off-diagonal Frobenius norm falls below
/// `1e-15 · ‖A‖_F` (or `1e-300` for the zero matrix).
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(shape_err(format!("eigenvalues of a {}x{} matrix", n, m.ncols())));
    }
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Invalid(format!(
            "matrix is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    let mut a = symmetrize(m);
    let total = a.norm();
    let target = (1e-15 * total).max(1e-300);
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, p, q);
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.first().copied().unwrap_or(f64::INFINITY))
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.last().copied().unwrap_or(f64::NEG_INFINITY))
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation `A ← Jᵀ A J` annihilating `a_pq`.
fn rotate(a: &mut DMatrix<f64>, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.nrows();
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
}
