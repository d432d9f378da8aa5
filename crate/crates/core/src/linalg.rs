//! Spectral norms, dense and iterative.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest singular value by full decomposition.
pub fn spectral_norm<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().copied().fold(0.0, f64::max)
}

/// All singular values, largest first.
pub fn singular_values<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub const POWER_MAX_ITER: usize = 10_000;

/// Power iteration on `M^T M` for a nonnegative-friendly real operator given
/// by its action and the action of its transpose.
///
/// Stops once the eigenvalue estimate moves by less than `rel_tol`
/// relatively between consecutive iterations.
pub fn power_norm<F, G>(cols: usize, apply: F, apply_t: G, rel_tol: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if cols == 0 {
        return Ok(0.0);
    }
    // deterministic start with no special structure
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_7).fract())).collect();
    normalize(&mut v);
    let mut last = 0.0;
    for it in 0..POWER_MAX_ITER {
        let w = apply_t(&apply(&v));
        let lambda = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / norm).collect();
        if it > 0 && (lambda - last).abs() <= rel_tol * lambda.abs() {
            return Ok(lambda.max(0.0).sqrt());
        }
        last = lambda;
    }
    Err(Error::NoConvergence(format!("power iteration after {POWER_MAX_ITER} steps, estimate {}", last.max(0.0).sqrt())))
}

/// Power-iteration norm of a dense real matrix.
pub fn power_norm_dense(m: &DMatrix<f64>, rel_tol: f64) -> Result<f64> {
    let mt = m.transpose();
    power_norm(
        m.ncols(),
        |v| (m * DVector::from_column_slice(v)).as_slice().to_vec(),
        |v| (&mt * DVector::from_column_slice(v)).as_slice().to_vec(),
        rel_tol,
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: DMatrix<C64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut e: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}
