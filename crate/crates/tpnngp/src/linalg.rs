//! Dense linear-algebra helpers shared by the inference modules.
//!
//! Everything here works on `nalgebra` dynamic matrices in double precision.
//! The jitter policy is the one used throughout the crate: on a failed
//! Cholesky factorization, add `1e-10 * trace(S)/d` to the diagonal and retry
//! up to three times with 10x escalation before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative symmetry tolerance used by [`check_symmetric`].
pub const SYMMETRY_RTOL: f64 = 1e-10;

/// Relative eigenvalue tolerance for positive-semidefiniteness checks:
/// the smallest eigenvalue may not fall below `-PSD_RTOL * lambda_max`.
pub const PSD_RTOL: f64 = 1e-8;

/// Cholesky factorization with the crate-wide jitter escalation policy.
///
/// Returns the factorization of `S + jitter * I` together with the jitter
/// actually applied (0.0 when the plain factorization succeeds).
pub fn cholesky_with_jitter(s: &DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let d = s.nrows();
    if d == 0 {
        return Err(Error::invalid(format!("{context}: empty matrix")));
    }
    if let Some(chol) = Cholesky::new(s.clone()) {
        return Ok((chol, 0.0));
    }
    let base = 1e-10 * s.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let mut jitter = base;
    for _ in 0..3 {
        let mut jittered = s.clone();
        for i in 0..d {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        context: context.to_string(),
        max_jitter: jitter / 10.0,
    })
}

/// Solve `S x = b` for a symmetric positive-definite `S` via Cholesky.
pub fn solve_spd(s: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (chol, _) = cholesky_with_jitter(s, context)?;
    Ok(chol.solve(b))
}

/// Quadratic form `x^T S^{-1} x` evaluated through a triangular solve.
pub fn inv_quad_form(chol: &Cholesky<f64, Dyn>, x: &DVector<f64>) -> f64 {
    let mut y = x.clone();
    chol.solve_mut(&mut y);
    x.dot(&y)
}

/// `log det S` from a Cholesky factor of `S`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Verify that `m` is symmetric within [`SYMMETRY_RTOL`] relative tolerance.
pub fn check_symmetric(m: &DMatrix<f64>, context: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("{context}: matrix is not square")));
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                return Err(Error::invalid(format!(
                    "{context}: asymmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Eigenvalue-based PSD check: fails if `lambda_min < -PSD_RTOL * lambda_max`.
///
/// Returns `(lambda_min, lambda_max)` on success so callers can report them.
pub fn check_psd(m: &DMatrix<f64>, context: &str) -> Result<(f64, f64)> {
    if m.nrows() == 0 {
        return Ok((0.0, 0.0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min < -PSD_RTOL * max.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "{context}: not positive semi-definite (lambda_min={min:e}, lambda_max={max:e})"
        )));
    }
    Ok((min, max))
}

/// Symmetrize in place; useful after products that are symmetric in exact
/// arithmetic but not in floating point.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Reject matrices containing NaN or infinities.
pub fn check_finite(m: &DMatrix<f64>, context: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{context}: non-finite entries")));
    }
    Ok(())
}
