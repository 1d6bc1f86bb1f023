//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest absolute eigenvalue, computed from the full complex spectrum.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "spectral radius needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let eigs = a.complex_eigenvalues();
    let rho = eigs.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    if !rho.is_finite() {
        return Err(Error::numeric("eigenvalue computation returned non-finite values"));
    }
    Ok(rho)
}

/// Matrix 2-norm (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().cloned().fold(0.0f64, f64::max)
}

/// Stacked observability matrix [C; CA; ...; CA^{n-1}].
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = c.nrows();
    let mut stacked = DMatrix::<f64>::zeros(m * n, n);
    let mut block = c.clone();
    for k in 0..n {
        stacked.view_mut((k * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    stacked
}

/// Numerical rank via singular values, with a threshold relative to the
/// largest singular value.
pub fn svd_rank(mat: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = mat.singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Symmetrize in place: P <- (P + P^T) / 2.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let pt = p.transpose();
    *p += pt;
    *p *= 0.5;
}

pub fn is_all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn is_all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
