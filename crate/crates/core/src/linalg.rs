//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Builds a matrix from row slices. Panics on ragged input; intended for
/// literals in tests, examples and config conversion after validation.
pub fn mat(rows: &[&[f64]]) -> Mat {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn vector(values: &[f64]) -> Vector {
    DVector::from_column_slice(values)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Invalid("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 2 {
        // closed form from trace and determinant
        let tr = m[(0, 0)] + m[(1, 1)];
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let disc = tr * tr / 4.0 - det;
        return if disc >= 0.0 {
            let s = disc.sqrt();
            (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
        } else {
            det.abs().sqrt()
        };
    }
    match m.clone().try_schur(f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max),
        None => gelfand_radius(m),
    }
}

/// `lim ‖Mᵏ‖^{1/k}` through repeated squaring with rescaling.
fn gelfand_radius(m: &Mat) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    for _ in 0..60 {
        let norm = p.norm();
        if norm == 0.0 {
            return 0.0;
        }
        p /= norm;
        log_scale += norm.ln() / k;
        p = &p * &p;
        k *= 2.0;
    }
    (log_scale + p.norm().max(f64::MIN_POSITIVE).ln() / k).exp()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Factor `F` with `F Fᵀ = m` for a symmetric positive semidefinite `m`.
///
/// Uses the eigendecomposition so that singular covariances are accepted.
pub fn psd_factor(m: &Mat) -> Result<Mat> {
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Invalid("covariance must be symmetric".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// `Mᵏ` by repeated multiplication. Used by cross-checks only.
pub fn matrix_power(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}
