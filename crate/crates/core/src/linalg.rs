//! Small dense linear-algebra helpers over `nalgebra::DMatrix`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues in `[-PSD_BAND, 0]` are treated as zero.
pub const PSD_BAND: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let scale = 1.0_f64.max(m[(i, j)].abs());
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} matrix", m.nrows(), m.ncols())))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = symmetrize(&chol.inverse());
    if !logdet.is_finite() || inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("non-finite factorization".into()));
    }
    Ok((inv, logdet))
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_inverse_logdet(m).map(|(inv, _)| inv)
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    spd_inverse_logdet(m).map(|(_, ld)| ld)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite("cholesky factorization failed".into()))
}

fn checked_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_BAND {
        return Err(Error::NotPsd(min));
    }
    Ok(eig)
}

fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(v * d * v.transpose()))
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m)?;
    Ok(spectral_map(&eig, |l| l.max(0.0).sqrt()))
}

/// Symmetric inverse square root; every eigenvalue must exceed `PSD_BAND`.
pub fn psd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m)?;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= PSD_BAND {
        return Err(Error::Singular(format!("smallest eigenvalue {min:e} in inverse square root")));
    }
    Ok(spectral_map(&eig, |l| 1.0 / l.sqrt()))
}

/// Rescales a covariance matrix to a correlation matrix.
pub fn cov_to_cor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d: Vec<f64> = m.diagonal().iter().map(|v| v.sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("non-positive variance in covariance matrix".into()));
    }
    let n = m.nrows();
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { m[(i, j)] / (d[i] * d[j]) }))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}
