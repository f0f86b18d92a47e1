//! Factor score predictors, parameter-based determinacy coefficients,
//! the small-sample correction and score-based determinacy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_BAND};
use crate::model::{implied_covariance, FactorModelParams};

/// W = Σ⁻¹ΛΦ with Σ the model-implied covariance.
pub fn best_linear_weights(params: &FactorModelParams) -> Result<DMatrix<f64>> {
    let sigma_inv = linalg::spd_inverse(&implied_covariance(params))
        .map_err(|_| Error::Singular("implied covariance".into()))?;
    Ok(sigma_inv * &params.lambda * &params.phi)
}

/// W = Σ⁻¹Λ(Λ'Σ⁻¹Λ)^{-1/2}Φ^{1/2}; the predictor covariance under Σ is Φ.
pub fn cp_weights(params: &FactorModelParams) -> Result<DMatrix<f64>> {
    let sigma_inv = linalg::spd_inverse(&implied_covariance(params))
        .map_err(|_| Error::Singular("implied covariance".into()))?;
    let sl = &sigma_inv * &params.lambda;
    let l = linalg::symmetrize(&(params.lambda.transpose() * &sl));
    Ok(sl * linalg::psd_inv_sqrt(&l)? * linalg::psd_sqrt(&params.phi)?)
}

fn root_diagonal(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    m.diagonal()
        .iter()
        .map(|&v| {
            if v < -PSD_BAND {
                Err(Error::Numerical(format!("negative squared determinacy {v:e}")))
            } else {
                Ok(v.max(0.0).sqrt().min(1.0))
            }
        })
        .collect()
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// P_BL,j = sqrt((ΦΛ'Σ⁻¹ΛΦ)_jj).
pub fn determinacy_bl(params: &FactorModelParams) -> Result<Vec<f64>> {
    let sigma_inv = linalg::spd_inverse(&implied_covariance(params))
        .map_err(|_| Error::Singular("implied covariance".into()))?;
    let lp = &params.lambda * &params.phi;
    root_diagonal(&(lp.transpose() * sigma_inv * lp))
}

/// As `determinacy_bl` but with the sample covariance S in place of Σ.
pub fn determinacy_sbl(params: &FactorModelParams, s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s_inv = linalg::spd_inverse(s).map_err(|_| Error::Singular("sample covariance".into()))?;
    let lp = &params.lambda * &params.phi;
    root_diagonal(&(lp.transpose() * s_inv * lp))
}

/// Correlation of the categorical-estimate predictor Σ_c⁻¹Λ_cΦ_c with the
/// factors when the observed scores follow the (standardized) ML structure.
pub fn determinacy_blc(ml: &FactorModelParams, cat: &FactorModelParams) -> Result<Vec<f64>> {
    let ml = ml.standardized()?;
    let sigma_ml = implied_covariance(&ml);
    let w = best_linear_weights(cat)?;
    let num = w.transpose() * &ml.lambda * &ml.phi;
    let var = w.transpose() * sigma_ml * &w;
    (0..ml.q())
        .map(|j| {
            let v = var[(j, j)];
            if !(v > 0.0) {
                return Err(Error::Numerical(format!("predictor {} has no variance", j + 1)));
            }
            Ok(clamp_unit(num[(j, j)] / v.sqrt()))
        })
        .collect()
}

/// P_CP,j = (Φ^{1/2}(Λ'Σ⁻¹Λ)^{-1/2}Λ'Σ⁻¹ΛΦ)_jj.
pub fn determinacy_cp(params: &FactorModelParams) -> Result<Vec<f64>> {
    let sigma_inv = linalg::spd_inverse(&implied_covariance(params))
        .map_err(|_| Error::Singular("implied covariance".into()))?;
    let l = linalg::symmetrize(&(params.lambda.transpose() * sigma_inv * &params.lambda));
    let m = linalg::psd_sqrt(&params.phi)? * linalg::psd_inv_sqrt(&l)? * &l * &params.phi;
    Ok(m.diagonal().iter().map(|&v| clamp_unit(v)).collect())
}

/// Sampling-error correction of a determinacy coefficient for `p`
/// variables and sample size `n`. Returns the corrected value and whether
/// it was clamped at zero.
pub fn budescu_correct(determinacy: f64, p: usize, n: usize) -> Result<(f64, bool)> {
    if n <= p + 1 {
        return Err(Error::Domain(format!("correction needs n > p + 1 (n = {n}, p = {p})")));
    }
    if !(0.0..=1.0).contains(&determinacy) {
        return Err(Error::Domain(format!("determinacy {determinacy} outside [0, 1]")));
    }
    let (nf, pf) = (n as f64, p as f64);
    let r2 = determinacy * determinacy;
    let u = 1.0 - r2;
    let omega = (pf - 2.0) / (nf - pf - 1.0) * u + 2.0 * (nf - 3.0) / ((nf - pf).powi(2) - 1.0) * u * u;
    let adj = r2 - omega;
    if adj <= 0.0 {
        Ok((0.0, true))
    } else {
        Ok((adj.sqrt().min(determinacy), false))
    }
}

/// Pearson correlation of each predictor column with the matching true
/// factor score column; `None` where a column has no variance.
pub fn score_based_determinacy(predictor: &DMatrix<f64>, xi_true: &DMatrix<f64>) -> Result<Vec<Option<f64>>> {
    if predictor.shape() != xi_true.shape() {
        return Err(Error::Dimension(format!(
            "predictor is {:?}, true scores are {:?}",
            predictor.shape(),
            xi_true.shape()
        )));
    }
    let n = predictor.nrows() as f64;
    Ok((0..predictor.ncols())
        .map(|j| {
            let a = predictor.column(j);
            let b = xi_true.column(j);
            let (ma, mb) = (a.sum() / n, b.sum() / n);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b.iter()) {
                let (dx, dy) = (x - ma, y - mb);
                sab += dx * dy;
                saa += dx * dx;
                sbb += dy * dy;
            }
            (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
        })
        .collect())
}

/// Predictor scores x_centered · W.
pub fn predict(x: &DMatrix<f64>, weights: &DMatrix<f64>) -> DMatrix<f64> {
    crate::datagen::center(x) * weights
}

/// Per-factor determinacies for one fitted model on one data set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeterminacyRecord {
    pub score_based_bl: Vec<Option<f64>>,
    pub p_bl: Vec<f64>,
    pub p_sbl: Vec<f64>,
    pub p_blc: Vec<f64>,
    pub score_based_cp: Vec<Option<f64>>,
    pub p_cp: Vec<f64>,
    pub p_bl_corrected: Vec<f64>,
    pub p_sbl_corrected: Vec<f64>,
    pub p_blc_corrected: Vec<f64>,
    pub p_cp_corrected: Vec<f64>,
    pub n_clamped: usize,
}

/// Mean over factors; `None` if any factor is missing or the list is empty.
pub fn factor_mean(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.iter().try_fold(0.0, |acc, v| v.map(|x| acc + x)).map(|s| s / values.len() as f64)
}

pub fn plain_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl DeterminacyRecord {
    /// Parameter-based minus score-based, averaged across factors.
    pub fn bias(parameter_based: &[f64], score_based: &[Option<f64>]) -> Option<f64> {
        Some(plain_mean(parameter_based)? - factor_mean(score_based)?)
    }

    /// Applies the correction to every available coefficient.
    pub fn apply_correction(&mut self, p: usize, n: usize) -> Result<()> {
        let mut clamped = 0;
        let mut correct = |src: &[f64]| -> Result<Vec<f64>> {
            src.iter()
                .map(|&v| {
                    let (c, flag) = budescu_correct(v, p, n)?;
                    clamped += flag as usize;
                    Ok(c)
                })
                .collect()
        };
        self.p_bl_corrected = correct(&self.p_bl)?;
        self.p_sbl_corrected = correct(&self.p_sbl)?;
        self.p_blc_corrected = correct(&self.p_blc)?;
        self.p_cp_corrected = correct(&self.p_cp)?;
        self.n_clamped = clamped;
        Ok(())
    }
}
