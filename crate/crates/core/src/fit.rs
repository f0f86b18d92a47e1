//! χ², RMSEA, CFI and SRMR for covariance-structure fits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::ml::{ml_discrepancy, EstimationResult};
use crate::model::{implied_covariance, FactorModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub chi_square: f64,
    pub df: i64,
    pub p_value: f64,
    pub rmsea: f64,
    pub cfi: f64,
    pub srmr: f64,
    pub baseline_chi_square: f64,
    pub baseline_df: i64,
}

/// Upper tail probability of a χ² variate.
pub fn chi_square_p(x: f64, df: i64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).map(|d| d.sf(x)).unwrap_or(f64::NAN)
}

pub fn rmsea(chi_square: f64, df: i64, n: usize) -> f64 {
    ((chi_square - df as f64).max(0.0) / (df as f64 * (n as f64 - 1.0))).sqrt()
}

pub fn cfi(chi_square: f64, df: i64, baseline_chi_square: f64, baseline_df: i64) -> f64 {
    let d = (chi_square - df as f64).max(0.0);
    let denom = (baseline_chi_square - baseline_df as f64).max(d);
    if denom <= 0.0 {
        1.0
    } else {
        (1.0 - d / denom).clamp(0.0, 1.0)
    }
}

/// Root mean square of standardized residuals over the lower triangle
/// including the diagonal.
pub fn srmr(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..=i {
            let r = (s[(i, j)] - sigma[(i, j)]) / (s[(i, i)] * s[(j, j)]).sqrt();
            acc += r * r;
        }
    }
    (acc / (p * (p + 1) / 2) as f64).sqrt()
}

/// ML discrepancy of the independence model with free variances.
pub fn baseline_discrepancy(s: &DMatrix<f64>) -> Result<f64> {
    let diag = DMatrix::from_diagonal(&s.diagonal());
    ml_discrepancy(s, &diag)
}

/// Fit statistics for parameters `params` given S, n and model df.
pub fn fit_from_params(params: &FactorModelParams, s: &DMatrix<f64>, n: usize, df: i64) -> Result<FitReport> {
    let sigma = implied_covariance(params);
    let f = ml_discrepancy(s, &sigma)?;
    fit_from_discrepancy(f, &sigma, s, n, df)
}

fn fit_from_discrepancy(f: f64, sigma: &DMatrix<f64>, s: &DMatrix<f64>, n: usize, df: i64) -> Result<FitReport> {
    if df <= 0 {
        return Err(Error::Identification(format!("model has {df} degrees of freedom")));
    }
    if n < 2 {
        return Err(Error::Domain("fit statistics need n ≥ 2".into()));
    }
    let p = s.nrows();
    let scale = n as f64 - 1.0;
    let chi_square = scale * f.max(0.0);
    let baseline_df = (p * (p - 1) / 2) as i64;
    let baseline_chi_square = scale * baseline_discrepancy(s)?;
    Ok(FitReport {
        chi_square,
        df,
        p_value: chi_square_p(chi_square, df),
        rmsea: rmsea(chi_square, df, n),
        cfi: cfi(chi_square, df, baseline_chi_square, baseline_df),
        srmr: srmr(s, sigma),
        baseline_chi_square,
        baseline_df,
    })
}

/// Fit statistics of a maximum-likelihood fit.
pub fn compute_fit(result: &EstimationResult, s: &DMatrix<f64>, n: usize) -> Result<FitReport> {
    let sigma = implied_covariance(&result.params);
    fit_from_discrepancy(result.f_min, &sigma, s, n, result.df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml::{fit_ml, ModelSpec};
    use crate::model::{build_population_pattern, PopulationDescriptor};

    #[test]
    fn perfect_fit() {
        let truth = build_population_pattern(&PopulationDescriptor { q: 3, p_per_factor: 5, sl: 0.8, cl: false, phi_offdiag: 0.3 })
            .unwrap();
        let s = implied_covariance(&truth);
        let spec = ModelSpec::independent_cluster(3, 5, true).unwrap();
        let res = fit_ml(&s, &spec, 1000).unwrap();
        let fit = compute_fit(&res, &s, 1000).unwrap();
        assert!(fit.chi_square < 1e-6);
        assert_eq!(fit.rmsea, 0.0);
        assert_eq!(fit.cfi, 1.0);
        assert!(fit.srmr < 1e-6);
        assert!((fit.p_value - 1.0).abs() < 1e-6);
        assert_eq!(fit.baseline_df, 105);
    }

    #[test]
    fn chi_square_tail_values() {
        // P(χ²₁ > 3.841459) = .05 and P(χ²₂ > x) = exp(-x/2)
        assert!((chi_square_p(3.841_458_820_694_124, 1) - 0.05).abs() < 1e-10);
        assert!((chi_square_p(5.0, 2) - (-2.5_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rmsea_depends_on_discrepancy_per_df() {
        let f = 0.3;
        let a = rmsea(199_999.0 * f, 87, 200_000);
        let b = rmsea(399_999.0 * f, 87, 400_000);
        assert!((a - b).abs() < 1e-3);
        assert!((cfi(10.0, 20, 500.0, 105) - 1.0).abs() < 1e-15);
        assert!((cfi(60.0, 20, 420.0, 20) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn srmr_of_known_residual() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        assert!((srmr(&s, &sigma) - (0.09_f64 / 3.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn nonpositive_df_is_identification_error() {
        let s = DMatrix::identity(3, 3);
        let m = FactorModelParams::with_diagonal_theta(DMatrix::from_element(3, 1, 0.5), DMatrix::identity(1, 1), &[0.75; 3])
            .unwrap();
        assert!(matches!(fit_from_params(&m, &s, 100, 0), Err(Error::Identification(_))));
    }
}
