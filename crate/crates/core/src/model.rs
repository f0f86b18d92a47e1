//! The common factor model: parameter matrices, population loading patterns
//! and model-implied covariances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Loadings, factor correlations and residual covariance of one factor model.
///
/// `theta` is stored as a full matrix. Every simulated condition uses a
/// diagonal residual covariance, but nothing here relies on that.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelParams {
    pub lambda: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub theta: DMatrix<f64>,
}

impl FactorModelParams {
    pub fn new(lambda: DMatrix<f64>, phi: DMatrix<f64>, theta: DMatrix<f64>) -> Result<Self> {
        let params = Self { lambda, phi, theta };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from loadings, factor correlations and unique variances.
    pub fn with_diagonal_theta(lambda: DMatrix<f64>, phi: DMatrix<f64>, uniq: &[f64]) -> Result<Self> {
        let theta = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(uniq));
        Self::new(lambda, phi, theta)
    }

    pub fn p(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn q(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let (p, q) = self.lambda.shape();
        if self.phi.shape() != (q, q) {
            return Err(Error::Dimension(format!("phi is {:?}, expected ({q}, {q})", self.phi.shape())));
        }
        if self.theta.shape() != (p, p) {
            return Err(Error::Dimension(format!("theta is {:?}, expected ({p}, {p})", self.theta.shape())));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_dimensions()?;
        if self.lambda.iter().chain(self.phi.iter()).chain(self.theta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite entry".into()));
        }
        if !linalg::is_symmetric(&self.phi, 1e-12) {
            return Err(Error::InvalidParams("phi is not symmetric".into()));
        }
        if self.phi.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidParams("phi must have unit diagonal".into()));
        }
        if linalg::min_eigenvalue(&self.phi) <= 0.0 {
            return Err(Error::InvalidParams("phi is not positive definite".into()));
        }
        if !linalg::is_symmetric(&self.theta, 1e-12) {
            return Err(Error::InvalidParams("theta is not symmetric".into()));
        }
        if self.theta.diagonal().iter().any(|d| *d <= 0.0) {
            return Err(Error::InvalidParams("theta has a non-positive diagonal entry".into()));
        }
        if linalg::min_eigenvalue(&self.theta) <= 0.0 {
            return Err(Error::InvalidParams("theta is not positive definite".into()));
        }
        if linalg::min_eigenvalue(&implied_covariance(self)) <= 0.0 {
            return Err(Error::InvalidParams("implied covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// Communalities diag(ΛΦΛ').
    pub fn communalities(&self) -> Vec<f64> {
        let common = &self.lambda * &self.phi * self.lambda.transpose();
        common.diagonal().iter().cloned().collect()
    }

    pub fn theta_diagonal(&self) -> Vec<f64> {
        self.theta.diagonal().iter().cloned().collect()
    }

    /// Rescales the model so the implied observed variances are one.
    pub fn standardized(&self) -> Result<Self> {
        let sigma = implied_covariance(self);
        let inv_sd: Vec<f64> = sigma.diagonal().iter().map(|v| 1.0 / v.sqrt()).collect();
        if inv_sd.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-positive implied variance".into()));
        }
        let (p, q) = self.lambda.shape();
        let lambda = DMatrix::from_fn(p, q, |i, j| self.lambda[(i, j)] * inv_sd[i]);
        let theta = DMatrix::from_fn(p, p, |i, j| self.theta[(i, j)] * inv_sd[i] * inv_sd[j]);
        Ok(Self { lambda, phi: self.phi.clone(), theta })
    }
}

/// One population design point: factor count, indicators per factor,
/// salient loading, cross-loading flag and factor inter-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationDescriptor {
    pub q: usize,
    pub p_per_factor: usize,
    pub sl: f64,
    pub cl: bool,
    pub phi_offdiag: f64,
}

impl PopulationDescriptor {
    pub fn p(&self) -> usize {
        self.q * self.p_per_factor
    }

    /// Size of the secondary loading when cross-loadings are present.
    pub fn cross_loading(&self) -> f64 {
        if self.cl {
            self.sl / 2.0
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 1 {
            return Err(Error::InvalidDescriptor("q must be at least 1".into()));
        }
        if self.p_per_factor < 2 {
            return Err(Error::InvalidDescriptor("at least two indicators per factor are required".into()));
        }
        if !(self.sl > 0.0 && self.sl < 1.0) {
            return Err(Error::InvalidDescriptor(format!("salient loading {} outside (0, 1)", self.sl)));
        }
        if !(self.phi_offdiag >= 0.0 && self.phi_offdiag < 1.0) {
            return Err(Error::InvalidDescriptor(format!(
                "factor correlation {} outside [0, 1)",
                self.phi_offdiag
            )));
        }
        Ok(())
    }
}

/// Builds the population loading pattern, factor correlations and residual
/// variances (one minus communality) for a descriptor.
///
/// Indicators are grouped in consecutive blocks, one per factor. With
/// cross-loadings, the first indicator of factor j's block also loads sl/2
/// on factor (j + 1) mod q.
pub fn build_population_pattern(desc: &PopulationDescriptor) -> Result<FactorModelParams> {
    desc.validate()?;
    let (q, ppf) = (desc.q, desc.p_per_factor);
    let p = desc.p();
    let mut lambda = DMatrix::zeros(p, q);
    for j in 0..q {
        for k in 0..ppf {
            lambda[(j * ppf + k, j)] = desc.sl;
        }
        if desc.cl && q > 1 {
            lambda[(j * ppf, (j + 1) % q)] = desc.cross_loading();
        }
    }
    let phi = DMatrix::from_fn(q, q, |a, b| if a == b { 1.0 } else { desc.phi_offdiag });
    let common = &lambda * &phi * lambda.transpose();
    let mut theta = DMatrix::zeros(p, p);
    for i in 0..p {
        let h2 = common[(i, i)];
        if h2 >= 1.0 {
            return Err(Error::InvalidDescriptor(format!("communality {h2} of variable {} is not below one", i + 1)));
        }
        theta[(i, i)] = 1.0 - h2;
    }
    if linalg::min_eigenvalue(&phi) <= 0.0 {
        return Err(Error::InvalidDescriptor("factor correlation matrix is not positive definite".into()));
    }
    Ok(FactorModelParams { lambda, phi, theta })
}

/// ΛΦΛ' + Θ.
pub fn implied_covariance(params: &FactorModelParams) -> DMatrix<f64> {
    let sigma = &params.lambda * &params.phi * params.lambda.transpose() + &params.theta;
    linalg::symmetrize(&sigma)
}

/// Splits a sample covariance into the model-implied part and the residual.
pub fn residual_decomposition(
    s: &DMatrix<f64>,
    params: &FactorModelParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = params.p();
    if s.shape() != (p, p) {
        return Err(Error::Dimension(format!("S is {:?}, model has {p} variables", s.shape())));
    }
    let implied = implied_covariance(params);
    let resid = linalg::symmetrize(&(s - &implied));
    Ok((implied, resid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(sl: f64, cl: bool, phi: f64) -> PopulationDescriptor {
        PopulationDescriptor { q: 3, p_per_factor: 5, sl, cl, phi_offdiag: phi }
    }

    #[test]
    fn table_one_pattern() {
        let m = build_population_pattern(&desc(0.8, true, 0.0)).unwrap();
        let row = |i: usize| (0..3).map(|j| m.lambda[(i, j)]).collect::<Vec<_>>();
        assert_eq!(row(0), vec![0.8, 0.4, 0.0]);
        assert_eq!(row(5), vec![0.0, 0.8, 0.4]);
        assert_eq!(row(10), vec![0.4, 0.0, 0.8]);
        assert_eq!(row(1), vec![0.8, 0.0, 0.0]);
    }

    #[test]
    fn residual_variances_without_cross_loadings() {
        let m = build_population_pattern(&desc(0.8, false, 0.0)).unwrap();
        for i in 0..15 {
            assert!((m.theta[(i, i)] - 0.36).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_variance_with_correlated_cross_loading() {
        let m = build_population_pattern(&desc(0.8, true, 0.3)).unwrap();
        let expected = 1.0 - (0.64 + 0.16 + 2.0 * 0.8 * 0.4 * 0.3);
        assert!((m.theta[(0, 0)] - expected).abs() < 1e-12);
        assert!((m.theta[(0, 0)] - 0.008).abs() < 1e-12);
    }

    #[test]
    fn implied_covariance_identity_case() {
        let params = FactorModelParams::new(
            DMatrix::zeros(4, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(4, 4),
        )
        .unwrap();
        assert_eq!(implied_covariance(&params), DMatrix::identity(4, 4));
    }

    #[test]
    fn implied_covariance_blocks() {
        let m = build_population_pattern(&desc(0.8, false, 0.0)).unwrap();
        let s = implied_covariance(&m);
        assert!((s[(0, 1)] - 0.64).abs() < 1e-15);
        assert_eq!(s[(0, 5)], 0.0);
        let m = build_population_pattern(&desc(0.8, true, 0.3)).unwrap();
        let s = implied_covariance(&m);
        // (.8,.4,0) Φ (0,.8,.4)'
        let hand: f64 = 0.8 * (0.3 * 0.8 + 0.3 * 0.4) + 0.4 * (0.8 + 0.3 * 0.4);
        assert!((hand - 0.656).abs() < 1e-12);
        assert!((s[(0, 5)] - 0.656).abs() < 1e-12);
    }

    #[test]
    fn residual_decomposition_identities() {
        let m = build_population_pattern(&desc(0.4, true, 0.3)).unwrap();
        let sigma = implied_covariance(&m);
        let (implied, resid) = residual_decomposition(&sigma, &m).unwrap();
        assert_eq!(implied, sigma);
        assert!(linalg::max_abs(&resid) == 0.0);
        let e = DMatrix::from_fn(15, 15, |i, j| 0.001 * ((i + j) as f64).sin());
        let (_, resid) = residual_decomposition(&(&sigma + &e), &m).unwrap();
        assert!(linalg::max_abs(&(resid - e)) < 1e-15);
        assert!(residual_decomposition(&DMatrix::identity(3, 3), &m).is_err());
    }

    #[test]
    fn descriptor_errors() {
        assert!(build_population_pattern(&PopulationDescriptor { q: 0, ..desc(0.8, false, 0.0) }).is_err());
        assert!(build_population_pattern(&PopulationDescriptor { p_per_factor: 1, ..desc(0.8, false, 0.0) }).is_err());
        assert!(build_population_pattern(&desc(1.2, false, 0.0)).is_err());
        // .95 salient plus .475 cross-loading with φ=.9 pushes the communality past one
        assert!(matches!(
            build_population_pattern(&desc(0.95, true, 0.9)),
            Err(Error::InvalidDescriptor(_))
        ));
    }

    #[test]
    fn all_population_cells_have_unit_diagonal_and_pd() {
        for &q in &[3usize, 5] {
            for &ppf in &[5usize, 10] {
                for &sl in &[0.4, 0.8] {
                    for &cl in &[false, true] {
                        for &phi in &[0.0, 0.3] {
                            let d = PopulationDescriptor { q, p_per_factor: ppf, sl, cl, phi_offdiag: phi };
                            let m = build_population_pattern(&d).unwrap();
                            let s = implied_covariance(&m);
                            for i in 0..d.p() {
                                assert!((s[(i, i)] - 1.0).abs() < 1e-12);
                            }
                            assert!(linalg::min_eigenvalue(&s) > 0.0);
                            assert_eq!(build_population_pattern(&d).unwrap(), m);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn standardized_has_unit_implied_variances() {
        let m = build_population_pattern(&desc(0.8, true, 0.3)).unwrap();
        let scaled = FactorModelParams {
            lambda: &m.lambda * 2.0,
            phi: m.phi.clone(),
            theta: &m.theta * 4.0,
        };
        let st = scaled.standardized().unwrap();
        assert!(linalg::max_abs(&(st.lambda - &m.lambda)) < 1e-12);
    }
}
