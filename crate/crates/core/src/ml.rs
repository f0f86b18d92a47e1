//! Maximum-likelihood confirmatory factor analysis of a covariance matrix.
//!
//! Free parameters are packed as
//! `[free loadings (row-major) | factor correlations (upper triangle) | log unique variances]`.
//! Correlations enter through `tanh` of an unconstrained value, unique
//! variances through `exp`, and the factor correlation matrix is checked
//! for positive definiteness at every evaluation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{implied_covariance, FactorModelParams};
use crate::optim::{self, LbfgsSettings};

/// Which loadings are free (true) or fixed at zero, and whether factor
/// inter-correlations are estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p: usize,
    pub q: usize,
    /// Row-major p×q mask.
    pub pattern: Vec<bool>,
    pub phi_free: bool,
}

impl ModelSpec {
    pub fn new(p: usize, q: usize, pattern: Vec<bool>, phi_free: bool) -> Result<Self> {
        let spec = Self { p, q, pattern, phi_free };
        spec.validate()?;
        Ok(spec)
    }

    /// Every indicator loads only on its own block's factor.
    pub fn independent_cluster(q: usize, p_per_factor: usize, phi_free: bool) -> Result<Self> {
        let p = q * p_per_factor;
        let pattern = (0..p).flat_map(|i| (0..q).map(move |j| i / p_per_factor == j)).collect();
        Self::new(p, q, pattern, phi_free)
    }

    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.pattern[i * self.q + j]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern.len() != self.p * self.q {
            return Err(Error::Dimension(format!("pattern has {} entries, expected {}", self.pattern.len(), self.p * self.q)));
        }
        if self.q == 0 || self.p == 0 {
            return Err(Error::Identification("empty model".into()));
        }
        for i in 0..self.p {
            if !(0..self.q).any(|j| self.is_free(i, j)) {
                return Err(Error::Identification(format!("variable {} has no free loading", i + 1)));
            }
        }
        for j in 0..self.q {
            let count = (0..self.p).filter(|&i| self.is_free(i, j)).count();
            if count < 2 {
                return Err(Error::Identification(format!("factor {} has fewer than two indicators", j + 1)));
            }
        }
        Ok(())
    }

    pub fn n_loadings(&self) -> usize {
        self.pattern.iter().filter(|b| **b).count()
    }

    pub fn n_correlations(&self) -> usize {
        if self.phi_free {
            self.q * (self.q - 1) / 2
        } else {
            0
        }
    }

    /// Free parameters of the covariance structure, unique variances included.
    pub fn n_free(&self) -> usize {
        self.n_loadings() + self.n_correlations() + self.p
    }

    /// p(p+1)/2 minus free parameters.
    pub fn degrees_of_freedom(&self) -> i64 {
        (self.p * (self.p + 1) / 2) as i64 - self.n_free() as i64
    }

    /// Factor owning the most free loadings of variable `i` (its salient factor).
    pub fn salient_factor(&self, i: usize) -> usize {
        (0..self.q).find(|&j| self.is_free(i, j)).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "DWLS")]
    Dwls,
    #[serde(rename = "BAYES")]
    Bayes,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Ml => "ML",
            Method::Dwls => "DWLS",
            Method::Bayes => "BAYES",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub params: FactorModelParams,
    pub method: Method,
    pub converged: bool,
    pub f_min: f64,
    pub iterations: usize,
    pub n: usize,
    pub df: i64,
    pub grad_norm: f64,
    /// Diagnostics such as restarts or weight fallbacks.
    pub notes: Vec<String>,
}

/// JSON export of an estimation result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamsDocument {
    pub lambda: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub method: Method,
    pub n: usize,
    pub df: i64,
    pub converged: bool,
    pub f_min: f64,
}

impl EstimationResult {
    pub fn to_document(&self) -> ParamsDocument {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect();
        ParamsDocument {
            lambda: rows(&self.params.lambda),
            phi: rows(&self.params.phi),
            theta: self.params.theta_diagonal(),
            method: self.method,
            n: self.n,
            df: self.df,
            converged: self.converged,
            f_min: self.f_min,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// Unpacks the loading/correlation part of a parameter vector. Returns the
/// loadings, the factor correlation matrix, the tanh derivative for each
/// correlation and the index where unique variances start.
pub(crate) fn unpack_structure(theta: &[f64], spec: &ModelSpec) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>, usize) {
    let (p, q) = (spec.p, spec.q);
    let mut lambda = DMatrix::zeros(p, q);
    let mut k = 0;
    for i in 0..p {
        for j in 0..q {
            if spec.is_free(i, j) {
                lambda[(i, j)] = theta[k];
                k += 1;
            }
        }
    }
    let mut phi = DMatrix::identity(q, q);
    let mut dtanh = Vec::new();
    if spec.phi_free {
        for a in 0..q {
            for b in (a + 1)..q {
                let r = theta[k].tanh();
                phi[(a, b)] = r;
                phi[(b, a)] = r;
                dtanh.push(1.0 - r * r);
                k += 1;
            }
        }
    }
    (lambda, phi, dtanh, k)
}

/// Gradient of a discrepancy with respect to the structural parameters,
/// given the symmetric matrix `m = dF/dΣ` (so that dF = tr(m dΣ)).
pub(crate) fn structure_gradient(
    m: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    dtanh: &[f64],
    spec: &ModelSpec,
    out: &mut Vec<f64>,
) {
    let m_lambda_phi = m * lambda * phi;
    for i in 0..spec.p {
        for j in 0..spec.q {
            if spec.is_free(i, j) {
                out.push(2.0 * m_lambda_phi[(i, j)]);
            }
        }
    }
    if spec.phi_free {
        let lml = lambda.transpose() * m * lambda;
        let mut k = 0;
        for a in 0..spec.q {
            for b in (a + 1)..spec.q {
                out.push(2.0 * lml[(a, b)] * dtanh[k]);
                k += 1;
            }
        }
    }
}

pub(crate) fn unpack_ml(theta: &[f64], spec: &ModelSpec) -> (FactorModelParams, Vec<f64>) {
    let (lambda, phi, dtanh, k) = unpack_structure(theta, spec);
    let uniq: Vec<f64> = theta[k..k + spec.p].iter().map(|s| s.exp()).collect();
    let theta_m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(uniq));
    (FactorModelParams { lambda, phi, theta: theta_m }, dtanh)
}

fn phi_admissible(phi: &DMatrix<f64>) -> bool {
    phi.nrows() <= 1 || phi.clone().cholesky().is_some()
}

/// F_ML(S, Σ) = ln|Σ| - ln|S| + tr(SΣ⁻¹) - p for a given implied Σ.
pub fn ml_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (sigma_inv, logdet_sigma) = linalg::spd_inverse_logdet(sigma)?;
    let logdet_s = linalg::log_det_spd(s)?;
    let trace = (s * &sigma_inv).trace();
    Ok(logdet_sigma - logdet_s + trace - s.nrows() as f64)
}

struct MlProblem<'a> {
    s: &'a DMatrix<f64>,
    logdet_s: f64,
    spec: &'a ModelSpec,
}

impl MlProblem<'_> {
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (params, dtanh) = unpack_ml(theta, self.spec);
        if !phi_admissible(&params.phi) {
            return None;
        }
        let sigma = implied_covariance(&params);
        let (sigma_inv, logdet) = linalg::spd_inverse_logdet(&sigma).ok()?;
        let s_sinv = self.s * &sigma_inv;
        let f = logdet - self.logdet_s + s_sinv.trace() - self.spec.p as f64;
        // dF/dΣ = Σ⁻¹ - Σ⁻¹ S Σ⁻¹
        let m = linalg::symmetrize(&(&sigma_inv - &sigma_inv * &s_sinv));
        let mut grad = Vec::with_capacity(theta.len());
        structure_gradient(&m, &params.lambda, &params.phi, &dtanh, self.spec, &mut grad);
        for i in 0..self.spec.p {
            grad.push(m[(i, i)] * params.theta[(i, i)]);
        }
        if !f.is_finite() {
            return None;
        }
        Some((f, grad))
    }
}

/// Analytic gradient of F_ML at a packed parameter vector.
pub fn ml_gradient(theta: &[f64], s: &DMatrix<f64>, spec: &ModelSpec) -> Result<Vec<f64>> {
    ml_objective(theta, s, spec).map(|(_, g)| g)
}

/// F_ML and its gradient at a packed parameter vector.
pub fn ml_objective(theta: &[f64], s: &DMatrix<f64>, spec: &ModelSpec) -> Result<(f64, Vec<f64>)> {
    if theta.len() != spec.n_free() {
        return Err(Error::Dimension(format!("{} parameters, model has {}", theta.len(), spec.n_free())));
    }
    let logdet_s = linalg::log_det_spd(s)?;
    MlProblem { s, logdet_s, spec }
        .evaluate(theta)
        .ok_or_else(|| Error::Singular("implied covariance is not positive definite".into()))
}

/// Deterministic starting point: loadings `loading`, correlations 0 and
/// unique variances .5.
pub fn start_values_with(spec: &ModelSpec, loading: f64) -> Vec<f64> {
    let mut v = vec![loading; spec.n_loadings()];
    v.extend(std::iter::repeat_n(0.0, spec.n_correlations()));
    v.extend(std::iter::repeat_n(0.5_f64.ln(), spec.p));
    v
}

pub fn start_values(spec: &ModelSpec) -> Vec<f64> {
    start_values_with(spec, 0.5)
}

/// Loading start used for the single retry after non-convergence.
pub const RESTART_LOADING: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    pub optimizer: LbfgsSettings,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { optimizer: LbfgsSettings::default() }
    }
}

pub fn fit_ml(s: &DMatrix<f64>, spec: &ModelSpec, n: usize) -> Result<EstimationResult> {
    fit_ml_with(s, spec, n, &FitSettings::default())
}

pub fn fit_ml_with(s: &DMatrix<f64>, spec: &ModelSpec, n: usize, settings: &FitSettings) -> Result<EstimationResult> {
    spec.validate()?;
    if s.shape() != (spec.p, spec.p) {
        return Err(Error::Dimension(format!("S is {:?}, model has {} variables", s.shape(), spec.p)));
    }
    if n <= spec.p {
        return Err(Error::Domain(format!("sample size {n} must exceed the number of variables {}", spec.p)));
    }
    let logdet_s = linalg::log_det_spd(s)
        .map_err(|_| Error::NotPositiveDefinite("sample covariance matrix".into()))?;
    let problem = MlProblem { s, logdet_s, spec };

    let mut notes = Vec::new();
    let mut best = optim::minimize(|t| problem.evaluate(t), &start_values(spec), &settings.optimizer);
    if !best.as_ref().is_some_and(|o| o.converged) {
        notes.push("restarted from loadings .3".to_string());
        let retry = optim::minimize(|t| problem.evaluate(t), &start_values_with(spec, RESTART_LOADING), &settings.optimizer);
        best = match (best, retry) {
            (Some(a), Some(b)) => Some(if b.converged || b.f < a.f { b } else { a }),
            (a, b) => b.or(a),
        };
    }
    let out = best.ok_or_else(|| Error::Numerical("no admissible starting point".into()))?;
    let (params, _) = unpack_ml(&out.x, spec);
    let params = align_signs(params, spec);
    Ok(EstimationResult {
        params,
        method: Method::Ml,
        converged: out.converged,
        f_min: out.f,
        iterations: out.iterations,
        n,
        df: spec.degrees_of_freedom(),
        grad_norm: optim::max_norm(&out.grad),
        notes,
    })
}

/// Flips each factor so that its salient loadings have a non-negative mean.
pub fn align_signs(mut params: FactorModelParams, spec: &ModelSpec) -> FactorModelParams {
    for j in 0..spec.q {
        let (sum, count) = (0..spec.p)
            .filter(|&i| spec.salient_factor(i) == j)
            .fold((0.0, 0), |(s, c), i| (s + params.lambda[(i, j)], c + 1));
        if count > 0 && sum < 0.0 {
            params.lambda.column_mut(j).neg_mut();
            params.phi.row_mut(j).neg_mut();
            params.phi.column_mut(j).neg_mut();
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_population_pattern, PopulationDescriptor};

    fn cell(sl: f64, cl: bool, phi: f64) -> FactorModelParams {
        build_population_pattern(&PopulationDescriptor { q: 3, p_per_factor: 5, sl, cl, phi_offdiag: phi }).unwrap()
    }

    #[test]
    fn start_values_layout() {
        let spec = ModelSpec::independent_cluster(3, 5, false).unwrap();
        let v = start_values(&spec);
        assert_eq!(v.len(), 30);
        assert!(v[..15].iter().all(|x| *x == 0.5));
        let spec = ModelSpec::independent_cluster(3, 5, true).unwrap();
        let v = start_values(&spec);
        assert_eq!(&v[15..18], &[0.0, 0.0, 0.0]);
        assert!(v[18..].iter().all(|x| (x.exp() - 0.5).abs() < 1e-15));
        assert_eq!(start_values_with(&spec, RESTART_LOADING)[0], 0.3);
    }

    #[test]
    fn degrees_of_freedom_match_design() {
        assert_eq!(ModelSpec::independent_cluster(3, 5, false).unwrap().degrees_of_freedom(), 90);
        assert_eq!(ModelSpec::independent_cluster(3, 5, true).unwrap().degrees_of_freedom(), 87);
    }

    #[test]
    fn spec_identification_checks() {
        assert!(ModelSpec::new(2, 1, vec![true, true], false).is_ok());
        assert!(ModelSpec::new(2, 1, vec![true, false], false).is_err());
        assert!(ModelSpec::new(3, 1, vec![true, true], false).is_err());
    }

    #[test]
    fn perfect_fit_recovery() {
        for &(sl, phi) in &[(0.4, 0.0), (0.8, 0.3), (0.4, 0.3)] {
            let truth = cell(sl, false, phi);
            let s = implied_covariance(&truth);
            let spec = ModelSpec::independent_cluster(3, 5, phi > 0.0).unwrap();
            let fit = fit_ml(&s, &spec, 1000).unwrap();
            assert!(fit.converged, "{:?}", fit.grad_norm);
            assert!(fit.f_min < 1e-10 && fit.f_min > -1e-10);
            assert!(linalg::max_abs(&(&fit.params.lambda - &truth.lambda)) < 1e-6);
            assert!(linalg::max_abs(&(&fit.params.phi - &truth.phi)) < 1e-6);
            assert!(linalg::max_abs(&(&fit.params.theta - &truth.theta)) < 1e-6);
        }
    }

    #[test]
    fn gradient_vanishes_for_null_loadings_and_identity() {
        let spec = ModelSpec::independent_cluster(2, 3, false).unwrap();
        let mut theta = vec![0.0; 6];
        theta.extend(std::iter::repeat_n(0.0, 6));
        let g = ml_gradient(&theta, &DMatrix::identity(6, 6), &spec).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn misfit_gives_positive_discrepancy() {
        let truth = cell(0.8, true, 0.3);
        let s = implied_covariance(&truth);
        let spec = ModelSpec::independent_cluster(3, 5, true).unwrap();
        let fit = fit_ml(&s, &spec, 1_000_000).unwrap();
        assert!(fit.converged);
        assert!(fit.f_min > 0.01);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = ModelSpec::independent_cluster(3, 5, false).unwrap();
        let mut s = implied_covariance(&cell(0.4, false, 0.0));
        assert!(fit_ml(&s, &spec, 10).is_err());
        s[(0, 0)] = 0.0;
        s.row_mut(0).fill(0.0);
        s.column_mut(0).fill(0.0);
        assert!(matches!(fit_ml(&s, &spec, 500), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn json_export_shape() {
        let truth = cell(0.8, false, 0.0);
        let spec = ModelSpec::independent_cluster(3, 5, false).unwrap();
        let fit = fit_ml(&implied_covariance(&truth), &spec, 300).unwrap();
        let doc: ParamsDocument = serde_json::from_str(&fit.to_json().unwrap()).unwrap();
        assert_eq!(doc.lambda.len(), 15);
        assert_eq!(doc.lambda[0].len(), 3);
        assert_eq!(doc.theta.len(), 15);
        assert_eq!(doc.method, Method::Ml);
        assert_eq!(doc.df, 90);
    }
}
