//! Bayesian CFA by Gibbs sampling with small-variance normal priors on
//! the non-salient loadings.
//!
//! One cycle draws the factor scores, each loading row, the unique
//! variances and the factor correlation matrix (inverse-Wishart on the
//! score scatter, rescaled to unit diagonal). Category codes are treated
//! as continuous scores.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::center;
use crate::error::{Error, Result};
use crate::linalg;
use crate::ml::{ml_discrepancy, EstimationResult, Method, ModelSpec};
use crate::model::{implied_covariance, FactorModelParams};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Prior variance of salient loadings.
    pub salient_var: f64,
    /// Prior variance of non-salient loadings.
    pub cross_var: f64,
    /// Inverse-gamma shape and scale for unique variances.
    pub ig_shape: f64,
    pub ig_scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { salient_var: 100.0, cross_var: 0.01, ig_shape: 0.001, ig_scale: 0.001 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.salient_var > 0.0 && self.cross_var > 0.0 && self.ig_shape > 0.0 && self.ig_scale > 0.0) {
            return Err(Error::Domain("prior variances and inverse-gamma parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub chains: usize,
    pub burn_in: usize,
    /// Retained draws per chain.
    pub draws: usize,
    pub thin: usize,
    /// Convergence threshold for the potential scale reduction.
    pub psr_limit: f64,
    pub keep_trace: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self { chains: 2, burn_in: 1000, draws: 2000, thin: 1, psr_limit: 1.1, keep_trace: false }
    }
}

impl McmcSettings {
    /// Shorter runs for very large n, where the posterior is tight.
    pub fn population() -> Self {
        Self { burn_in: 200, draws: 300, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub iteration: usize,
    pub parameter: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean_params: FactorModelParams,
    pub ppp: f64,
    pub chains: usize,
    pub retained_draws: usize,
    pub psr_max: f64,
    pub converged: bool,
    /// Draws skipped in the predictive check because Σ was singular.
    pub ppp_skipped: usize,
    pub n: usize,
    pub df: i64,
    pub trace: Vec<TraceRow>,
}

impl PosteriorSummary {
    pub fn to_estimation_result(&self) -> EstimationResult {
        EstimationResult {
            params: self.mean_params.clone(),
            method: Method::Bayes,
            converged: self.converged,
            f_min: f64::NAN,
            iterations: self.retained_draws,
            n: self.n,
            df: self.df,
            grad_norm: f64::NAN,
            notes: vec![format!("psr_max {:.4}", self.psr_max)],
        }
    }

    /// Trace as CSV with columns chain, iteration, parameter, value.
    /// Parameters are numbered: loadings row-major, unique variances,
    /// then factor correlations (upper triangle).
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct State {
    lambda: DMatrix<f64>,
    theta: Vec<f64>,
    phi: DMatrix<f64>,
    xi: DMatrix<f64>,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Stream) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Lower-triangular Bartlett factor A with A Aᵀ ~ Wishart(df, I).
fn bartlett(dim: usize, df: f64, rng: &mut Stream) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi = ChiSquared::new(df - i as f64).expect("Wishart degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    a
}

/// Draw from Wishart(df, scale).
pub fn sample_wishart(scale: &DMatrix<f64>, df: f64, rng: &mut Stream) -> Result<DMatrix<f64>> {
    let dim = scale.nrows();
    if df <= dim as f64 - 1.0 {
        return Err(Error::Domain(format!("Wishart needs df > {}, got {df}", dim - 1)));
    }
    let l = linalg::cholesky_lower(scale)?;
    let la = l * bartlett(dim, df, rng);
    Ok(linalg::symmetrize(&(&la * la.transpose())))
}

/// Draw from the inverse-Wishart with scale matrix `psi` and `df` degrees of freedom.
pub fn sample_inverse_wishart(psi: &DMatrix<f64>, df: f64, rng: &mut Stream) -> Result<DMatrix<f64>> {
    let w = sample_wishart(&linalg::spd_inverse(psi)?, df, rng)?;
    linalg::spd_inverse(&w)
}

/// One posterior predictive comparison: true when the replicated
/// discrepancy reaches the observed one; `None` if Σ is singular.
fn predictive_exceeds(params: &FactorModelParams, s_obs: &DMatrix<f64>, n: usize, rng: &mut Stream) -> Option<bool> {
    let sigma = implied_covariance(params);
    let d_obs = ml_discrepancy(s_obs, &sigma).ok()?;
    // (n-1)·S_rep ~ Wishart(n-1, Σ) for the covariance of n normal draws
    let s_rep = sample_wishart(&sigma, n as f64 - 1.0, rng).ok()? / (n as f64 - 1.0);
    let d_rep = ml_discrepancy(&s_rep, &sigma).ok()?;
    Some(d_rep >= d_obs)
}

/// Posterior predictive p-value over stored draws.
pub fn posterior_predictive_p(
    draws: &[FactorModelParams],
    x: &DMatrix<f64>,
    rng: &mut Stream,
) -> Result<(f64, usize)> {
    if draws.len() < 100 {
        return Err(Error::Domain(format!("need at least 100 draws, got {}", draws.len())));
    }
    let n = x.nrows();
    let (_, s_obs) = crate::datagen::sample_moments(x)?;
    let (mut hits, mut used, mut skipped) = (0usize, 0usize, 0usize);
    for d in draws {
        match predictive_exceeds(d, &s_obs, n, rng) {
            Some(b) => {
                used += 1;
                hits += b as usize;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::Numerical("every draw had a singular implied covariance".into()));
    }
    Ok((hits as f64 / used as f64, skipped))
}

struct ChainOutput {
    /// Per retained draw: packed parameters.
    draws: Vec<Vec<f64>>,
    ppp_hits: usize,
    ppp_used: usize,
    ppp_skipped: usize,
    trace: Vec<TraceRow>,
}

fn pack(state: &State) -> Vec<f64> {
    let (p, q) = state.lambda.shape();
    let mut v = Vec::with_capacity(p * q + p + q * (q - 1) / 2);
    for i in 0..p {
        for j in 0..q {
            v.push(state.lambda[(i, j)]);
        }
    }
    v.extend_from_slice(&state.theta);
    for a in 0..q {
        for b in (a + 1)..q {
            v.push(state.phi[(a, b)]);
        }
    }
    v
}

fn unpack(v: &[f64], p: usize, q: usize) -> FactorModelParams {
    let lambda = DMatrix::from_row_slice(p, q, &v[..p * q]);
    let theta = DMatrix::from_diagonal(&DVector::from_column_slice(&v[p * q..p * q + p]));
    let mut phi = DMatrix::identity(q, q);
    let mut k = p * q + p;
    for a in 0..q {
        for b in (a + 1)..q {
            phi[(a, b)] = v[k];
            phi[(b, a)] = v[k];
            k += 1;
        }
    }
    FactorModelParams { lambda, phi, theta }
}

struct Sampler<'a> {
    x: &'a DMatrix<f64>,
    xtx_diag: Vec<f64>,
    s_obs: DMatrix<f64>,
    spec: &'a ModelSpec,
    priors: &'a PriorSpec,
}

impl Sampler<'_> {
    fn initial_state(&self, chain: usize, rng: &mut Stream) -> State {
        let (n, p, q) = (self.x.nrows(), self.spec.p, self.spec.q);
        let var: Vec<f64> = self.xtx_diag.iter().map(|v| v / (n as f64 - 1.0)).collect();
        // overdispersed: salient loadings spread between .3 and 1.2 standard deviations
        let spread = if chain == 0 { 0.3 } else { 1.2 };
        let lambda = DMatrix::from_fn(p, q, |i, j| {
            if self.spec.is_free(i, j) {
                let jitter: f64 = rng.random_range(0.9..1.1);
                spread * jitter * var[i].sqrt()
            } else {
                0.0
            }
        });
        let theta = var.iter().map(|v| 0.5 * v).collect();
        State { lambda, theta, phi: DMatrix::identity(q, q), xi: DMatrix::zeros(n, q) }
    }

    fn draw_scores(&self, st: &mut State, rng: &mut Stream) -> Result<()> {
        let q = self.spec.q;
        let theta_inv_lambda = DMatrix::from_fn(self.spec.p, q, |i, j| st.lambda[(i, j)] / st.theta[i]);
        let prec = linalg::spd_inverse(&st.phi)? + st.lambda.transpose() * &theta_inv_lambda;
        let v = linalg::spd_inverse(&linalg::symmetrize(&prec))?;
        let chol_v = linalg::cholesky_lower(&v)?;
        let mean = self.x * (theta_inv_lambda * &v);
        st.xi = mean + normal_matrix(self.x.nrows(), q, rng) * chol_v.transpose();
        Ok(())
    }

    fn draw_loadings_and_uniquenesses(&self, st: &mut State, rng: &mut Stream) -> Result<()> {
        let (n, p, q) = (self.x.nrows(), self.spec.p, self.spec.q);
        let xtx = st.xi.transpose() * &st.xi;
        let xtx_data = st.xi.transpose() * self.x;
        for i in 0..p {
            let prior_prec = DMatrix::from_fn(q, q, |a, b| {
                if a != b {
                    0.0
                } else if self.spec.is_free(i, a) {
                    1.0 / self.priors.salient_var
                } else {
                    1.0 / self.priors.cross_var
                }
            });
            let prec = linalg::symmetrize(&(&xtx / st.theta[i] + prior_prec));
            let cov = linalg::spd_inverse(&prec)?;
            let mean = &cov * xtx_data.column(i) / st.theta[i];
            let z = DVector::from_fn(q, |_, _| StandardNormal.sample(rng));
            let row = mean + linalg::cholesky_lower(&cov)? * z;
            for j in 0..q {
                st.lambda[(i, j)] = row[j];
            }
            let rss = (self.xtx_diag[i] - 2.0 * row.dot(&xtx_data.column(i)) + (row.transpose() * &xtx * &row)[(0, 0)])
                .max(1e-12);
            let shape = self.priors.ig_shape + n as f64 / 2.0;
            let rate = self.priors.ig_scale + rss / 2.0;
            let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numerical(e.to_string()))?;
            st.theta[i] = 1.0 / g.sample(rng);
        }
        Ok(())
    }

    fn draw_phi(&self, st: &mut State, rng: &mut Stream) -> Result<()> {
        let q = self.spec.q;
        if !self.spec.phi_free || q == 1 {
            return Ok(());
        }
        let psi = DMatrix::identity(q, q) + st.xi.transpose() * &st.xi;
        let df = (self.x.nrows() + q + 1) as f64;
        for _ in 0..10 {
            let draw = sample_inverse_wishart(&psi, df, rng)?;
            if let Ok(r) = linalg::cov_to_cor(&draw) {
                if r.clone().cholesky().is_some() {
                    st.phi = r;
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    /// Flips factors whose salient loadings have a negative mean.
    fn align(&self, st: &mut State) {
        for j in 0..self.spec.q {
            let sum: f64 = (0..self.spec.p).filter(|&i| self.spec.is_free(i, j)).map(|i| st.lambda[(i, j)]).sum();
            if sum < 0.0 {
                st.lambda.column_mut(j).neg_mut();
                st.xi.column_mut(j).neg_mut();
                st.phi.row_mut(j).neg_mut();
                st.phi.column_mut(j).neg_mut();
            }
        }
    }

    fn run_chain(&self, chain: usize, mcmc: &McmcSettings, mut rng: Stream) -> Result<ChainOutput> {
        let mut st = self.initial_state(chain, &mut rng);
        let n = self.x.nrows();
        let total = mcmc.burn_in + mcmc.draws * mcmc.thin;
        let mut out = ChainOutput { draws: Vec::with_capacity(mcmc.draws), ppp_hits: 0, ppp_used: 0, ppp_skipped: 0, trace: vec![] };
        for it in 0..total {
            self.draw_scores(&mut st, &mut rng)?;
            self.draw_loadings_and_uniquenesses(&mut st, &mut rng)?;
            self.draw_phi(&mut st, &mut rng)?;
            self.align(&mut st);
            if it >= mcmc.burn_in && (it - mcmc.burn_in) % mcmc.thin == 0 {
                let packed = pack(&st);
                let params = FactorModelParams {
                    lambda: st.lambda.clone(),
                    phi: st.phi.clone(),
                    theta: DMatrix::from_diagonal(&DVector::from_column_slice(&st.theta)),
                };
                match predictive_exceeds(&params, &self.s_obs, n, &mut rng) {
                    Some(b) => {
                        out.ppp_used += 1;
                        out.ppp_hits += b as usize;
                    }
                    None => out.ppp_skipped += 1,
                }
                if mcmc.keep_trace {
                    let iteration = out.draws.len();
                    out.trace.extend(packed.iter().enumerate().map(|(parameter, &value)| TraceRow { chain, iteration, parameter, value }));
                }
                out.draws.push(packed);
            }
        }
        Ok(out)
    }
}

/// Largest potential scale reduction over parameters that vary.
pub fn potential_scale_reduction(chains: &[Vec<Vec<f64>>]) -> f64 {
    let m = chains.len();
    if m < 2 {
        return 1.0;
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::INFINITY;
    }
    let k = chains[0][0].len();
    let nf = n as f64;
    let mut worst: f64 = 1.0;
    for par in 0..k {
        let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().map(|d| d[par]).sum::<f64>() / nf).collect();
        let vars: Vec<f64> = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| c[..n].iter().map(|d| (d[par] - mu).powi(2)).sum::<f64>() / (nf - 1.0))
            .collect();
        let grand = means.iter().sum::<f64>() / m as f64;
        let b = nf / (m as f64 - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
        let w = vars.iter().sum::<f64>() / m as f64;
        if w <= 1e-300 {
            continue;
        }
        let v = (nf - 1.0) / nf * w + b / nf;
        worst = worst.max((v / w).sqrt());
    }
    worst
}

/// Runs the Gibbs sampler. Chain k draws from the stream
/// `(master_seed, path ++ [k])`.
pub fn fit_bayes(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    priors: &PriorSpec,
    mcmc: &McmcSettings,
    master_seed: u64,
    path: &[u64],
) -> Result<PosteriorSummary> {
    spec.validate()?;
    priors.validate()?;
    let (n, p) = x.shape();
    if p != spec.p {
        return Err(Error::Dimension(format!("data has {p} variables, model has {}", spec.p)));
    }
    if n <= p {
        return Err(Error::Domain(format!("sample size {n} must exceed the number of variables {p}")));
    }
    if mcmc.chains < 1 || mcmc.draws < 1 || mcmc.thin < 1 {
        return Err(Error::Domain("need at least one chain, draw and thinning step".into()));
    }
    let xc = center(x);
    let xtx_diag: Vec<f64> = xc.column_iter().map(|c| c.norm_squared()).collect();
    if let Some(j) = xtx_diag.iter().position(|v| *v <= 0.0) {
        return Err(Error::DegenerateVariable(j));
    }
    let s_obs = linalg::symmetrize(&(xc.transpose() * &xc / (n as f64 - 1.0)));
    let sampler = Sampler { x: &xc, xtx_diag, s_obs, spec, priors };

    let outputs: Vec<ChainOutput> = (0..mcmc.chains)
        .into_par_iter()
        .map(|k| {
            let mut chain_path = path.to_vec();
            chain_path.push(k as u64);
            sampler.run_chain(k, mcmc, rng::stream(master_seed, &chain_path))
        })
        .collect::<Result<_>>()?;

    let total: usize = outputs.iter().map(|o| o.draws.len()).sum();
    let k = outputs[0].draws[0].len();
    let mut sums = vec![0.0; k];
    for o in &outputs {
        for d in &o.draws {
            sums.iter_mut().zip(d).for_each(|(s, v)| *s += v);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / total as f64).collect();
    let mean_params = unpack(&means, spec.p, spec.q);
    let psr_max = potential_scale_reduction(&outputs.iter().map(|o| o.draws.clone()).collect::<Vec<_>>());
    let used: usize = outputs.iter().map(|o| o.ppp_used).sum();
    let hits: usize = outputs.iter().map(|o| o.ppp_hits).sum();
    let ppp = if used > 0 { hits as f64 / used as f64 } else { f64::NAN };
    Ok(PosteriorSummary {
        mean_params,
        ppp,
        chains: mcmc.chains,
        retained_draws: total,
        psr_max,
        converged: psr_max.is_finite() && psr_max <= mcmc.psr_limit,
        ppp_skipped: outputs.iter().map(|o| o.ppp_skipped).sum(),
        n,
        df: spec.degrees_of_freedom(),
        trace: outputs.into_iter().flat_map(|o| o.trace).collect(),
    })
}
