//! Factor-model data generation with retained true scores, and
//! discretization into symmetric binomial categories.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::FactorModelParams;
use crate::normal;

/// Observed scores together with the factor and unique scores that built them.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    /// n×p observed scores; category codes 0..c-1 once categorized.
    pub x: DMatrix<f64>,
    /// n×q common factor scores.
    pub xi_true: DMatrix<f64>,
    /// n×p unique scores.
    pub eps_true: DMatrix<f64>,
    /// Number of categories; 0 for continuous data.
    pub c: usize,
    /// Per-variable ascending cut points in z units (empty when continuous).
    pub thresholds: Vec<Vec<f64>>,
}

impl GeneratedSample {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.xi_true.ncols()
    }

    pub fn is_categorical(&self) -> bool {
        self.c >= 2
    }

    /// Writes `x1..xp, xi1..xiq` as CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=self.p())
            .map(|j| format!("x{j}"))
            .chain((1..=self.q()).map(|j| format!("xi{j}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.n() {
            let row: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.xi_true.row(i).iter())
                .map(|v| format!("{v}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws n cases: ξ ~ N(0, Φ), ε ~ N(0, Θ), x = ξΛ' + ε.
pub fn sample_continuous<R: Rng + ?Sized>(params: &FactorModelParams, n: usize, rng: &mut R) -> Result<GeneratedSample> {
    if n < 1 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    params.check_dimensions()?;
    let (p, q) = (params.p(), params.q());
    let phi_root = linalg::cholesky_lower(&params.phi)
        .map_err(|_| Error::Generation("factor correlation matrix is not positive definite".into()))?;
    let theta_root = linalg::cholesky_lower(&params.theta)
        .map_err(|_| Error::Generation("residual covariance is not positive definite".into()))?;

    let mut xi = DMatrix::zeros(n, q);
    let mut eps = DMatrix::zeros(n, p);
    let mut z_f = vec![0.0; q];
    let mut z_u = vec![0.0; p];
    for i in 0..n {
        z_f.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
        z_u.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
        for a in 0..q {
            xi[(i, a)] = (0..=a).map(|b| phi_root[(a, b)] * z_f[b]).sum();
        }
        for j in 0..p {
            eps[(i, j)] = (0..=j).map(|b| theta_root[(j, b)] * z_u[b]).sum();
        }
    }
    let x = &xi * params.lambda.transpose() + &eps;
    Ok(GeneratedSample { x, xi_true: xi, eps_true: eps, c: 0, thresholds: Vec::new() })
}

/// Cut points that give Binomial(c-1, ½) category proportions under N(0, 1).
pub fn binomial_thresholds(c: usize) -> Result<Vec<f64>> {
    if c < 2 {
        return Err(Error::Domain(format!("need at least two categories, got {c}")));
    }
    let trials = (c - 1) as i32;
    let total = 2f64.powi(trials);
    let mut cum = 0.0;
    let mut lower = Vec::with_capacity(c / 2);
    // Lower half only; the rest is mirrored so symmetry is exact.
    for k in 1..c {
        cum += binomial_coefficient(c - 1, k - 1) / total;
        if 2 * k < c {
            lower.push(normal::inv_cdf(cum));
        }
    }
    let mut tau = lower.clone();
    if c % 2 == 0 {
        tau.push(0.0);
    }
    tau.extend(lower.iter().rev().map(|t| -t));
    debug_assert_eq!(tau.len(), c - 1);
    Ok(tau)
}

fn binomial_coefficient(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Category index #{k : value > τ_k}; values exactly on a threshold go to
/// the lower category.
pub fn category_of(value: f64, thresholds: &[f64]) -> usize {
    thresholds.partition_point(|t| value > *t)
}

/// Discretizes every observed variable with the same cut points. An empty
/// threshold list leaves the data continuous.
pub fn categorize(sample: &GeneratedSample, thresholds: &[f64]) -> Result<GeneratedSample> {
    categorize_per_variable(sample, &vec![thresholds.to_vec(); sample.p()])
}

pub fn categorize_per_variable(sample: &GeneratedSample, thresholds: &[Vec<f64>]) -> Result<GeneratedSample> {
    if sample.is_categorical() {
        return Err(Error::Domain("sample is already categorical".into()));
    }
    if thresholds.len() != sample.p() {
        return Err(Error::Dimension(format!("{} threshold sets for {} variables", thresholds.len(), sample.p())));
    }
    for t in thresholds {
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("thresholds must be strictly ascending".into()));
        }
    }
    if thresholds.iter().all(|t| t.is_empty()) {
        return Ok(sample.clone());
    }
    let c = thresholds[0].len() + 1;
    if thresholds.iter().any(|t| t.len() + 1 != c) {
        return Err(Error::Domain("all variables must share the category count".into()));
    }
    let x = DMatrix::from_fn(sample.n(), sample.p(), |i, j| category_of(sample.x[(i, j)], &thresholds[j]) as f64);
    Ok(GeneratedSample {
        x,
        xi_true: sample.xi_true.clone(),
        eps_true: sample.eps_true.clone(),
        c,
        thresholds: thresholds.to_vec(),
    })
}

/// Column means and unbiased (n-1) covariance matrix.
pub fn sample_moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Domain(format!("need at least two cases for a covariance, got {n}")));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let s = centered.tr_mul(&centered) / (n as f64 - 1.0);
    Ok((mean, linalg::symmetrize(&s)))
}

/// Column-centered copy of `x`.
pub fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Column-standardized copy of `x` (unit sample variance, n-1 divisor).
pub fn standardize(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, s) = sample_moments(x)?;
    let mut c = center(x);
    for (j, mut col) in c.column_iter_mut().enumerate() {
        let sd = s[(j, j)].sqrt();
        if !(sd > 0.0) {
            return Err(Error::Domain(format!("variable {} has zero variance", j + 1)));
        }
        col /= sd;
    }
    Ok(c)
}
