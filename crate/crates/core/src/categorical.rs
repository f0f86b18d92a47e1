//! Two-stage categorical estimation: thresholds from the margins,
//! pairwise polychoric correlations with thresholds held fixed, and a
//! diagonally weighted least squares fit of the factor model to the
//! polychoric matrix (delta parameterization).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ml::{self, EstimationResult, Method, ModelSpec};
use crate::model::FactorModelParams;
use crate::normal;
use crate::optim::{self, LbfgsSettings};

/// Largest polychoric correlation magnitude reported; larger estimates are clamped.
pub const RHO_CLAMP: f64 = 0.999;
const SEARCH_BOUND: f64 = 0.999_99;
const BRENT_TOL: f64 = 1e-8;

/// Thresholds estimated from one variable's category histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEstimate {
    pub cut_points: Vec<f64>,
    /// Maps each observed category code to its (possibly collapsed) index.
    pub category_map: Vec<usize>,
    /// True when empty categories forced thresholds to be dropped.
    pub dropped: bool,
}

impl ThresholdEstimate {
    pub fn n_categories(&self) -> usize {
        self.cut_points.len() + 1
    }
}

/// τ̂_k = Φ⁻¹(cumulative proportion through category k). Empty categories
/// yield no threshold of their own and are merged with a neighbour.
pub fn estimate_thresholds(counts: &[usize]) -> Result<ThresholdEstimate> {
    estimate_thresholds_for(counts, 0)
}

fn estimate_thresholds_for(counts: &[usize], var: usize) -> Result<ThresholdEstimate> {
    let total: usize = counts.iter().sum();
    let occupied = counts.iter().filter(|c| **c > 0).count();
    if total == 0 || occupied < 2 {
        return Err(Error::DegenerateVariable(var));
    }
    let mut cut_points = Vec::new();
    let mut category_map = Vec::with_capacity(counts.len());
    let mut cum = 0usize;
    for (k, &count) in counts.iter().enumerate() {
        category_map.push(cut_points.len());
        cum += count;
        if k + 1 < counts.len() && count > 0 && cum < total {
            cut_points.push(normal::inv_cdf(cum as f64 / total as f64));
        }
    }
    // A trailing threshold is only kept if a later category is occupied;
    // the loop above already guarantees `cum < total` for that.
    let dropped = cut_points.len() + 1 != counts.len();
    Ok(ThresholdEstimate { cut_points, category_map, dropped })
}

/// Polychoric estimate for one pair of variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub rho: f64,
    pub asy_var: f64,
    /// ½ was added to every cell because of an empty off-diagonal cell.
    pub smoothed: bool,
    /// |ρ̂| exceeded the clamp bound.
    pub clamped: bool,
}

struct PairLikelihood<'a> {
    table: &'a [Vec<f64>],
    /// Cut points with infinite ends: category a spans (gi[a], gi[a + 1]).
    gi: Vec<f64>,
    gj: Vec<f64>,
}

impl<'a> PairLikelihood<'a> {
    fn new(table: &'a [Vec<f64>], tau_i: &[f64], tau_j: &[f64]) -> Self {
        let grid = |tau: &[f64]| {
            let mut g = vec![f64::NEG_INFINITY];
            g.extend_from_slice(tau);
            g.push(f64::INFINITY);
            g
        };
        Self { table, gi: grid(tau_i), gj: grid(tau_j) }
    }

    /// Rectangle probabilities from one evaluation per grid corner.
    fn rectangles(&self, corner: impl Fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
        let (ni, nj) = (self.gi.len(), self.gj.len());
        let f: Vec<Vec<f64>> = (0..ni).map(|a| (0..nj).map(|b| corner(self.gi[a], self.gj[b])).collect()).collect();
        (0..ni - 1)
            .map(|a| (0..nj - 1).map(|b| f[a + 1][b + 1] - f[a][b + 1] - f[a + 1][b] + f[a][b]).collect())
            .collect()
    }

    fn probabilities(&self, rho: f64) -> Vec<Vec<f64>> {
        self.rectangles(|h, k| normal::bvn_cdf(h, k, rho))
    }

    /// ∂π/∂ρ using ∂Φ₂(h, k; ρ)/∂ρ = φ₂(h, k; ρ).
    fn derivatives(&self, rho: f64) -> Vec<Vec<f64>> {
        self.rectangles(|h, k| normal::bvn_pdf(h, k, rho))
    }

    fn log_likelihood(&self, rho: f64) -> f64 {
        let pi = self.probabilities(rho);
        let mut ll = 0.0;
        for (row, prow) in self.table.iter().zip(&pi) {
            for (&n_ab, &p) in row.iter().zip(prow) {
                if n_ab > 0.0 {
                    ll += n_ab * p.max(1e-300).ln();
                }
            }
        }
        ll
    }

    fn score(&self, rho: f64) -> f64 {
        let pi = self.probabilities(rho);
        let dpi = self.derivatives(rho);
        let mut s = 0.0;
        for (a, row) in self.table.iter().enumerate() {
            for (b, &n_ab) in row.iter().enumerate() {
                if n_ab > 0.0 {
                    s += n_ab * dpi[a][b] / pi[a][b].max(1e-300);
                }
            }
        }
        s
    }

    fn expected_information(&self, rho: f64) -> f64 {
        let total: f64 = self.table.iter().flatten().sum();
        let pi = self.probabilities(rho);
        let dpi = self.derivatives(rho);
        let mut info = 0.0;
        for (prow, drow) in pi.iter().zip(&dpi) {
            for (&p, &d) in prow.iter().zip(drow) {
                if p > 1e-300 {
                    info += d * d / p;
                }
            }
        }
        total * info
    }
}

/// Brent's minimizer on [a, b].
fn brent_minimize(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    x
}

/// Maximum-likelihood polychoric correlation for one contingency table
/// with thresholds held fixed.
pub fn polychoric_rho(table: &[Vec<f64>], tau_i: &[f64], tau_j: &[f64]) -> Result<PairEstimate> {
    let rows = table.len();
    if rows != tau_i.len() + 1 || table.iter().any(|r| r.len() != tau_j.len() + 1) {
        return Err(Error::Dimension(format!(
            "table is {rows}x{}, thresholds imply {}x{}",
            table.first().map_or(0, |r| r.len()),
            tau_i.len() + 1,
            tau_j.len() + 1
        )));
    }
    if tau_i.windows(2).chain(tau_j.windows(2)).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("thresholds must be ascending".into()));
    }
    let total: f64 = table.iter().flatten().sum();
    if total < 2.0 {
        return Err(Error::Domain(format!("table total {total} is below two")));
    }

    let mut work: Vec<Vec<f64>> = table.to_vec();
    let smoothed = rows == 2 && work[0].len() == 2 && (work[0][1] == 0.0 || work[1][0] == 0.0);
    if smoothed {
        work.iter_mut().flatten().for_each(|v| *v += 0.5);
    }
    let lik = PairLikelihood::new(&work, tau_i, tau_j);
    let mut rho = brent_minimize(|r| -lik.log_likelihood(r), -SEARCH_BOUND, SEARCH_BOUND, BRENT_TOL);
    let clamped = rho.abs() > RHO_CLAMP;
    if clamped {
        rho = RHO_CLAMP.copysign(rho);
    }

    let h = 1e-5_f64.min((SEARCH_BOUND - rho.abs()) / 2.0).max(1e-7);
    let observed = -(lik.score(rho + h) - lik.score(rho - h)) / (2.0 * h);
    let info = if observed.is_finite() && observed > 0.0 { observed } else { lik.expected_information(rho) };
    let work_total: f64 = work.iter().flatten().sum();
    let mut asy_var = 1.0 / info;
    if !(asy_var.is_finite() && asy_var > 0.0) {
        // large-sample variance of a correlation coefficient
        asy_var = (1.0 - rho * rho).powi(2).max(1e-12) / work_total;
    }
    Ok(PairEstimate { rho, asy_var, smoothed, clamped })
}

/// Pairwise polychoric correlations with their thresholds and asymptotic variances.
#[derive(Debug, Clone)]
pub struct PolychoricMatrix {
    pub rho: DMatrix<f64>,
    pub thresholds: Vec<Vec<f64>>,
    /// Pair order (0,1), (0,2), ..., (p-2,p-1).
    pub asy_var: Vec<f64>,
    pub pairs: Vec<PairEstimate>,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolychoricDocument {
    pub rho: Vec<Vec<f64>>,
    pub thresholds: Vec<Vec<f64>>,
    pub asy_var: Vec<f64>,
    pub n: usize,
}

impl PolychoricMatrix {
    pub fn p(&self) -> usize {
        self.rho.nrows()
    }

    pub fn to_document(&self) -> PolychoricDocument {
        PolychoricDocument {
            rho: (0..self.p()).map(|i| self.rho.row(i).iter().cloned().collect()).collect(),
            thresholds: self.thresholds.clone(),
            asy_var: self.asy_var.clone(),
            n: self.n,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn n_smoothed(&self) -> usize {
        self.pairs.iter().filter(|p| p.smoothed).count()
    }

    pub fn n_clamped(&self) -> usize {
        self.pairs.iter().filter(|p| p.clamped).count()
    }
}

pub fn pair_index(i: usize, j: usize, p: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    i * p - i * (i + 1) / 2 + (j - i - 1)
}

fn category_codes(x: &DMatrix<f64>) -> Result<(Vec<Vec<u8>>, Vec<usize>)> {
    let (n, p) = x.shape();
    let mut codes = vec![vec![0u8; n]; p];
    let mut max_code = vec![0usize; p];
    for j in 0..p {
        for i in 0..n {
            let v = x[(i, j)];
            if !(v >= 0.0 && v < 64.0 && v.fract() == 0.0) {
                return Err(Error::Domain(format!(
                    "variable {} holds {v}; polychoric correlations need category codes 0..63",
                    j + 1
                )));
            }
            codes[j][i] = v as u8;
            max_code[j] = max_code[j].max(v as usize);
        }
    }
    Ok((codes, max_code))
}

/// Thresholds per variable and all pairwise polychoric correlations of
/// category-coded data. The result is not guaranteed to be positive definite.
pub fn polychoric_matrix(x: &DMatrix<f64>) -> Result<PolychoricMatrix> {
    let (n, p) = x.shape();
    if n < 2 || p < 2 {
        return Err(Error::Domain("need at least two cases and two variables".into()));
    }
    let (codes, max_code) = category_codes(x)?;
    let estimates: Vec<ThresholdEstimate> = (0..p)
        .map(|j| {
            let mut counts = vec![0usize; max_code[j] + 1];
            codes[j].iter().for_each(|&c| counts[c as usize] += 1);
            estimate_thresholds_for(&counts, j)
        })
        .collect::<Result<_>>()?;
    let collapsed: Vec<Vec<u8>> = (0..p)
        .map(|j| codes[j].iter().map(|&c| estimates[j].category_map[c as usize] as u8).collect())
        .collect();

    let pair_list: Vec<(usize, usize)> = (0..p).flat_map(|i| ((i + 1)..p).map(move |j| (i, j))).collect();
    let pairs: Vec<PairEstimate> = pair_list
        .par_iter()
        .map(|&(i, j)| {
            let (ci, cj) = (estimates[i].n_categories(), estimates[j].n_categories());
            let mut table = vec![vec![0.0; cj]; ci];
            for (&a, &b) in collapsed[i].iter().zip(&collapsed[j]) {
                table[a as usize][b as usize] += 1.0;
            }
            polychoric_rho(&table, &estimates[i].cut_points, &estimates[j].cut_points)
                .map_err(|e| Error::Pair { i, j, reason: e.to_string() })
        })
        .collect::<Result<_>>()?;

    let mut rho = DMatrix::identity(p, p);
    for (&(i, j), est) in pair_list.iter().zip(&pairs) {
        rho[(i, j)] = est.rho;
        rho[(j, i)] = est.rho;
    }
    Ok(PolychoricMatrix {
        rho,
        thresholds: estimates.into_iter().map(|e| e.cut_points).collect(),
        asy_var: pairs.iter().map(|e| e.asy_var).collect(),
        pairs,
        n,
    })
}

struct DwlsProblem<'a> {
    r: &'a DMatrix<f64>,
    /// Symmetric weight matrix with zero diagonal, normalized to mean one.
    w: DMatrix<f64>,
    spec: &'a ModelSpec,
}

impl DwlsProblem<'_> {
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (lambda, phi, dtanh, _) = ml::unpack_structure(theta, self.spec);
        if phi.nrows() > 1 && phi.clone().cholesky().is_none() {
            return None;
        }
        let sigma = &lambda * &phi * lambda.transpose();
        let p = self.spec.p;
        let mut f = 0.0;
        // dF/dΣ with dF = tr(G dΣ) over the symmetric off-diagonal entries
        let mut g = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in (i + 1)..p {
                let diff = sigma[(i, j)] - self.r[(i, j)];
                f += self.w[(i, j)] * diff * diff;
                g[(i, j)] = self.w[(i, j)] * diff;
                g[(j, i)] = g[(i, j)];
            }
        }
        let mut grad = Vec::with_capacity(theta.len());
        ml::structure_gradient(&g, &lambda, &phi, &dtanh, self.spec, &mut grad);
        f.is_finite().then_some((f, grad))
    }
}

/// Weighted least squares discrepancy and gradient at a packed
/// loading/correlation vector, with weights `w` on the off-diagonal cells.
pub fn dwls_objective(theta: &[f64], r: &DMatrix<f64>, w: &DMatrix<f64>, spec: &ModelSpec) -> Option<(f64, Vec<f64>)> {
    DwlsProblem { r, w: w.clone(), spec }.evaluate(theta)
}

/// Builds the symmetric weight matrix from asymptotic variances; `None`
/// when any weight is not finite and positive.
pub fn dwls_weights(poly: &PolychoricMatrix) -> Option<DMatrix<f64>> {
    let p = poly.p();
    let mut w = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 1.0 / poly.asy_var[pair_index(i, j, p)];
            if !(v.is_finite() && v > 0.0) {
                return None;
            }
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Some(w)
}

pub fn fit_dwls(poly: &PolychoricMatrix, spec: &ModelSpec) -> Result<EstimationResult> {
    let mut notes = Vec::new();
    let p = poly.p();
    let w = match dwls_weights(poly) {
        Some(w) => w,
        None => {
            notes.push("non-finite weights: unit weights (ULS) used".to_string());
            DMatrix::from_fn(p, p, |i, j| if i == j { 0.0 } else { 1.0 })
        }
    };
    let mut out = fit_weighted(&poly.rho, &w, spec, &LbfgsSettings::default())?;
    out.n = poly.n;
    out.notes.extend(notes);
    Ok(out)
}

/// Fits ΛΦΛ' to the off-diagonal of a correlation matrix `r` under weights
/// `w`; uniquenesses are 1 - communality.
pub fn fit_weighted(r: &DMatrix<f64>, w: &DMatrix<f64>, spec: &ModelSpec, settings: &LbfgsSettings) -> Result<EstimationResult> {
    spec.validate()?;
    let p = spec.p;
    if r.shape() != (p, p) || w.shape() != (p, p) {
        return Err(Error::Dimension(format!("correlation matrix is {:?}, model has {p} variables", r.shape())));
    }
    let pairs = (p * (p - 1) / 2) as f64;
    let mean_w = (0..p).flat_map(|i| ((i + 1)..p).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).sum::<f64>() / pairs;
    if !(mean_w.is_finite() && mean_w > 0.0) {
        return Err(Error::Domain("weights must be positive".into()));
    }
    let problem = DwlsProblem { r, w: w / mean_w, spec };

    let n_struct = spec.n_loadings() + spec.n_correlations();
    let start = |l: f64| {
        let mut v = vec![l; spec.n_loadings()];
        v.extend(std::iter::repeat_n(0.0, spec.n_correlations()));
        v
    };
    let mut notes = Vec::new();
    let mut best = optim::minimize(|t| problem.evaluate(t), &start(0.5), settings);
    if !best.as_ref().is_some_and(|o| o.converged) {
        notes.push("restarted from loadings .3".to_string());
        let retry = optim::minimize(|t| problem.evaluate(t), &start(ml::RESTART_LOADING), settings);
        best = match (best, retry) {
            (Some(a), Some(b)) => Some(if b.converged || b.f < a.f { b } else { a }),
            (a, b) => b.or(a),
        };
    }
    let out = best.ok_or_else(|| Error::Numerical("no admissible starting point".into()))?;
    debug_assert_eq!(out.x.len(), n_struct);
    let (lambda, phi, _, _) = ml::unpack_structure(&out.x, spec);
    let common = &lambda * &phi * lambda.transpose();
    let uniq: Vec<f64> = (0..p).map(|i| 1.0 - common[(i, i)]).collect();
    if uniq.iter().any(|u| *u <= 0.0) {
        notes.push("negative residual variance (Heywood case)".to_string());
    }
    let theta = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(uniq));
    let params = ml::align_signs(FactorModelParams { lambda, phi, theta }, spec);
    Ok(EstimationResult {
        params,
        method: Method::Dwls,
        converged: out.converged,
        f_min: out.f * mean_w,
        iterations: out.iterations,
        n: 0,
        df: (p * (p - 1) / 2) as i64 - n_struct as i64,
        grad_norm: optim::max_norm(&out.grad),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_population_pattern, implied_covariance, PopulationDescriptor};
    use std::f64::consts::PI;

    #[test]
    fn thresholds_from_counts() {
        let t = estimate_thresholds(&[500, 500]).unwrap();
        assert_eq!(t.cut_points.len(), 1);
        assert!(t.cut_points[0].abs() < 1e-15);
        let t = estimate_thresholds(&[125, 375, 375, 125]).unwrap();
        for (a, b) in t.cut_points.iter().zip([-1.1503, 0.0, 1.1503]) {
            assert!((a - b).abs() < 5e-5);
        }
        assert!(!t.dropped);
        assert!(matches!(estimate_thresholds(&[1000, 0]), Err(Error::DegenerateVariable(_))));
    }

    #[test]
    fn empty_edge_categories_drop_thresholds() {
        let t = estimate_thresholds(&[0, 300, 700]).unwrap();
        assert_eq!(t.cut_points.len(), 1);
        assert!(t.dropped);
        assert_eq!(t.category_map, vec![0, 0, 1]);
        let t = estimate_thresholds(&[300, 700, 0]).unwrap();
        assert_eq!(t.cut_points.len(), 1);
        assert_eq!(t.category_map, vec![0, 1, 1]);
        let t = estimate_thresholds(&[300, 0, 700]).unwrap();
        assert_eq!(t.cut_points.len(), 1);
        assert_eq!(t.category_map, vec![0, 1, 1]);
    }

    #[test]
    fn independence_table_gives_zero() {
        let (a, b) = (0.3, 0.6);
        let table = vec![vec![1000.0 * a * b, 1000.0 * a * (1.0 - b)], vec![1000.0 * (1.0 - a) * b, 1000.0 * (1.0 - a) * (1.0 - b)]];
        let ti = [normal::inv_cdf(a)];
        let tj = [normal::inv_cdf(b)];
        let est = polychoric_rho(&table, &ti, &tj).unwrap();
        assert!(est.rho.abs() < 1e-6, "{est:?}");
        assert!(est.asy_var > 0.0);
    }

    #[test]
    fn tetrachoric_from_arcsine_law() {
        // P(++) = 1/4 + asin(ρ)/(2π) at ρ = .64
        let pp: f64 = 0.25 + 0.64_f64.asin() / (2.0 * PI);
        assert!((pp - 0.3605).abs() < 5e-5);
        let table = vec![vec![0.3605, 0.1395], vec![0.1395, 0.3605]];
        let table: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| v * 10_000.0).collect()).collect();
        let est = polychoric_rho(&table, &[0.0], &[0.0]).unwrap();
        assert!((est.rho - 0.64).abs() < 1e-3, "{est:?}");
    }

    #[test]
    fn diagonal_only_table_is_smoothed_and_clamped() {
        let table = vec![vec![500.0, 0.0], vec![0.0, 500.0]];
        let est = polychoric_rho(&table, &[0.0], &[0.0]).unwrap();
        assert!(est.smoothed && est.clamped);
        assert_eq!(est.rho, RHO_CLAMP);
        assert!(est.asy_var > 0.0);
    }

    #[test]
    fn bad_tables_are_rejected() {
        assert!(polychoric_rho(&[vec![1.0, 0.0]], &[0.0], &[0.0]).is_err());
        assert!(polychoric_rho(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn continuous_input_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(polychoric_matrix(&x).is_err());
    }

    #[test]
    fn two_variables_reduce_to_pair() {
        let rows: Vec<[f64; 2]> = (0..400).map(|i| {
            let a = (i % 2) as f64;
            let b = if i % 5 == 0 { 1.0 - a } else { a };
            [a, b]
        }).collect();
        let x = DMatrix::from_fn(400, 2, |i, j| rows[i][j]);
        let poly = polychoric_matrix(&x).unwrap();
        let mut table = vec![vec![0.0; 2]; 2];
        rows.iter().for_each(|r| table[r[0] as usize][r[1] as usize] += 1.0);
        let direct = polychoric_rho(&table, &poly.thresholds[0], &poly.thresholds[1]).unwrap();
        assert_eq!(poly.rho[(0, 1)], direct.rho);
        assert_eq!(poly.asy_var, vec![direct.asy_var]);
    }

    #[test]
    fn pair_index_layout() {
        let p = 5;
        let mut k = 0;
        for i in 0..p {
            for j in (i + 1)..p {
                assert_eq!(pair_index(i, j, p), k);
                assert_eq!(pair_index(j, i, p), k);
                k += 1;
            }
        }
    }

    fn exact_poly(params: &FactorModelParams, asy: impl Fn(usize) -> f64) -> PolychoricMatrix {
        let r = implied_covariance(params);
        let p = r.nrows();
        let asy_var: Vec<f64> = (0..p * (p - 1) / 2).map(asy).collect();
        PolychoricMatrix {
            rho: r,
            thresholds: vec![vec![0.0]; p],
            pairs: asy_var.iter().map(|&v| PairEstimate { rho: 0.0, asy_var: v, smoothed: false, clamped: false }).collect(),
            asy_var,
            n: 1000,
        }
    }

    #[test]
    fn dwls_perfect_fit_recovery_is_weight_invariant() {
        let truth = build_population_pattern(&PopulationDescriptor { q: 3, p_per_factor: 5, sl: 0.8, cl: false, phi_offdiag: 0.3 })
            .unwrap();
        let spec = ModelSpec::independent_cluster(3, 5, true).unwrap();
        let dwls = fit_dwls(&exact_poly(&truth, |k| 0.001 + 0.0005 * (k % 7) as f64), &spec).unwrap();
        let uls = fit_dwls(&exact_poly(&truth, |_| f64::NAN), &spec).unwrap();
        assert!(uls.notes.iter().any(|n| n.contains("ULS")));
        for fit in [&dwls, &uls] {
            assert!(fit.converged);
            assert!(crate::linalg::max_abs(&(&fit.params.lambda - &truth.lambda)) < 1e-6);
            assert!(crate::linalg::max_abs(&(&fit.params.phi - &truth.phi)) < 1e-6);
            assert!(crate::linalg::max_abs(&(&fit.params.theta - &truth.theta)) < 1e-6);
        }
        assert!(crate::linalg::max_abs(&(&dwls.params.lambda - &uls.params.lambda)) < 1e-6);
        assert_eq!(dwls.df, 87);
    }
}
