#![allow(dead_code)]

use fsdet::categorical::{estimate_thresholds, polychoric_rho};
use fsdet::ml::{ml_objective, start_values, ModelSpec};
use fsdet::model::{implied_covariance, FactorModelParams};
use fsdet::scoring::{budescu_correct, cp_weights, determinacy_bl, determinacy_cp};
use fsdet::simulation::{run_grid, write_results_csv, Design, EstimatorSet, GridAxes, GridConfig};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random admissible factor model: independent clusters with occasional
/// cross-loadings, a random correlation matrix and positive uniquenesses.
pub fn random_model(seed: u64) -> FactorModelParams {
    let mut rng = fsdet::rng::stream(seed, &[1]);
    let q = rng.random_range(1..=4);
    let ppf = rng.random_range(2..=5);
    let p = q * ppf;
    let mut lambda = DMatrix::zeros(p, q);
    for i in 0..p {
        lambda[(i, i / ppf)] = rng.random_range(0.2..0.85);
        if q > 1 && rng.random_bool(0.2) {
            let other = (i / ppf + 1) % q;
            lambda[(i, other)] = rng.random_range(-0.3..0.3);
        }
    }
    let g: DMatrix<f64> = DMatrix::from_fn(q, q + 2, |_, _| StandardNormal.sample(&mut rng));
    let phi = fsdet::linalg::cov_to_cor(&(&g * g.transpose() + DMatrix::identity(q, q) * 0.5)).unwrap();
    let common = (&lambda * &phi * lambda.transpose()).diagonal();
    let uniq: Vec<f64> = common.iter().map(|h| (1.0 - h).max(0.1)).collect();
    FactorModelParams::with_diagonal_theta(lambda, phi, &uniq).unwrap()
}

/// max |W'ΣW − Φ| for the correlation-preserving weights.
pub fn cp_preservation_error(m: &FactorModelParams) -> f64 {
    let w = cp_weights(m).unwrap();
    let sigma = implied_covariance(m);
    let d = w.transpose() * sigma * w - &m.phi;
    d.abs().max()
}

/// Largest P_CP − P_BL over factors.
pub fn cp_excess(m: &FactorModelParams) -> f64 {
    let bl = determinacy_bl(m).unwrap();
    let cp = determinacy_cp(m).unwrap();
    bl.iter().zip(&cp).map(|(b, c)| c - b).fold(f64::NEG_INFINITY, f64::max)
}

/// Checks the correction on a fine grid of coefficients for one (p, n):
/// corrected ≤ uncorrected, monotone in the coefficient, clamped at 0.
pub fn budescu_properties(p: usize, n: usize) -> Result<(), String> {
    let mut last = 0.0;
    for k in 0..=1000 {
        let r = k as f64 / 1000.0;
        let (c, clamped) = budescu_correct(r, p, n).map_err(|e| e.to_string())?;
        if c > r + 1e-15 {
            return Err(format!("corrected {c} exceeds {r}"));
        }
        if c < last - 1e-15 {
            return Err(format!("not monotone at {r}"));
        }
        if clamped != (c == 0.0) || c < 0.0 {
            return Err(format!("clamp flag inconsistent at {r}"));
        }
        last = c;
    }
    Ok(())
}

/// Relative error between the analytic ML gradient and central differences
/// at a random point near the start values.
pub fn ml_gradient_error(seed: u64) -> f64 {
    let truth = random_model(seed);
    let (p, q) = truth.lambda.shape();
    let pattern: Vec<bool> = (0..p * q).map(|k| truth.lambda[(k / q, k % q)] != 0.0).collect();
    let spec = ModelSpec::new(p, q, pattern, q > 1).unwrap();
    let s = implied_covariance(&truth);
    let mut rng = fsdet::rng::stream(seed, &[2]);
    let theta: Vec<f64> = start_values(&spec).iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    let (_, g) = ml_objective(&theta, &s, &spec).unwrap();
    let h = 1e-5;
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for k in 0..theta.len() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[k] += h;
        dn[k] -= h;
        let fd = (ml_objective(&up, &s, &spec).unwrap().0 - ml_objective(&dn, &s, &spec).unwrap().0) / (2.0 * h);
        num = num.max((g[k] - fd).abs());
        den = den.max(fd.abs());
    }
    num / den.max(1e-8)
}

/// Tetrachoric estimate from n dichotomized bivariate normal pairs.
pub fn tetrachoric_recovery(rho: f64, n: usize, seed: u64) -> f64 {
    let mut rng = fsdet::rng::stream(seed, &[3]);
    let mut table = vec![vec![0.0; 2]; 2];
    let mut m1 = [0usize; 2];
    let mut m2 = [0usize; 2];
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        let z2 = rho * z1 + s * e;
        let (a, b) = ((z1 > 0.0) as usize, (z2 > 0.0) as usize);
        table[a][b] += 1.0;
        m1[a] += 1;
        m2[b] += 1;
    }
    let t1 = estimate_thresholds(&m1).unwrap();
    let t2 = estimate_thresholds(&m2).unwrap();
    polychoric_rho(&table, &t1.cut_points, &t2.cut_points).unwrap().rho
}

/// Small seeded grid rendered to CSV bytes.
pub fn small_grid_csv(seed: u64) -> Vec<u8> {
    let mut cfg = GridConfig::new(Design::Sample);
    cfg.seed = seed;
    cfg.replications = 3;
    cfg.grid = Some(GridAxes { q: vec![2], p_per_factor: vec![4], sl: vec![0.8], cl: vec![0, 1], phi: vec![0.0], c: vec![2, 4], n: vec![200] });
    cfg.estimators = Some(EstimatorSet { ml: true, wlsmv: true, bayes: false });
    let result = run_grid(&cfg, &|_| {}).unwrap();
    let mut buf = Vec::new();
    write_results_csv(&result.cells, &mut buf).unwrap();
    buf
}
