//! Limited-memory BFGS with a backtracking line search using safeguarded
//! quadratic/cubic interpolation. Objectives may refuse a point by
//! returning `None` (e.g. a non-positive-definite implied covariance); the
//! line search then shrinks the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iter: usize,
    /// Convergence when the gradient max-norm falls below this value.
    pub gtol: f64,
    /// Stall detection: relative objective change below this for
    /// `stall_iters` consecutive iterations stops the search.
    pub ftol: f64,
    pub stall_iters: usize,
    /// A search that stops on a stall or an exhausted line search counts
    /// as converged when the gradient max-norm is below this value.
    pub stall_gtol: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self { memory: 10, max_iter: 500, gtol: 1e-7, ftol: 1e-10, stall_iters: 5, stall_gtol: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimizes `objective`, which returns `(value, gradient)` or `None` when
/// the point is inadmissible. Returns `None` if the starting point is
/// inadmissible.
pub fn minimize<F>(mut objective: F, x0: &[f64], settings: &LbfgsSettings) -> Option<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut stall = 0;
    let mut iterations = 0;
    let mut precision_stop = false;

    while iterations < settings.max_iter {
        if max_norm(&g) < settings.gtol {
            break;
        }
        iterations += 1;

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // Not a descent direction: restart from steepest descent.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let initial_step = if pairs.is_empty() { (1.0 / max_norm(&d)).min(1.0) } else { 1.0 };
        let Some((step, f_new, g_new)) = line_search(&mut objective, &x, f, slope, &d, initial_step) else {
            if pairs.is_empty() {
                precision_stop = true;
                break;
            }
            pairs.clear();
            continue;
        };

        let s: Vec<f64> = d.iter().map(|di| step * di).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == settings.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let rel = (f - f_new).abs() / f.abs().max(f_new.abs()).max(1.0);
        f = f_new;
        g = g_new;
        history.push(f);
        if rel < settings.ftol {
            stall += 1;
            if stall >= settings.stall_iters {
                precision_stop = true;
                break;
            }
        } else {
            stall = 0;
        }
    }
    let gnorm = max_norm(&g);
    let converged = gnorm < settings.gtol || (precision_stop && gnorm < settings.stall_gtol);
    Some(LbfgsOutcome { x, f, grad: g, iterations, converged, history })
}

/// Backtracking Armijo search; returns the accepted step with its value
/// and gradient. Never accepts an increase of the objective.
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f0: f64,
    slope: f64,
    d: &[f64],
    initial: f64,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    let mut alpha = initial;
    let mut prev: Option<(f64, f64)> = None;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..60 {
        trial.iter_mut().zip(x.iter().zip(d)).for_each(|(t, (xi, di))| *t = xi + alpha * di);
        match objective(&trial) {
            Some((ft, gt)) if ft.is_finite() && gt.iter().all(|v| v.is_finite()) => {
                if ft <= f0 + C1 * alpha * slope && ft <= f0 {
                    return Some((alpha, ft, gt));
                }
                let next = match prev {
                    None => {
                        // Quadratic through f0, slope and f(alpha).
                        -slope * alpha * alpha / (2.0 * (ft - f0 - slope * alpha))
                    }
                    Some((a_prev, f_prev)) => {
                        let r1 = ft - f0 - slope * alpha;
                        let r2 = f_prev - f0 - slope * a_prev;
                        let a = (r1 / (alpha * alpha) - r2 / (a_prev * a_prev)) / (alpha - a_prev);
                        let b = (-a_prev * r1 / (alpha * alpha) + alpha * r2 / (a_prev * a_prev)) / (alpha - a_prev);
                        if a.abs() < 1e-300 {
                            -slope / (2.0 * b)
                        } else {
                            let disc = b * b - 3.0 * a * slope;
                            if disc < 0.0 {
                                0.5 * alpha
                            } else {
                                (-b + disc.sqrt()) / (3.0 * a)
                            }
                        }
                    }
                };
                prev = Some((alpha, ft));
                let next = if next.is_finite() { next } else { 0.5 * alpha };
                alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
            }
            _ => {
                prev = None;
                alpha *= 0.2;
            }
        }
        if alpha < 1e-20 {
            break;
        }
    }
    None
}
