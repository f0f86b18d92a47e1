//! End-to-end acceptance checks. Each test prints one PASS/FAIL line per
//! criterion to standard error.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use fsdet::bayes::McmcSettings;
use fsdet::report::{self, ResultRow, VerifyReport};
use fsdet::simulation::{
    run_population_cell, run_sample_cell, write_results_csv, CellSummary, ConditionSpec, EstimatorSet,
    DEFAULT_POPULATION_SIZE,
};

const SEED: u64 = 20_240_501;
const SAMPLE_REPS: usize = 200;
const BAYES_REPS: usize = 100;

fn line(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {status} {criterion}: {detail}");
}

fn cell(sl: f64, cl: bool, phi: f64, c: usize, n: usize, estimators: EstimatorSet) -> ConditionSpec {
    ConditionSpec {
        q: 3,
        p_per_factor: 5,
        sl,
        cl,
        phi,
        c,
        n,
        population: n == DEFAULT_POPULATION_SIZE,
        replications: 1,
        estimators,
        bayes_replications: None,
        master_seed: SEED,
    }
}

const ML_WLSMV: EstimatorSet = EstimatorSet { ml: true, wlsmv: true, bayes: false };
const BAYES: EstimatorSet = EstimatorSet { ml: false, wlsmv: false, bayes: true };

/// Summaries written to results.csv and read back.
fn to_rows(cells: &[CellSummary]) -> Vec<ResultRow> {
    let mut buf = Vec::new();
    write_results_csv(cells, &mut buf).unwrap();
    report::read_results(buf.as_slice()).unwrap()
}

fn population_rows() -> &'static [ResultRow] {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let mut cells = Vec::new();
        for (sl, cl, phi) in [(0.8, false, 0.0), (0.4, false, 0.0), (0.8, true, 0.3), (0.8, false, 0.3), (0.4, false, 0.3)] {
            let spec = cell(sl, cl, phi, 2, DEFAULT_POPULATION_SIZE, ML_WLSMV);
            cells.push(run_population_cell(&spec, &McmcSettings::population()).unwrap());
        }
        to_rows(&cells)
    })
}

fn sample_rows() -> &'static [ResultRow] {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let mut cells = Vec::new();
        for (sl, cl, phi, c) in [(0.4, false, 0.0, 2), (0.4, false, 0.0, 8), (0.8, true, 0.3, 2)] {
            let spec = ConditionSpec { replications: SAMPLE_REPS, ..cell(sl, cl, phi, c, 300, ML_WLSMV) };
            cells.push(run_sample_cell(&spec, &McmcSettings::default()).unwrap());
        }
        to_rows(&cells)
    })
}

fn bayes_rows() -> &'static [ResultRow] {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let mut cells = Vec::new();
        for c in [2, 4, 6, 8] {
            let spec = ConditionSpec { replications: BAYES_REPS, ..cell(0.8, false, 0.0, c, 300, BAYES) };
            let summary = run_sample_cell(&spec, &McmcSettings::default()).unwrap();
            let psr = summary.get(fsdet::simulation::Estimator::Bayes, "psr_max").map(|r| r.mean);
            let _ = writeln!(
                std::io::stderr(),
                "[acceptance] bayes cell c={c}: {} of {BAYES_REPS} replications excluded (psr ≥ 1.1 or error), mean psr_max {psr:?}",
                summary.excluded.values().sum::<usize>()
            );
            cells.push(summary);
        }
        to_rows(&cells)
    })
}

/// Verifies the embedded acceptance targets whose label starts with one of
/// `prefixes`, printing one line per target.
fn check(criterion: &str, rows: &[ResultRow], prefixes: &[&str]) -> VerifyReport {
    let targets: Vec<_> = report::embedded_targets("acceptance")
        .unwrap()
        .into_iter()
        .filter(|t| prefixes.iter().any(|p| t.label.starts_with(p)))
        .collect();
    assert!(!targets.is_empty(), "no targets for {criterion}");
    let rep = report::verify(rows, &targets);
    for o in &rep.outcomes {
        let detail = match (o.observed, &o.band) {
            (None, _) => format!("{} missing", o.target.label),
            (Some(v), Some(b)) => format!("{} = {v:.4}; matched {b}", o.target.label),
            (Some(v), None) => format!("{} = {v:.4} (target {})", o.target.label, o.target.band()),
        };
        line(criterion, o.passed, &detail);
    }
    rep
}

fn assert_report(criterion: &str, rep: &VerifyReport) {
    assert!(rep.all_passed(), "{criterion} failed:\n{rep}");
}

#[test]
fn criterion_1_population_score_based_determinacy() {
    let rep = check("1", population_rows(), &["population ML score-based"]);
    assert_report("1", &rep);
}

#[test]
fn criterion_2_wlsmv_overestimation() {
    let rep = check("2", population_rows(), &["population WLSMV"]);
    assert_report("2", &rep);
}

#[test]
fn criterion_3_combined_coefficient() {
    let rows = population_rows();
    let rep = check("3", rows, &["population P_BLc bias"]);
    let misfit = |est: &str, coef: &str| {
        rows.iter()
            .find(|r| r.cl == 1 && (r.phi - 0.3).abs() < 1e-9 && (r.sl - 0.8).abs() < 1e-9 && r.estimator == est && r.coefficient == coef)
            .map(|r| r.mean)
    };
    let (blc, wlsmv) = (misfit("ML/WLSMV", "p_blc"), misfit("WLSMV", "p_bl"));
    let ordered = matches!((blc, wlsmv), (Some(a), Some(b)) if a <= b);
    line("3", ordered, &format!("misfit cell P_BLc {blc:?} <= WLSMV P_BL {wlsmv:?}"));
    assert!(ordered);
    assert_report("3", &rep);
}

#[test]
fn criterion_4_sample_ml_determinacy() {
    let rep = check("4", sample_rows(), &["sample ML P_BL", "sample ML corrected"]);
    assert_report("4", &rep);
}

#[test]
fn criterion_5_sample_bayes_determinacy() {
    let rep = check("5", bayes_rows(), &["sample BA"]);
    assert_report("5", &rep);
}

#[test]
fn criterion_6_misfit_amplification() {
    let rep = check("6", sample_rows(), &["sample ML bias misfit"]);
    assert_report("6", &rep);
}

#[test]
fn criterion_7_population_fit_indices() {
    let rep = check("7", population_rows(), &["population ML RMSEA", "population ML CFI"]);
    assert_report("7", &rep);
}

#[test]
fn criterion_8_property_suite() {
    let started = Instant::now();
    let mut all = true;
    let mut record = |name: &str, ok: bool, detail: String| {
        line("8", ok, &format!("{name}: {detail}"));
        all &= ok;
    };

    let models: Vec<_> = (0..100).map(|k| common::random_model(1000 + k)).collect();
    let cp_err = models.iter().map(common::cp_preservation_error).fold(0.0, f64::max);
    record("CP preservation", cp_err < 1e-10, format!("max |W'ΣW - Φ| = {cp_err:.2e} over 100 models"));
    let excess = models.iter().map(common::cp_excess).fold(f64::NEG_INFINITY, f64::max);
    record("BL dominance", excess <= 1e-12, format!("max P_CP - P_BL = {excess:.2e}"));

    let budescu: Result<(), String> =
        [(3, 10), (15, 300), (15, 900), (50, 60), (30, 5000)].iter().try_for_each(|&(p, n)| common::budescu_properties(p, n));
    record("correction monotone and clamped", budescu.is_ok(), format!("{budescu:?}"));

    let grad = (0..50).map(|k| common::ml_gradient_error(5000 + k)).fold(0.0, f64::max);
    record("ML gradient", grad < 1e-5, format!("max relative error {grad:.2e} at 50 points"));

    for (k, rho) in [0.16, 0.64].into_iter().enumerate() {
        let est = common::tetrachoric_recovery(rho, 100_000, 70 + k as u64);
        record("polychoric recovery", (est - rho).abs() < 0.01, format!("rho {rho}: estimate {est:.4}"));
    }

    let same = common::small_grid_csv(SEED) == common::small_grid_csv(SEED);
    record("determinism", same, "repeated seeded grid gives identical results.csv bytes".into());

    let secs = started.elapsed().as_secs_f64();
    record("runtime", secs < 300.0, format!("{secs:.1}s"));
    assert!(all);
}

#[test]
fn criterion_9_known_discrepancy_guard() {
    let rep = check("9", population_rows(), &["population ML P_BL sl=.80"]);
    assert!(rep.outcomes.iter().all(|o| o.band.is_some()));
    assert_report("9", &rep);
}
