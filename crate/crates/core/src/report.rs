//! Reading `results.csv`, rendering summary tables and checking results
//! against reference targets.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EMBEDDED_TARGETS: &str = include_str!("targets.csv");

/// Rows with at least this many cases are population cells.
pub const POPULATION_MIN_N: usize = 10_000;
const KEY_EPS: f64 = 1e-9;

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub q: usize,
    pub p_per_factor: usize,
    pub sl: f64,
    pub cl: u8,
    pub phi: f64,
    pub c: usize,
    pub n: usize,
    pub estimator: String,
    pub coefficient: String,
    pub mean: f64,
    pub sd: Option<f64>,
    pub bias: Option<f64>,
    pub n_excluded: usize,
}

impl ResultRow {
    pub fn is_population(&self) -> bool {
        self.n >= POPULATION_MIN_N
    }
}

pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_results_file(path: &std::path::Path) -> Result<Vec<ResultRow>> {
    read_results(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Mean,
    Sd,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// |observed − expected| ≤ tolerance, or within the alternative band.
    Within,
    /// expected ≤ observed ≤ upper.
    Between,
    AtLeast,
    AtMost,
    AbsAtMost,
}

/// A reference value for one coefficient. Blank cell keys match every
/// value; the observed value is then the average over all matching cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub set: String,
    pub label: String,
    pub design: Design,
    pub q: Option<usize>,
    pub p_per_factor: Option<usize>,
    pub sl: Option<f64>,
    pub cl: Option<u8>,
    pub phi: Option<f64>,
    pub c: Option<usize>,
    pub n: Option<usize>,
    pub estimator: String,
    pub coefficient: String,
    pub field: Field,
    pub check: Check,
    pub expected: f64,
    pub tolerance: Option<f64>,
    pub upper: Option<f64>,
    pub alt_expected: Option<f64>,
    pub alt_tolerance: Option<f64>,
}

impl Target {
    pub fn matches(&self, r: &ResultRow) -> bool {
        let close = |a: Option<f64>, b: f64| a.is_none_or(|a| (a - b).abs() < KEY_EPS);
        let design_ok = match self.design {
            Design::Population => r.is_population(),
            Design::Sample => !r.is_population(),
        };
        design_ok
            && r.estimator == self.estimator
            && r.coefficient == self.coefficient
            && self.q.is_none_or(|v| v == r.q)
            && self.p_per_factor.is_none_or(|v| v == r.p_per_factor)
            && close(self.sl, r.sl)
            && self.cl.is_none_or(|v| v == r.cl)
            && close(self.phi, r.phi)
            && self.c.is_none_or(|v| v == r.c)
            && self.n.is_none_or(|v| v == r.n)
    }

    /// Average of the selected field over matching rows.
    pub fn observe(&self, rows: &[ResultRow]) -> Option<f64> {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| self.matches(r))
            .filter_map(|r| match self.field {
                Field::Mean => Some(r.mean),
                Field::Sd => r.sd,
                Field::Bias => r.bias,
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn band(&self) -> String {
        let tol = self.tolerance.unwrap_or(0.0);
        match self.check {
            Check::Within => format!("{} ± {}", self.expected, tol),
            Check::Between => format!("[{}, {}]", self.expected, self.upper.unwrap_or(f64::NAN)),
            Check::AtLeast => format!("≥ {}", self.expected),
            Check::AtMost => format!("≤ {}", self.expected),
            Check::AbsAtMost => format!("|x| ≤ {}", self.expected),
        }
    }

    /// Applies the check. Returns whether it passed and, for two-band
    /// targets, the name of the band that matched.
    pub fn evaluate(&self, observed: f64) -> (bool, Option<String>) {
        let tol = self.tolerance.unwrap_or(0.0);
        let slack = 1e-12;
        match self.check {
            Check::Within => {
                let primary = (observed - self.expected).abs() <= tol + slack;
                match (self.alt_expected, self.alt_tolerance) {
                    (Some(alt), Some(alt_tol)) => {
                        let secondary = (observed - alt).abs() <= alt_tol + slack;
                        let band = match (primary, secondary) {
                            (true, true) => format!("both bands ({} ± {} and {} ± {})", self.expected, tol, alt, alt_tol),
                            (true, false) => format!("reference band {} ± {}", self.expected, tol),
                            (false, true) => format!("analytic band {} ± {}", alt, alt_tol),
                            (false, false) => "no band".to_string(),
                        };
                        (primary || secondary, Some(band))
                    }
                    _ => (primary, None),
                }
            }
            Check::Between => (observed >= self.expected - slack && observed <= self.upper.unwrap_or(f64::NAN) + slack, None),
            Check::AtLeast => (observed >= self.expected - slack, None),
            Check::AtMost => (observed <= self.expected + slack, None),
            Check::AbsAtMost => (observed.abs() <= self.expected + slack, None),
        }
    }
}

pub fn parse_targets<R: Read>(input: R) -> Result<Vec<Target>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|t| t.map_err(Error::from)).collect()
}

/// Names of the embedded target sets.
pub fn target_sets() -> Vec<String> {
    let all = parse_targets(EMBEDDED_TARGETS.as_bytes()).unwrap_or_default();
    all.iter().map(|t| t.set.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Embedded targets of one set, or of every set for `all`.
pub fn embedded_targets(set: &str) -> Result<Vec<Target>> {
    let all = parse_targets(EMBEDDED_TARGETS.as_bytes())?;
    let chosen: Vec<Target> = all.into_iter().filter(|t| set == "all" || t.set == set).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!("unknown target set `{set}`; available: all, {}", target_sets().join(", "))));
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutcome {
    pub target: Target,
    pub observed: Option<f64>,
    pub passed: bool,
    pub band: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub outcomes: Vec<TargetOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.outcomes.len() - self.passed()
    }

    pub fn all_passed(&self) -> bool {
        self.failed() == 0
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            let t = &o.target;
            let status = if o.passed { "PASS" } else { "FAIL" };
            match o.observed {
                None => writeln!(f, "{status} {}: missing", t.label)?,
                Some(v) => {
                    write!(f, "{status} {} [{} {} {:?}]: observed {v:.4}, target {}", t.label, t.estimator, t.coefficient, t.field, t.band())?;
                    if t.check == Check::Within {
                        write!(f, ", delta {:+.4}", v - t.expected)?;
                    }
                    if let Some(b) = &o.band {
                        write!(f, "; matched {b}")?;
                    }
                    writeln!(f)?;
                }
            }
        }
        write!(f, "{} passed, {} failed, {} total", self.passed(), self.failed(), self.outcomes.len())
    }
}

/// Checks every target against `rows`. A target without matching rows fails.
pub fn verify(rows: &[ResultRow], targets: &[Target]) -> VerifyReport {
    let outcomes = targets
        .iter()
        .map(|t| {
            let observed = t.observe(rows);
            let (passed, band) = observed.map(|v| t.evaluate(v)).unwrap_or((false, None));
            TargetOutcome { target: t.clone(), observed, passed, band }
        })
        .collect();
    VerifyReport { outcomes }
}

/// Rounds half away from zero to `digits` decimals.
pub fn round_half_away(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    x.signum() * ((x.abs() * s) + 0.5 + 1e-9).floor() / s
}

/// Fixed-decimal value without the leading zero, as in `.71` or `-.01`.
pub fn format_coefficient(x: f64, digits: usize) -> String {
    let r = round_half_away(x, digits as i32);
    let r = if r == 0.0 { 0.0 } else { r };
    let s = format!("{:.*}", digits, r.abs());
    let s = s.strip_prefix('0').unwrap_or(&s).to_string();
    if r < 0.0 {
        format!("-{s}")
    } else {
        s
    }
}

/// Parses a rendered entry such as `.71 (.02) /.06` into mean, sd and bias.
pub fn parse_entry(text: &str) -> Option<(f64, Option<f64>, Option<f64>)> {
    let text = text.trim();
    if text == MISSING {
        return None;
    }
    let (head, bias) = match text.split_once('/') {
        Some((h, b)) => (h.trim(), Some(b.trim().parse().ok()?)),
        None => (text, None),
    };
    let (mean, sd) = match head.split_once('(') {
        Some((m, s)) => (m.trim().parse().ok()?, Some(s.trim_end_matches(')').trim().parse().ok()?)),
        None => (head.parse().ok()?, None),
    };
    Some((mean, sd, bias))
}

pub const MISSING: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Population determinacies at c = 2, one column per population model.
    Population,
    /// Population fit indices, same columns.
    Fit,
    /// Sample determinacies, rows by (sl, n, c).
    Sample { bayes: bool, cl: Option<u8>, phi_tenths: Option<u8> },
}

impl Layout {
    pub const NAMES: [&'static str; 8] = ["population", "fit", "sample", "bayes", "misfit", "bayes-misfit", "null", "bayes-null"];

    pub fn parse(name: &str) -> Result<Self> {
        let sample = |bayes, cl, phi| Layout::Sample { bayes, cl, phi_tenths: phi };
        Ok(match name {
            "population" => Layout::Population,
            "fit" => Layout::Fit,
            "sample" => sample(false, None, None),
            "bayes" => sample(true, None, None),
            "misfit" => sample(false, Some(1), Some(3)),
            "bayes-misfit" => sample(true, Some(1), Some(3)),
            "null" => sample(false, Some(0), Some(0)),
            "bayes-null" => sample(true, Some(0), Some(0)),
            other => return Err(Error::Config(format!("unknown layout `{other}`; available: {}", Self::NAMES.join(", ")))),
        })
    }
}

fn key_eq(a: f64, b: f64) -> bool {
    (a - b).abs() < KEY_EPS
}

/// Averages mean, sd and bias over `rows`.
fn aggregate<'a>(rows: impl Iterator<Item = &'a ResultRow>) -> Option<(f64, Option<f64>, Option<f64>)> {
    let rows: Vec<&ResultRow> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let k = rows.len() as f64;
    let mean = rows.iter().map(|r| r.mean).sum::<f64>() / k;
    let avg = |f: fn(&ResultRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
        v.map(|v| v.iter().sum::<f64>() / k)
    };
    Some((mean, avg(|r| r.sd), avg(|r| r.bias)))
}

fn markdown(header: &[String], body: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for row in body {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

fn population_columns(rows: &[ResultRow]) -> Vec<(f64, f64, u8)> {
    let mut cols: Vec<(f64, f64, u8)> = Vec::new();
    for r in rows.iter().filter(|r| r.is_population() && r.c == 2) {
        if !cols.iter().any(|c| key_eq(c.0, r.sl) && key_eq(c.1, r.phi) && c.2 == r.cl) {
            cols.push((r.sl, r.phi, r.cl));
        }
    }
    cols.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    cols
}

fn population_table(rows: &[ResultRow], entries: &[(&str, &str, bool)], digits: usize) -> String {
    let cols = population_columns(rows);
    let mut header = vec!["estimator".to_string(), "coefficient".to_string()];
    header.extend(cols.iter().map(|(sl, phi, cl)| format!("sl={} phi={} nl={}", format_coefficient(*sl, 2), format_coefficient(*phi, 2), format_coefficient(if *cl == 1 { sl / 2.0 } else { 0.0 }, 2))));
    let body: Vec<Vec<String>> = entries
        .iter()
        .map(|&(est, coef, with_bias)| {
            let mut line = vec![est.to_string(), coef.to_string()];
            for &(sl, phi, cl) in &cols {
                let agg = aggregate(rows.iter().filter(|r| {
                    r.is_population() && r.c == 2 && key_eq(r.sl, sl) && key_eq(r.phi, phi) && r.cl == cl && r.estimator == est && r.coefficient == coef
                }));
                line.push(match agg {
                    None => MISSING.to_string(),
                    Some((m, _, Some(b))) if with_bias => format!("{} / {}", format_coefficient(m, digits), format_coefficient(b, digits)),
                    Some((m, _, _)) => format_coefficient(m, digits),
                });
            }
            line
        })
        .collect();
    markdown(&header, &body)
}

const POPULATION_ENTRIES: [(&str, &str, bool); 13] = [
    ("ML", "cor_bl", false),
    ("ML", "p_bl", true),
    ("WLSMV", "cor_bl", false),
    ("WLSMV", "p_bl", true),
    ("BA", "cor_bl", false),
    ("BA", "p_bl", true),
    ("ML/WLSMV", "p_blc", true),
    ("ML", "cor_cp", false),
    ("ML", "p_cp", true),
    ("WLSMV", "cor_cp", false),
    ("WLSMV", "p_cp", true),
    ("BA", "cor_cp", false),
    ("BA", "p_cp", true),
];

const FIT_ENTRIES: [(&str, &str, bool); 11] = [
    ("ML", "chi2", false),
    ("ML", "rmsea", false),
    ("ML", "cfi", false),
    ("ML", "srmr", false),
    ("WLSMV", "rmsea", false),
    ("WLSMV", "cfi", false),
    ("WLSMV", "srmr", false),
    ("BA", "ppp", false),
    ("BA", "rmsea_plugin", false),
    ("BA", "cfi_plugin", false),
    ("BA", "psr_max", false),
];

const SAMPLE_ENTRIES: [(&str, &str); 8] = [
    ("ML", "cor_bl"),
    ("ML", "p_bl"),
    ("ML", "p_bl_c"),
    ("ML/WLSMV", "p_blc"),
    ("ML/WLSMV", "p_blc_c"),
    ("ML", "cor_cp"),
    ("ML", "p_cp"),
    ("ML", "p_cp_c"),
];

const BAYES_ENTRIES: [(&str, &str); 6] =
    [("BA", "cor_bl"), ("BA", "p_bl"), ("BA", "p_bl_c"), ("BA", "cor_cp"), ("BA", "p_cp"), ("BA", "p_cp_c")];

fn sample_table(rows: &[ResultRow], bayes: bool, cl: Option<u8>, phi_tenths: Option<u8>) -> String {
    let entries: &[(&str, &str)] = if bayes { &BAYES_ENTRIES } else { &SAMPLE_ENTRIES };
    let keep = |r: &ResultRow| {
        !r.is_population() && cl.is_none_or(|v| v == r.cl) && phi_tenths.is_none_or(|v| key_eq(r.phi, v as f64 / 10.0))
    };
    let mut keys: Vec<(f64, usize, usize)> = Vec::new();
    for r in rows.iter().filter(|r| keep(r)) {
        if !keys.iter().any(|k| key_eq(k.0, r.sl) && k.1 == r.n && k.2 == r.c) {
            keys.push((r.sl, r.n, r.c));
        }
    }
    keys.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut header = vec!["sl".to_string(), "n".to_string(), "c".to_string()];
    header.extend(entries.iter().map(|(e, c)| format!("{e} {c}")));
    let body: Vec<Vec<String>> = keys
        .iter()
        .map(|&(sl, n, c)| {
            let mut line = vec![format_coefficient(sl, 2), n.to_string(), c.to_string()];
            for &(est, coef) in entries {
                let agg = aggregate(rows.iter().filter(|r| {
                    keep(r) && key_eq(r.sl, sl) && r.n == n && r.c == c && r.estimator == est && r.coefficient == coef
                }));
                line.push(match agg {
                    None => MISSING.to_string(),
                    Some((m, sd, bias)) => {
                        let mut s = format_coefficient(m, 2);
                        if let Some(sd) = sd {
                            let _ = write!(s, " ({})", format_coefficient(sd, 2));
                        }
                        if let (Some(b), false) = (bias, coef.starts_with("cor")) {
                            let _ = write!(s, " /{}", format_coefficient(b, 2));
                        }
                        s
                    }
                });
            }
            line
        })
        .collect();
    markdown(&header, &body)
}

/// Markdown table of `rows` in the given layout. Cells absent from the
/// results are shown as `—`; values are averaged over unlisted keys.
pub fn render_table(rows: &[ResultRow], layout: Layout) -> String {
    match layout {
        Layout::Population => population_table(rows, &POPULATION_ENTRIES, 2),
        Layout::Fit => population_table(rows, &FIT_ENTRIES, 3),
        Layout::Sample { bayes, cl, phi_tenths } => sample_table(rows, bayes, cl, phi_tenths),
    }
}
