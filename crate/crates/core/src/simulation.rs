//! Population and sample studies over the condition grid.
//!
//! Every (cell, replication) task draws from its own stream
//! `rng::stream(seed, [cell_key, replication])`, so results do not depend
//! on scheduling or on which other cells are run.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, McmcSettings, PriorSpec};
use crate::categorical;
use crate::datagen::{self, binomial_thresholds, categorize, sample_continuous};
use crate::error::{Error, Result};
use crate::fit;
use crate::ml::{self, EstimationResult, ModelSpec};
use crate::model::{build_population_pattern, FactorModelParams, PopulationDescriptor};
use crate::rng;
use crate::scoring::{self, factor_mean, plain_mean};

/// Default number of cases in a population run.
pub const DEFAULT_POPULATION_SIZE: usize = 200_000;
/// A cell fails when more than this share of replications is excluded.
pub const MAX_EXCLUDED_SHARE: f64 = 0.25;
const BAYES_STREAM: u64 = 0xba;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "WLSMV")]
    Wlsmv,
    #[serde(rename = "BA")]
    Bayes,
    #[serde(rename = "ML/WLSMV")]
    MlWlsmv,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Ml, Estimator::Wlsmv, Estimator::Bayes, Estimator::MlWlsmv];

    pub fn tag(&self) -> &'static str {
        match self {
            Estimator::Ml => "ML",
            Estimator::Wlsmv => "WLSMV",
            Estimator::Bayes => "BA",
            Estimator::MlWlsmv => "ML/WLSMV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.tag().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSet {
    pub ml: bool,
    pub wlsmv: bool,
    pub bayes: bool,
}

impl Default for EstimatorSet {
    fn default() -> Self {
        Self { ml: true, wlsmv: true, bayes: true }
    }
}

/// One design point plus run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub q: usize,
    pub p_per_factor: usize,
    pub sl: f64,
    pub cl: bool,
    pub phi: f64,
    /// Number of categories; 0 keeps the data continuous.
    pub c: usize,
    /// Sample size, or the population size for population cells.
    pub n: usize,
    pub population: bool,
    pub replications: usize,
    pub estimators: EstimatorSet,
    /// Bayes runs only on the first `bayes_replications` replications.
    pub bayes_replications: Option<usize>,
    pub master_seed: u64,
}

impl ConditionSpec {
    pub fn descriptor(&self) -> PopulationDescriptor {
        PopulationDescriptor { q: self.q, p_per_factor: self.p_per_factor, sl: self.sl, cl: self.cl, phi_offdiag: self.phi }
    }

    pub fn p(&self) -> usize {
        self.q * self.p_per_factor
    }

    pub fn validate(&self) -> Result<()> {
        self.descriptor().validate()?;
        if self.c == 1 {
            return Err(Error::Config("c must be 0 (continuous) or at least 2".into()));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.population && self.n < 10_000 {
            return Err(Error::Config(format!("population size {} is below 10000", self.n)));
        }
        if self.n <= self.p() + 1 {
            return Err(Error::Config(format!("n = {} must exceed p + 1 = {}", self.n, self.p() + 1)));
        }
        Ok(())
    }

    /// Model fitted to every data set: independent clusters, factor
    /// correlations estimated only when the population has them.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::independent_cluster(self.q, self.p_per_factor, self.phi != 0.0)
    }

    /// Stable identifier from the design values alone.
    pub fn key(&self) -> u64 {
        let hundredths = |v: f64| (v * 100.0).round() as u64;
        let mut k = self.q as u64 * 100 + self.p_per_factor as u64;
        k = k * 1000 + hundredths(self.sl);
        k = k * 2 + self.cl as u64;
        k = k * 1000 + hundredths(self.phi);
        k = k * 100 + self.c as u64;
        k = k * 100_000 + (self.n as u64 % 100_000);
        k * 2 + self.population as u64
    }

    fn runs_bayes(&self, rep: usize) -> bool {
        self.estimators.bayes && self.bayes_replications.is_none_or(|k| rep < k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    estimator: Estimator,
    coefficient: &'static str,
    value: f64,
    /// Score-based counterpart used for the bias.
    reference: Option<f64>,
}

/// Per-replication values plus the estimators that had to be excluded.
#[derive(Debug, Clone, Default)]
pub struct ReplicationOutcome {
    entries: Vec<Entry>,
    pub excluded: Vec<(Estimator, String)>,
}

impl ReplicationOutcome {
    fn push(&mut self, estimator: Estimator, coefficient: &'static str, value: f64, reference: Option<f64>) {
        self.entries.push(Entry { estimator, coefficient, value, reference });
    }

    fn exclude(&mut self, estimator: Estimator, reason: impl Into<String>) {
        self.entries.retain(|e| e.estimator != estimator);
        self.excluded.push((estimator, reason.into()));
    }

    pub fn value(&self, estimator: Estimator, coefficient: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.estimator == estimator && e.coefficient == coefficient).map(|e| e.value)
    }
}

/// Aggregate for one (estimator, coefficient) in a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub coefficient: String,
    pub mean: f64,
    pub sd: Option<f64>,
    pub bias: Option<f64>,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub spec: ConditionSpec,
    pub rows: Vec<SummaryRow>,
    pub excluded: BTreeMap<Estimator, usize>,
    pub attempted: BTreeMap<Estimator, usize>,
    pub failed: bool,
    pub notes: Vec<String>,
}

impl CellSummary {
    pub fn get(&self, estimator: Estimator, coefficient: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.coefficient == coefficient)
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    factor_mean(values)
}

struct FittedScores<'a> {
    x_raw: &'a DMatrix<f64>,
    x_std: &'a DMatrix<f64>,
    xi: &'a DMatrix<f64>,
}

impl FittedScores<'_> {
    fn score_based(&self, weights: &DMatrix<f64>, standardized: bool) -> Result<Option<f64>> {
        let x = if standardized { self.x_std } else { self.x_raw };
        Ok(mean_of(&scoring::score_based_determinacy(&scoring::predict(x, weights), self.xi)?))
    }
}

fn corrected(v: f64, p: usize, n: usize) -> Result<f64> {
    scoring::budescu_correct(v, p, n).map(|(c, _)| c)
}

/// BL and CP coefficients for one set of parameters.
fn predictor_block(
    out: &mut ReplicationOutcome,
    est: Estimator,
    params: &FactorModelParams,
    scores: &FittedScores,
    standardized: bool,
    correction: Option<(usize, usize)>,
    s: Option<&DMatrix<f64>>,
) -> Result<Option<f64>> {
    let cor_bl = scores.score_based(&scoring::best_linear_weights(params)?, standardized)?;
    let cor_cp = scores.score_based(&scoring::cp_weights(params)?, standardized)?;
    let p_bl = plain_mean(&scoring::determinacy_bl(params)?).unwrap_or(f64::NAN);
    let p_cp = plain_mean(&scoring::determinacy_cp(params)?).unwrap_or(f64::NAN);
    let Some(cor_bl_v) = cor_bl else {
        return Err(Error::Numerical("predictor without variance".into()));
    };
    out.push(est, "cor_bl", cor_bl_v, None);
    out.push(est, "p_bl", p_bl, cor_bl);
    if let Some((p, n)) = correction {
        out.push(est, "p_bl_c", mean_corrected(&scoring::determinacy_bl(params)?, p, n)?, cor_bl);
    }
    if let Some(s) = s {
        let sbl = scoring::determinacy_sbl(params, s)?;
        out.push(est, "p_sbl", plain_mean(&sbl).unwrap_or(f64::NAN), cor_bl);
        if let Some((p, n)) = correction {
            out.push(est, "p_sbl_c", mean_corrected(&sbl, p, n)?, cor_bl);
        }
    }
    if let Some(cor_cp_v) = cor_cp {
        out.push(est, "cor_cp", cor_cp_v, None);
        out.push(est, "p_cp", p_cp, cor_cp);
        if let Some((p, n)) = correction {
            out.push(est, "p_cp_c", mean_corrected(&scoring::determinacy_cp(params)?, p, n)?, cor_cp);
        }
    }
    Ok(cor_bl)
}

fn mean_corrected(values: &[f64], p: usize, n: usize) -> Result<f64> {
    let c: Vec<f64> = values.iter().map(|&v| corrected(v, p, n)).collect::<Result<_>>()?;
    Ok(plain_mean(&c).unwrap_or(f64::NAN))
}

fn check_converged(res: &EstimationResult) -> Result<()> {
    if res.converged {
        Ok(())
    } else {
        Err(Error::Numerical(format!("not converged (gradient {:.2e})", res.grad_norm)))
    }
}

/// Runs every requested estimator on one generated data set.
pub fn run_replication(spec: &ConditionSpec, rep: usize, mcmc: &McmcSettings) -> Result<ReplicationOutcome> {
    let truth = build_population_pattern(&spec.descriptor())?;
    let model = spec.model_spec()?;
    let mut stream = rng::stream(spec.master_seed, &[spec.key(), rep as u64]);
    let continuous = sample_continuous(&truth, spec.n, &mut stream)?;
    let sample = if spec.c >= 2 { categorize(&continuous, &binomial_thresholds(spec.c)?)? } else { continuous };
    drop(stream);

    let (_, s) = datagen::sample_moments(&sample.x)?;
    let x_std = datagen::standardize(&sample.x)?;
    let scores = FittedScores { x_raw: &sample.x, x_std: &x_std, xi: &sample.xi_true };
    let correction = (!spec.population).then_some((spec.p(), spec.n));
    let s_for_sbl = (!spec.population).then_some(&s);
    let mut out = ReplicationOutcome::default();

    let mut ml_params = None;
    if spec.estimators.ml {
        let mut step = || -> Result<()> {
            let res = ml::fit_ml(&s, &model, spec.n)?;
            check_converged(&res)?;
            predictor_block(&mut out, Estimator::Ml, &res.params, &scores, false, correction, s_for_sbl)?;
            let f = fit::compute_fit(&res, &s, spec.n)?;
            out.push(Estimator::Ml, "chi2", f.chi_square, None);
            out.push(Estimator::Ml, "df", f.df as f64, None);
            out.push(Estimator::Ml, "rmsea", f.rmsea, None);
            out.push(Estimator::Ml, "cfi", f.cfi, None);
            out.push(Estimator::Ml, "srmr", f.srmr, None);
            ml_params = Some(res.params);
            Ok(())
        };
        if let Err(e) = step() {
            out.exclude(Estimator::Ml, e.to_string());
        }
    }

    let mut cat_fit: Option<(FactorModelParams, Option<f64>)> = None;
    if spec.estimators.wlsmv && spec.c >= 2 {
        let step = |out: &mut ReplicationOutcome| -> Result<(FactorModelParams, Option<f64>)> {
            let poly = categorical::polychoric_matrix(&sample.x)?;
            let res = categorical::fit_dwls(&poly, &model)?;
            check_converged(&res)?;
            let cor = predictor_block(out, Estimator::Wlsmv, &res.params, &scores, true, correction, None)?;
            Ok((res.params, cor))
        };
        match step(&mut out) {
            Ok(v) => cat_fit = Some(v),
            Err(e) => out.exclude(Estimator::Wlsmv, e.to_string()),
        }
    }

    if spec.estimators.ml && spec.estimators.wlsmv && spec.c >= 2 {
        match (&ml_params, &cat_fit) {
            (Some(ml), Some((cat, cor))) => {
                let step = |out: &mut ReplicationOutcome| -> Result<()> {
                    let blc = scoring::determinacy_blc(ml, cat)?;
                    out.push(Estimator::MlWlsmv, "p_blc", plain_mean(&blc).unwrap_or(f64::NAN), *cor);
                    if let Some((p, n)) = correction {
                        out.push(Estimator::MlWlsmv, "p_blc_c", mean_corrected(&blc, p, n)?, *cor);
                    }
                    Ok(())
                };
                if let Err(e) = step(&mut out) {
                    out.exclude(Estimator::MlWlsmv, e.to_string());
                }
            }
            _ => out.exclude(Estimator::MlWlsmv, "component fit unavailable"),
        }
    }

    if spec.runs_bayes(rep) {
        let step = |out: &mut ReplicationOutcome| -> Result<()> {
            let post =
                bayes::fit_bayes(&sample.x, &model, &PriorSpec::default(), mcmc, spec.master_seed, &[spec.key(), rep as u64, BAYES_STREAM])?;
            if !post.converged {
                return Err(Error::Numerical(format!("potential scale reduction {:.3}", post.psr_max)));
            }
            predictor_block(out, Estimator::Bayes, &post.mean_params, &scores, false, correction, None)?;
            out.push(Estimator::Bayes, "ppp", post.ppp, None);
            out.push(Estimator::Bayes, "psr_max", post.psr_max, None);
            let f = fit::fit_from_params(&post.mean_params, &s, spec.n, post.df)?;
            out.push(Estimator::Bayes, "rmsea_plugin", f.rmsea, None);
            out.push(Estimator::Bayes, "cfi_plugin", f.cfi, None);
            Ok(())
        };
        if let Err(e) = step(&mut out) {
            out.exclude(Estimator::Bayes, e.to_string());
        }
    }
    Ok(out)
}

/// Fixed output order of coefficients within an estimator.
const COEFFICIENT_ORDER: [&str; 20] = [
    "cor_bl", "p_bl", "p_bl_c", "p_sbl", "p_sbl_c", "cor_cp", "p_cp", "p_cp_c", "p_blc", "p_blc_c", "chi2", "df", "rmsea",
    "cfi", "srmr", "ppp", "rmsea_plugin", "cfi_plugin", "psr_max", "",
];

fn coefficient_rank(c: &str) -> usize {
    COEFFICIENT_ORDER.iter().position(|x| *x == c).unwrap_or(COEFFICIENT_ORDER.len())
}

fn attempted(spec: &ConditionSpec) -> BTreeMap<Estimator, usize> {
    let mut m = BTreeMap::new();
    let r = spec.replications;
    if spec.estimators.ml {
        m.insert(Estimator::Ml, r);
    }
    if spec.estimators.wlsmv && spec.c >= 2 {
        m.insert(Estimator::Wlsmv, r);
        if spec.estimators.ml {
            m.insert(Estimator::MlWlsmv, r);
        }
    }
    if spec.estimators.bayes {
        m.insert(Estimator::Bayes, spec.bayes_replications.map_or(r, |k| k.min(r)));
    }
    m
}

/// Aggregates replication outcomes in replication order.
pub fn summarize(spec: &ConditionSpec, outcomes: &[Result<ReplicationOutcome>]) -> CellSummary {
    let attempted = attempted(spec);
    let mut excluded: BTreeMap<Estimator, usize> = attempted.keys().map(|e| (*e, 0)).collect();
    let mut notes = Vec::new();
    let mut series: BTreeMap<(Estimator, usize, &'static str), Vec<(f64, Option<f64>)>> = BTreeMap::new();
    for (rep, o) in outcomes.iter().enumerate() {
        match o {
            Ok(o) => {
                for (e, reason) in &o.excluded {
                    *excluded.entry(*e).or_default() += 1;
                    if notes.len() < 20 {
                        notes.push(format!("replication {rep}: {e} excluded: {reason}"));
                    }
                }
                for en in &o.entries {
                    series.entry((en.estimator, coefficient_rank(en.coefficient), en.coefficient)).or_default().push((en.value, en.reference));
                }
            }
            Err(err) => {
                for (e, count) in excluded.iter_mut() {
                    if spec.runs_bayes(rep) || *e != Estimator::Bayes {
                        *count += 1;
                    }
                }
                notes.push(format!("replication {rep} failed: {err}"));
            }
        }
    }
    let rows = series
        .into_iter()
        .map(|((estimator, _, coefficient), vals)| {
            let k = vals.len() as f64;
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / k;
            let sd = (vals.len() > 1).then(|| (vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
            let bias = vals
                .iter()
                .map(|v| v.1)
                .collect::<Option<Vec<f64>>>()
                .map(|refs| mean - refs.iter().sum::<f64>() / k);
            SummaryRow { estimator, coefficient: coefficient.to_string(), mean, sd, bias, n_excluded: excluded.get(&estimator).copied().unwrap_or(0) }
        })
        .collect();
    let failed = attempted.iter().any(|(e, &a)| a > 0 && excluded[e] as f64 > MAX_EXCLUDED_SHARE * a as f64);
    CellSummary { spec: spec.clone(), rows, excluded, attempted, failed, notes }
}

pub fn run_sample_cell(spec: &ConditionSpec, mcmc: &McmcSettings) -> Result<CellSummary> {
    spec.validate()?;
    let outcomes: Vec<Result<ReplicationOutcome>> =
        (0..spec.replications).into_par_iter().map(|r| run_replication(spec, r, mcmc)).collect();
    Ok(summarize(spec, &outcomes))
}

/// One population draw of `spec.n` cases; no small-sample correction.
pub fn run_population_cell(spec: &ConditionSpec, mcmc: &McmcSettings) -> Result<CellSummary> {
    let mut spec = spec.clone();
    spec.population = true;
    spec.replications = 1;
    spec.validate()?;
    let outcome = run_replication(&spec, 0, mcmc);
    Ok(summarize(&spec, &[outcome]))
}

/// Grid axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default = "default_q")]
    pub q: Vec<usize>,
    #[serde(default = "default_ppf")]
    pub p_per_factor: Vec<usize>,
    #[serde(default = "default_sl")]
    pub sl: Vec<f64>,
    #[serde(default = "default_cl")]
    pub cl: Vec<u8>,
    #[serde(default = "default_phi")]
    pub phi: Vec<f64>,
    #[serde(default = "default_c")]
    pub c: Vec<usize>,
    #[serde(default = "default_n")]
    pub n: Vec<usize>,
}

fn default_q() -> Vec<usize> {
    vec![3, 5]
}
fn default_ppf() -> Vec<usize> {
    vec![5, 10]
}
fn default_sl() -> Vec<f64> {
    vec![0.4, 0.8]
}
fn default_cl() -> Vec<u8> {
    vec![0, 1]
}
fn default_phi() -> Vec<f64> {
    vec![0.0, 0.3]
}
fn default_c() -> Vec<usize> {
    vec![2, 4, 6, 8]
}
fn default_n() -> Vec<usize> {
    vec![300, 900]
}

impl Default for GridAxes {
    fn default() -> Self {
        Self { q: default_q(), p_per_factor: default_ppf(), sl: default_sl(), cl: default_cl(), phi: default_phi(), c: default_c(), n: default_n() }
    }
}

impl GridAxes {
    /// Population design: three factors with five indicators each.
    pub fn population() -> Self {
        Self { q: vec![3], p_per_factor: vec![5], n: vec![DEFAULT_POPULATION_SIZE], ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    #[serde(default = "default_chains")]
    pub chains: usize,
    pub burn_in: Option<usize>,
    pub draws: Option<usize>,
}

fn default_chains() -> usize {
    2
}

/// Study configuration, normally read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub design: Design,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_population_size")]
    pub population_size: usize,
    #[serde(default)]
    pub grid: Option<GridAxes>,
    #[serde(default)]
    pub estimators: Option<EstimatorSet>,
    pub bayes_replications: Option<usize>,
    pub mcmc: Option<McmcConfig>,
    /// Restricts the grid to matching cells.
    #[serde(default)]
    pub cells: Vec<String>,
    #[serde(default)]
    pub write_replications: bool,
    pub output_dir: Option<std::path::PathBuf>,
}

fn default_reps() -> usize {
    200
}
fn default_population_size() -> usize {
    DEFAULT_POPULATION_SIZE
}

impl GridConfig {
    pub fn new(design: Design) -> Self {
        Self {
            design,
            seed: 0,
            replications: default_reps(),
            population_size: DEFAULT_POPULATION_SIZE,
            grid: None,
            estimators: None,
            bayes_replications: None,
            mcmc: None,
            cells: vec![],
            write_replications: false,
            output_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The 32-cell population preset.
    pub fn full_population() -> Self {
        Self::new(Design::Population)
    }

    /// The 256-cell sample preset.
    pub fn full_sample() -> Self {
        Self::new(Design::Sample)
    }

    pub fn axes(&self) -> GridAxes {
        self.grid.clone().unwrap_or_else(|| match self.design {
            Design::Population => GridAxes::population(),
            Design::Sample => GridAxes::default(),
        })
    }

    pub fn mcmc_settings(&self) -> McmcSettings {
        let base = match self.design {
            Design::Population => McmcSettings::population(),
            Design::Sample => McmcSettings::default(),
        };
        match &self.mcmc {
            None => base,
            Some(m) => McmcSettings {
                chains: m.chains,
                burn_in: m.burn_in.unwrap_or(base.burn_in),
                draws: m.draws.unwrap_or(base.draws),
                ..base
            },
        }
    }

    /// Enumerates cells in grid order, then applies the cell filters.
    pub fn cells(&self) -> Result<Vec<ConditionSpec>> {
        let axes = self.axes();
        let filters: Vec<CellFilter> = self.cells.iter().map(|s| CellFilter::parse(s)).collect::<Result<_>>()?;
        let population = self.design == Design::Population;
        let ns = if population { vec![self.population_size] } else { axes.n.clone() };
        let mut out = Vec::new();
        for &q in &axes.q {
            for &ppf in &axes.p_per_factor {
                for &sl in &axes.sl {
                    for &cl in &axes.cl {
                        for &phi in &axes.phi {
                            for &c in &axes.c {
                                for &n in &ns {
                                    let spec = ConditionSpec {
                                        q,
                                        p_per_factor: ppf,
                                        sl,
                                        cl: cl != 0,
                                        phi,
                                        c,
                                        n,
                                        population,
                                        replications: if population { 1 } else { self.replications },
                                        estimators: self.estimators.unwrap_or_default(),
                                        bayes_replications: self.bayes_replications,
                                        master_seed: self.seed,
                                    };
                                    if filters.is_empty() || filters.iter().any(|f| f.matches(&spec)) {
                                        out.push(spec);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for spec in &out {
            spec.validate()?;
        }
        Ok(out)
    }
}

/// Partial cell description such as `q=3,ppf=5,sl=.4,cl=0,phi=0,c=2,n=300`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub q: Option<usize>,
    pub p_per_factor: Option<usize>,
    pub sl: Option<f64>,
    pub cl: Option<bool>,
    pub phi: Option<f64>,
    pub c: Option<usize>,
    pub n: Option<usize>,
}

impl CellFilter {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = CellFilter::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("cell filter item `{part}` is not key=value")))?;
            let bad = || Error::Config(format!("cell filter `{key}` has invalid value `{value}`"));
            match key.trim() {
                "q" => f.q = Some(value.parse().map_err(|_| bad())?),
                "ppf" | "p_per_factor" => f.p_per_factor = Some(value.parse().map_err(|_| bad())?),
                "sl" => f.sl = Some(value.parse().map_err(|_| bad())?),
                "cl" => f.cl = Some(value.parse::<u8>().map_err(|_| bad())? != 0),
                "phi" => f.phi = Some(value.parse().map_err(|_| bad())?),
                "c" => f.c = Some(value.parse().map_err(|_| bad())?),
                "n" => f.n = Some(value.parse().map_err(|_| bad())?),
                other => return Err(Error::Config(format!("unknown cell filter key `{other}`"))),
            }
        }
        Ok(f)
    }

    pub fn matches(&self, s: &ConditionSpec) -> bool {
        let close = |a: Option<f64>, b: f64| a.is_none_or(|a| (a - b).abs() < 1e-9);
        self.q.is_none_or(|v| v == s.q)
            && self.p_per_factor.is_none_or(|v| v == s.p_per_factor)
            && close(self.sl, s.sl)
            && self.cl.is_none_or(|v| v == s.cl)
            && close(self.phi, s.phi)
            && self.c.is_none_or(|v| v == s.c)
            && (s.population || self.n.is_none_or(|v| v == s.n))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTiming {
    pub key: u64,
    pub seconds: f64,
    pub failed: bool,
    pub excluded: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub design: Design,
    pub version: String,
    pub cells: usize,
    pub failed_cells: Vec<u64>,
    pub config: GridConfig,
    pub timings: Vec<CellTiming>,
    pub notes: Vec<String>,
}

pub struct GridResult {
    pub cells: Vec<CellSummary>,
    pub manifest: Manifest,
    pub replications: Vec<Vec<Result<ReplicationOutcome>>>,
}

impl GridResult {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.failed)
    }
}

/// Runs all cells of `config`. `progress` receives one line per finished cell.
pub fn run_grid(config: &GridConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<GridResult> {
    let cells = config.cells()?;
    let mcmc = config.mcmc_settings();
    let tasks: Vec<(usize, usize)> =
        cells.iter().enumerate().flat_map(|(ci, c)| (0..c.replications).map(move |r| (ci, r))).collect();
    let started: Vec<Instant> = cells.iter().map(|_| Instant::now()).collect();
    let outcomes: Vec<Result<ReplicationOutcome>> =
        tasks.par_iter().map(|&(ci, r)| run_replication(&cells[ci], r, &mcmc)).collect();
    let mut per_cell: Vec<Vec<Result<ReplicationOutcome>>> = cells.iter().map(|_| Vec::new()).collect();
    for ((ci, _), o) in tasks.iter().zip(outcomes) {
        per_cell[*ci].push(o);
    }
    let mut summaries = Vec::with_capacity(cells.len());
    let mut timings = Vec::with_capacity(cells.len());
    for (ci, spec) in cells.iter().enumerate() {
        let s = summarize(spec, &per_cell[ci]);
        progress(&format!(
            "cell {}/{} {}: {}",
            ci + 1,
            cells.len(),
            describe(spec),
            if s.failed { "FAILED" } else { "ok" }
        ));
        timings.push(CellTiming {
            key: spec.key(),
            seconds: started[ci].elapsed().as_secs_f64(),
            failed: s.failed,
            excluded: s.excluded.iter().map(|(e, n)| (e.tag().to_string(), *n)).collect(),
        });
        summaries.push(s);
    }
    let manifest = Manifest {
        seed: config.seed,
        design: config.design,
        version: env!("CARGO_PKG_VERSION").to_string(),
        cells: cells.len(),
        failed_cells: summaries.iter().filter(|s| s.failed).map(|s| s.spec.key()).collect(),
        config: config.clone(),
        timings,
        notes: summaries.iter().flat_map(|s| s.notes.iter().map(move |n| format!("{}: {n}", describe(&s.spec)))).collect(),
    };
    Ok(GridResult { cells: summaries, manifest, replications: per_cell })
}

pub fn describe(s: &ConditionSpec) -> String {
    format!(
        "q={},ppf={},sl={},cl={},phi={},c={},n={}",
        s.q, s.p_per_factor, s.sl, s.cl as u8, s.phi, s.c, s.n
    )
}

pub const CSV_HEADER: [&str; 13] =
    ["q", "p_per_factor", "sl", "cl", "phi", "c", "n", "estimator", "coefficient", "mean", "sd", "bias", "n_excluded"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_results_csv<W: Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for cell in cells {
        let s = &cell.spec;
        for row in &cell.rows {
            w.write_record([
                s.q.to_string(),
                s.p_per_factor.to_string(),
                format!("{:.2}", s.sl),
                (s.cl as u8).to_string(),
                format!("{:.2}", s.phi),
                s.c.to_string(),
                s.n.to_string(),
                row.estimator.tag().to_string(),
                row.coefficient.clone(),
                format!("{:.6}", row.mean),
                fmt_opt(row.sd),
                fmt_opt(row.bias),
                row.n_excluded.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_replication_csv<W: Write>(outcomes: &[Result<ReplicationOutcome>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replication", "estimator", "coefficient", "value", "reference"])?;
    for (rep, o) in outcomes.iter().enumerate() {
        if let Ok(o) = o {
            for e in &o.entries {
                w.write_record([
                    rep.to_string(),
                    e.estimator.tag().to_string(),
                    e.coefficient.to_string(),
                    format!("{:.17e}", e.value),
                    e.reference.map(|r| format!("{r:.17e}")).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `manifest.json` and, if requested, per-cell
/// replication files under `replications/`.
pub fn write_outputs(result: &GridResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(&result.cells, std::fs::File::create(dir.join("results.csv"))?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&result.manifest)?)?;
    if result.manifest.config.write_replications {
        let rdir = dir.join("replications");
        std::fs::create_dir_all(&rdir)?;
        for (cell, outcomes) in result.cells.iter().zip(&result.replications) {
            let f = std::fs::File::create(rdir.join(format!("cell_{}.csv", cell.spec.key())))?;
            write_replication_csv(outcomes, f)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cell() -> ConditionSpec {
        ConditionSpec {
            q: 2,
            p_per_factor: 4,
            sl: 0.8,
            cl: false,
            phi: 0.0,
            c: 2,
            n: 300,
            population: false,
            replications: 4,
            estimators: EstimatorSet { ml: true, wlsmv: true, bayes: false },
            bayes_replications: None,
            master_seed: 17,
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(GridConfig::full_sample().cells().unwrap().len(), 256);
        let pop = GridConfig::full_population().cells().unwrap();
        assert_eq!(pop.len(), 32);
        assert!(pop.iter().all(|c| c.population && c.q == 3 && c.p_per_factor == 5 && c.n == DEFAULT_POPULATION_SIZE));
        let keys: std::collections::BTreeSet<u64> =
            GridConfig::full_sample().cells().unwrap().iter().map(|c| c.key()).collect();
        assert_eq!(keys.len(), 256);
    }

    #[test]
    fn filters_select_cells() {
        let mut cfg = GridConfig::full_sample();
        cfg.cells = vec!["q=3,ppf=5,sl=.4,cl=0,phi=0,c=2,n=300".into()];
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].sl, cells[0].c, cells[0].n), (0.4, 2, 300));
        assert!(CellFilter::parse("bogus=1").is_err());
        assert!(CellFilter::parse("q").is_err());
        cfg.cells = vec!["sl=.8,c=2".into()];
        assert_eq!(cfg.cells().unwrap().len(), 32);
    }

    #[test]
    fn config_round_trip() {
        let text = "design = \"sample\"\nseed = 7\nreplications = 10\ncells = [\"q=3,ppf=5,c=2\"]\n[estimators]\nml = true\nwlsmv = false\nbayes = false\n";
        let cfg = GridConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cells().unwrap().len(), 16);
        assert_eq!(GridConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let err = GridConfig::from_toml("design = \"sample\"\nreplication = 3\n").unwrap_err();
        assert!(err.to_string().contains("replication"));
    }

    #[test]
    fn replications_are_reproducible_and_summaries_consistent() {
        let spec = small_cell();
        let mcmc = McmcSettings::default();
        let a = run_sample_cell(&spec, &mcmc).unwrap();
        let b = run_sample_cell(&spec, &mcmc).unwrap();
        assert_eq!(a, b);
        assert!(!a.failed, "{:?}", a.notes);
        let p_bl = a.get(Estimator::Ml, "p_bl").unwrap();
        let cor = a.get(Estimator::Ml, "cor_bl").unwrap();
        assert!((p_bl.bias.unwrap() - (p_bl.mean - cor.mean)).abs() < 1e-12);
        let corrected = a.get(Estimator::Ml, "p_bl_c").unwrap();
        assert!(corrected.mean <= p_bl.mean);
        assert!(a.get(Estimator::MlWlsmv, "p_blc").is_some());
        // recompute one mean from raw replication values
        let reps: Vec<_> = (0..spec.replications).map(|r| run_replication(&spec, r, &mcmc).unwrap()).collect();
        let mean = reps.iter().map(|o| o.value(Estimator::Ml, "p_bl").unwrap()).sum::<f64>() / reps.len() as f64;
        assert!((mean - p_bl.mean).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let spec = ConditionSpec { replications: 2, ..small_cell() };
        let cell = run_sample_cell(&spec, &McmcSettings::default()).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&[cell], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("2,4,0.80,0,0.00,2,300,ML,cor_bl,"));
    }

    #[test]
    fn exclusion_threshold() {
        let spec = ConditionSpec { replications: 4, estimators: EstimatorSet { ml: true, wlsmv: false, bayes: false }, ..small_cell() };
        let mut bad = ReplicationOutcome::default();
        bad.exclude(Estimator::Ml, "not converged");
        let mut good = ReplicationOutcome::default();
        good.push(Estimator::Ml, "p_bl", 0.9, Some(0.85));
        let one = summarize(&spec, &[Ok(bad.clone()), Ok(good.clone()), Ok(good.clone()), Ok(good.clone())]);
        assert!(!one.failed);
        assert_eq!(one.get(Estimator::Ml, "p_bl").unwrap().n_excluded, 1);
        let two = summarize(&spec, &[Ok(bad.clone()), Ok(bad), Ok(good.clone()), Ok(good)]);
        assert!(two.failed);
    }
}
