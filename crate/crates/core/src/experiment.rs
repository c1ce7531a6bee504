//! Multi-trial experiments.
//!
//! A run generates candidates once per validation draw with one of four
//! methods, then repeats the shared testing stage over independent
//! calibration and test draws. Every random stream is derived from the run
//! seed, the trial index and a stream tag, so trials can run in any order on
//! any number of threads without changing a byte of the output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::guided_bo::{evaluate_points, initial_design, run_bo, snap_to_listed, BoConfig, BoError, IterationLog};
use crate::objectives::{
    builtin_problem, Objective, ObjectiveError, ObjectiveProvider, SubprocessObjective, SyntheticTradeoff,
    TableObjective, DEFAULT_TIMEOUT_S,
};
use crate::seed::{self, tag};
use crate::selection::{test_and_select, SelectionError, SelectionResult};
use crate::stats::{region_of_interest, RegionOfInterest, StatsError};
use crate::types::{EvalRecord, IdGenerator, RiskSpec, SearchSpace, Split};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(#[from] ObjectiveError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Where losses come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// A named preset from [`crate::objectives::builtin_problems`].
    Builtin { name: String },
    /// A custom synthetic family.
    Synthetic(SyntheticTradeoff),
    Table { manifest: PathBuf },
    Subprocess {
        command: Vec<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        constrained: usize,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}

impl ProviderSpec {
    pub fn build(&self) -> Result<ObjectiveProvider, ExperimentError> {
        Ok(match self {
            ProviderSpec::Builtin { name } => ObjectiveProvider::Synthetic(builtin_problem(name)?),
            ProviderSpec::Synthetic(p) => {
                p.validate()?;
                ObjectiveProvider::Synthetic(p.clone())
            }
            ProviderSpec::Table { manifest } => ObjectiveProvider::Table(TableObjective::load(manifest)?),
            ProviderSpec::Subprocess {
                command,
                lower,
                upper,
                constrained,
                timeout_s,
            } => {
                if command.is_empty() {
                    return Err(config_err("subprocess command is empty"));
                }
                if !(*timeout_s > 0.0 && timeout_s.is_finite()) {
                    return Err(config_err(format!("invalid timeout {timeout_s}")));
                }
                let space =
                    SearchSpace::new(lower.clone(), upper.clone()).map_err(|e| config_err(e.to_string()))?;
                ObjectiveProvider::Subprocess(SubprocessObjective {
                    command: command.clone(),
                    space,
                    constrained: *constrained,
                    timeout: Duration::from_secs_f64(*timeout_s),
                })
            }
        })
    }
}

/// Candidate-generation method; the testing stage is shared by all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Optimization steered into the region of interest.
    #[default]
    Guided,
    /// Evenly spaced grid.
    Uniform,
    /// Latin hypercube of the whole budget.
    RandomLhs,
    /// Hypervolume-improvement BO with the region widened to the whole objective space.
    PlainHvi,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Guided, Method::Uniform, Method::RandomLhs, Method::PlainHvi];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Guided => "guided",
            Method::Uniform => "uniform",
            Method::RandomLhs => "random_lhs",
            Method::PlainHvi => "plain_hvi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown method '{s}' (expected guided, uniform, random_lhs or plain_hvi)"))
    }
}

fn default_trials() -> usize {
    1
}

fn default_samples() -> usize {
    2000
}

/// A complete experiment description, loadable from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub provider: ProviderSpec,
    pub risk: RiskSpec,
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validation sample count; ignored by providers with fixed splits.
    #[serde(default = "default_samples")]
    pub k: usize,
    /// Calibration sample count; ignored by providers with fixed splits.
    #[serde(default = "default_samples")]
    pub m: usize,
    #[serde(default = "default_samples")]
    pub test_size: usize,
    /// Redraw validation data (and hence candidates) in every trial.
    #[serde(default)]
    pub resample_validation: bool,
    /// Worker threads for trials; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(provider: ProviderSpec, risk: RiskSpec) -> Self {
        Self {
            provider,
            risk,
            bo: BoConfig::default(),
            method: Method::default(),
            trials: default_trials(),
            seed: 0,
            k: default_samples(),
            m: default_samples(),
            test_size: default_samples(),
            resample_validation: false,
            jobs: 0,
            out: None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.risk.validate().map_err(|e| config_err(e.to_string()))?;
        self.bo.validate().map_err(|e| config_err(e.to_string()))?;
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.k < 2 || self.m < 2 {
            return Err(config_err(format!("k and m must be at least 2, got {} and {}", self.k, self.m)));
        }
        if self.test_size == 0 {
            return Err(config_err("test_size must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_val_means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_means: Option<Vec<f64>>,
    /// Some constrained mean above its limit; true means when known, else test means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violated: Option<bool>,
    /// Constrained test means inside the region of interest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_region: Option<bool>,
    /// Free objective of the choice: test mean when available, else validation mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_value: Option<f64>,
    /// Candidate-generation log, when candidates are regenerated per trial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bo_log: Option<Vec<IterationLog>>,
}

impl TrialRow {
    fn failed(trial: usize, error: String) -> Self {
        Self {
            trial,
            error: Some(error),
            selection: None,
            chosen_val_means: None,
            test_means: None,
            true_means: None,
            violated: None,
            in_region: None,
            free_value: None,
            bo_log: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.error.is_none() && self.selection.as_ref().is_some_and(|s| s.chosen.is_none())
    }
}

/// Aggregates over trial rows. Each field names its denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    /// Trials without a provider or pipeline failure.
    pub completed: usize,
    pub failed: usize,
    pub non_null: usize,
    pub nulls: usize,
    /// `nulls / completed`.
    pub null_rate: Option<f64>,
    pub violations: usize,
    /// `violations / completed`; a null selection never violates. This is the FWER estimate.
    pub violation_rate: Option<f64>,
    /// `violations / non_null`.
    pub violation_rate_non_null: Option<f64>,
    /// Mean of `free_value` over non-null trials.
    pub free_mean: Option<f64>,
    /// Half-width of the normal 95% interval of `free_mean`.
    pub free_ci95: Option<f64>,
    /// Per constraint, mean of the chosen configuration's test means over non-null trials.
    pub constrained_means: Vec<Option<f64>>,
    pub constrained_ci95: Vec<Option<f64>>,
    /// `in_region` true over non-null trials with test means.
    pub in_region_rate: Option<f64>,
}

fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(1.96 * (var / n).sqrt()))
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Recomputes aggregates from trial rows.
pub fn aggregate(rows: &[TrialRow], num_constrained: usize) -> Aggregates {
    let completed: Vec<&TrialRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let chosen: Vec<&TrialRow> = completed.iter().copied().filter(|r| !r.is_null()).collect();
    let nulls = completed.len() - chosen.len();
    let violations = chosen.iter().filter(|r| r.violated == Some(true)).count();
    let free: Vec<f64> = chosen.iter().filter_map(|r| r.free_value).collect();
    let (free_mean, free_ci95) = mean_ci(&free);
    let (constrained_means, constrained_ci95) = (0..num_constrained)
        .map(|i| {
            let v: Vec<f64> = chosen.iter().filter_map(|r| r.test_means.as_ref().map(|t| t[i])).collect();
            mean_ci(&v)
        })
        .unzip();
    let with_region: Vec<bool> = chosen.iter().filter_map(|r| r.in_region).collect();
    Aggregates {
        trials: rows.len(),
        completed: completed.len(),
        failed: rows.len() - completed.len(),
        non_null: chosen.len(),
        nulls,
        null_rate: ratio(nulls, completed.len()),
        violations,
        violation_rate: ratio(violations, completed.len()),
        violation_rate_non_null: ratio(violations, chosen.len()),
        free_mean,
        free_ci95,
        constrained_means,
        constrained_ci95,
        in_region_rate: ratio(with_region.iter().filter(|&&b| b).count(), with_region.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub provider: String,
    pub risk: RiskSpec,
    pub bo: BoConfig,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub test_size: usize,
    pub region: RegionOfInterest,
    /// Candidate-generation log when candidates are shared by all trials.
    pub bo_log: Vec<IterationLog>,
    pub rows: Vec<TrialRow>,
    pub aggregates: Aggregates,
}

impl RunReport {
    /// True when the region is degenerate or every completed trial is null.
    pub fn all_null_or_degenerate(&self) -> bool {
        self.region.degenerate || (self.aggregates.completed > 0 && self.aggregates.non_null == 0)
    }
}

/// Largest per-axis grid with at most `n` points, in unit coordinates.
/// One dimension gets exactly `n` evenly spaced points.
pub fn uniform_grid_unit(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let level = |i: usize, levels: usize| {
        if levels == 1 {
            0.5
        } else {
            i as f64 / (levels - 1) as f64
        }
    };
    if dim == 1 {
        return (0..n).map(|i| vec![level(i, n)]).collect();
    }
    let fits = |l: usize| l.checked_pow(dim as u32).is_some_and(|t| t <= n);
    let mut levels = (n as f64).powf(1.0 / dim as f64).floor().max(1.0) as usize;
    while fits(levels + 1) {
        levels += 1;
    }
    while levels > 1 && !fits(levels) {
        levels -= 1;
    }
    let total = levels.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; dim];
            for j in (0..dim).rev() {
                p[j] = level(idx % levels, levels);
                idx /= levels;
            }
            p
        })
        .collect()
}

/// Evaluated candidates for one validation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub records: Vec<EvalRecord>,
    pub log: Vec<IterationLog>,
}

/// Runs candidate generation for `method`.
pub fn generate_candidates(
    method: Method,
    objective: &dyn Objective,
    spec: &RiskSpec,
    region: &RegionOfInterest,
    k: usize,
    validation_seed: u64,
    bo: &BoConfig,
) -> Result<Candidates, BoError> {
    let space = objective.space();
    let evaluate = |points: Vec<Vec<f64>>| {
        let mut ids = IdGenerator::new();
        evaluate_points(objective, &points, k, validation_seed, &mut ids).map(|records| Candidates {
            records,
            log: Vec::new(),
        })
    };
    match method {
        Method::Guided => {
            let out = run_bo(objective, spec, region, k, validation_seed, bo)?;
            Ok(Candidates {
                records: out.records,
                log: out.log,
            })
        }
        Method::PlainHvi => {
            let whole = RegionOfInterest::whole_space(spec.num_constrained(), spec.bound, region.k, region.m);
            let out = run_bo(objective, spec, &whole, k, validation_seed, bo)?;
            Ok(Candidates {
                records: out.records,
                log: out.log,
            })
        }
        Method::RandomLhs => evaluate(initial_design(objective, bo.budget, bo.seed)?),
        Method::Uniform => {
            let grid = uniform_grid_unit(space.dim(), bo.budget);
            let points = match objective.listed_configurations() {
                Some(listed) => {
                    let units: Vec<Vec<f64>> = listed.iter().map(|v| space.to_unit(v)).collect();
                    let mut used = vec![false; listed.len()];
                    snap_to_listed(&grid, &units, &mut used)
                        .into_iter()
                        .map(|i| listed[i].clone())
                        .collect()
                }
                None => grid.iter().map(|u| space.from_unit(u)).collect(),
            };
            evaluate(points)
        }
    }
}

struct RunPlan<'a> {
    config: &'a ExperimentConfig,
    objective: &'a dyn Objective,
    region: RegionOfInterest,
    k: usize,
    m: usize,
}

impl RunPlan<'_> {
    fn validation_seed(&self, trial: usize) -> u64 {
        if self.config.resample_validation {
            seed::derive(&[self.config.seed, tag::VALIDATION, trial as u64])
        } else {
            seed::derive(&[self.config.seed, tag::VALIDATION])
        }
    }

    fn bo_config(&self, trial: usize) -> BoConfig {
        let base = self.config.bo.seed;
        let seed = if self.config.resample_validation {
            seed::derive(&[self.config.seed, tag::POOL, base, trial as u64])
        } else {
            seed::derive(&[self.config.seed, tag::POOL, base])
        };
        BoConfig {
            seed,
            ..self.config.bo.clone()
        }
    }

    fn generate(&self, trial: usize) -> Result<Candidates, BoError> {
        generate_candidates(
            self.config.method,
            self.objective,
            &self.config.risk,
            &self.region,
            self.k,
            self.validation_seed(trial),
            &self.bo_config(trial),
        )
    }

    fn run_trial(&self, trial: usize, candidates: &Candidates) -> Result<TrialRow, ExperimentError> {
        let spec = &self.config.risk;
        let c = spec.num_constrained();
        let cal_seed = seed::derive(&[self.config.seed, tag::CALIBRATION, trial as u64]);
        let test_seed = seed::derive(&[self.config.seed, tag::TEST, trial as u64]);
        let mut selection = test_and_select(&candidates.records, spec, self.k, self.m, |cfg| {
            self.objective.evaluate(cfg, Split::Calibration, self.m, cal_seed)
        })?;
        if self.config.method == Method::Guided {
            selection.degenerate = self.region.degenerate;
            selection.region = Some(self.region.clone());
        }
        let mut row = TrialRow {
            trial,
            error: None,
            chosen_val_means: selection.chosen_record().map(|r| r.val_means.clone()),
            selection: None,
            test_means: None,
            true_means: None,
            violated: None,
            in_region: None,
            free_value: None,
            bo_log: None,
        };
        if let Some(chosen) = &selection.chosen {
            row.test_means = match self.objective.evaluate(chosen, Split::Test, self.config.test_size, test_seed) {
                Ok(samples) => Some(samples.means().map_err(|e| config_err(e.to_string()))?),
                Err(ObjectiveError::MissingSplit { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            row.true_means = self.objective.true_mean(&chosen.values);
            let basis = row.true_means.as_ref().or(row.test_means.as_ref());
            row.violated = basis.map(|mu| mu[..c].iter().zip(&spec.alphas).any(|(m, a)| m > a));
            row.in_region = row.test_means.as_ref().map(|t| self.region.contains(&t[..c]));
            row.free_value = row
                .test_means
                .as_ref()
                .map(|t| t[c])
                .or_else(|| row.chosen_val_means.as_ref().map(|v| v[c]));
        }
        row.selection = Some(selection);
        Ok(row)
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, ExperimentError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Validation records of the initial design a run with `config` would start from.
pub fn initial_pool_records(config: &ExperimentConfig, objective: &dyn Objective) -> Result<Vec<EvalRecord>, ExperimentError> {
    let (k, _) = objective.split_sizes().unwrap_or((config.k, config.m));
    let validation_seed = seed::derive(&[config.seed, tag::VALIDATION]);
    let bo_seed = seed::derive(&[config.seed, tag::POOL, config.bo.seed]);
    let points = initial_design(objective, config.bo.init_size, bo_seed)?;
    let mut ids = IdGenerator::new();
    Ok(evaluate_points(objective, &points, k, validation_seed, &mut ids)?)
}

/// Builds the provider and runs every trial.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    config.validate()?;
    let provider = config.provider.build()?;
    run_with_objective(config, &provider)
}

/// Runs every trial against an already constructed objective.
pub fn run_with_objective(config: &ExperimentConfig, objective: &dyn Objective) -> Result<RunReport, ExperimentError> {
    config.validate()?;
    let c = config.risk.num_constrained();
    if objective.num_constrained() != c {
        return Err(config_err(format!(
            "provider has {} constrained objectives, risk spec has {c}",
            objective.num_constrained()
        )));
    }
    if config.risk.num_objectives() > crate::pareto::MAX_HV_DIM
        && matches!(config.method, Method::Guided | Method::PlainHvi)
    {
        return Err(config_err(format!(
            "hypervolume acquisition supports at most {} objectives",
            crate::pareto::MAX_HV_DIM
        )));
    }
    if let Some(listed) = objective.listed_configurations() {
        if listed.len() < config.bo.budget {
            return Err(config_err(format!(
                "finite space has {} configurations, budget is {}",
                listed.len(),
                config.bo.budget
            )));
        }
    }
    let (k, m) = objective.split_sizes().unwrap_or((config.k, config.m));
    let region = region_of_interest(&config.risk, k, m)?;
    let plan = RunPlan {
        config,
        objective,
        region,
        k,
        m,
    };

    let shared = if config.resample_validation {
        None
    } else {
        Some(plan.generate(0).map_err(|e| e.to_string()))
    };
    let rows: Vec<TrialRow> = with_pool(config.jobs, || {
        (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let own;
                let (candidates, log) = match &shared {
                    Some(Ok(c)) => (c, None),
                    Some(Err(e)) => return TrialRow::failed(trial, e.clone()),
                    None => match plan.generate(trial) {
                        Ok(c) => {
                            own = c;
                            (&own, Some(own.log.clone()))
                        }
                        Err(e) => return TrialRow::failed(trial, e.to_string()),
                    },
                };
                match plan.run_trial(trial, candidates) {
                    Ok(mut row) => {
                        row.bo_log = log;
                        row
                    }
                    Err(e) => TrialRow::failed(trial, e.to_string()),
                }
            })
            .collect()
    })?;
    let bo_log = match shared {
        Some(Ok(c)) => c.log,
        _ => Vec::new(),
    };
    let aggregates = aggregate(&rows, c);
    Ok(RunReport {
        method: config.method,
        provider: objective.name(),
        risk: config.risk.clone(),
        bo: config.bo.clone(),
        seed: config.seed,
        k,
        m,
        test_size: config.test_size,
        region: plan.region,
        bo_log,
        rows,
        aggregates,
    })
}

/// Violation rate over independent calibration draws, with an exact interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwerSummary {
    pub delta: f64,
    pub trials: usize,
    pub completed: usize,
    pub violations: usize,
    pub nulls: usize,
    /// `violations / completed`.
    pub rate: f64,
    /// Clopper-Pearson 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// `delta + 3 * sqrt(delta (1 - delta) / completed)`.
    pub tolerance: f64,
    pub within_tolerance: bool,
}

/// Exact two-sided binomial interval at level `1 - level`.
pub fn clopper_pearson(successes: usize, n: usize, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (x, n) = (successes as f64, n as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0)
            .expect("positive shape parameters")
            .inverse_cdf(level / 2.0)
    };
    let hi = if successes as f64 >= n {
        1.0
    } else {
        Beta::new(x + 1.0, n - x)
            .expect("positive shape parameters")
            .inverse_cdf(1.0 - level / 2.0)
    };
    (lo, hi)
}

pub fn fwer_summary(report: &RunReport) -> FwerSummary {
    let a = &report.aggregates;
    let delta = report.risk.delta;
    let (ci_low, ci_high) = clopper_pearson(a.violations, a.completed, 0.05);
    let rate = a.violation_rate.unwrap_or(0.0);
    let tolerance = delta + 3.0 * (delta * (1.0 - delta) / a.completed.max(1) as f64).sqrt();
    FwerSummary {
        delta,
        trials: a.trials,
        completed: a.completed,
        violations: a.violations,
        nulls: a.nulls,
        rate,
        ci_low,
        ci_high,
        tolerance,
        within_tolerance: rate <= tolerance,
    }
}

/// Repeats selection over independent calibration draws on a problem with known true means.
pub fn run_fwer_study(config: &ExperimentConfig) -> Result<(FwerSummary, RunReport), ExperimentError> {
    if !matches!(config.provider, ProviderSpec::Builtin { .. } | ProviderSpec::Synthetic(_)) {
        return Err(config_err("an FWER study needs a synthetic provider with known true means"));
    }
    let report = run_experiment(config)?;
    Ok((fwer_summary(&report), report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub init_size: usize,
    pub aggregates: Aggregates,
    /// Per-trial free objective of the choice; `None` for null or failed trials.
    pub free_values: Vec<Option<f64>>,
}

/// Runs the experiment once per budget with shared seeds. The initial design
/// size is `min(init_size, budget)`.
pub fn run_budget_sweep(config: &ExperimentConfig, budgets: &[usize]) -> Result<Vec<SweepRow>, ExperimentError> {
    if budgets.is_empty() {
        return Err(config_err("no budgets given"));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(config_err("budgets must be ascending"));
    }
    let provider = config.provider.build()?;
    budgets
        .iter()
        .map(|&budget| {
            let mut cfg = config.clone();
            cfg.bo.budget = budget;
            cfg.bo.init_size = config.bo.init_size.min(budget);
            let report = run_with_objective(&cfg, &provider)?;
            Ok(SweepRow {
                budget,
                init_size: cfg.bo.init_size,
                free_values: report
                    .rows
                    .iter()
                    .map(|r| if r.is_null() { None } else { r.free_value })
                    .collect(),
                aggregates: report.aggregates,
            })
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 21] = [
    "method",
    "provider",
    "alphas",
    "delta",
    "delta_prime",
    "bound",
    "budget",
    "init_size",
    "k",
    "m",
    "trials",
    "completed",
    "non_null",
    "null_rate",
    "violation_rate",
    "violation_rate_non_null",
    "free_mean",
    "free_ci95",
    "constrained_means",
    "constrained_ci95",
    "in_region_rate",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn join_opt(v: &[Option<f64>]) -> String {
    v.iter().map(|x| opt(*x)).collect::<Vec<_>>().join(";")
}

/// Writes one plot-ready row per report; an empty slice yields only the header.
pub fn write_summary_csv(reports: &[RunReport], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in reports {
        let a = &r.aggregates;
        let alphas: Vec<String> = r.risk.alphas.iter().map(|x| format!("{x:?}")).collect();
        w.write_record([
            r.method.to_string(),
            r.provider.clone(),
            alphas.join(";"),
            format!("{:?}", r.risk.delta),
            format!("{:?}", r.risk.delta_prime),
            r.risk.bound.to_string(),
            r.bo.budget.to_string(),
            r.bo.init_size.to_string(),
            r.k.to_string(),
            r.m.to_string(),
            a.trials.to_string(),
            a.completed.to_string(),
            a.non_null.to_string(),
            opt(a.null_rate),
            opt(a.violation_rate),
            opt(a.violation_rate_non_null),
            opt(a.free_mean),
            opt(a.free_ci95),
            join_opt(&a.constrained_means),
            join_opt(&a.constrained_ci95),
            opt(a.in_region_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.json`, `summary.csv` and `bo_log.jsonl` into `dir`.
pub fn emit_results(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join("results.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    let csv = dir.join("summary.csv");
    write_summary_csv(std::slice::from_ref(report), &csv)?;
    let log = dir.join("bo_log.jsonl");
    let mut lines = String::new();
    for entry in &report.bo_log {
        lines.push_str(&serde_json::to_string(entry)?);
        lines.push('\n');
    }
    std::fs::write(&log, lines)?;
    Ok(vec![json, csv, log])
}
