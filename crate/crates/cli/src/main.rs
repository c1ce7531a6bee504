use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use roibo_core::experiment::{
    emit_results, fwer_summary, initial_pool_records, run_budget_sweep, run_experiment, ExperimentConfig,
    ExperimentError, Method, ProviderSpec, RunReport,
};
use roibo_core::objectives::{Objective, ObjectiveError, TableObjective};
use roibo_core::pareto::{hypervolume, hypervolume_mc};
use roibo_core::selection::suggest_alpha_range;
use roibo_core::{Bound, RiskSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_PROVIDER: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

/// Testing-guided multi-objective hyperparameter selection with certified risk control.
#[derive(Parser)]
#[command(name = "roibo", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write results.json, summary.csv and bo_log.jsonl.
    Run(Common),
    /// Estimate the violation rate over repeated calibration draws.
    Fwer(Common),
    /// Run the experiment once per budget with shared seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Ascending budgets, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
    },
    /// Hypervolume of the points in a file (one point per line).
    Hv {
        points: PathBuf,
        /// Reference point, comma separated.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        reference: Vec<f64>,
        /// Also report a Monte Carlo estimate with this many samples.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Range of validation losses over the initial pool, per constraint.
    SuggestAlpha(Common),
    /// Load and check a table manifest.
    ValidateManifest { manifest: PathBuf },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (JSON); flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in synthetic problem (fairness-like, robustness-like, selective-robustness-like, pruning-like).
    #[arg(long)]
    problem: Option<String>,
    /// Table manifest to replay.
    #[arg(long, conflicts_with = "problem")]
    manifest: Option<PathBuf>,
    /// Risk limits, one per constrained objective.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    delta_prime: Option<f64>,
    /// hoeffding or hb.
    #[arg(long)]
    bound: Option<Bound>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    /// guided, uniform, random_lhs or plain_hvi.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Validation sample count.
    #[arg(long)]
    k: Option<usize>,
    /// Calibration sample count.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    resample_validation: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Subprocess provider timeout in seconds.
    #[arg(long)]
    timeout_s: Option<f64>,
}

/// Error tagged with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

fn experiment_failure(e: ExperimentError) -> Failure {
    let code = match e {
        ExperimentError::Config(_) | ExperimentError::Stats(_) | ExperimentError::Json(_) => EXIT_CONFIG,
        ExperimentError::Provider(ObjectiveError::UnknownProblem(_) | ObjectiveError::InvalidProblem(_)) => {
            EXIT_CONFIG
        }
        _ => EXIT_PROVIDER,
    };
    fail(code, e)
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.problem, &self.manifest) {
            (Some(path), _, _) => ExperimentConfig::from_json_file(path)?,
            (None, Some(_), _) | (None, _, Some(_)) => {
                let alphas = self.alpha.clone().ok_or_else(|| anyhow!("--alpha is required without --config"))?;
                let risk = RiskSpec {
                    alphas,
                    delta: 0.1,
                    delta_prime: 0.1,
                    bound: Bound::HoeffdingBentkus,
                };
                ExperimentConfig::new(ProviderSpec::Builtin { name: String::new() }, risk)
            }
            (None, None, None) => bail!("pass --config, --problem or --manifest"),
        };
        if let Some(name) = &self.problem {
            cfg.provider = ProviderSpec::Builtin { name: name.clone() };
        }
        if let Some(path) = &self.manifest {
            cfg.provider = ProviderSpec::Table { manifest: path.clone() };
        }
        if let Some(a) = &self.alpha {
            cfg.risk.alphas = a.clone();
        }
        if let Some(d) = self.delta {
            cfg.risk.delta = d;
        }
        if let Some(d) = self.delta_prime {
            cfg.risk.delta_prime = d;
        }
        if let Some(b) = self.bound {
            cfg.risk.bound = b;
        }
        if let Some(n) = self.budget {
            cfg.bo.budget = n;
        }
        if let Some(n) = self.init {
            cfg.bo.init_size = n;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(t) = self.test_size {
            cfg.test_size = t;
        }
        if self.resample_validation {
            cfg.resample_validation = true;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(t) = self.timeout_s {
            match &mut cfg.provider {
                ProviderSpec::Subprocess { timeout_s, .. } => *timeout_s = t,
                _ => bail!("--timeout-s only applies to subprocess providers"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_PROVIDER, e))?;
    println!("{text}");
    Ok(())
}

fn finish_report(report: &RunReport, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(dir) = out {
        emit_results(report, dir).map_err(|e| fail(EXIT_PROVIDER, e))?;
    }
    print_json(&report.aggregates)?;
    let a = &report.aggregates;
    if a.trials > 0 && a.failed == a.trials {
        let first = report.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(fail(EXIT_PROVIDER, anyhow!("every trial failed: {first}")));
    }
    if report.all_null_or_degenerate() {
        return Err(fail(
            EXIT_DEGENERATE,
            anyhow!("no configuration could be certified (degenerate region or all trials null)"),
        ));
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(str::parse)
            .collect();
        match fields {
            Ok(p) => points.push(p),
            // tolerate a header row
            Err(_) if points.is_empty() && i == 0 => continue,
            Err(e) => bail!("{} line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(points)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config_fail = |e: anyhow::Error| fail(EXIT_CONFIG, e);
    match cli.command {
        Cmd::Run(common) => {
            let cfg = common.resolve().map_err(config_fail)?;
            let report = run_experiment(&cfg).map_err(experiment_failure)?;
            finish_report(&report, cfg.out.as_deref())
        }
        Cmd::Fwer(common) => {
            let cfg = common.resolve().map_err(config_fail)?;
            if !matches!(cfg.provider, ProviderSpec::Builtin { .. } | ProviderSpec::Synthetic(_)) {
                return Err(config_fail(anyhow!("fwer needs a synthetic provider")));
            }
            let report = run_experiment(&cfg).map_err(experiment_failure)?;
            if let Some(dir) = cfg.out.as_deref() {
                emit_results(&report, dir).map_err(|e| fail(EXIT_PROVIDER, e))?;
            }
            print_json(&fwer_summary(&report))
        }
        Cmd::Sweep { common, budgets } => {
            let cfg = common.resolve().map_err(config_fail)?;
            let rows = run_budget_sweep(&cfg, &budgets).map_err(experiment_failure)?;
            if let Some(dir) = cfg.out.as_deref() {
                std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_PROVIDER, e))?;
                let text = serde_json::to_string_pretty(&rows).map_err(|e| fail(EXIT_PROVIDER, e))?;
                std::fs::write(dir.join("sweep.json"), text).map_err(|e| fail(EXIT_PROVIDER, e))?;
            }
            print_json(&rows)
        }
        Cmd::Hv {
            points,
            reference,
            mc,
            seed,
        } => {
            let pts = read_points(&points).map_err(config_fail)?;
            let exact = hypervolume(&pts, &reference).map_err(|e| config_fail(e.into()))?;
            let mut out = serde_json::json!({ "points": pts.len(), "hypervolume": exact });
            if let Some(n) = mc {
                let est = hypervolume_mc(&pts, &reference, n, seed).map_err(|e| config_fail(e.into()))?;
                out["monte_carlo"] = serde_json::json!({ "value": est.value, "std_error": est.std_error });
            }
            print_json(&out)
        }
        Cmd::SuggestAlpha(mut common) => {
            if common.alpha.is_none() && common.config.is_none() {
                // limits do not influence the initial pool; any valid placeholder works
                common.alpha = Some(vec![0.5]);
            }
            let mut cfg = common.resolve().map_err(config_fail)?;
            let provider = cfg.provider.build().map_err(experiment_failure)?;
            let c = provider.num_constrained();
            cfg.risk.alphas.resize(c, 0.5);
            let pool = initial_pool_records(&cfg, &provider).map_err(experiment_failure)?;
            let ranges = suggest_alpha_range(&pool, c).ok_or_else(|| config_fail(anyhow!("empty pool")))?;
            let out: Vec<_> = ranges
                .iter()
                .enumerate()
                .map(|(i, (lo, hi))| serde_json::json!({ "objective": i, "min": lo, "max": hi }))
                .collect();
            print_json(&out)
        }
        Cmd::ValidateManifest { manifest } => {
            let table = TableObjective::load(&manifest).map_err(|e| fail(EXIT_PROVIDER, e))?;
            let (k, m) = table.split_sizes().unwrap_or((0, 0));
            print_json(&serde_json::json!({
                "configs": table.len(),
                "dim": table.space().dim(),
                "constrained": table.num_constrained(),
                "k": k,
                "m": m,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
