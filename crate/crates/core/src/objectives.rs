//! Objective providers.
//!
//! A provider turns a configuration into per-sample losses on a named split.
//! Three kinds exist: closed-form synthetic trade-off families with known true
//! means, table-backed replay of precomputed loss dumps, and a subprocess
//! plugin speaking one JSON line in and one JSON line out.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::types::{ConfigId, Configuration, LossSamples, SearchSpace, Split};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid synthetic problem: {0}")]
    InvalidProblem(String),
    #[error("unknown built-in problem '{0}'")]
    UnknownProblem(String),
    #[error("manifest errors: {}", .0.join("; "))]
    Manifest(Vec<String>),
    #[error("no manifest entry for configuration {0:?}")]
    ManifestMiss(Vec<f64>),
    #[error("split '{split}' not available for configuration {id}")]
    MissingSplit { id: String, split: Split },
    #[error("subprocess timed out after {timeout_s} s; stderr: {stderr}")]
    Timeout { timeout_s: f64, stderr: String },
    #[error("subprocess protocol violation: {message}; stderr: {stderr}")]
    Protocol { message: String, stderr: String },
    #[error("subprocess exited with {status}; stderr: {stderr}")]
    ExitStatus { status: String, stderr: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that can produce per-sample losses for a configuration.
///
/// Implementations must be deterministic in `(configuration, split, seed)`.
/// The `seed` is a per-stream seed shared by all configurations of one trial;
/// providers mix in the configuration id themselves.
pub trait Objective: Send + Sync {
    fn name(&self) -> String;

    /// Number of constrained objectives `c`; losses come as `c + 1` vectors.
    fn num_constrained(&self) -> usize;

    fn space(&self) -> &SearchSpace;

    fn evaluate(&self, config: &Configuration, split: Split, n_samples: usize, seed: u64)
        -> Result<LossSamples, ObjectiveError>;

    /// For finite spaces, the admissible configurations.
    fn listed_configurations(&self) -> Option<&[Vec<f64>]> {
        None
    }

    /// Closed-form expected losses, when known.
    fn true_mean(&self, _values: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Fixed `(k, m)` for providers whose sample counts are not free.
    fn split_sizes(&self) -> Option<(usize, usize)> {
        None
    }
}

// ---------------------------------------------------------------------------
// synthetic

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    #[default]
    Bernoulli,
    ClippedGaussian { sd: f64 },
}

/// `mu(s) = clamp(base + gain * s^exponent, 0, 1)`, where `s` is a weighted
/// mean of the unit-box coordinates (equal weights when none are given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub base: f64,
    pub gain: f64,
    pub exponent: f64,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Curve {
    pub fn new(base: f64, gain: f64, exponent: f64, noise: Noise) -> Self {
        Self {
            base,
            gain,
            exponent,
            noise,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    /// Weighted mean of unit-box coordinates, clamped to `[0, 1]`.
    pub fn progress(&self, unit: &[f64]) -> f64 {
        let s = match &self.weights {
            Some(w) => unit.iter().zip(w).map(|(u, w)| u * w).sum::<f64>() / w.iter().sum::<f64>(),
            None => unit.iter().sum::<f64>() / unit.len() as f64,
        };
        s.clamp(0.0, 1.0)
    }

    pub fn mean(&self, s: f64) -> f64 {
        (self.base + self.gain * s.powf(self.exponent)).clamp(0.0, 1.0)
    }
}

/// Synthetic trade-off family. Each curve depends on `lambda` through a
/// weighted mean of its unit-box coordinates; the last curve is the free
/// objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTradeoff {
    pub name: String,
    pub space: SearchSpace,
    pub curves: Vec<Curve>,
}

impl SyntheticTradeoff {
    pub fn new(name: impl Into<String>, space: SearchSpace, curves: Vec<Curve>) -> Result<Self, ObjectiveError> {
        let problem = Self {
            name: name.into(),
            space,
            curves,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::InvalidProblem(m));
        if self.curves.len() < 2 {
            return bad("need at least one constrained and one free curve".into());
        }
        for (i, c) in self.curves.iter().enumerate() {
            if !(c.exponent >= 0.0 && c.base.is_finite() && c.gain.is_finite()) {
                return bad(format!("curve {i}: invalid parameters"));
            }
            if let Some(w) = &c.weights {
                let ok = w.len() == self.space.dim()
                    && w.iter().all(|v| v.is_finite() && *v >= 0.0)
                    && w.iter().sum::<f64>() > 0.0;
                if !ok {
                    return bad(format!(
                        "curve {i}: weights must be {} non-negative values with a positive sum",
                        self.space.dim()
                    ));
                }
            }
            if let Noise::ClippedGaussian { sd } = c.noise {
                if !(sd >= 0.0 && sd.is_finite()) {
                    return bad(format!("curve {i}: invalid noise sd {sd}"));
                }
            }
        }
        let free = self.curves.last().expect("checked above");
        for (i, c) in self.curves[..self.curves.len() - 1].iter().enumerate() {
            if c.gain == 0.0 || free.gain == 0.0 || c.gain.signum() == free.gain.signum() {
                return bad(format!(
                    "constrained curve {i} (gain {}) and the free curve (gain {}) must pull in opposite directions",
                    c.gain, free.gain
                ));
            }
        }
        Ok(())
    }

    pub fn true_mean(&self, values: &[f64]) -> Vec<f64> {
        let u = self.space.to_unit(values);
        self.curves.iter().map(|c| c.mean(c.progress(&u))).collect()
    }

    fn draw(&self, config: &Configuration, split: Split, n_samples: usize, seed: u64) -> LossSamples {
        let mut rng = seed::rng(&[seed, split.tag(), config.id.0]);
        let means = self.true_mean(&config.values);
        let per_objective = self
            .curves
            .iter()
            .zip(means)
            .map(|(curve, mu)| match curve.noise {
                Noise::Bernoulli => {
                    let dist = Bernoulli::new(mu).expect("mean clamped into [0, 1]");
                    (0..n_samples)
                        .map(|_| if dist.sample(&mut rng) { 1.0 } else { 0.0 })
                        .collect()
                }
                Noise::ClippedGaussian { sd } => (0..n_samples)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (mu + sd * z).clamp(0.0, 1.0)
                    })
                    .collect(),
            })
            .collect();
        LossSamples {
            config_id: config.id,
            split,
            per_objective,
        }
    }
}

impl Objective for SyntheticTradeoff {
    fn name(&self) -> String {
        format!("synthetic:{}", self.name)
    }

    fn num_constrained(&self) -> usize {
        self.curves.len() - 1
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(
        &self,
        config: &Configuration,
        split: Split,
        n_samples: usize,
        seed: u64,
    ) -> Result<LossSamples, ObjectiveError> {
        if n_samples == 0 {
            return Err(ObjectiveError::InvalidProblem("n_samples must be positive".into()));
        }
        Ok(self.draw(config, split, n_samples, seed))
    }

    fn true_mean(&self, values: &[f64]) -> Option<Vec<f64>> {
        Some(SyntheticTradeoff::true_mean(self, values))
    }
}

/// Named synthetic presets echoing four application scenarios.
pub fn builtin_problems() -> Vec<SyntheticTradeoff> {
    use Noise::*;
    let make = |name: &str, dim: usize, curves: Vec<Curve>| {
        SyntheticTradeoff::new(name, SearchSpace::unit(dim), curves).expect("presets are valid")
    };
    vec![
        // error rises linearly, demographic-parity gap falls quadratically
        make(
            "fairness-like",
            1,
            vec![Curve::new(0.1, 0.8, 1.0, Bernoulli), Curve::new(0.9, -0.8, 2.0, Bernoulli)],
        ),
        // average error with a sharper knee, worst-group error
        make(
            "robustness-like",
            1,
            vec![
                Curve::new(0.04, 0.06, 3.0, Bernoulli),
                Curve::new(0.62, -0.51, 0.5, Bernoulli),
            ],
        ),
        // average error and miscoverage constrained, worst-group error free
        make(
            "selective-robustness-like",
            2,
            vec![
                Curve::new(0.04, 0.05, 2.0, Bernoulli),
                Curve::new(0.0, 0.12, 1.0, Bernoulli),
                Curve::new(0.6, -0.45, 0.5, Bernoulli),
            ],
        ),
        // accuracy drop against relative compute cost for three pruning ratios;
        // the first knob saves the most compute for the least accuracy
        make(
            "pruning-like",
            3,
            vec![
                Curve::new(0.0, 0.6, 2.0, Bernoulli).with_weights(vec![0.1, 0.3, 0.6]),
                Curve::new(1.0, -0.9, 1.0, ClippedGaussian { sd: 0.05 }).with_weights(vec![0.6, 0.3, 0.1]),
            ],
        ),
    ]
}

pub fn builtin_problem(name: &str) -> Result<SyntheticTradeoff, ObjectiveError> {
    builtin_problems()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ObjectiveError::UnknownProblem(name.to_string()))
}

// ---------------------------------------------------------------------------
// table replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLosses {
    pub validation: PathBuf,
    pub calibration: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: serde_json::Value,
    pub lambda: Vec<f64>,
    pub losses: ManifestLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// On-disk manifest; CSV paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub constrained: usize,
    pub configs: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<ManifestSpace>,
}

#[derive(Debug, Clone)]
struct TableRow {
    id: String,
    lambda: Vec<f64>,
    validation: Vec<Vec<f64>>,
    calibration: Vec<Vec<f64>>,
    test: Option<Vec<Vec<f64>>>,
}

/// Replays precomputed per-sample losses for a finite set of configurations.
#[derive(Debug, Clone)]
pub struct TableObjective {
    source: PathBuf,
    constrained: usize,
    space: SearchSpace,
    rows: Vec<TableRow>,
    lambdas: Vec<Vec<f64>>,
    k: usize,
    m: usize,
}

fn read_loss_csv(path: &Path, objectives: usize, constrained: usize, errors: &mut Vec<String>) -> Option<Vec<Vec<f64>>> {
    let label = path.display();
    let mut reader = match csv::ReaderBuilder::new().has_headers(true).from_path(path) {
        Ok(r) => r,
        Err(e) => {
            errors.push(format!("{label}: {e}"));
            return None;
        }
    };
    let expected: Vec<String> = (0..objectives).map(|i| format!("objective_{i}")).collect();
    match reader.headers() {
        Ok(h) if h.iter().map(str::trim).eq(expected.iter().map(String::as_str)) => {}
        Ok(h) => {
            errors.push(format!("{label}: header {:?}, expected {:?}", h.iter().collect::<Vec<_>>(), expected));
            return None;
        }
        Err(e) => {
            errors.push(format!("{label}: {e}"));
            return None;
        }
    }
    let mut columns = vec![Vec::new(); objectives];
    let before = errors.len();
    for (row, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("{label} row {}: {e}", row + 1));
                continue;
            }
        };
        if record.len() != objectives {
            errors.push(format!("{label} row {}: {} fields, expected {objectives}", row + 1, record.len()));
            continue;
        }
        for (i, field) in record.iter().enumerate() {
            match field.trim().parse::<f64>() {
                Ok(v) if i < constrained && !(0.0..=1.0).contains(&v) => {
                    errors.push(format!("{label} row {}: loss {v} of objective {i} out of [0, 1]", row + 1));
                }
                Ok(v) if !v.is_finite() => {
                    errors.push(format!("{label} row {}: non-finite loss", row + 1));
                }
                Ok(v) => columns[i].push(v),
                Err(e) => errors.push(format!("{label} row {}: '{field}': {e}", row + 1)),
            }
        }
    }
    (errors.len() == before).then_some(columns)
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl TableObjective {
    /// Loads and validates a manifest, collecting every problem found.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, ObjectiveError> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ObjectiveError::Manifest(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base, path)
    }

    fn from_manifest(manifest: Manifest, base: &Path, source: &Path) -> Result<Self, ObjectiveError> {
        let mut errors = Vec::new();
        if manifest.dim == 0 {
            errors.push("dim must be positive".to_string());
        }
        if manifest.constrained == 0 {
            errors.push("constrained must be positive".to_string());
        }
        if manifest.configs.is_empty() {
            errors.push("no configurations".to_string());
        }
        let objectives = manifest.constrained + 1;
        let mut seen = HashSet::new();
        let mut rows = Vec::new();
        for entry in &manifest.configs {
            let id = id_string(&entry.id);
            if !seen.insert(id.clone()) {
                errors.push(format!("duplicated config id '{id}'"));
            }
            if entry.lambda.len() != manifest.dim {
                errors.push(format!(
                    "config '{id}': lambda has {} entries, dim is {}",
                    entry.lambda.len(),
                    manifest.dim
                ));
            }
            let load = |p: &Path, errors: &mut Vec<String>| {
                read_loss_csv(&base.join(p), objectives, manifest.constrained, errors)
            };
            let validation = load(&entry.losses.validation, &mut errors);
            let calibration = load(&entry.losses.calibration, &mut errors);
            let test = entry.losses.test.as_ref().map(|p| load(p, &mut errors));
            if let (Some(validation), Some(calibration)) = (validation, calibration) {
                rows.push(TableRow {
                    id,
                    lambda: entry.lambda.clone(),
                    validation,
                    calibration,
                    test: test.flatten(),
                });
            }
        }
        let count = |cols: &Vec<Vec<f64>>| cols.first().map_or(0, Vec::len);
        let k = rows.first().map_or(0, |r| count(&r.validation));
        let m = rows.first().map_or(0, |r| count(&r.calibration));
        for r in &rows {
            if count(&r.validation) != k || count(&r.calibration) != m {
                errors.push(format!(
                    "config '{}': split sizes ({}, {}) differ from ({k}, {m})",
                    r.id,
                    count(&r.validation),
                    count(&r.calibration)
                ));
            }
        }
        if !rows.is_empty() && (k == 0 || m == 0) {
            errors.push("validation and calibration splits must be nonempty".to_string());
        }

        let space = match &manifest.space {
            Some(s) => SearchSpace::new(s.lower.clone(), s.upper.clone()),
            None if manifest.dim > 0 && !rows.is_empty() && errors.is_empty() => {
                let lower: Vec<f64> = (0..manifest.dim)
                    .map(|j| rows.iter().map(|r| r.lambda[j]).fold(f64::INFINITY, f64::min))
                    .collect();
                let upper: Vec<f64> = (0..manifest.dim)
                    .map(|j| rows.iter().map(|r| r.lambda[j]).fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let (lower, upper) = lower
                    .iter()
                    .zip(&upper)
                    .map(|(&lo, &hi)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
                    .unzip();
                SearchSpace::new(lower, upper)
            }
            None => SearchSpace::new(vec![0.0; manifest.dim.max(1)], vec![1.0; manifest.dim.max(1)]),
        };
        let space = match space {
            Ok(s) => s,
            Err(e) => {
                errors.push(e.to_string());
                SearchSpace::unit(manifest.dim.max(1))
            }
        };
        for r in &rows {
            if r.lambda.len() == space.dim() && !space.contains(&r.lambda) {
                errors.push(format!("config '{}': lambda outside the declared space", r.id));
            }
        }
        if !errors.is_empty() {
            return Err(ObjectiveError::Manifest(errors));
        }
        let lambdas = rows.iter().map(|r| r.lambda.clone()).collect();
        Ok(Self {
            source: source.to_path_buf(),
            constrained: manifest.constrained,
            space,
            rows,
            lambdas,
            k,
            m,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row_for(&self, values: &[f64]) -> Result<&TableRow, ObjectiveError> {
        self.rows
            .iter()
            .find(|r| r.lambda.len() == values.len() && r.lambda.iter().zip(values).all(|(a, b)| (a - b).abs() <= 1e-12))
            .ok_or_else(|| ObjectiveError::ManifestMiss(values.to_vec()))
    }
}

impl Objective for TableObjective {
    fn name(&self) -> String {
        format!("table:{}", self.source.display())
    }

    fn num_constrained(&self) -> usize {
        self.constrained
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(&self, config: &Configuration, split: Split, _n_samples: usize, _seed: u64) -> Result<LossSamples, ObjectiveError> {
        let row = self.row_for(&config.values)?;
        let per_objective = match split {
            Split::Validation => row.validation.clone(),
            Split::Calibration => row.calibration.clone(),
            Split::Test => row.test.clone().ok_or_else(|| ObjectiveError::MissingSplit {
                id: row.id.clone(),
                split,
            })?,
        };
        Ok(LossSamples {
            config_id: config.id,
            split,
            per_objective,
        })
    }

    fn listed_configurations(&self) -> Option<&[Vec<f64>]> {
        Some(&self.lambdas)
    }

    fn split_sizes(&self) -> Option<(usize, usize)> {
        Some((self.k, self.m))
    }
}

/// Per-configuration losses to be written as a table manifest.
#[derive(Debug, Clone)]
pub struct TableEntry {
    pub id: String,
    pub lambda: Vec<f64>,
    pub validation: Vec<Vec<f64>>,
    pub calibration: Vec<Vec<f64>>,
    pub test: Option<Vec<Vec<f64>>>,
}

fn write_loss_csv(path: &Path, columns: &[Vec<f64>]) -> Result<(), ObjectiveError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ObjectiveError::Io(e.into()))?;
    let header: Vec<String> = (0..columns.len()).map(|i| format!("objective_{i}")).collect();
    w.write_record(&header).map_err(|e| ObjectiveError::Io(e.into()))?;
    let rows = columns.first().map_or(0, Vec::len);
    for r in 0..rows {
        // `{:?}` prints the shortest string that parses back to the same f64
        let fields: Vec<String> = columns.iter().map(|c| format!("{:?}", c[r])).collect();
        w.write_record(&fields).map_err(|e| ObjectiveError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `manifest.json` plus one CSV per (configuration, split) into `dir`.
pub fn write_table_manifest(dir: &Path, dim: usize, constrained: usize, entries: &[TableEntry]) -> Result<PathBuf, ObjectiveError> {
    std::fs::create_dir_all(dir)?;
    let mut configs = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let name = |split: &str| PathBuf::from(format!("config{i}_{split}.csv"));
        write_loss_csv(&dir.join(name("validation")), &e.validation)?;
        write_loss_csv(&dir.join(name("calibration")), &e.calibration)?;
        if let Some(t) = &e.test {
            write_loss_csv(&dir.join(name("test")), t)?;
        }
        configs.push(ManifestEntry {
            id: serde_json::Value::String(e.id.clone()),
            lambda: e.lambda.clone(),
            losses: ManifestLosses {
                validation: name("validation"),
                calibration: name("calibration"),
                test: e.test.as_ref().map(|_| name("test")),
            },
        });
    }
    let manifest = Manifest {
        dim,
        constrained,
        configs,
        space: None,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// subprocess plugin

#[derive(Debug, Serialize)]
struct PluginRequest<'a> {
    lambda: &'a [f64],
    split: Split,
    n_samples: usize,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct PluginResponse {
    losses: Vec<Vec<f64>>,
}

pub const DEFAULT_TIMEOUT_S: f64 = 3600.0;

/// Runs `command` once for one evaluation: writes a JSON request line to the
/// child's stdin and reads a single JSON response line from its stdout.
#[allow(clippy::too_many_arguments)]
pub fn subprocess_evaluate(
    command: &[String],
    config: &Configuration,
    split: Split,
    n_samples: usize,
    seed: u64,
    timeout: Duration,
    num_constrained: usize,
) -> Result<LossSamples, ObjectiveError> {
    let protocol = |message: String, stderr: String| ObjectiveError::Protocol { message, stderr };
    let (program, args) = command
        .split_first()
        .ok_or_else(|| protocol("empty command line".into(), String::new()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;

    let request = PluginRequest {
        lambda: &config.values,
        split,
        n_samples,
        seed,
    };
    let mut line = serde_json::to_string(&request).expect("request serializes");
    line.push('\n');
    if let Some(mut stdin) = child.stdin.take() {
        if let Err(e) = stdin.write_all(line.as_bytes()) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(e.into());
            }
        }
    }

    let mut out_pipe = child.stdout.take().expect("stdout piped");
    let mut err_pipe = child.stderr.take().expect("stderr piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });

    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            // Grandchildren may still hold the pipes open; do not block on them.
            let stderr = if err_reader.is_finished() {
                err_reader.join().unwrap_or_default()
            } else {
                String::new()
            };
            return Err(ObjectiveError::Timeout {
                timeout_s: timeout.as_secs_f64(),
                stderr,
            });
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(ObjectiveError::ExitStatus {
            status: status.to_string(),
            stderr,
        });
    }
    let response_line = stdout
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| protocol("no response line".into(), stderr.clone()))?;
    let response: PluginResponse =
        serde_json::from_str(response_line).map_err(|e| protocol(format!("malformed JSON: {e}"), stderr.clone()))?;
    if response.losses.len() != num_constrained + 1 {
        return Err(protocol(
            format!(
                "arity: expected {} loss arrays, got {}",
                num_constrained + 1,
                response.losses.len()
            ),
            stderr,
        ));
    }
    let samples = LossSamples {
        config_id: config.id,
        split,
        per_objective: response.losses,
    };
    if let Err(violations) = samples.validate(num_constrained) {
        let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(protocol(msgs.join("; "), stderr));
    }
    Ok(samples)
}

/// Live black-box objective behind the subprocess protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SubprocessObjective {
    pub command: Vec<String>,
    pub space: SearchSpace,
    pub constrained: usize,
    pub timeout: Duration,
}

impl Objective for SubprocessObjective {
    fn name(&self) -> String {
        format!("subprocess:{}", self.command.join(" "))
    }

    fn num_constrained(&self) -> usize {
        self.constrained
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn evaluate(&self, config: &Configuration, split: Split, n_samples: usize, seed: u64) -> Result<LossSamples, ObjectiveError> {
        let stream = seed::derive(&[seed, split.tag(), config.id.0]);
        subprocess_evaluate(&self.command, config, split, n_samples, stream, self.timeout, self.constrained)
    }
}

// ---------------------------------------------------------------------------

/// Closed set of provider kinds.
#[derive(Debug, Clone)]
pub enum ObjectiveProvider {
    Synthetic(SyntheticTradeoff),
    Table(TableObjective),
    Subprocess(SubprocessObjective),
}

impl ObjectiveProvider {
    fn inner(&self) -> &dyn Objective {
        match self {
            ObjectiveProvider::Synthetic(p) => p,
            ObjectiveProvider::Table(p) => p,
            ObjectiveProvider::Subprocess(p) => p,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ObjectiveProvider::Synthetic(_) => "synthetic",
            ObjectiveProvider::Table(_) => "table",
            ObjectiveProvider::Subprocess(_) => "subprocess",
        }
    }
}

impl Objective for ObjectiveProvider {
    fn name(&self) -> String {
        self.inner().name()
    }

    fn num_constrained(&self) -> usize {
        self.inner().num_constrained()
    }

    fn space(&self) -> &SearchSpace {
        self.inner().space()
    }

    fn evaluate(&self, config: &Configuration, split: Split, n_samples: usize, seed: u64) -> Result<LossSamples, ObjectiveError> {
        self.inner().evaluate(config, split, n_samples, seed)
    }

    fn listed_configurations(&self) -> Option<&[Vec<f64>]> {
        self.inner().listed_configurations()
    }

    fn true_mean(&self, values: &[f64]) -> Option<Vec<f64>> {
        self.inner().true_mean(values)
    }

    fn split_sizes(&self) -> Option<(usize, usize)> {
        self.inner().split_sizes()
    }
}

/// Wraps a provider and records every `(configuration, split)` it serves.
pub struct AccessAudit<'a> {
    inner: &'a dyn Objective,
    log: Mutex<Vec<(ConfigId, Split)>>,
}

impl<'a> AccessAudit<'a> {
    pub fn new(inner: &'a dyn Objective) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn accesses(&self) -> Vec<(ConfigId, Split)> {
        self.log.lock().expect("audit lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("audit lock").clear();
    }
}

impl Objective for AccessAudit<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn num_constrained(&self) -> usize {
        self.inner.num_constrained()
    }

    fn space(&self) -> &SearchSpace {
        self.inner.space()
    }

    fn evaluate(&self, config: &Configuration, split: Split, n_samples: usize, seed: u64) -> Result<LossSamples, ObjectiveError> {
        self.log.lock().expect("audit lock").push((config.id, split));
        self.inner.evaluate(config, split, n_samples, seed)
    }

    fn listed_configurations(&self) -> Option<&[Vec<f64>]> {
        self.inner.listed_configurations()
    }

    fn true_mean(&self, values: &[f64]) -> Option<Vec<f64>> {
        self.inner.true_mean(values)
    }

    fn split_sizes(&self) -> Option<(usize, usize)> {
        self.inner.split_sizes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(id: u64, values: Vec<f64>) -> Configuration {
        Configuration::new(ConfigId(id), values)
    }

    fn fairness() -> SyntheticTradeoff {
        builtin_problem("fairness-like").unwrap()
    }

    #[test]
    fn true_mean_examples() {
        let p = fairness();
        assert_eq!(p.true_mean(&[0.0]), vec![0.1, 0.9]);
        let at_one = p.true_mean(&[1.0]);
        assert!((at_one[0] - 0.9).abs() < 1e-15 && (at_one[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn true_mean_is_monotone_along_progress() {
        for p in builtin_problems() {
            let c = p.curves.len() - 1;
            let mut prev: Option<Vec<f64>> = None;
            for i in 0..=1000 {
                let s = i as f64 / 1000.0;
                let mu: Vec<f64> = p.curves.iter().map(|cv| cv.mean(s)).collect();
                if let Some(prev) = &prev {
                    for j in 0..c {
                        assert!(mu[j] >= prev[j], "{} objective {j}", p.name);
                    }
                    assert!(mu[c] <= prev[c], "{} free", p.name);
                }
                prev = Some(mu);
            }
        }
    }

    #[test]
    fn presets() {
        assert_eq!(builtin_problem("pruning-like").unwrap().space.dim(), 3);
        assert_eq!(builtin_problem("selective-robustness-like").unwrap().num_constrained(), 2);
        assert!(matches!(builtin_problem("nope"), Err(ObjectiveError::UnknownProblem(_))));
        // every preset spans pass and fail regimes for a mid-range alpha
        for p in builtin_problems() {
            let lo = p.curves[0].mean(0.0);
            let hi = p.curves[0].mean(1.0);
            let mid = 0.5 * (lo + hi);
            assert!(lo < mid && mid < hi, "{}", p.name);
        }
    }

    #[test]
    fn tradeoff_sign_enforced() {
        let same = SyntheticTradeoff::new(
            "bad",
            SearchSpace::unit(1),
            vec![Curve::new(0.1, 0.5, 1.0, Noise::Bernoulli), Curve::new(0.1, 0.5, 1.0, Noise::Bernoulli)],
        );
        assert!(same.is_err());
    }

    #[test]
    fn weighted_progress() {
        let p = SyntheticTradeoff::new(
            "w",
            SearchSpace::unit(2),
            vec![
                Curve::new(0.0, 1.0, 1.0, Noise::Bernoulli).with_weights(vec![1.0, 3.0]),
                Curve::new(1.0, -1.0, 1.0, Noise::Bernoulli),
            ],
        )
        .unwrap();
        let mu = p.true_mean(&[1.0, 0.0]);
        assert!((mu[0] - 0.25).abs() < 1e-15 && (mu[1] - 0.5).abs() < 1e-15);
        let bad = |w: Vec<f64>| {
            SyntheticTradeoff::new(
                "w",
                SearchSpace::unit(2),
                vec![
                    Curve::new(0.0, 1.0, 1.0, Noise::Bernoulli).with_weights(w),
                    Curve::new(1.0, -1.0, 1.0, Noise::Bernoulli),
                ],
            )
            .is_err()
        };
        assert!(bad(vec![1.0]) && bad(vec![-1.0, 2.0]) && bad(vec![0.0, 0.0]));
    }

    #[test]
    fn bernoulli_draws() {
        let p = fairness();
        let zero = SyntheticTradeoff::new(
            "zero",
            SearchSpace::unit(1),
            vec![Curve::new(0.0, 0.5, 1.0, Noise::Bernoulli), Curve::new(1.0, -0.5, 1.0, Noise::Bernoulli)],
        )
        .unwrap();
        let s = zero.evaluate(&cfg(0, vec![0.0]), Split::Validation, 500, 1).unwrap();
        assert!(s.per_objective[0].iter().all(|&x| x == 0.0));

        // mu_1 = 0.5 at lambda = 0.5; CLT bound 3 * sqrt(0.25 / 1e5) ~ 0.0047
        let s = p.evaluate(&cfg(3, vec![0.5]), Split::Validation, 100_000, 7).unwrap();
        let mean = crate::types::empirical_mean(&s.per_objective[0]).unwrap();
        assert!((mean - 0.5).abs() <= 0.005, "{mean}");

        let again = p.evaluate(&cfg(3, vec![0.5]), Split::Validation, 100_000, 7).unwrap();
        assert_eq!(s, again);
        let cal = p.evaluate(&cfg(3, vec![0.5]), Split::Calibration, 100_000, 7).unwrap();
        assert_ne!(s.per_objective, cal.per_objective);
    }

    #[test]
    fn bernoulli_mean_from_seed_seven() {
        // 5000 Bernoulli(0.035) draws; oracle is an exact rational re-summation
        let p = SyntheticTradeoff::new(
            "b",
            SearchSpace::unit(1),
            vec![Curve::new(0.035, 0.1, 1.0, Noise::Bernoulli), Curve::new(0.5, -0.1, 1.0, Noise::Bernoulli)],
        )
        .unwrap();
        let s = p.evaluate(&cfg(0, vec![0.0]), Split::Validation, 5000, 7).unwrap();
        let mean = crate::types::empirical_mean(&s.per_objective[0]).unwrap();
        let ones = s.per_objective[0].iter().filter(|&&x| x == 1.0).count();
        assert_eq!(mean, ones as f64 / 5000.0);
        assert!((mean - 0.035).abs() <= 0.01, "{mean}");
    }

    #[test]
    fn audit_records_accesses() {
        let p = fairness();
        let audit = AccessAudit::new(&p);
        audit.evaluate(&cfg(1, vec![0.2]), Split::Validation, 3, 0).unwrap();
        audit.evaluate(&cfg(2, vec![0.2]), Split::Calibration, 3, 0).unwrap();
        assert_eq!(
            audit.accesses(),
            vec![(ConfigId(1), Split::Validation), (ConfigId(2), Split::Calibration)]
        );
    }
}
