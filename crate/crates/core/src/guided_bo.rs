//! Testing-guided Bayesian optimization.
//!
//! Surrogates of every objective are fitted on validation means; proposals
//! maximize hypervolume improvement of the predicted loss vector against a
//! reference point whose constrained coordinates sit at the upper edge of the
//! region of interest. Anything predicted outside the region earns zero
//! improvement, so the search concentrates where testing is likely to succeed
//! with little slack.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{Objective, ObjectiveError};
use crate::pareto::{HviScorer, ObjectivePoint, ParetoArchive, ParetoError, ReferencePoint};
use crate::seed;
use crate::stats::RegionOfInterest;
use crate::surrogate::{fit_gp, FitConfig, GpError, GpModel};
use crate::types::{ConfigId, Configuration, CoreError, EvalRecord, IdGenerator, RiskSpec, SearchSpace, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// Total number of evaluated configurations `N`.
    pub budget: usize,
    /// Size of the initial design `N0`.
    pub init_size: usize,
    pub seed: u64,
    pub candidate_pool_size: usize,
    pub perturbation_count: usize,
    /// Standard deviation of front perturbations, in unit-box coordinates.
    pub perturbation_sigma: f64,
    pub fit: FitConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            init_size: 5,
            seed: 0,
            candidate_pool_size: 4096,
            perturbation_count: 256,
            perturbation_sigma: 0.05,
            fit: FitConfig::default(),
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<(), BoError> {
        if self.init_size < 2 {
            return Err(BoError::Config(format!("init_size must be at least 2, got {}", self.init_size)));
        }
        if self.budget < self.init_size {
            return Err(BoError::Config(format!(
                "budget {} is smaller than init_size {}",
                self.budget, self.init_size
            )));
        }
        if !(self.perturbation_sigma >= 0.0 && self.perturbation_sigma.is_finite()) {
            return Err(BoError::Config(format!("invalid perturbation_sigma {}", self.perturbation_sigma)));
        }
        if self.candidate_pool_size + self.perturbation_count == 0 {
            return Err(BoError::Config("candidate pool is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid optimization settings: {0}")]
    Config(String),
    #[error("objective evaluation failed after {} records: {source}", .partial.len())]
    Objective {
        source: ObjectiveError,
        partial: Vec<EvalRecord>,
    },
    #[error("objective returned invalid samples for {id}: {message}")]
    InvalidSamples { id: ConfigId, message: String },
    #[error(transparent)]
    Surrogate(#[from] GpError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl BoError {
    /// Records evaluated before the failure, if any.
    pub fn partial_records(&self) -> &[EvalRecord] {
        match self {
            BoError::Objective { partial, .. } => partial,
            _ => &[],
        }
    }
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub reference: Vec<f64>,
    pub config_id: ConfigId,
    pub proposed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub realized: Vec<f64>,
    pub acquisition: f64,
    /// True when every candidate had zero improvement and the distance fallback picked.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoOutcome {
    pub records: Vec<EvalRecord>,
    pub log: Vec<IterationLog>,
}

/// Latin hypercube design in the unit box; plain i.i.d. uniform in one dimension.
pub fn latin_hypercube(n_points: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if dim == 1 {
        return (0..n_points).map(|_| vec![rng.random::<f64>()]).collect();
    }
    let mut points = vec![vec![0.0; dim]; n_points];
    let mut strata: Vec<usize> = (0..n_points).collect();
    for j in 0..dim {
        strata.shuffle(rng);
        for (p, &s) in points.iter_mut().zip(&strata) {
            p[j] = (s as f64 + rng.random::<f64>()) / n_points as f64;
        }
    }
    points
}

/// Seeded initial design of `n0` points in the original coordinates.
pub fn sample_initial_pool(space: &SearchSpace, n0: usize, seed: u64) -> Result<Vec<Vec<f64>>, BoError> {
    if n0 < 2 {
        return Err(BoError::Config(format!("initial pool needs at least 2 points, got {n0}")));
    }
    let mut rng = seed::rng(&[seed, seed::tag::POOL]);
    Ok(latin_hypercube(n0, space.dim(), &mut rng)
        .iter()
        .map(|u| space.from_unit(u))
        .collect())
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Snaps each unit-box point to the nearest not-yet-used listed configuration.
/// Returns indices into `listed_unit`; `used` is updated.
pub fn snap_to_listed(points_unit: &[Vec<f64>], listed_unit: &[Vec<f64>], used: &mut [bool]) -> Vec<usize> {
    let mut out = Vec::with_capacity(points_unit.len());
    for p in points_unit {
        let best = listed_unit
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, l)| (i, dist_sq(p, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((i, _)) = best {
            used[i] = true;
            out.push(i);
        }
    }
    out
}

/// `(high_1, ..., high_c, max free validation mean over the pool)`.
pub fn initial_reference(region: &RegionOfInterest, pool: &[EvalRecord]) -> Result<ReferencePoint, BoError> {
    if pool.is_empty() {
        return Err(BoError::Config("empty initial pool".into()));
    }
    let free_max = pool.iter().map(EvalRecord::val_free).fold(f64::NEG_INFINITY, f64::max);
    let mut values = region.high.clone();
    values.push(free_max);
    Ok(ReferencePoint::new(values))
}

/// Tightens the free coordinate of `reference` to the smallest predicted free
/// loss among points predicted strictly below the region on every constraint.
/// Never raises it.
pub fn update_reference_free_coord(
    reference: &ReferencePoint,
    region: &RegionOfInterest,
    predictions: &[Vec<f64>],
) -> ReferencePoint {
    let c = region.num_constrained();
    let low_min = predictions
        .iter()
        .filter(|g| g[..c].iter().zip(&region.low).all(|(v, lo)| v < lo))
        .map(|g| g[c])
        .fold(f64::INFINITY, f64::min);
    let mut next = reference.clone();
    if low_min < next.values[c] {
        next.values[c] = low_min;
    }
    next
}

/// Index of the proposal among `predictions`, its acquisition value and
/// whether the distance fallback was used.
pub fn propose_next(
    archive: &ParetoArchive,
    reference: &ReferencePoint,
    region: &RegionOfInterest,
    predictions: &[Vec<f64>],
) -> Result<(usize, f64, bool), BoError> {
    if predictions.is_empty() {
        return Err(BoError::Config("no candidates to score".into()));
    }
    let c = region.num_constrained();
    let scorer = HviScorer::new(archive.points(), &reference.values)?;
    let scores: Vec<f64> = predictions
        .par_iter()
        .map(|g| scorer.score(g))
        .collect::<Result<_, _>>()?;
    let pick = |key: &dyn Fn(usize) -> f64, maximize: bool| {
        (0..predictions.len())
            .min_by(|&a, &b| {
                let (ka, kb) = (key(a), key(b));
                let primary = if maximize { kb.total_cmp(&ka) } else { ka.total_cmp(&kb) };
                primary
                    .then(predictions[a][c].total_cmp(&predictions[b][c]))
                    .then(a.cmp(&b))
            })
            .expect("nonempty")
    };
    let best = pick(&|i| scores[i], true);
    if scores[best] > 0.0 {
        return Ok((best, scores[best], false));
    }
    let distances: Vec<f64> = predictions.iter().map(|g| region.target_distance_sq(&g[..c])).collect();
    let best = pick(&|i| distances[i], false);
    Ok((best, 0.0, true))
}

fn evaluate_validation(
    objective: &dyn Objective,
    config: Configuration,
    k: usize,
    data_seed: u64,
    records: &[EvalRecord],
) -> Result<EvalRecord, BoError> {
    let samples = objective
        .evaluate(&config, Split::Validation, k, data_seed)
        .map_err(|source| BoError::Objective {
            source,
            partial: records.to_vec(),
        })?;
    if let Err(v) = samples.validate(objective.num_constrained()) {
        let message = v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(BoError::InvalidSamples { id: config.id, message });
    }
    Ok(EvalRecord::from_validation(config, &samples, objective.name())?)
}

/// Evaluates `points` on the validation split with fresh ids.
pub fn evaluate_points(
    objective: &dyn Objective,
    points: &[Vec<f64>],
    k: usize,
    data_seed: u64,
    ids: &mut IdGenerator,
) -> Result<Vec<EvalRecord>, BoError> {
    let mut records: Vec<EvalRecord> = Vec::with_capacity(points.len());
    for p in points {
        let config = Configuration::new(ids.next_id(), p.clone());
        let record = evaluate_validation(objective, config, k, data_seed, &records)?;
        records.push(record);
    }
    Ok(records)
}

/// Unit-box coordinates of the listed configurations of a finite space.
fn listed_units(objective: &dyn Objective) -> Option<Vec<Vec<f64>>> {
    let space = objective.space();
    objective
        .listed_configurations()
        .map(|l| l.iter().map(|v| space.to_unit(v)).collect())
}

/// Initial design, snapped to listed configurations for finite spaces.
pub fn initial_design(objective: &dyn Objective, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, BoError> {
    let space = objective.space();
    let pool = sample_initial_pool(space, n, seed)?;
    match (listed_units(objective), objective.listed_configurations()) {
        (Some(units), Some(listed)) => {
            if listed.len() < n {
                return Err(BoError::Config(format!(
                    "finite space has {} configurations, {n} requested",
                    listed.len()
                )));
            }
            let unit_pool: Vec<Vec<f64>> = pool.iter().map(|p| space.to_unit(p)).collect();
            let mut used = vec![false; listed.len()];
            Ok(snap_to_listed(&unit_pool, &units, &mut used)
                .into_iter()
                .map(|i| listed[i].clone())
                .collect())
        }
        _ => Ok(pool),
    }
}

fn candidate_pool(
    config: &BoConfig,
    iteration: usize,
    dim: usize,
    front_units: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(&[config.seed, seed::tag::CANDIDATES, iteration as u64]);
    let mut pool = latin_hypercube(config.candidate_pool_size, dim, &mut rng);
    if !front_units.is_empty() {
        for i in 0..config.perturbation_count {
            let owner = &front_units[i % front_units.len()];
            pool.push(
                owner
                    .iter()
                    .map(|&x| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (x + config.perturbation_sigma * z).clamp(0.0, 1.0)
                    })
                    .collect(),
            );
        }
    }
    pool
}

fn fit_models(units: &[Vec<f64>], records: &[EvalRecord], config: &BoConfig, iteration: usize) -> Result<Vec<GpModel>, GpError> {
    let objectives = records[0].val_means.len();
    (0..objectives)
        .into_par_iter()
        .map(|j| {
            let targets: Vec<f64> = records.iter().map(|r| r.val_means[j]).collect();
            let fit = FitConfig {
                seed: seed::derive(&[config.seed, seed::tag::GP_FIT, iteration as u64, j as u64]),
                ..config.fit.clone()
            };
            fit_gp(units.to_vec(), &targets, &fit)
        })
        .collect()
}

/// Runs the guided optimization loop and returns all `N` evaluated records.
///
/// `k` is the validation sample count and `data_seed` keys the validation
/// draws. Passing [`RegionOfInterest::whole_space`] turns guidance off and
/// yields plain hypervolume-improvement BO.
pub fn run_bo(
    objective: &dyn Objective,
    spec: &RiskSpec,
    region: &RegionOfInterest,
    k: usize,
    data_seed: u64,
    config: &BoConfig,
) -> Result<BoOutcome, BoError> {
    config.validate()?;
    let c = spec.num_constrained();
    if objective.num_constrained() != c || region.num_constrained() != c {
        return Err(BoError::Config(format!(
            "constraint count mismatch: spec {c}, objective {}, region {}",
            objective.num_constrained(),
            region.num_constrained()
        )));
    }
    let space = objective.space();
    let listed = listed_units(objective);
    if let Some(l) = &listed {
        if l.len() < config.budget {
            return Err(BoError::Config(format!(
                "finite space has {} configurations, budget is {}",
                l.len(),
                config.budget
            )));
        }
    }

    let mut ids = IdGenerator::new();
    let initial = initial_design(objective, config.init_size, config.seed)?;
    let mut records = evaluate_points(objective, &initial, k, data_seed, &mut ids)?;
    let mut units: Vec<Vec<f64>> = records.iter().map(|r| space.to_unit(&r.config.values)).collect();
    let mut reference = initial_reference(region, &records)?;
    let mut log = Vec::with_capacity(config.budget - config.init_size);

    for iteration in 0..config.budget - config.init_size {
        let models = fit_models(&units, &records, config, iteration)?;
        let archive = crate::pareto::pareto_front(
            records
                .iter()
                .map(|r| ObjectivePoint::owned(r.val_means.clone(), r.id())),
        )?;

        let candidates = match &listed {
            Some(l) => {
                let taken: Vec<&Vec<f64>> = records.iter().map(|r| &r.config.values).collect();
                let all = objective.listed_configurations().expect("finite space");
                l.iter()
                    .zip(all)
                    .filter(|(_, v)| !taken.contains(v))
                    .map(|(u, _)| u.clone())
                    .collect()
            }
            None => {
                let front_units: Vec<Vec<f64>> = archive
                    .points()
                    .iter()
                    .filter_map(|p| p.owner)
                    .filter_map(|id| records.iter().position(|r| r.id() == id))
                    .map(|i| units[i].clone())
                    .collect();
                candidate_pool(config, iteration, space.dim(), &front_units)
            }
        };
        let predict = |u: &Vec<f64>| models.iter().map(|m| m.posterior_mean(u)).collect::<Vec<f64>>();
        let predictions: Vec<Vec<f64>> = candidates.par_iter().map(predict).collect();
        let evaluated: Vec<Vec<f64>> = units.par_iter().map(predict).collect();

        let mut scan = predictions.clone();
        scan.extend(evaluated);
        reference = update_reference_free_coord(&reference, region, &scan);

        let (best, acquisition, fallback) = propose_next(&archive, &reference, region, &predictions)?;
        let unit = candidates[best].clone();
        let values = match (&listed, objective.listed_configurations()) {
            (Some(l), Some(all)) => all[l.iter().position(|u| *u == unit).expect("listed candidate")].clone(),
            _ => space.from_unit(&unit),
        };
        let config_id = ids.next_id();
        let record = evaluate_validation(objective, Configuration::new(config_id, values.clone()), k, data_seed, &records)?;
        log.push(IterationLog {
            iteration,
            reference: reference.values.clone(),
            config_id,
            proposed: values,
            predicted: predictions[best].clone(),
            realized: record.val_means.clone(),
            acquisition,
            fallback,
        });
        units.push(space.to_unit(&record.config.values));
        records.push(record);
    }
    Ok(BoOutcome { records, log })
}
