//! Certified configuration selection.
//!
//! Evaluated configurations are reduced to their validation Pareto front,
//! ordered by validation p-values, and tested on calibration data with
//! fixed-sequence testing at level `delta`. The returned configuration
//! minimizes the validation free objective among the certified prefix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guided_bo::{run_bo, BoConfig, BoError};
use crate::objectives::{Objective, ObjectiveError};
use crate::pareto::dominates_unchecked;
use crate::stats::{p_value_for_record, region_of_interest, RegionOfInterest, StatsError};
use crate::types::{ConfigId, Configuration, EvalRecord, LossSamples, RiskSpec, Split};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Bo(#[from] BoError),
    #[error("calibration evaluation of {id} failed: {source}")]
    Objective { id: ConfigId, source: ObjectiveError },
    #[error("calibration samples for {id} are invalid: {message}")]
    InvalidSamples { id: ConfigId, message: String },
    #[error("no candidate configurations")]
    NoCandidates,
}

/// P-values of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub config_id: ConfigId,
    pub val_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_p: Option<f64>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Option<Configuration>,
    /// Certified prefix of `ordering`.
    pub valid_set: Vec<ConfigId>,
    pub ordering: Vec<ConfigId>,
    /// One entry per ordered candidate; `cal_p` is absent past the stopping point.
    pub tests: Vec<TestRecord>,
    /// Length of the certified prefix.
    pub boundary: usize,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionOfInterest>,
    /// Pareto candidates in ordering order, with calibration means where evaluated.
    pub candidates: Vec<EvalRecord>,
}

impl SelectionResult {
    pub fn chosen_record(&self) -> Option<&EvalRecord> {
        let id = self.chosen.as_ref()?.id;
        self.candidates.iter().find(|r| r.id() == id)
    }
}

/// Records whose validation means are not dominated by any other record.
/// Records with identical means are all kept.
pub fn filter_pareto_candidates(records: &[EvalRecord]) -> Vec<EvalRecord> {
    records
        .iter()
        .filter(|r| {
            !records
                .iter()
                .any(|o| dominates_unchecked(&o.val_means, &r.val_means))
        })
        .cloned()
        .collect()
}

/// Validation p-values with sample size `k`, same bound family as calibration.
pub fn approximate_p_values(candidates: &[EvalRecord], spec: &RiskSpec, k: usize) -> Result<Vec<TestRecord>, StatsError> {
    candidates
        .iter()
        .map(|r| {
            Ok(TestRecord {
                config_id: r.id(),
                val_p: p_value_for_record(&r.val_means, spec, k, spec.bound)?,
                cal_p: None,
                rejected: false,
            })
        })
        .collect()
}

/// Indices sorted by ascending validation p-value, then free validation mean, then id.
pub fn order_candidates(candidates: &[EvalRecord], tests: &[TestRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        tests[a]
            .val_p
            .total_cmp(&tests[b].val_p)
            .then_with(|| candidates[a].val_free().total_cmp(&candidates[b].val_free()))
            .then_with(|| candidates[a].id().cmp(&candidates[b].id()))
    });
    idx
}

/// Length of the rejected prefix: the first index with `p >= delta`, or the length.
pub fn fixed_sequence_test(cal_p: &[f64], delta: f64) -> usize {
    cal_p.iter().position(|&p| p >= delta).unwrap_or(cal_p.len())
}

/// Per-constraint `[min, max]` of validation means over `pool`.
pub fn suggest_alpha_range(pool: &[EvalRecord], num_constrained: usize) -> Option<Vec<(f64, f64)>> {
    if pool.is_empty() {
        return None;
    }
    Some(
        (0..num_constrained)
            .map(|i| {
                pool.iter().map(|r| r.val_means[i]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            })
            .collect(),
    )
}

/// Testing stage shared by every candidate-generation method.
///
/// `calibrate` is called lazily, in ordering order, and never past the first
/// non-rejection; the outcome is the same as evaluating every candidate.
pub fn test_and_select(
    records: &[EvalRecord],
    spec: &RiskSpec,
    k: usize,
    m: usize,
    mut calibrate: impl FnMut(&Configuration) -> Result<LossSamples, ObjectiveError>,
) -> Result<SelectionResult, SelectionError> {
    if records.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let front = filter_pareto_candidates(records);
    let tests = approximate_p_values(&front, spec, k)?;
    let order = order_candidates(&front, &tests);
    let mut candidates: Vec<EvalRecord> = order.iter().map(|&i| front[i].clone()).collect();
    let mut tests: Vec<TestRecord> = order.iter().map(|&i| tests[i].clone()).collect();

    let mut boundary = candidates.len();
    for (j, (record, test)) in candidates.iter_mut().zip(tests.iter_mut()).enumerate() {
        let samples = calibrate(&record.config).map_err(|source| SelectionError::Objective {
            id: record.id(),
            source,
        })?;
        if let Err(v) = samples.validate(spec.num_constrained()) {
            return Err(SelectionError::InvalidSamples {
                id: record.id(),
                message: v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            });
        }
        let means = samples.means().map_err(|e| SelectionError::InvalidSamples {
            id: record.id(),
            message: e.to_string(),
        })?;
        let n = samples.sample_count().unwrap_or(m);
        let p = p_value_for_record(&means, spec, n, spec.bound)?;
        record.cal_means = Some(means);
        record.cal_count = Some(n);
        test.cal_p = Some(p);
        if p >= spec.delta {
            boundary = j;
            break;
        }
        test.rejected = true;
    }

    let chosen = candidates[..boundary]
        .iter()
        .min_by(|a, b| a.val_free().partial_cmp(&b.val_free()).unwrap_or(Ordering::Equal))
        .map(|r| r.config.clone());
    Ok(SelectionResult {
        chosen,
        valid_set: candidates[..boundary].iter().map(EvalRecord::id).collect(),
        ordering: candidates.iter().map(EvalRecord::id).collect(),
        tests,
        boundary,
        degenerate: false,
        region: None,
        candidates,
    })
}

/// Sample sizes and data seeds for one selection run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub k: usize,
    pub m: usize,
    pub validation_seed: u64,
    pub calibration_seed: u64,
}

/// Full pipeline: region of interest, guided optimization, then the testing stage.
pub fn select(
    objective: &dyn Objective,
    spec: &RiskSpec,
    plan: DataPlan,
    bo: &BoConfig,
) -> Result<SelectionResult, SelectionError> {
    let region = region_of_interest(spec, plan.k, plan.m)?;
    let outcome = run_bo(objective, spec, &region, plan.k, plan.validation_seed, bo)?;
    let mut result = test_and_select(&outcome.records, spec, plan.k, plan.m, |cfg| {
        objective.evaluate(cfg, Split::Calibration, plan.m, plan.calibration_seed)
    })?;
    result.degenerate = region.degenerate;
    result.region = Some(region);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Bound;

    fn rec(id: u64, means: Vec<f64>) -> EvalRecord {
        EvalRecord {
            config: Configuration::new(ConfigId(id), vec![0.0]),
            val_means: means,
            val_count: 100,
            cal_means: None,
            cal_count: None,
            provenance: "test".into(),
        }
    }

    fn fake_calibration(means: Vec<Vec<f64>>) -> impl FnMut(&Configuration) -> Result<LossSamples, ObjectiveError> {
        move |cfg| {
            let mu = &means[cfg.id.0 as usize];
            Ok(LossSamples {
                config_id: cfg.id,
                split: Split::Calibration,
                per_objective: mu.iter().map(|&v| vec![v; 200]).collect(),
            })
        }
    }

    #[test]
    fn pareto_filter() {
        let all = vec![rec(0, vec![0.1, 0.9]), rec(1, vec![0.5, 0.2]), rec(2, vec![0.9, 0.1])];
        assert_eq!(filter_pareto_candidates(&all), all);
        let with_dom = vec![rec(0, vec![0.1, 0.9]), rec(1, vec![0.5, 0.5]), rec(2, vec![0.6, 0.6])];
        let ids: Vec<u64> = filter_pareto_candidates(&with_dom).iter().map(|r| r.id().0).collect();
        assert_eq!(ids, vec![0, 1]);
        let dup = vec![rec(0, vec![0.3, 0.3]), rec(1, vec![0.3, 0.3])];
        assert_eq!(filter_pareto_candidates(&dup).len(), 2);
    }

    #[test]
    fn ordering_examples() {
        let recs = vec![rec(0, vec![0.0, 0.5]), rec(1, vec![0.0, 0.4]), rec(2, vec![0.0, 0.3])];
        let t = |p: f64, id| TestRecord {
            config_id: ConfigId(id),
            val_p: p,
            cal_p: None,
            rejected: false,
        };
        assert_eq!(order_candidates(&recs, &[t(0.3, 0), t(0.1, 1), t(0.2, 2)]), vec![1, 2, 0]);
        assert_eq!(order_candidates(&recs, &[t(0.5, 0), t(0.5, 1), t(0.5, 2)]), vec![2, 1, 0]);
        assert_eq!(order_candidates(&recs[..1], &[t(0.5, 0)]), vec![0]);
    }

    #[test]
    fn fst_examples() {
        assert_eq!(fixed_sequence_test(&[0.01, 0.05, 0.2, 0.03], 0.1), 2);
        assert_eq!(fixed_sequence_test(&[0.5, 0.01], 0.1), 0);
        assert_eq!(fixed_sequence_test(&[0.01, 0.02], 0.1), 2);
        assert_eq!(fixed_sequence_test(&[0.1], 0.1), 0);
    }

    #[test]
    fn validation_p_values() {
        let spec = RiskSpec::new(vec![0.2], 0.1, 0.1, Bound::HoeffdingBentkus).unwrap();
        let t = approximate_p_values(&[rec(0, vec![0.0, 1.0]), rec(1, vec![0.3, 0.0])], &spec, 500).unwrap();
        assert!(t[0].val_p < 1e-20);
        assert_eq!(t[1].val_p, 1.0);
        assert_eq!(
            t[0].val_p,
            p_value_for_record(&[0.0, 1.0], &spec, 500, Bound::HoeffdingBentkus).unwrap()
        );
    }

    #[test]
    fn alpha_range() {
        let pool = vec![rec(0, vec![0.154, 0.9]), rec(1, vec![0.225, 0.1]), rec(2, vec![0.2, 0.5])];
        assert_eq!(suggest_alpha_range(&pool, 1).unwrap(), vec![(0.154, 0.225)]);
        assert_eq!(suggest_alpha_range(&pool[..1], 1).unwrap(), vec![(0.154, 0.154)]);
        assert!(suggest_alpha_range(&[], 1).is_none());
    }

    #[test]
    fn lazy_calibration_stops_at_first_failure() {
        let spec = RiskSpec::new(vec![0.2], 0.1, 0.1, Bound::Hoeffding).unwrap();
        // front ordered by val_p: ids 0, 1, 2
        let recs = vec![rec(0, vec![0.0, 0.9]), rec(1, vec![0.1, 0.5]), rec(2, vec![0.19, 0.1])];
        let mut calls = Vec::new();
        let mut inner = fake_calibration(vec![vec![0.0, 0.9], vec![0.3, 0.5], vec![0.0, 0.1]]);
        let result = test_and_select(&recs, &spec, 100, 200, |c| {
            calls.push(c.id);
            inner(c)
        })
        .unwrap();
        assert_eq!(result.ordering, vec![ConfigId(0), ConfigId(1), ConfigId(2)]);
        assert_eq!(result.boundary, 1);
        assert_eq!(result.valid_set, vec![ConfigId(0)]);
        assert_eq!(result.chosen.unwrap().id, ConfigId(0));
        assert_eq!(calls, vec![ConfigId(0), ConfigId(1)]);
        assert!(result.tests[2].cal_p.is_none());
    }

    #[test]
    fn null_when_nothing_passes() {
        let spec = RiskSpec::new(vec![0.05], 0.1, 0.1, Bound::HoeffdingBentkus).unwrap();
        let recs = vec![rec(0, vec![0.5, 0.5]), rec(1, vec![0.6, 0.4])];
        let r = test_and_select(&recs, &spec, 100, 200, fake_calibration(vec![vec![0.5, 0.5], vec![0.6, 0.4]]))
            .unwrap();
        assert!(r.chosen.is_none());
        assert!(r.valid_set.is_empty());
    }
}
