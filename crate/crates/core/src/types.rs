//! Domain types shared by every stage: the search box, configurations, the risk
//! specification and per-sample loss bookkeeping.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid risk specification: {0}")]
    InvalidRiskSpec(String),
    #[error("inconsistent split sizes: {0}")]
    InconsistentSizes(String),
}

/// Axis-aligned hyperparameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, CoreError> {
        if lower.is_empty() {
            return Err(CoreError::InvalidSpace("dimension must be positive".into()));
        }
        if lower.len() != upper.len() {
            return Err(CoreError::InvalidSpace(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CoreError::InvalidSpace(format!(
                    "dimension {j}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.dim()
            && values
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Maps a point of the box to `[0, 1]^n`.
    pub fn to_unit(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// Inverse of [`to_unit`](Self::to_unit); the result is clamped into the box.
    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(u, (lo, hi))| (lo + u.clamp(0.0, 1.0) * (hi - lo)).clamp(*lo, *hi))
            .collect()
    }
}

/// Run-unique configuration token. Not derived from the values, so a
/// re-evaluated point keeps a distinct identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigId(pub u64);

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Hands out sequential [`ConfigId`]s.
#[derive(Debug, Default, Clone)]
pub struct IdGenerator {
    next: u64,
}

impl IdGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> ConfigId {
        let id = ConfigId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: ConfigId,
    pub values: Vec<f64>,
}

impl Configuration {
    pub fn new(id: ConfigId, values: Vec<f64>) -> Self {
        Self { id, values }
    }
}

/// Concentration bound used for p-values and the region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Bound {
    #[serde(rename = "hoeffding")]
    Hoeffding,
    #[default]
    #[serde(rename = "hb", alias = "hoeffding_bentkus")]
    HoeffdingBentkus,
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Hoeffding => f.write_str("hoeffding"),
            Bound::HoeffdingBentkus => f.write_str("hb"),
        }
    }
}

impl std::str::FromStr for Bound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hoeffding" => Ok(Bound::Hoeffding),
            "hb" | "hoeffding_bentkus" => Ok(Bound::HoeffdingBentkus),
            other => Err(format!("unknown bound '{other}' (expected hoeffding or hb)")),
        }
    }
}

/// Risk limits for the `c` constrained objectives. Objective index `c` is the
/// free objective, which is minimized and never tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub alphas: Vec<f64>,
    pub delta: f64,
    pub delta_prime: f64,
    #[serde(default)]
    pub bound: Bound,
}

impl RiskSpec {
    pub fn new(alphas: Vec<f64>, delta: f64, delta_prime: f64, bound: Bound) -> Result<Self, CoreError> {
        let spec = Self {
            alphas,
            delta,
            delta_prime,
            bound,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.alphas.is_empty() {
            return Err(CoreError::InvalidRiskSpec("at least one constraint is required".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(CoreError::InvalidRiskSpec(format!("alpha {a} outside (0, 1)")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CoreError::InvalidRiskSpec(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.delta_prime > 0.0 && self.delta_prime < 1.0) {
            return Err(CoreError::InvalidRiskSpec(format!(
                "delta_prime {} outside (0, 1)",
                self.delta_prime
            )));
        }
        Ok(())
    }

    /// Number of constrained objectives `c`.
    pub fn num_constrained(&self) -> usize {
        self.alphas.len()
    }

    pub fn free_index(&self) -> usize {
        self.alphas.len()
    }

    pub fn num_objectives(&self) -> usize {
        self.alphas.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Calibration,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Split::Validation => crate::seed::tag::VALIDATION,
            Split::Calibration => crate::seed::tag::CALIBRATION,
            Split::Test => crate::seed::tag::TEST,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-sample losses of one configuration on one split, one vector per objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSamples {
    pub config_id: ConfigId,
    pub split: Split,
    pub per_objective: Vec<Vec<f64>>,
}

impl LossSamples {
    /// Common sample count, or `None` when the vectors disagree or there are none.
    pub fn sample_count(&self) -> Option<usize> {
        let first = self.per_objective.first()?.len();
        self.per_objective
            .iter()
            .all(|v| v.len() == first)
            .then_some(first)
    }

    pub fn means(&self) -> Result<Vec<f64>, CoreError> {
        self.per_objective.iter().map(|v| empirical_mean(v)).collect()
    }

    /// Checks arity, sample-count agreement and the `[0, 1]` range of the
    /// constrained objectives.
    pub fn validate(&self, num_constrained: usize) -> Result<(), Vec<RecordViolation>> {
        let mut violations = Vec::new();
        if self.per_objective.len() != num_constrained + 1 {
            violations.push(RecordViolation::ArityMismatch {
                expected: num_constrained + 1,
                found: self.per_objective.len(),
            });
        }
        if self.sample_count().is_none_or(|n| n == 0) {
            violations.push(RecordViolation::CountMismatch(
                self.per_objective.iter().map(Vec::len).collect(),
            ));
        }
        for (i, v) in self.per_objective.iter().enumerate() {
            let bad = if i < num_constrained {
                v.iter().find(|x| !(0.0..=1.0).contains(*x))
            } else {
                v.iter().find(|x| !x.is_finite())
            };
            if let Some(&value) = bad {
                violations.push(RecordViolation::LossOutOfRange { objective: i, value });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

/// A configuration with its split means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config: Configuration,
    pub val_means: Vec<f64>,
    pub val_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cal_count: Option<usize>,
    pub provenance: String,
}

impl EvalRecord {
    pub fn from_validation(
        config: Configuration,
        samples: &LossSamples,
        provenance: impl Into<String>,
    ) -> Result<Self, CoreError> {
        Ok(Self {
            val_means: samples.means()?,
            val_count: samples.sample_count().unwrap_or(0),
            config,
            cal_means: None,
            cal_count: None,
            provenance: provenance.into(),
        })
    }

    pub fn id(&self) -> ConfigId {
        self.config.id
    }

    /// Validation mean of the free objective (the last entry).
    pub fn val_free(&self) -> f64 {
        *self.val_means.last().expect("records carry at least one objective")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordViolation {
    #[error("loss out of range: objective {objective} has value {value}")]
    LossOutOfRange { objective: usize, value: f64 },
    #[error("configuration outside space: dimension {dim} has value {value}")]
    OutsideSpace { dim: usize, value: f64 },
    #[error("objective arity mismatch: expected {expected}, found {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("sample count mismatch: {0:?}")]
    CountMismatch(Vec<usize>),
}

/// Arithmetic mean with strictly sequential left-to-right summation.
pub fn empirical_mean(samples: &[f64]) -> Result<f64, CoreError> {
    if samples.is_empty() {
        return Err(CoreError::EmptySamples);
    }
    let mut sum = 0.0;
    for x in samples {
        sum += x;
    }
    Ok(sum / samples.len() as f64)
}

/// Collects every problem with a record; `Ok` iff there are none.
pub fn validate_record(
    record: &EvalRecord,
    spec: &RiskSpec,
    space: &SearchSpace,
) -> Result<(), Vec<RecordViolation>> {
    let c = spec.num_constrained();
    let mut violations = Vec::new();
    let mut check_means = |means: &[f64]| {
        if means.len() != c + 1 {
            violations.push(RecordViolation::ArityMismatch {
                expected: c + 1,
                found: means.len(),
            });
        }
        for (i, &value) in means.iter().enumerate() {
            let ok = if i < c {
                (0.0..=1.0).contains(&value)
            } else {
                value.is_finite()
            };
            if !ok {
                violations.push(RecordViolation::LossOutOfRange { objective: i, value });
            }
        }
    };
    check_means(&record.val_means);
    if let Some(cal) = &record.cal_means {
        check_means(cal);
    }
    if record.val_count == 0 || record.cal_means.is_some() && record.cal_count.unwrap_or(0) == 0 {
        violations.push(RecordViolation::CountMismatch(vec![
            record.val_count,
            record.cal_count.unwrap_or(0),
        ]));
    }
    let values = &record.config.values;
    if values.len() != space.dim() {
        violations.push(RecordViolation::ArityMismatch {
            expected: space.dim(),
            found: values.len(),
        });
    }
    for (dim, (&value, (lo, hi))) in values
        .iter()
        .zip(space.lower().iter().zip(space.upper()))
        .enumerate()
    {
        if !(value >= *lo && value <= *hi) {
            violations.push(RecordViolation::OutsideSpace { dim, value });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Common validation and calibration sample counts `(k, m)` across records.
/// `m` is 0 when no record carries calibration data.
pub fn split_sizes(records: &[EvalRecord]) -> Result<(usize, usize), CoreError> {
    let first = records
        .first()
        .ok_or_else(|| CoreError::InconsistentSizes("no records".into()))?;
    let k = first.val_count;
    if let Some(r) = records.iter().find(|r| r.val_count != k) {
        return Err(CoreError::InconsistentSizes(format!(
            "validation count {} for {} differs from {k}",
            r.val_count,
            r.id()
        )));
    }
    let mut m = None;
    for r in records {
        match (m, r.cal_count) {
            (None, Some(n)) => m = Some(n),
            (Some(a), Some(b)) if a != b => {
                return Err(CoreError::InconsistentSizes(format!(
                    "calibration count {b} for {} differs from {a}",
                    r.id()
                )))
            }
            _ => {}
        }
    }
    Ok((k, m.unwrap_or(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(values: Vec<f64>, val_means: Vec<f64>, k: usize) -> EvalRecord {
        EvalRecord {
            config: Configuration::new(ConfigId(0), values),
            val_means,
            val_count: k,
            cal_means: None,
            cal_count: None,
            provenance: "test".into(),
        }
    }

    fn spec1() -> RiskSpec {
        RiskSpec::new(vec![0.1], 0.1, 1e-4, Bound::HoeffdingBentkus).unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(empirical_mean(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(empirical_mean(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(empirical_mean(&[]), Err(CoreError::EmptySamples));
    }

    #[test]
    fn validate_record_reports_each_problem() {
        let space = SearchSpace::unit(1);
        let spec = spec1();
        assert!(validate_record(&record(vec![0.5], vec![0.2, 3.0], 10), &spec, &space).is_ok());

        let errs = validate_record(&record(vec![0.5], vec![1.3, 0.2], 10), &spec, &space).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().starts_with("loss out of range"));

        let errs = validate_record(&record(vec![-0.1], vec![0.3, 0.2], 10), &spec, &space).unwrap_err();
        assert!(errs[0].to_string().starts_with("configuration outside space"));

        let errs = validate_record(&record(vec![2.0], vec![1.5, 0.2], 0), &spec, &space).unwrap_err();
        assert_eq!(errs.len(), 3);
    }

    #[test]
    fn split_sizes_examples() {
        let mut a = record(vec![0.1], vec![0.1, 0.1], 3618);
        a.cal_count = Some(4522);
        let mut b = a.clone();
        b.config.id = ConfigId(1);
        assert_eq!(split_sizes(&[a.clone(), b.clone()]).unwrap(), (3618, 4522));
        assert_eq!(split_sizes(&[record(vec![0.0], vec![0.0, 0.0], 10)]).unwrap(), (10, 0));
        let mut c = record(vec![0.0], vec![0.0, 0.0], 10);
        c.cal_count = Some(10);
        assert_eq!(split_sizes(&[c]).unwrap(), (10, 10));
        b.val_count = 100;
        assert!(split_sizes(&[a, b]).is_err());
        assert!(split_sizes(&[]).is_err());
    }

    #[test]
    fn risk_spec_rejects_bad_levels() {
        assert!(RiskSpec::new(vec![], 0.1, 0.1, Bound::Hoeffding).is_err());
        assert!(RiskSpec::new(vec![1.0], 0.1, 0.1, Bound::Hoeffding).is_err());
        assert!(RiskSpec::new(vec![0.2], 0.0, 0.1, Bound::Hoeffding).is_err());
        assert!(RiskSpec::new(vec![0.2], 0.1, 1.0, Bound::Hoeffding).is_err());
        let s = RiskSpec::new(vec![0.2, 0.3], 0.1, 0.1, Bound::Hoeffding).unwrap();
        assert_eq!((s.num_constrained(), s.free_index(), s.num_objectives()), (2, 2, 3));
    }

    #[test]
    fn space_unit_round_trip() {
        let space = SearchSpace::new(vec![-1.0, 10.0], vec![1.0, 20.0]).unwrap();
        let p = [0.5, 12.5];
        let u = space.to_unit(&p);
        assert_eq!(u, vec![0.75, 0.25]);
        assert_eq!(space.from_unit(&u), p.to_vec());
        assert!(SearchSpace::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn loss_samples_validation() {
        let s = LossSamples {
            config_id: ConfigId(3),
            split: Split::Validation,
            per_objective: vec![vec![0.0, 1.0], vec![5.0, -2.0]],
        };
        assert!(s.validate(1).is_ok());
        assert_eq!(s.means().unwrap(), vec![0.5, 1.5]);
        let bad = LossSamples {
            per_objective: vec![vec![0.0, 1.2], vec![5.0]],
            ..s
        };
        assert_eq!(bad.validate(1).unwrap_err().len(), 2);
    }

    #[test]
    fn bound_serde_names() {
        assert_eq!(serde_json::to_string(&Bound::HoeffdingBentkus).unwrap(), "\"hb\"");
        let b: Bound = serde_json::from_str("\"hoeffding_bentkus\"").unwrap();
        assert_eq!(b, Bound::HoeffdingBentkus);
        assert_eq!("hoeffding".parse::<Bound>().unwrap(), Bound::Hoeffding);
    }
}
