//! Dominance, Pareto archives and the hypervolume indicator (minimization).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::types::ConfigId;

/// Exact hypervolume is provided up to this many objectives.
pub const MAX_HV_DIM: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("hypervolume supports 1..={MAX_HV_DIM} objectives, got {0}")]
    UnsupportedDimension(usize),
    #[error("non-finite coordinate in objective point")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<ConfigId>,
}

impl ObjectivePoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, owner: None }
    }

    pub fn owned(values: Vec<f64>, owner: ConfigId) -> Self {
        Self {
            values,
            owner: Some(owner),
        }
    }
}

impl AsRef<[f64]> for ObjectivePoint {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Upper corner of the hypervolume computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferencePoint {
    pub values: Vec<f64>,
}

impl ReferencePoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// `u` dominates `v`: no worse everywhere and strictly better somewhere.
pub fn dominates(u: &[f64], v: &[f64]) -> Result<bool, ParetoError> {
    if u.len() != v.len() {
        return Err(ParetoError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(dominates_unchecked(u, v))
}

pub(crate) fn dominates_unchecked(u: &[f64], v: &[f64]) -> bool {
    let mut strict = false;
    for (a, b) in u.iter().zip(v) {
        if a > b {
            return false;
        }
        strict |= a < b;
    }
    strict
}

fn weakly_dominates(u: &[f64], v: &[f64]) -> bool {
    u.iter().zip(v).all(|(a, b)| a <= b)
}

/// Mutually non-dominated set of points. Exact duplicates keep the first copy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    points: Vec<ObjectivePoint>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `point` unless it is dominated by or equal to a member; members
    /// it dominates are evicted. Returns whether the archive changed.
    pub fn insert(&mut self, point: ObjectivePoint) -> Result<bool, ParetoError> {
        if point.values.iter().any(|v| !v.is_finite()) {
            return Err(ParetoError::NonFinite);
        }
        if let Some(first) = self.points.first() {
            if first.values.len() != point.values.len() {
                return Err(ParetoError::DimensionMismatch(first.values.len(), point.values.len()));
            }
        }
        if self
            .points
            .iter()
            .any(|p| weakly_dominates(&p.values, &point.values))
        {
            return Ok(false);
        }
        self.points
            .retain(|p| !dominates_unchecked(&point.values, &p.values));
        self.points.push(point);
        Ok(true)
    }

    pub fn points(&self) -> &[ObjectivePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether some member weakly dominates `values`.
    pub fn covers(&self, values: &[f64]) -> bool {
        self.points.iter().any(|p| weakly_dominates(&p.values, values))
    }

    pub fn hypervolume(&self, reference: &ReferencePoint) -> Result<f64, ParetoError> {
        hypervolume(&self.points, &reference.values)
    }
}

/// Non-dominated subset of `points`, in insertion order of the survivors.
pub fn pareto_front(points: impl IntoIterator<Item = ObjectivePoint>) -> Result<ParetoArchive, ParetoError> {
    let mut archive = ParetoArchive::new();
    for p in points {
        archive.insert(p)?;
    }
    Ok(archive)
}

// Points strictly inside the box below `reference`; the rest span zero volume.
fn clip<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Result<Vec<Vec<f64>>, ParetoError> {
    let d = reference.len();
    if d == 0 || d > MAX_HV_DIM {
        return Err(ParetoError::UnsupportedDimension(d));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(ParetoError::NonFinite);
    }
    let mut kept = Vec::with_capacity(points.len());
    for p in points {
        let p = p.as_ref();
        if p.len() != d {
            return Err(ParetoError::DimensionMismatch(p.len(), d));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ParetoError::NonFinite);
        }
        if p.iter().zip(reference).all(|(a, r)| a < r) {
            kept.push(p.to_vec());
        }
    }
    Ok(kept)
}

fn cmp_f64(a: &f64, b: &f64) -> std::cmp::Ordering {
    a.partial_cmp(b).expect("finite coordinates")
}

fn sweep_2d(points: &mut [Vec<f64>], reference: &[f64]) -> f64 {
    points.sort_by(|a, b| cmp_f64(&a[0], &b[0]).then(cmp_f64(&a[1], &b[1])));
    let mut area = 0.0;
    let mut ceiling = reference[1];
    for p in points.iter() {
        if p[1] < ceiling {
            area += (reference[0] - p[0]) * (ceiling - p[1]);
            ceiling = p[1];
        }
    }
    area
}

// Slices along the last coordinate; `base_2d` selects the sweep for the
// two-dimensional cross-sections.
fn slice(points: &mut [Vec<f64>], reference: &[f64], base_2d: bool) -> f64 {
    let d = reference.len();
    if points.is_empty() {
        return 0.0;
    }
    match d {
        1 => return reference[0] - points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
        2 if base_2d => return sweep_2d(points, reference),
        _ => {}
    }
    let last = d - 1;
    points.sort_by(|a, b| cmp_f64(&a[last], &b[last]));
    let mut volume = 0.0;
    let mut section: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        section.push(points[i][..last].to_vec());
        let top = points.get(i + 1).map_or(reference[last], |p| p[last]);
        let depth = top - points[i][last];
        if depth > 0.0 {
            let mut s = section.clone();
            volume += slice(&mut s, &reference[..last], base_2d) * depth;
        }
    }
    volume
}

/// Exact Lebesgue measure of the region dominated by `points` and bounded by
/// `reference`. Points that do not strictly dominate the reference contribute
/// nothing.
pub fn hypervolume<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Result<f64, ParetoError> {
    let mut kept = clip(points, reference)?;
    Ok(slice(&mut kept, reference, true))
}

/// The same measure by pure recursive slicing down to one dimension. Kept as
/// an independent route for cross-checking the two-dimensional sweep.
pub fn hypervolume_slicing<P: AsRef<[f64]>>(points: &[P], reference: &[f64]) -> Result<f64, ParetoError> {
    let mut kept = clip(points, reference)?;
    Ok(slice(&mut kept, reference, false))
}

/// Hypervolume improvement of adding `candidate` to `archive`.
pub fn hvi<P: AsRef<[f64]>>(candidate: &[f64], archive: &[P], reference: &[f64]) -> Result<f64, ParetoError> {
    HviScorer::new(archive, reference)?.score(candidate)
}

/// Scores many candidates against one archive and reference.
#[derive(Debug, Clone)]
pub struct HviScorer {
    front: Vec<Vec<f64>>,
    reference: Vec<f64>,
    base: f64,
}

impl HviScorer {
    pub fn new<P: AsRef<[f64]>>(archive: &[P], reference: &[f64]) -> Result<Self, ParetoError> {
        let front = clip(archive, reference)?;
        let base = slice(&mut front.clone(), reference, true);
        Ok(Self {
            front,
            reference: reference.to_vec(),
            base,
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn score(&self, candidate: &[f64]) -> Result<f64, ParetoError> {
        if candidate.len() != self.reference.len() {
            return Err(ParetoError::DimensionMismatch(candidate.len(), self.reference.len()));
        }
        if candidate.iter().any(|v| !v.is_finite()) {
            return Err(ParetoError::NonFinite);
        }
        if !candidate.iter().zip(&self.reference).all(|(a, r)| a < r)
            || self.front.iter().any(|p| weakly_dominates(p, candidate))
        {
            return Ok(0.0);
        }
        let mut with = self.front.clone();
        with.push(candidate.to_vec());
        Ok((slice(&mut with, &self.reference, true) - self.base).max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte Carlo hypervolume: uniform samples in the box spanned by the
/// componentwise minimum of the points and the reference.
pub fn hypervolume_mc<P: AsRef<[f64]>>(
    points: &[P],
    reference: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate, ParetoError> {
    let kept = clip(points, reference)?;
    if kept.is_empty() || n_samples == 0 {
        return Ok(McEstimate {
            value: 0.0,
            std_error: 0.0,
        });
    }
    let d = reference.len();
    let lower: Vec<f64> = (0..d)
        .map(|j| kept.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min))
        .collect();
    let box_volume: f64 = lower.iter().zip(reference).map(|(l, r)| r - l).product();
    let mut rng = seed::rng(&[seed]);
    let mut z = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..n_samples {
        for j in 0..d {
            z[j] = rng.random_range(lower[j]..reference[j]);
        }
        if kept.iter().any(|p| weakly_dominates(p, &z)) {
            hits += 1;
        }
    }
    let frac = hits as f64 / n_samples as f64;
    Ok(McEstimate {
        value: box_volume * frac,
        std_error: box_volume * (frac * (1.0 - frac) / n_samples as f64).sqrt(),
    })
}
