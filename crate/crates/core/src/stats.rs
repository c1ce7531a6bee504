//! Concentration-bound machinery.
//!
//! P-values for the null hypothesis `loss > alpha` of a `[0, 1]`-bounded loss
//! (Hoeffding and Hoeffding-Bentkus), their numerical inversion into the
//! largest certifiable empirical loss `alpha_max`, and the region of interest
//! around it on the validation scale.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::types::{Bound, RiskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty p-value vector")]
    Empty,
}

fn domain(msg: String) -> StatsError {
    StatsError::Domain(msg)
}

fn check_common(lhat: f64, m: usize, alpha: f64) -> Result<(), StatsError> {
    if !(0.0..=1.0).contains(&lhat) {
        return Err(domain(format!("empirical loss {lhat} outside [0, 1]")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha {alpha} outside (0, 1)")));
    }
    if m == 0 {
        return Err(domain("sample size must be positive".into()));
    }
    Ok(())
}

/// `exp(-2 m (alpha - lhat)_+^2)`.
pub fn hoeffding_p_value(lhat: f64, m: usize, alpha: f64) -> Result<f64, StatsError> {
    check_common(lhat, m, alpha)?;
    let gap = (alpha - lhat).max(0.0);
    Ok((-2.0 * m as f64 * gap * gap).exp())
}

/// Bernoulli relative entropy `a ln(a/b) + (1-a) ln((1-a)/(1-b))`, with the
/// `a = 0` limit taken as `ln(1/(1-b))`.
pub fn h1(a: f64, b: f64) -> Result<f64, StatsError> {
    if !(b > 0.0 && b < 1.0) {
        return Err(domain(format!("h1: b = {b} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&a) || a > b {
        return Err(domain(format!("h1: need 0 <= a <= b < 1, got a = {a}, b = {b}")));
    }
    let head = if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    Ok(head + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln())
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

// Stop accumulating once a term falls this far (in log units) below the running
// sum; past the mode the remaining tail is geometric and negligible.
const LOG_TAIL_CUTOFF: f64 = 45.0;

/// Exact lower-tail binomial CDF `P(Binom(n, p) <= j)`.
///
/// Sums from `j` towards the tail with the pmf ratio recurrence in log space,
/// switching to `1 - P(X > j)` when `j` is at or above the mode so that the
/// summed terms always decrease.
pub fn binom_cdf(j: i64, n: u64, p: f64) -> Result<f64, StatsError> {
    if n == 0 {
        return Err(domain("binomial size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(domain(format!("binomial probability {p} outside [0, 1]")));
    }
    if j < 0 {
        return Ok(0.0);
    }
    let j = j as u64;
    if j >= n || p == 0.0 {
        return Ok(1.0);
    }
    if p == 1.0 {
        return Ok(0.0);
    }
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let log_pmf = |k: u64| ln_choose(n, k) + k as f64 * lp + (n - k) as f64 * lq;
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);

    if j < mode {
        let mut k = j;
        let mut term = log_pmf(k);
        let mut acc = term;
        while k > 0 {
            term += (k as f64).ln() - ((n - k + 1) as f64).ln() + lq - lp;
            k -= 1;
            acc = log_add_exp(acc, term);
            if term < acc - LOG_TAIL_CUTOFF {
                break;
            }
        }
        Ok(acc.exp().min(1.0))
    } else {
        let mut k = j + 1;
        let mut term = log_pmf(k);
        let mut acc = term;
        while k < n {
            term += ((n - k) as f64).ln() - ((k + 1) as f64).ln() + lp - lq;
            k += 1;
            acc = log_add_exp(acc, term);
            if term < acc - LOG_TAIL_CUTOFF {
                break;
            }
        }
        Ok((1.0 - acc.exp()).clamp(0.0, 1.0))
    }
}

/// `ceil(m * lhat)`, forgiving the rounding error of means that are exact
/// multiples of `1/m`.
fn loss_count(lhat: f64, m: usize) -> i64 {
    (m as f64 * lhat - 1e-9).ceil() as i64
}

/// Hoeffding-Bentkus p-value:
/// `min(exp(-m h1(min(lhat, alpha), alpha)), e * P(Binom(m, alpha) <= ceil(m lhat)))`,
/// clipped to 1.
pub fn hb_p_value(lhat: f64, m: usize, alpha: f64) -> Result<f64, StatsError> {
    check_common(lhat, m, alpha)?;
    let hoeffding = (-(m as f64) * h1(lhat.min(alpha), alpha)?).exp();
    let bentkus = E * binom_cdf(loss_count(lhat, m), m as u64, alpha)?;
    Ok(hoeffding.min(bentkus).min(1.0))
}

pub fn p_value(bound: Bound, lhat: f64, m: usize, alpha: f64) -> Result<f64, StatsError> {
    match bound {
        Bound::Hoeffding => hoeffding_p_value(lhat, m, alpha),
        Bound::HoeffdingBentkus => hb_p_value(lhat, m, alpha),
    }
}

/// Largest certifiable empirical loss, and whether no loss at all can pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaMax {
    pub value: f64,
    pub degenerate: bool,
}

const BISECTION_TOL: f64 = 1e-9;
const BISECTION_MAX_ITER: usize = 200;

/// Largest empirical calibration loss that still rejects `loss > alpha` at level `delta`.
///
/// Hoeffding has the closed form `alpha - sqrt(ln(1/delta) / 2m)`. For
/// Hoeffding-Bentkus the p-value is non-decreasing in the empirical loss, so
/// the supremum of `{t : p(t) < delta}` is bracketed by bisection; the returned
/// value always satisfies `p(value) < delta` unless the result is degenerate.
pub fn alpha_max(alpha: f64, delta: f64, m: usize, bound: Bound) -> Result<AlphaMax, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta {delta} outside (0, 1)")));
    }
    if m == 0 {
        return Err(domain("sample size must be positive".into()));
    }
    let hoeffding = alpha - ((1.0 / delta).ln() / (2.0 * m as f64)).sqrt();
    match bound {
        Bound::Hoeffding => Ok(if hoeffding > 0.0 {
            AlphaMax {
                value: hoeffding,
                degenerate: false,
            }
        } else {
            AlphaMax {
                value: 0.0,
                degenerate: true,
            }
        }),
        Bound::HoeffdingBentkus => {
            let p = |t: f64| hb_p_value(t, m, alpha);
            let mut lo = if hoeffding > 0.0 && p(hoeffding)? < delta {
                hoeffding
            } else if p(0.0)? < delta {
                0.0
            } else {
                return Ok(AlphaMax {
                    value: 0.0,
                    degenerate: true,
                });
            };
            let mut hi = alpha;
            for _ in 0..BISECTION_MAX_ITER {
                if hi - lo <= BISECTION_TOL {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if p(mid)? < delta {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            debug_assert!(p(lo)? < delta);
            Ok(AlphaMax {
                value: lo,
                degenerate: false,
            })
        }
    }
}

/// Box `[low, high]^c` of validation losses likely to correspond to an
/// expected loss of `alpha_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub alpha_max: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub bound: Bound,
    pub k: usize,
    pub m: usize,
    pub degenerate: bool,
}

impl RegionOfInterest {
    /// The whole `[0, 1]^c` box: guidance switched off.
    pub fn whole_space(c: usize, bound: Bound, k: usize, m: usize) -> Self {
        Self {
            alpha_max: vec![1.0; c],
            low: vec![0.0; c],
            high: vec![1.0; c],
            bound,
            k,
            m,
            degenerate: false,
        }
    }

    pub fn num_constrained(&self) -> usize {
        self.low.len()
    }

    /// Whether the constrained coordinates of `point` lie inside the box.
    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Squared Euclidean distance from the constrained coordinates to the
    /// box `[low, alpha_max]`.
    pub fn target_distance_sq(&self, point: &[f64]) -> f64 {
        point
            .iter()
            .zip(self.low.iter().zip(&self.alpha_max))
            .map(|(v, (lo, hi))| {
                let d = (v - hi).max(0.0) + (lo - v).max(0.0);
                d * d
            })
            .sum()
    }
}

// Largest j with cdf(j) <= level, or -1.
fn binom_lower_quantile(k: usize, p: f64, level: f64) -> Result<i64, StatsError> {
    let (mut lo, mut hi) = (-1i64, k as i64);
    // invariant: cdf(lo) <= level (cdf(-1) = 0), cdf(hi) > level or hi = k
    if binom_cdf(hi, k as u64, p)? <= level {
        return Ok(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if binom_cdf(mid, k as u64, p)? <= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

// Smallest j with cdf(j) >= level.
fn binom_upper_quantile(k: usize, p: f64, level: f64) -> Result<i64, StatsError> {
    let (mut lo, mut hi) = (-1i64, k as i64);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if binom_cdf(mid, k as u64, p)? >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Region of interest for validation size `k` and calibration size `m`.
///
/// With Hoeffding the slab is `alpha_max -/+ sqrt(ln(1/delta') / 2k)`. With
/// Hoeffding-Bentkus the slab ends are the `delta'` and `1 - delta'` quantiles
/// of `Binom(k, alpha_max) / k`. Both are clamped into `[0, 1]`; the
/// multi-constraint region is the product of the per-constraint slabs.
pub fn region_of_interest(spec: &RiskSpec, k: usize, m: usize) -> Result<RegionOfInterest, StatsError> {
    if k < 2 || m < 2 {
        return Err(domain(format!("need k, m >= 2, got k = {k}, m = {m}")));
    }
    let c = spec.num_constrained();
    let mut region = RegionOfInterest {
        alpha_max: Vec::with_capacity(c),
        low: Vec::with_capacity(c),
        high: Vec::with_capacity(c),
        bound: spec.bound,
        k,
        m,
        degenerate: false,
    };
    for &alpha in &spec.alphas {
        let am = alpha_max(alpha, spec.delta, m, spec.bound)?;
        let (low, high) = match spec.bound {
            Bound::Hoeffding => {
                let half = ((1.0 / spec.delta_prime).ln() / (2.0 * k as f64)).sqrt();
                (am.value - half, am.value + half)
            }
            Bound::HoeffdingBentkus => {
                let q_lo = binom_lower_quantile(k, am.value, spec.delta_prime)?.max(0);
                let q_hi = binom_upper_quantile(k, am.value, 1.0 - spec.delta_prime)?;
                (q_lo as f64 / k as f64, q_hi as f64 / k as f64)
            }
        };
        let low = low.clamp(0.0, 1.0).min(am.value);
        let high = high.clamp(0.0, 1.0).max(am.value);
        region.degenerate |= am.degenerate || high <= low;
        region.alpha_max.push(am.value);
        region.low.push(low);
        region.high.push(high);
    }
    Ok(region)
}

/// `max_i p_i`: a valid p-value for the union null `exists i: loss_i > alpha_i`.
pub fn combined_p_value(per_constraint: &[f64]) -> Result<f64, StatsError> {
    if per_constraint.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(p) = per_constraint.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(domain(format!("p-value {p} outside [0, 1]")));
    }
    Ok(per_constraint.iter().copied().fold(0.0, f64::max))
}

/// P-value of a configuration from its split means. Only the first `c`
/// entries are read, so the free objective may be present.
pub fn p_value_for_record(means: &[f64], spec: &RiskSpec, m: usize, bound: Bound) -> Result<f64, StatsError> {
    let c = spec.num_constrained();
    if means.len() < c {
        return Err(domain(format!("{} means for {c} constraints", means.len())));
    }
    let per: Vec<f64> = means[..c]
        .iter()
        .zip(&spec.alphas)
        .map(|(&lhat, &alpha)| p_value(bound, lhat, m, alpha))
        .collect::<Result<_, _>>()?;
    combined_p_value(&per)
}
