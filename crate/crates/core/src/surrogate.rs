//! Gaussian-process regression, one model per objective.
//!
//! Inputs are expected in unit-box coordinates and targets are z-scored
//! internally. The kernel is squared-exponential with one length scale per
//! input dimension; hyperparameters maximize the log marginal likelihood by
//! a few fixed isotropic starts plus seeded random ones, the best of which are
//! refined by coordinate-wise golden-section search.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (1e-2, 10.0);
pub const AMPLITUDE_BOUNDS: (f64, f64) = (1e-2, 10.0);
pub const NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);
const STD_FLOOR: f64 = 1e-12;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("need at least {needed} training points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite training target at index {0}")]
    NonFiniteTarget(usize),
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel matrix not positive definite even with jitter {0:e}")]
    Factorization(f64),
    #[error("expected {expected} models, got {got}")]
    ModelCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub length_scales: Vec<f64>,
    pub amplitude: f64,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn isotropic(dim: usize, length_scale: f64, amplitude: f64, noise_var: f64) -> Self {
        Self {
            length_scales: vec![length_scale; dim],
            amplitude,
            noise_var,
        }
    }

    /// Log-space parameter vector `(ln ls_1, ..., ln ls_n, ln amplitude, ln noise)`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut theta: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        theta.push(self.amplitude.ln());
        theta.push(self.noise_var.ln());
        theta
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let n = theta.len() - 2;
        Self {
            length_scales: theta[..n].iter().map(|t| t.exp()).collect(),
            amplitude: theta[n].exp(),
            noise_var: theta[n + 1].exp(),
        }
    }
}

/// `amplitude * exp(-0.5 * sum_j ((a_j - b_j) / ls_j)^2)`.
pub fn kernel_eval(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&params.length_scales)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum();
    params.amplitude * (-0.5 * r2).exp()
}

fn check_inputs(inputs: &[Vec<f64>], targets: &[f64], params: Option<&KernelParams>) -> Result<usize, GpError> {
    if inputs.len() != targets.len() {
        return Err(GpError::DimensionMismatch {
            expected: inputs.len(),
            got: targets.len(),
        });
    }
    if inputs.is_empty() {
        return Err(GpError::TooFewPoints { needed: 1, got: 0 });
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(GpError::NonFiniteTarget(i));
    }
    let dim = params.map_or(inputs[0].len(), |p| p.length_scales.len());
    if let Some(x) = inputs.iter().find(|x| x.len() != dim) {
        return Err(GpError::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    Ok(dim)
}

fn gram(inputs: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_eval(&inputs[i], &inputs[j], params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + noise I`, escalating diagonal jitter on failure.
fn factor(inputs: &[Vec<f64>], params: &KernelParams) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let mut base = gram(inputs, params);
    for i in 0..inputs.len() {
        base[(i, i)] += params.noise_var;
    }
    if let Some(ch) = Cholesky::new(base.clone()) {
        return Ok((ch, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = base.clone();
        for i in 0..inputs.len() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(GpError::Factorization(JITTER_MAX))
}

fn lml_from_factor(ch: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> f64 {
    let weights = ch.solve(y);
    let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = y.len() as f64;
    -0.5 * y.dot(&weights) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// `-1/2 y^T (K + s I)^-1 y - 1/2 log det(K + s I) - N/2 log 2 pi`, on the
/// targets exactly as given.
pub fn log_marginal_likelihood(inputs: &[Vec<f64>], targets: &[f64], params: &KernelParams) -> Result<f64, GpError> {
    check_inputs(inputs, targets, Some(params))?;
    let (ch, _) = factor(inputs, params)?;
    Ok(lml_from_factor(&ch, &DVector::from_column_slice(targets)))
}

fn standardize(targets: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    (targets.iter().map(|t| (t - mean) / std).collect(), mean, std)
}

/// Fitted posterior for one objective.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    params: KernelParams,
    factor: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    target_mean: f64,
    target_std: f64,
    jitter: f64,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on the data.
    pub fn with_params(inputs: Vec<Vec<f64>>, targets: &[f64], params: KernelParams) -> Result<Self, GpError> {
        check_inputs(&inputs, targets, Some(&params))?;
        let (z, target_mean, target_std) = standardize(targets);
        let (factor, jitter) = factor(&inputs, &params)?;
        let weights = factor.solve(&DVector::from_vec(z));
        Ok(Self {
            inputs,
            params,
            factor,
            weights,
            target_mean,
            target_std,
            jitter,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn target_std(&self) -> f64 {
        self.target_std
    }

    /// Diagonal jitter that was needed on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn cross(&self, query: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|x| kernel_eval(x, query, &self.params)),
        )
    }

    pub fn posterior_mean(&self, query: &[f64]) -> f64 {
        self.target_mean + self.target_std * self.cross(query).dot(&self.weights)
    }

    /// De-standardized posterior mean and latent-function variance at `query`.
    pub fn posterior(&self, query: &[f64]) -> (f64, f64) {
        let k = self.cross(query);
        let mean = self.target_mean + self.target_std * k.dot(&self.weights);
        let v = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.params.amplitude - v.dot(&v)).max(0.0);
        (mean, var * self.target_std * self.target_std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub refine_rounds: usize,
    pub golden_iters: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 64,
            refine_rounds: 50,
            golden_iters: 20,
            seed: 0,
        }
    }
}

fn log_bounds(dim: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
    let mut b = vec![ln(LENGTH_SCALE_BOUNDS); dim];
    b.push(ln(AMPLITUDE_BOUNDS));
    b.push(ln(NOISE_BOUNDS));
    b
}

/// Deterministic starts (length scale, amplitude, noise) tried before the random ones.
const ISOTROPIC_STARTS: [(f64, f64, f64); 6] = [
    (0.3, 1.0, 1e-2),
    (1.0, 1.0, 1e-2),
    (3.0, 3.0, 1e-4),
    (3.0, 10.0, 1e-4),
    (1.0, 3.0, 1e-4),
    (0.3, 1.0, 1e-1),
];

/// Number of best starts that are refined.
const REFINED_STARTS: usize = 4;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

fn golden_max(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Coordinate-wise golden-section ascent with a shrinking bracket, stopping
/// once a full sweep gains less than 1e-9.
fn refine(
    objective: &impl Fn(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    mut theta: Vec<f64>,
    mut best: f64,
    config: &FitConfig,
) -> (Vec<f64>, f64) {
    for round in 0..config.refine_rounds {
        let before = best;
        for c in 0..theta.len() {
            let (lo, hi) = bounds[c];
            let half = 0.5 * (hi - lo) * 0.7f64.powi(round as i32);
            let a = (theta[c] - half).max(lo);
            let b = (theta[c] + half).min(hi);
            let mut probe = theta.clone();
            let (x, v) = golden_max(
                &mut |t| {
                    probe[c] = t;
                    objective(&probe)
                },
                a,
                b,
                config.golden_iters,
            );
            if v > best {
                theta[c] = x;
                best = v;
            }
        }
        if best.is_finite() && best - before < 1e-9 {
            break;
        }
    }
    (theta, best)
}

/// Fits hyperparameters by maximizing the log marginal likelihood of the
/// standardized targets, then conditions the model on the data.
///
/// Refinement stops early once a full coordinate sweep gains less than 1e-9.
pub fn fit_gp(inputs: Vec<Vec<f64>>, targets: &[f64], config: &FitConfig) -> Result<GpModel, GpError> {
    let dim = check_inputs(&inputs, targets, None)?;
    if inputs.len() < 2 {
        return Err(GpError::TooFewPoints {
            needed: 2,
            got: inputs.len(),
        });
    }
    let (z, _, _) = standardize(targets);
    let y = DVector::from_column_slice(&z);
    let objective = |theta: &[f64]| -> f64 {
        match factor(&inputs, &KernelParams::from_log(theta)) {
            Ok((ch, _)) => {
                let v = lml_from_factor(&ch, &y);
                if v.is_finite() {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let bounds = log_bounds(dim);
    let mut rng = seed::rng(&[seed::tag::GP_FIT, config.seed]);
    let mut starts: Vec<(Vec<f64>, f64)> = ISOTROPIC_STARTS
        .iter()
        .map(|&(ls, amp, noise)| KernelParams::isotropic(dim, ls, amp, noise).to_log())
        .chain((0..config.restarts).map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()))
        .map(|theta| {
            let v = objective(&theta);
            (theta, v)
        })
        .collect();
    starts.sort_by(|a, b| b.1.total_cmp(&a.1));
    starts.truncate(REFINED_STARTS);

    let (mut theta, mut best) = (starts[0].0.clone(), f64::NEG_INFINITY);
    for (start, value) in starts {
        let (t, v) = refine(&objective, &bounds, start, value, config);
        if v > best {
            theta = t;
            best = v;
        }
    }

    let mut params = KernelParams::from_log(&theta);
    if !best.is_finite() {
        // every probe failed to factor; fall back to the noisiest admissible model
        params.noise_var = NOISE_BOUNDS.1;
    }
    GpModel::with_params(inputs, targets, params)
}

/// Posterior means of every objective model at `query`.
pub fn posterior_batch(models: &[GpModel], query: &[f64], expected: usize) -> Result<Vec<f64>, GpError> {
    if models.len() != expected {
        return Err(GpError::ModelCount {
            expected,
            got: models.len(),
        });
    }
    Ok(models.iter().map(|m| m.posterior_mean(query)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn kernel_examples() {
        let p = KernelParams::isotropic(1, 1.0, 1.0, 1e-6);
        assert_eq!(kernel_eval(&[0.3], &[0.3], &KernelParams::isotropic(1, 0.2, 2.5, 1e-6)), 2.5);
        assert!(close(kernel_eval(&[0.0], &[1.0], &p), (-0.5f64).exp(), 1e-15));
        assert!(kernel_eval(&[0.0], &[100.0], &p) < 1e-300);
    }

    #[test]
    fn two_point_posterior_matches_closed_form() {
        let p = KernelParams::isotropic(1, 0.4, 1.3, 0.05);
        let xs = vec![vec![0.1], vec![0.7]];
        let ys = [2.0, -1.0];
        let model = GpModel::with_params(xs.clone(), &ys, p.clone()).unwrap();
        let (mu, sd) = (0.5, 1.5);
        let z = [(ys[0] - mu) / sd, (ys[1] - mu) / sd];
        let a = p.amplitude + p.noise_var;
        let b = kernel_eval(&xs[0], &xs[1], &p);
        let det = a * a - b * b;
        let inv = [[a / det, -b / det], [-b / det, a / det]];
        let q = [0.4];
        let k = [kernel_eval(&xs[0], &q, &p), kernel_eval(&xs[1], &q, &p)];
        let kinv_z = [inv[0][0] * z[0] + inv[0][1] * z[1], inv[1][0] * z[0] + inv[1][1] * z[1]];
        let mean = mu + sd * (k[0] * kinv_z[0] + k[1] * kinv_z[1]);
        let quad = k[0] * (inv[0][0] * k[0] + inv[0][1] * k[1]) + k[1] * (inv[1][0] * k[0] + inv[1][1] * k[1]);
        let var = (p.amplitude - quad) * sd * sd;
        let (m, v) = model.posterior(&q);
        assert!(close(m, mean, 1e-10), "{m} vs {mean}");
        assert!(close(v, var, 1e-10), "{v} vs {var}");
    }

    #[test]
    fn scalar_lml() {
        let p = KernelParams::isotropic(1, 1.0, 0.7, 0.2);
        let t = 1.3;
        let v: f64 = 0.9;
        let expected = -0.5 * t * t / v - 0.5 * v.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(close(log_marginal_likelihood(&[vec![0.5]], &[t], &p).unwrap(), expected, 1e-14));
    }

    #[test]
    fn constant_targets_predict_constant() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0]).collect();
        let model = fit_gp(xs, &[0.42; 6], &FitConfig::default()).unwrap();
        for q in [0.0, 0.33, 0.9, 5.0] {
            assert!(close(model.posterior_mean(&[q]), 0.42, 1e-6));
        }
    }

    #[test]
    fn prior_reversion_far_from_data() {
        let p = KernelParams::isotropic(1, 0.1, 1.7, 1e-4);
        let model = GpModel::with_params(vec![vec![0.2], vec![0.5], vec![0.6]], &[1.0, 3.0, 2.0], p).unwrap();
        let (m, v) = model.posterior(&[50.0]);
        assert!(close(m, model.target_mean(), 1e-12));
        assert!(close(v, 1.7 * model.target_std().powi(2), 1e-12));
    }

    #[test]
    fn interpolates_with_tiny_noise() {
        let p = KernelParams::isotropic(1, 0.3, 1.0, 1e-6);
        let xs = vec![vec![0.0], vec![0.5], vec![1.0]];
        let ys = [0.1, 0.9, 0.4];
        let model = GpModel::with_params(xs.clone(), &ys, p).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert!(close(model.posterior_mean(x), y, 1e-3 * model.target_std()));
        }
    }

    #[test]
    fn fit_is_deterministic_and_improves_on_random_params() {
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0, (i * 3 % 8) as f64 / 7.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin() + 0.5 * x[1]).collect();
        let cfg = FitConfig {
            seed: 5,
            ..FitConfig::default()
        };
        let a = fit_gp(xs.clone(), &ys, &cfg).unwrap();
        let b = fit_gp(xs.clone(), &ys, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        let (z, _, _) = standardize(&ys);
        let fitted = log_marginal_likelihood(&xs, &z, a.params()).unwrap();
        let random = KernelParams::isotropic(2, 2.0, 0.1, 0.5);
        assert!(fitted >= log_marginal_likelihood(&xs, &z, &random).unwrap());
    }

    #[test]
    fn fit_extrapolates_a_noiseless_plane() {
        let xs = crate::guided_bo::latin_hypercube(10, 3, &mut seed::rng(&[3]));
        let plane = |x: &[f64]| 1.0 - x.iter().sum::<f64>() / 3.0;
        let ys: Vec<f64> = xs.iter().map(|x| plane(x)).collect();
        let model = fit_gp(xs, &ys, &FitConfig::default()).unwrap();
        for q in [[1.0, 0.3, 0.1], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.9, 0.2]] {
            assert!((model.posterior_mean(&q) - plane(&q)).abs() < 0.05, "{q:?}");
        }
    }

    #[test]
    fn fit_rejects_bad_data() {
        assert!(matches!(
            fit_gp(vec![vec![0.0]], &[1.0], &FitConfig::default()),
            Err(GpError::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit_gp(vec![vec![0.0], vec![1.0]], &[1.0, f64::NAN], &FitConfig::default()),
            Err(GpError::NonFiniteTarget(1))
        ));
    }

    #[test]
    fn batch_means() {
        let p = KernelParams::isotropic(1, 0.3, 1.0, 1e-6);
        let xs = vec![vec![0.0], vec![1.0]];
        let m1 = GpModel::with_params(xs.clone(), &[0.2, 0.4], p.clone()).unwrap();
        let m2 = GpModel::with_params(xs, &[0.9, 0.1], p).unwrap();
        let models = [m1, m2];
        let g = posterior_batch(&models, &[0.0], 2).unwrap();
        assert!(close(g[0], 0.2, 1e-4) && close(g[1], 0.9, 1e-4));
        assert_eq!(g, vec![models[0].posterior_mean(&[0.0]), models[1].posterior_mean(&[0.0])]);
        assert!(posterior_batch(&models, &[0.0], 3).is_err());
    }
}
