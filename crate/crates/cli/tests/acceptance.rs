//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so that the verdict lines are
//! always printed. The process exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use roibo_core::experiment::{generate_candidates, run_budget_sweep, run_experiment, ExperimentConfig, Method, ProviderSpec};
use roibo_core::objectives::builtin_problem;
use roibo_core::pareto::{hypervolume, hypervolume_mc};
use roibo_core::stats::{alpha_max, hb_p_value, hoeffding_p_value, p_value, region_of_interest, RegionOfInterest};
use roibo_core::surrogate::{GpModel, KernelParams};
use roibo_core::{BoConfig, Bound, RiskSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------

fn alpha_max_example() -> Verdict {
    let value = alpha_max(0.05, 0.1, 5000, Bound::Hoeffding).unwrap().value;
    let reps = 1000;
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(alpha_max(std::hint::black_box(0.05), 0.1, 5000, Bound::Hoeffding).unwrap());
    }
    let per_call = start.elapsed() / reps;
    let ok = (value - 0.034826).abs() <= 1e-4 && per_call < Duration::from_millis(1);
    verdict(ok, format!("alpha_max = {value:.6} (target 0.034826 +/- 1e-4), {per_call:?} per call (< 1 ms)"))
}

fn fwer_config(delta: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        ProviderSpec::Builtin {
            name: "fairness-like".into(),
        },
        RiskSpec::new(vec![0.5], delta, 0.1, Bound::HoeffdingBentkus).unwrap(),
    );
    cfg.k = 2000;
    cfg.m = 2000;
    cfg.test_size = 100;
    cfg.trials = 500;
    cfg.seed = 2024;
    cfg
}

fn fwer() -> Verdict {
    // the constrained true mean is 0.1 + 0.8 s, so alpha = 0.5 puts the limit at s = 0.5:
    // half of a uniform pool violates
    let mut lines = Vec::new();
    let mut ok = true;
    for delta in [0.1, 0.05] {
        let report = run_experiment(&fwer_config(delta)).unwrap();
        let a = &report.aggregates;
        let tol = delta + 3.0 * (delta * (1.0 - delta) / 500.0).sqrt();
        let rate = a.violation_rate.unwrap_or(f64::NAN);
        ok &= a.failed == 0 && rate <= tol;
        lines.push(format!(
            "delta={delta}: {}/{} violations, rate {rate:.3} <= {tol:.3}, {} null",
            a.violations, a.completed, a.nulls
        ));
    }
    verdict(ok, lines.join("; "))
}

fn super_uniformity() -> Verdict {
    let draws = 100_000;
    let alpha = 0.1;
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [100usize, 5000] {
        for bound in [Bound::Hoeffding, Bound::HoeffdingBentkus] {
            let binom = Binomial::new(m as u64, alpha).unwrap();
            let mut r = rng(m as u64 * 7 + bound as u64);
            let mut cache: HashMap<u64, f64> = HashMap::new();
            let ps: Vec<f64> = (0..draws)
                .map(|_| {
                    let x = binom.sample(&mut r);
                    *cache
                        .entry(x)
                        .or_insert_with(|| p_value(bound, x as f64 / m as f64, m, alpha).unwrap())
                })
                .collect();
            for u in [0.01, 0.05, 0.1, 0.2] {
                let freq = ps.iter().filter(|&&p| p <= u).count() as f64 / draws as f64;
                let limit = u + 3.0 * (u * (1.0 - u) / draws as f64).sqrt();
                worst = worst.max(freq - limit);
                if freq > limit {
                    ok = false;
                    detail.push(format!("m={m} {bound} u={u}: {freq:.4} > {limit:.4}"));
                }
            }
        }
    }
    if ok {
        detail.push(format!("16 cells, max(freq - limit) = {worst:.4}"));
    }
    verdict(ok, detail.join("; "))
}

fn hb_tightness() -> Verdict {
    let mut r = rng(4);
    let mut violations = 0;
    for _ in 0..10_000 {
        let lhat: f64 = r.random();
        let alpha: f64 = r.random_range(0.001..0.999);
        let m: usize = r.random_range(1..20_000);
        if hb_p_value(lhat, m, alpha).unwrap() > hoeffding_p_value(lhat, m, alpha).unwrap() {
            violations += 1;
        }
    }
    let mut grid_violations = 0;
    for alpha in [0.02, 0.05, 0.1, 0.2, 0.5] {
        for delta in [0.01, 0.05, 0.1, 0.2] {
            for m in [100usize, 500, 1000, 2000, 5000] {
                let h = alpha_max(alpha, delta, m, Bound::Hoeffding).unwrap();
                let hb = alpha_max(alpha, delta, m, Bound::HoeffdingBentkus).unwrap();
                if hb.value < h.value {
                    grid_violations += 1;
                }
            }
        }
    }
    verdict(
        violations == 0 && grid_violations == 0,
        format!("{violations} p-value violations in 1e4 triples, {grid_violations} alpha_max violations on 100 grid points"),
    )
}

fn inclusion_exclusion(points: &[Vec<f64>], r: &[f64]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for mask in 1u32..(1 << n) {
        let vol: f64 = (0..r.len())
            .map(|j| {
                let worst = (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| points[i][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                (r[j] - worst).max(0.0)
            })
            .product();
        total += if mask.count_ones() % 2 == 1 { vol } else { -vol };
    }
    total
}

fn hypervolume_oracles() -> Verdict {
    let mut r = rng(5);
    let mut worst_exact: f64 = 0.0;
    for case in 0..1000 {
        let d = if case % 2 == 0 { 2 } else { 3 };
        let n = r.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(0.0..1.2)).collect()).collect();
        let reference = vec![1.0; d];
        let exact = hypervolume(&pts, &reference).unwrap();
        worst_exact = worst_exact.max((exact - inclusion_exclusion(&pts, &reference)).abs());
    }
    let mut mc_fail = 0;
    let mut worst_z: f64 = 0.0;
    for case in 0..50u64 {
        let d = 2 + (case % 2) as usize;
        let n = r.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let reference = vec![1.0; d];
        let exact = hypervolume(&pts, &reference).unwrap();
        let est = hypervolume_mc(&pts, &reference, 1_000_000, 100 + case).unwrap();
        let diff = (exact - est.value).abs();
        if est.std_error > 0.0 {
            worst_z = worst_z.max(diff / est.std_error);
        }
        if diff > 3.0 * est.std_error + 1e-12 {
            mc_fail += 1;
        }
    }
    verdict(
        worst_exact <= 1e-10 && mc_fail == 0,
        format!("max |exact - incl/excl| = {worst_exact:.2e} over 1000 fronts; MC: {mc_fail}/50 outside 3 SE (max z {worst_z:.2})"),
    )
}

/// Solves `a x = b` by Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
        }
        b[col] /= p;
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[col][j];
                    }
                    b[i] -= f * b[col];
                }
            }
        }
    }
    b
}

fn se_kernel(a: &[f64], b: &[f64], ls: &[f64], amp: f64) -> f64 {
    let s: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    amp * (-0.5 * s).exp()
}

fn gp_correctness() -> Verdict {
    let mut r = rng(6);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut negative = 0;
    let mut queries = 0;
    for _ in 0..100 {
        let dim = r.random_range(1..=3);
        let n = r.random_range(1..=10);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let params = KernelParams {
            length_scales: (0..dim).map(|_| r.random_range(0.05..2.0)).collect(),
            amplitude: r.random_range(0.1..3.0),
            noise_var: r.random_range(1e-4..0.5),
        };
        let model = GpModel::with_params(x.clone(), &y, params.clone()).unwrap();

        // oracle, from scratch: population z-scores, dense solve, de-standardization
        let mean_y = y.iter().sum::<f64>() / n as f64;
        let std_y = (y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let z: Vec<f64> = y.iter().map(|v| (v - mean_y) / std_y).collect();
        let diag = params.noise_var + model.jitter();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| se_kernel(&x[i], &x[j], &params.length_scales, params.amplitude) + if i == j { diag } else { 0.0 })
                    .collect()
            })
            .collect();
        let alpha = gauss_jordan(gram.clone(), z);
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| r.random_range(-0.5..1.5)).collect();
            let kq: Vec<f64> = x.iter().map(|xi| se_kernel(xi, &q, &params.length_scales, params.amplitude)).collect();
            let mean = mean_y + std_y * kq.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
            let v = gauss_jordan(gram.clone(), kq.clone());
            let var = (params.amplitude - kq.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).max(0.0) * std_y * std_y;
            let (m_hat, v_hat) = model.posterior(&q);
            worst_mean = worst_mean.max((m_hat - mean).abs() / mean.abs().max(1.0));
            worst_var = worst_var.max((v_hat - var).abs() / var.abs().max(1.0));
            if v_hat < 0.0 {
                negative += 1;
            }
            queries += 1;
        }
    }

    // noiseless interpolation on well separated points
    let mut worst_interp: f64 = 0.0;
    for case in 0..20 {
        let n = 3 + case % 6;
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let y: Vec<f64> = x.iter().map(|p| (7.0 * p[0] + case as f64).sin()).collect();
        let params = KernelParams::isotropic(1, 0.2, 1.0, 1e-12);
        let model = GpModel::with_params(x.clone(), &y, params).unwrap();
        for (p, t) in x.iter().zip(&y) {
            worst_interp = worst_interp.max((model.posterior_mean(p) - t).abs());
        }
    }
    let ok = worst_mean <= 1e-8 && worst_var <= 1e-8 && worst_interp <= 1e-6 && negative == 0;
    verdict(
        ok,
        format!(
            "100 models / {queries} queries: max mean err {worst_mean:.1e}, max var err {worst_var:.1e}, \
             {negative} negative variances; interpolation err {worst_interp:.1e}"
        ),
    )
}

fn pruning_config(method: Method, seed: u64, budget: usize, init: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        ProviderSpec::Builtin {
            name: "pruning-like".into(),
        },
        RiskSpec::new(vec![0.1], 0.1, 0.1, Bound::HoeffdingBentkus).unwrap(),
    );
    cfg.method = method;
    cfg.seed = seed;
    cfg.trials = 1;
    cfg.bo.budget = budget;
    cfg.bo.init_size = init;
    cfg
}

fn guided_vs_random() -> Verdict {
    let seeds = 30u64;
    let mut free = HashMap::new();
    let mut in_region = 0;
    let mut guided_non_null = 0;
    let mut random_in_region = 0;
    let mut random_non_null = 0;
    for method in [Method::Guided, Method::RandomLhs] {
        let mut values = Vec::new();
        for s in 0..seeds {
            let report = run_experiment(&pruning_config(method, s, 20, 10)).unwrap();
            let row = &report.rows[0];
            if let Some(v) = row.free_value.filter(|_| !row.is_null()) {
                values.push(v);
                let inside = row.in_region == Some(true);
                if method == Method::Guided {
                    guided_non_null += 1;
                    in_region += inside as usize;
                } else {
                    random_non_null += 1;
                    random_in_region += inside as usize;
                }
            }
        }
        free.insert(method, values.iter().sum::<f64>() / values.len().max(1) as f64);
    }
    let (g, r) = (free[&Method::Guided], free[&Method::RandomLhs]);
    let frac = in_region as f64 / guided_non_null.max(1) as f64;
    let rfrac = random_in_region as f64 / random_non_null.max(1) as f64;
    verdict(
        g <= r && frac >= 0.6,
        format!(
            "mean free objective guided {g:.4} vs random_lhs {r:.4}; in region: guided {in_region}/{guided_non_null} ({frac:.2}), \
             random_lhs {random_in_region}/{random_non_null} ({rfrac:.2})"
        ),
    )
}

fn budget_sweep() -> Verdict {
    let seeds = 30u64;
    let (mut wins, mut losses, mut ties, mut dropped) = (0u64, 0u64, 0u64, 0u64);
    let (mut sum10, mut sum50, mut n_pairs) = (0.0, 0.0, 0.0);
    for s in 0..seeds {
        let rows = run_budget_sweep(&pruning_config(Method::Guided, s, 50, 30), &[10, 50]).unwrap();
        match (rows[0].free_values[0], rows[1].free_values[0]) {
            (Some(a), Some(b)) => {
                sum10 += a;
                sum50 += b;
                n_pairs += 1.0;
                if b < a {
                    wins += 1;
                } else if b > a {
                    losses += 1;
                } else {
                    ties += 1;
                }
            }
            _ => dropped += 1,
        }
    }
    // one-sided sign test: P(Binom(wins + losses, 1/2) >= wins)
    let n = wins + losses;
    let p: f64 = (wins..=n)
        .map(|j| {
            let ln_choose: f64 = (1..=n).map(|i| (i as f64).ln()).sum::<f64>()
                - (1..=j).map(|i| (i as f64).ln()).sum::<f64>()
                - (1..=n - j).map(|i| (i as f64).ln()).sum::<f64>();
            (ln_choose - n as f64 * std::f64::consts::LN_2).exp()
        })
        .sum();
    let (m10, m50) = (sum10 / n_pairs, sum50 / n_pairs);
    verdict(
        m50 <= m10 && p < 0.05,
        format!(
            "mean free N=10 {m10:.4}, N=50 {m50:.4}; N=50 better in {wins}, worse in {losses}, ties {ties}, \
             dropped {dropped}; sign test p = {p:.2e}"
        ),
    )
}

fn baseline_equivalence() -> Verdict {
    let problem = builtin_problem("pruning-like").unwrap();
    let spec = RiskSpec::new(vec![0.2], 0.1, 0.1, Bound::HoeffdingBentkus).unwrap();
    let region = region_of_interest(&spec, 2000, 2000).unwrap();
    let whole = RegionOfInterest::whole_space(1, Bound::HoeffdingBentkus, 2000, 2000);
    let bo = BoConfig {
        budget: 15,
        init_size: 5,
        seed: 31,
        ..BoConfig::default()
    };
    let lines = |log: &[roibo_core::IterationLog]| -> String {
        log.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect()
    };
    let plain = generate_candidates(Method::PlainHvi, &problem, &spec, &region, 2000, 77, &bo).unwrap();
    let guided_whole = generate_candidates(Method::Guided, &problem, &spec, &whole, 2000, 77, &bo).unwrap();
    let guided = generate_candidates(Method::Guided, &problem, &spec, &region, 2000, 77, &bo).unwrap();
    let (a, b) = (lines(&plain.log), lines(&guided_whole.log));
    verdict(
        a == b && !a.is_empty() && a != lines(&guided.log),
        format!(
            "plain_hvi vs guided with whole-space region: {} log bytes, identical = {}",
            a.len(),
            a == b
        ),
    )
}

fn cli_determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_roibo");
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        Command::new(bin)
            .args(["run", "--problem", "fairness-like", "--alpha", "0.5", "--trials", "3", "--seed", "17", "--out"])
            .arg(out)
            .output()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (ra, rb) = (run(&a), run(&b));
    let read = |p: &Path| std::fs::read(p.join("results.json")).unwrap_or_default();
    let (ja, jb) = (read(&a), read(&b));
    verdict(
        ra.status.success() && rb.status.success() && !ja.is_empty() && ja == jb,
        format!(
            "exit {:?}/{:?}, results.json {} bytes, identical = {}",
            ra.status.code(),
            rb.status.code(),
            ja.len(),
            ja == jb
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 10] = [
        ("alpha_max worked example", alpha_max_example),
        ("FWER on fairness-like", fwer),
        ("p-value super-uniformity", super_uniformity),
        ("HB tightness", hb_tightness),
        ("hypervolume oracles", hypervolume_oracles),
        ("GP correctness", gp_correctness),
        ("guided vs random_lhs on pruning-like", guided_vs_random),
        ("budget sweep N=10 vs N=50", budget_sweep),
        ("plain_hvi equivalence", baseline_equivalence),
        ("CLI determinism", cli_determinism),
    ];
    // the timing criterion runs alone; the rest in parallel
    let first = {
        let start = Instant::now();
        (criteria[0].1(), start.elapsed())
    };
    let rest: Vec<(Verdict, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria[1..]
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let start = Instant::now();
                    (f(), start.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    let mut failed = 0;
    for (i, ((name, _), (v, took))) in criteria.iter().zip(std::iter::once(first).chain(rest)).enumerate() {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        failed += !v.pass as usize;
        println!("acceptance {:>2} {tag}: {name}: {} [{:.1}s]", i + 1, v.detail, took.as_secs_f64());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
