//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ADLAB_ACCEPTANCE=3,9` runs a subset.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use adlab::error::Result;
use adlab::experiments::{ExperimentKind, ExperimentReport};
use adlab::flow::{forcing, run_to_times, Dynamics, FlowProblem, Integrator, Snapshot};
use adlab::grid::{make_grid, norm_l2, project_simplex, Grid, GridDensity, GridField};
use adlab::kernel::{make_pair_in_h, sample_rho0, spectral_decompose, KernelOperator};
use adlab::oracles::simplex_qp;
use adlab::rng::rng_from_seed;
use adlab::transport::{w2_1d, w2_exact, w2_l2_bound_check, w2_matching_1d};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const ROOT_SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

/// Verdict from the named checks of a report.
fn from_checks(report: &ExperimentReport, names: &[&str]) -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in names {
        match report.check(name) {
            Some(c) => {
                passed &= c.passed;
                parts.push(format!("{} {} ({})", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail));
            }
            None => {
                passed = false;
                parts.push(format!("FAIL {name} missing"));
            }
        }
    }
    Verdict::new(passed, parts.join("; "))
}

fn run_default(kind: ExperimentKind) -> Result<ExperimentReport> {
    kind.run(&kind.defaults(), ROOT_SEED)
}

fn check_names(report: &ExperimentReport, prefix: &str) -> Vec<String> {
    report.checks.iter().filter(|c| c.name.starts_with(prefix)).map(|c| c.name.clone()).collect()
}

/// The training error does not depend on the samples, so one replicate suffices.
fn training_error() -> Result<Verdict> {
    let kind = ExperimentKind::GeneralizationError;
    let cfg = adlab::experiments::ExperimentConfig {
        n_list: vec![100],
        seeds: 1,
        ..kind.defaults()
    };
    let r = kind.run(&cfg, ROOT_SEED)?;
    Ok(from_checks(&r, &["training_bound", "training_slope"]))
}

fn generalization_gap() -> Result<Verdict> {
    let r = run_default(ExperimentKind::GeneralizationGap)?;
    Ok(from_checks(&r, &["gap_bound_plain", "gap_bound_projected"]))
}

fn early_stopping() -> Result<Verdict> {
    let r = run_default(ExperimentKind::GeneralizationError)?;
    Ok(from_checks(&r, &["theorem_bound", "early_stopping_exponent"]))
}

fn one_time_scale() -> Result<Verdict> {
    let r = run_default(ExperimentKind::OneTimeScale)?;
    Ok(from_checks(&r, &["mode_envelope", "gap_time_slope", "early_stopping_exponent"]))
}

fn memorization() -> Result<Verdict> {
    let r = run_default(ExperimentKind::Memorization)?;
    Ok(from_checks(&r, &["monotone_decay", "final_ratio", "mode_decay"]))
}

fn monte_carlo() -> Result<Verdict> {
    let r = run_default(ExperimentKind::MonteCarloRate)?;
    Ok(from_checks(&r, &["rate_bound", "sqrt_n_scaling"]))
}

fn finite_neuron() -> Result<Verdict> {
    let r = run_default(ExperimentKind::FiniteNeuron)?;
    Ok(from_checks(&r, &["operator_gap_bound", "trajectory_bound"]))
}

fn illposedness() -> Result<Verdict> {
    let r = run_default(ExperimentKind::Illposedness)?;
    let mut names = check_names(&r, "gap_slope");
    names.extend(check_names(&r, "r_"));
    if names.len() != 5 {
        return Ok(Verdict::new(false, format!("expected one slope and four regularizer checks, got {names:?}")));
    }
    Ok(from_checks(&r, &names.iter().map(String::as_str).collect::<Vec<_>>()))
}

fn slow_deterioration() -> Result<Verdict> {
    let r = run_default(ExperimentKind::SlowDeterioration)?;
    let mut names = check_names(&r, "norm_ratio_trend");
    if names.len() != 2 {
        return Ok(Verdict::new(false, format!("expected a norm-ratio trend per sample size, got {names:?}")));
    }
    names.push("lower_bound".into());
    names.push("w1_duality".into());
    Ok(from_checks(&r, &names.iter().map(String::as_str).collect::<Vec<_>>()))
}

fn random_density(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> GridDensity {
    let values = (0..grid.cells()).map(|_| rng.gen::<f64>().powi(2) + 0.01).collect();
    GridDensity::normalized(GridField::new(grid.clone(), values).expect("finite values")).expect("positive mass")
}

fn random_field(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> GridField {
    let values = (0..grid.cells()).map(|_| 4.0 * rng.gen::<f64>() - 1.0).collect();
    GridField::new(grid.clone(), values).expect("finite values")
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = rng_from_seed(ROOT_SEED ^ 0x6d65_7472_6963);
    let mut worst_lp = 0.0f64;
    for i in 0..50 {
        let g = make_grid(1, 8 + 4 * (i % 7))?;
        let (p, q) = (random_density(&g, &mut rng), random_density(&g, &mut rng));
        worst_lp = worst_lp.max((w2_exact(&p, &q)?.0 - w2_1d(&p, &q)?).abs());
    }
    let mut violations = 0;
    for i in 0..70 {
        let g = match i % 3 {
            0 => make_grid(1, 32)?,
            1 => make_grid(2, 6)?,
            _ => make_grid(3, 3)?,
        };
        let (lhs, rhs) = w2_l2_bound_check(&random_field(&g, &mut rng), &random_field(&g, &mut rng))?;
        if lhs > rhs {
            violations += 1;
        }
    }
    let mut worst_matching = 0.0f64;
    let g = make_grid(1, 1024)?;
    for _ in 0..20 {
        let p = random_density(&g, &mut rng);
        let mut steps: Vec<f64> = (0..1024).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = steps.iter().sum::<f64>() * (1.0 + rng.gen::<f64>());
        let mut acc = 0.0;
        for s in steps.iter_mut() {
            acc += *s / total;
            *s = acc;
        }
        let (lhs, rhs) = w2_matching_1d(&steps, &p)?;
        worst_matching = worst_matching.max((lhs - rhs).abs());
    }
    let mut worst_qp = 0.0f64;
    let mut instances = 0;
    for (dim, res) in (2..=12).map(|r| (1, r)).chain([(2, 2), (2, 3), (3, 2)]) {
        let g = make_grid(dim, res)?;
        for _ in 0..40 {
            let f = random_field(&g, &mut rng);
            let p = project_simplex(&f);
            let oracle = simplex_qp(f.values());
            for (a, b) in p.values().iter().zip(&oracle) {
                worst_qp = worst_qp.max((a - b).abs());
            }
            instances += 1;
        }
    }
    let passed = worst_lp <= 1e-6 && violations == 0 && worst_matching <= 1e-3 && worst_qp <= 1e-9;
    Ok(Verdict::new(
        passed,
        format!(
            "LP vs 1-d W2 worst {worst_lp:.3e} over 50 (<= 1e-6); W2-L2 violations {violations} of 70; \
             matching identity worst {worst_matching:.3e} over 20 (<= 1e-3); \
             simplex vs QP worst {worst_qp:.3e} over {instances} instances on grids with at most 12 cells (<= 1e-9)"
        ),
    ))
}

fn cross_integrator() -> Result<Verdict> {
    let g = make_grid(1, 256)?;
    let op = KernelOperator::new(Arc::new(sample_rho0(1, 4096, ROOT_SEED)?), &g)?;
    let spec = spectral_decompose(&op, None)?;
    let pair = make_pair_in_h(&spec, ROOT_SEED, f64::MAX, 1.2)?;
    let f = forcing(&op, &pair.p_star)?;
    let times: Vec<f64> = (0..=50).map(|k| 2.0 * k as f64).collect();
    let mut keep = |s: &Snapshot<'_>| -> Result<Vec<f64>> { Ok(s.p.values().to_vec()) };
    let mut parts = Vec::new();
    let mut passed = true;
    for (label, dynamics, dt) in [
        ("two-time-scale", Dynamics::TwoTimeScale { projected: false }, 0.1 / op.lambda_max()),
        ("one-time-scale", Dynamics::OneTimeScale { c: 1.0 }, 0.1 / op.lambda_max().sqrt()),
    ] {
        let problem = FlowProblem {
            op: &op,
            spec: Some(&spec),
            forcing: &f,
            p0: pair.p0.field(),
            dynamics,
        };
        let rk4 = run_to_times(&problem, &times, dt, Integrator::Rk4, &mut keep)?;
        let exact = run_to_times(&problem, &times, dt, Integrator::SpectralExact, &mut keep)?;
        let mut worst = 0.0f64;
        for (a, b) in rk4.iter().zip(&exact) {
            let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            worst = worst.max(norm_l2(&GridField::new(g.clone(), diff)?));
        }
        passed &= worst <= 1e-5 && rk4.len() == times.len() && exact.len() == times.len();
        parts.push(format!("{label} worst L2 difference {worst:.3e} over {} times", times.len()));
    }
    Ok(Verdict::new(passed, format!("{} (<= 1e-5)", parts.join("; "))))
}

type Criterion = (u32, &'static str, u64, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 11] = [
    (1, "training-error bound", 60, training_error),
    (2, "generalization-gap bound", 900, generalization_gap),
    (3, "early-stopping exponent", 1200, early_stopping),
    (4, "one-time-scale dynamics", 1200, one_time_scale),
    (5, "memorization", 300, memorization),
    (6, "Monte Carlo rate", 300, monte_carlo),
    (7, "finite-neuron bound", 600, finite_neuron),
    (8, "ill-posedness", 300, illposedness),
    (9, "slow deterioration", 900, slow_deterioration),
    (10, "metric-layer oracles", 180, metric_oracles),
    (11, "cross-integrator", 120, cross_integrator),
];

fn main() -> ExitCode {
    let selected: Option<Vec<u32>> = std::env::var("ADLAB_ACCEPTANCE")
        .ok()
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.split(',').map(|s| s.trim().parse().expect("criterion numbers")).collect());
    let mut failed = Vec::new();
    for (id, title, limit, run) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let passed = verdict.passed && in_time;
        println!(
            "{} criterion {id:>2} {title}: {} [{:.1} s, limit {limit} s{}]",
            if passed { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over time" }
        );
        if !passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
