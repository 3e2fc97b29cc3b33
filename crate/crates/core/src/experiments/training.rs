use rayon::prelude::*;

use super::bounds::{
    gap_bound, generalization_error_bound, mc_rate, one_time_scale_error_bound, one_time_scale_gap_bound,
    one_time_scale_rate_schedule, one_time_scale_stop, one_time_scale_training_bound, training_error_sq_bound,
    two_time_scale_rate_schedule, two_time_scale_stop,
};
use super::sampling::sample_density;
use super::stats::{loglog_fit, median};
use super::{fraction_check, population, tags, w2_between, Check, EarlyStopRule, ExperimentConfig, ExperimentKind,
    ExperimentReport, Population, Value};
use crate::error::{Error, Result};
use crate::flow::{
    forcing, run_to_times, solve_one_time_scale_forced, solve_one_time_scale_spectral, solve_two_time_scale_forced,
    solve_two_time_scale_spectral, two_time_scale_dt_limit, Dynamics, FlowProblem, Integrator, DEFAULT_DT_FACTOR,
};
use crate::grid::{norm_l2, project_simplex, GridDensity, GridField};
use crate::rng::{derive_seed, rng_from_seed};

/// Relative level below which the training error counts as floored.
const TRAINING_FLOOR: f64 = 1e-12;

/// Per-mode envelope tolerance.
const ENVELOPE_TOL: f64 = 1e-6;

pub(crate) fn empirical_forcing(pop: &Population, n: usize, seed: usize, root_seed: u64) -> Result<GridField> {
    let mut rng = rng_from_seed(derive_seed(root_seed, &[tags::SAMPLE, seed as u64, n as u64]));
    let s = sample_density(&pop.pair.p_star, n, &mut rng)?;
    forcing(&pop.op, &s)
}

fn plain_path(pop: &Population, f: &GridField, times: &[f64]) -> Result<Vec<GridDensity>> {
    times
        .iter()
        .map(|&t| Ok(project_simplex(&solve_two_time_scale_forced(pop.pair.p0.field(), f, &pop.spec, t)?)))
        .collect()
}

fn projected_path(pop: &Population, f: &GridField, times: &[f64]) -> Result<Vec<GridDensity>> {
    let problem = FlowProblem {
        op: &pop.op,
        spec: None,
        forcing: f,
        p0: pop.pair.p0.field(),
        dynamics: Dynamics::TwoTimeScale { projected: true },
    };
    let mut out = Vec::with_capacity(times.len());
    let dt = DEFAULT_DT_FACTOR * two_time_scale_dt_limit(&pop.op);
    run_to_times(&problem, times, dt, Integrator::Rk4, &mut |snap| {
        out.push(GridDensity::new(snap.p.clone())?);
        Ok(Vec::new())
    })?;
    Ok(out)
}

fn cells(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    (0..cfg.n_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect()
}

/// Empirical and population trajectories under both two-time-scale flows.
pub fn run_generalization_gap(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    let pop = population(cfg, root_seed)?;
    let mut report = ExperimentReport::new(ExperimentKind::GeneralizationGap, cfg, root_seed);
    pop.describe(&mut report);
    report.env("rk4_dt", DEFAULT_DT_FACTOR * two_time_scale_dt_limit(&pop.op));
    let times = &cfg.t_grid;
    let f_pop = forcing(&pop.op, &pop.pair.p_star)?;
    let plain_pop = plain_path(&pop, &f_pop, times)?;
    let proj_pop = projected_path(&pop, &f_pop, times)?;

    let results: Vec<(Vec<f64>, Vec<f64>)> = cells(cfg)
        .par_iter()
        .map(|&(k, s)| {
            let f = empirical_forcing(&pop, cfg.n_list[k], s, root_seed)?;
            let plain = plain_path(&pop, &f, times)?;
            let proj = projected_path(&pop, &f, times)?;
            let gp = (0..times.len()).map(|i| w2_between(&plain_pop[i], &plain[i])).collect::<Result<_>>()?;
            let gq = (0..times.len()).map(|i| w2_between(&proj_pop[i], &proj[i])).collect::<Result<_>>()?;
            Ok((gp, gq))
        })
        .collect::<Result<_>>()?;

    let mut ok_plain = vec![vec![true; cfg.seeds]; cfg.n_list.len()];
    let mut ok_proj = ok_plain.clone();
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let (gp, gq) = &results[k * cfg.seeds + s];
            for (i, &t) in times.iter().enumerate() {
                let b = gap_bound(cfg.dim, n, cfg.delta, t);
                ok_plain[k][s] &= gp[i] <= b;
                ok_proj[k][s] &= gq[i] <= b;
                report.push_row(
                    Some(s),
                    vec![n.into(), t.into(), gp[i].into(), gq[i].into(), b.into(), (gp[i] <= b).into(), (gq[i] <= b).into()],
                );
            }
        }
    }
    report.checks.push(fraction_check("gap_bound_plain", &cfg.n_list, &ok_plain, cfg.delta, "n"));
    report.checks.push(fraction_check("gap_bound_projected", &cfg.n_list, &ok_proj, cfg.delta, "n"));

    if cfg.n_list.len() >= 2 {
        let last = times.len() - 1;
        let med: Vec<f64> = (0..cfg.n_list.len())
            .map(|k| median(&(0..cfg.seeds).map(|s| results[k * cfg.seeds + s].0[last]).collect::<Vec<_>>()))
            .collect();
        let ns: Vec<f64> = cfg.n_list.iter().map(|&n| n as f64).collect();
        report.checks.push(match loglog_fit(&ns, &med) {
            Ok(fit) => Check::new(
                "gap_sqrt_n_scaling",
                (fit.slope + 0.5).abs() <= 0.15,
                fit.slope,
                -0.5,
                format!(
                    "median plain gap at t={} vs n: slope {:.4} +/- {:.4} (target -0.5 +/- 0.15)",
                    times[last], fit.slope, fit.slope_ci
                ),
            ),
            Err(e) => Check::new("gap_sqrt_n_scaling", false, f64::NAN, -0.5, e.to_string()),
        });
    }
    Ok(report)
}

fn stop_time(cfg: &ExperimentConfig, norm_h: f64, n: usize, one_time_scale: bool) -> Result<f64> {
    let rate = mc_rate(cfg.dim, n, cfg.delta);
    match (cfg.early_stop_rule, one_time_scale) {
        (EarlyStopRule::BoundMinimizer, false) => Ok(two_time_scale_stop(norm_h, rate)),
        (EarlyStopRule::BoundMinimizer, true) => Ok(one_time_scale_stop(norm_h, rate)),
        (EarlyStopRule::RateSchedule, _) if cfg.dim < 2 => Err(Error::Config(
            "early_stop_rule: rate_schedule divides by log d and needs dim >= 2".into(),
        )),
        (EarlyStopRule::RateSchedule, false) => Ok(two_time_scale_rate_schedule(norm_h, cfg.dim, n)),
        (EarlyStopRule::RateSchedule, true) => Ok(one_time_scale_rate_schedule(norm_h, cfg.dim, n)),
    }
}

/// Fit of the median stopped error against `n`; passes if the medians
/// decrease and the slope is at most `target + 0.08`.
fn exponent_check(name: &str, ns: &[usize], medians: &[f64], target: f64) -> Check {
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    match loglog_fit(&xs, medians) {
        Ok(fit) => Check::new(
            name,
            decreasing && fit.slope <= target + 0.08,
            fit.slope,
            target + 0.08,
            format!(
                "median error at T(n) {:?}: slope {:.4} +/- {:.4}, decreasing={decreasing}",
                medians, fit.slope, fit.slope_ci
            ),
        ),
        Err(e) => Check::new(name, false, f64::NAN, target + 0.08, e.to_string()),
    }
}

/// Training error, the two-term theorem bound and the early-stopping rate.
pub fn run_generalization_error(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    let pop = population(cfg, root_seed)?;
    let mut report = ExperimentReport::new(ExperimentKind::GeneralizationError, cfg, root_seed);
    pop.describe(&mut report);
    let times = &cfg.t_grid;
    let norm_h = pop.pair.norm_h;
    let p0 = pop.pair.p0.field();
    let p_star = pop.pair.p_star.field();
    let stops: Vec<f64> = cfg.n_list.iter().map(|&n| stop_time(cfg, norm_h, n, false)).collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(times.len());
    let mut violations = Vec::new();
    for &t in times {
        let pt = solve_two_time_scale_spectral(p0, p_star, &pop.spec, t)?;
        let e = norm_l2(&pt.sub(p_star)?).powi(2);
        let b = training_error_sq_bound(norm_h, t);
        if e > b {
            violations.push(format!("t={t}: {e:e} > {b:e}"));
        }
        train.push(e);
        report.push_row(None, vec![Value::Empty, t.into(), "train_error_sq".into(), e.into(), b.into(), (e <= b).into()]);
    }
    report.checks.push(
        Check::new(
            "training_bound",
            violations.is_empty(),
            violations.len() as f64,
            0.0,
            format!("{} violations of ||p_t - p*||^2 <= ||p0 - p*||_H^2 / t over {} times", violations.len(), times.len()),
        )
        .with_failures(violations),
    );
    let e0 = norm_l2(&p0.sub(p_star)?).powi(2);
    let relaxed = 1.0 / pop.spec.lambda_max();
    let window: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= relaxed && train[i] > TRAINING_FLOOR * e0)
        .collect();
    let wt: Vec<f64> = window.iter().map(|&i| times[i]).collect();
    let we: Vec<f64> = window.iter().map(|&i| train[i].sqrt()).collect();
    report.checks.push(match loglog_fit(&wt, &we) {
        Ok(fit) => Check::new(
            "training_slope",
            (-0.7..=-0.4).contains(&fit.slope),
            fit.slope,
            -0.5,
            format!(
                "log-log slope of ||p_t - p*|| over {} pre-floor times t >= 1/lambda_max = {relaxed:.4}: {:.4} +/- {:.4} \
                 (accepted [-0.7, -0.4])",
                fit.points, fit.slope, fit.slope_ci
            ),
        ),
        Err(e) => Check::new("training_slope", false, f64::NAN, -0.5, e.to_string()),
    });

    let results: Vec<(Vec<f64>, f64)> = cells(cfg)
        .par_iter()
        .map(|&(k, s)| {
            let f = empirical_forcing(&pop, cfg.n_list[k], s, root_seed)?;
            let path = plain_path(&pop, &f, times)?;
            let errs = path.iter().map(|q| w2_between(&pop.pair.p_star, q)).collect::<Result<_>>()?;
            let at_stop = project_simplex(&solve_two_time_scale_forced(p0, &f, &pop.spec, stops[k])?);
            Ok((errs, w2_between(&pop.pair.p_star, &at_stop)?))
        })
        .collect::<Result<_>>()?;

    let mut ok = vec![vec![true; cfg.seeds]; cfg.n_list.len()];
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let (errs, stop_err) = &results[k * cfg.seeds + s];
            for (i, &t) in times.iter().enumerate() {
                let b = generalization_error_bound(cfg.dim, n, cfg.delta, norm_h, t);
                ok[k][s] &= errs[i] <= b;
                report.push_row(Some(s), vec![n.into(), t.into(), "error".into(), errs[i].into(), b.into(), (errs[i] <= b).into()]);
            }
            let b = generalization_error_bound(cfg.dim, n, cfg.delta, norm_h, stops[k]);
            report.push_row(
                Some(s),
                vec![n.into(), stops[k].into(), "error_at_stop".into(), (*stop_err).into(), b.into(), (*stop_err <= b).into()],
            );
        }
    }
    report.checks.push(fraction_check("theorem_bound", &cfg.n_list, &ok, cfg.delta, "n"));
    let medians: Vec<f64> = (0..cfg.n_list.len())
        .map(|k| median(&(0..cfg.seeds).map(|s| results[k * cfg.seeds + s].1).collect::<Vec<_>>()))
        .collect();
    report.env("stopping_times", format!("{stops:?}"));
    if cfg.n_list.len() >= 2 {
        report.checks.push(exponent_check("early_stopping_exponent", &cfg.n_list, &medians, -1.0 / 6.0));
    }
    Ok(report)
}

/// Index of the first local maximum of `v` (the last index if none).
pub(crate) fn first_local_max(v: &[f64]) -> usize {
    (1..v.len()).find(|&i| v[i] < v[i - 1]).map_or(v.len() - 1, |i| i - 1)
}

/// Second-order dynamics: envelope, training lemma, gap growth, theorem
/// bound and early stopping.
pub fn run_one_time_scale(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    let c = cfg.c;
    if c > crate::flow::MAX_FRICTION {
        return Err(Error::Config(format!("c: friction {c} exceeds sqrt(2)")));
    }
    let pop = population(cfg, root_seed)?;
    let mut report = ExperimentReport::new(ExperimentKind::OneTimeScale, cfg, root_seed);
    pop.describe(&mut report);
    let times = &cfg.t_grid;
    let norm_h = pop.pair.norm_h;
    let p0 = pop.pair.p0.field();
    let p_star = pop.pair.p_star.field();
    let stops: Vec<f64> = cfg.n_list.iter().map(|&n| stop_time(cfg, norm_h, n, true)).collect::<Result<_>>()?;
    let x0 = pop.spec.coefficients(p0.sub(p_star)?.values());
    let lambdas = pop.spec.eigenvalues();

    let mut pop_path = Vec::with_capacity(times.len());
    let mut train_fail = Vec::new();
    let mut worst_excess = f64::NEG_INFINITY;
    for &t in times {
        let (pt, _) = solve_one_time_scale_spectral(p0, p_star, &pop.spec, c, t)?;
        let u = pt.sub(p_star)?;
        let e = norm_l2(&u);
        let b = one_time_scale_training_bound(norm_h, c, t);
        if e > b {
            train_fail.push(format!("t={t}: {e:e} > {b:e}"));
        }
        report.push_row(None, vec![Value::Empty, t.into(), "train_error".into(), e.into(), b.into(), (e <= b).into()]);
        let xt = pop.spec.coefficients(u.values());
        let excess = (0..xt.len())
            .map(|i| xt[i].abs() - 2f64.sqrt() * x0[i].abs() * (-0.5 * c * lambdas[i] * t).exp())
            .fold(f64::NEG_INFINITY, f64::max);
        worst_excess = worst_excess.max(excess);
        report.push_row(
            None,
            vec![Value::Empty, t.into(), "envelope_excess".into(), excess.into(), 0.0.into(), (excess <= ENVELOPE_TOL).into()],
        );
        pop_path.push(pt);
    }
    report.checks.push(
        Check::new(
            "training_bound",
            train_fail.is_empty(),
            train_fail.len() as f64,
            0.0,
            format!("{} violations of ||p_t - p*|| <= ||p* - p0||_H / sqrt(ct)", train_fail.len()),
        )
        .with_failures(train_fail),
    );
    report.checks.push(Check::new(
        "mode_envelope",
        worst_excess <= ENVELOPE_TOL,
        worst_excess,
        ENVELOPE_TOL,
        format!("largest excess of |x_i(t)| over sqrt(2)|x_i(0)|exp(-c lambda_i t/2): {worst_excess:e}"),
    ));
    let pop_proj: Vec<GridDensity> = pop_path.iter().map(project_simplex).collect();

    struct Cell {
        gap_w2: Vec<f64>,
        gap_l2: Vec<f64>,
        err: Vec<f64>,
        stop_err: f64,
    }
    let zeros = GridField::zeros(pop.grid.clone());
    let results: Vec<Cell> = cells(cfg)
        .par_iter()
        .map(|&(k, s)| {
            let f = empirical_forcing(&pop, cfg.n_list[k], s, root_seed)?;
            let mut cell = Cell {
                gap_w2: Vec::with_capacity(times.len()),
                gap_l2: Vec::with_capacity(times.len()),
                err: Vec::with_capacity(times.len()),
                stop_err: 0.0,
            };
            for (i, &t) in times.iter().enumerate() {
                let (pn, _) = solve_one_time_scale_forced(p0, &zeros, &f, &pop.spec, c, t)?;
                let proj = project_simplex(&pn);
                cell.gap_w2.push(w2_between(&pop_proj[i], &proj)?);
                cell.gap_l2.push(norm_l2(&pop_path[i].sub(&pn)?));
                cell.err.push(w2_between(&pop.pair.p_star, &proj)?);
            }
            let (ps, _) = solve_one_time_scale_forced(p0, &zeros, &f, &pop.spec, c, stops[k])?;
            cell.stop_err = w2_between(&pop.pair.p_star, &project_simplex(&ps))?;
            Ok(cell)
        })
        .collect::<Result<_>>()?;

    let mut ok_err = vec![vec![true; cfg.seeds]; cfg.n_list.len()];
    let mut ok_gap = ok_err.clone();
    let d_over_c = (cfg.dim as f64 / c).sqrt();
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let cell = &results[k * cfg.seeds + s];
            let rate = mc_rate(cfg.dim, n, cfg.delta);
            for (i, &t) in times.iter().enumerate() {
                let bw = d_over_c * rate * t.powf(1.5);
                report.push_row(
                    Some(s),
                    vec![n.into(), t.into(), "gap_w2".into(), cell.gap_w2[i].into(), bw.into(), (cell.gap_w2[i] <= bw).into()],
                );
                let bl = one_time_scale_gap_bound(cfg.dim, n, cfg.delta, c, t);
                ok_gap[k][s] &= cell.gap_l2[i] <= bl;
                report.push_row(
                    Some(s),
                    vec![n.into(), t.into(), "gap_l2".into(), cell.gap_l2[i].into(), bl.into(), (cell.gap_l2[i] <= bl).into()],
                );
                let be = one_time_scale_error_bound(cfg.dim, n, cfg.delta, c, norm_h, t);
                ok_err[k][s] &= cell.err[i] <= be;
                report.push_row(
                    Some(s),
                    vec![n.into(), t.into(), "error".into(), cell.err[i].into(), be.into(), (cell.err[i] <= be).into()],
                );
            }
            let be = one_time_scale_error_bound(cfg.dim, n, cfg.delta, c, norm_h, stops[k]);
            report.push_row(
                Some(s),
                vec![n.into(), stops[k].into(), "error_at_stop".into(), cell.stop_err.into(), be.into(), (cell.stop_err <= be).into()],
            );
        }
    }
    report.checks.push(fraction_check("gap_l2_bound", &cfg.n_list, &ok_gap, cfg.delta, "n"));
    report.checks.push(fraction_check("theorem_bound", &cfg.n_list, &ok_err, cfg.delta, "n"));

    let mut slopes = Vec::new();
    let mut parts = Vec::new();
    for k in 0..cfg.n_list.len() {
        let med: Vec<f64> = (0..times.len())
            .map(|i| median(&(0..cfg.seeds).map(|s| results[k * cfg.seeds + s].gap_w2[i]).collect::<Vec<_>>()))
            .collect();
        let end = first_local_max(&med);
        match loglog_fit(&times[..=end], &med[..=end]) {
            Ok(fit) => {
                parts.push(format!(
                    "n={}: {:.4} +/- {:.4} over t <= {:.4}",
                    cfg.n_list[k],
                    fit.slope,
                    fit.slope_ci,
                    times[end]
                ));
                slopes.push(fit.slope);
            }
            Err(e) => {
                parts.push(format!("n={}: {e}", cfg.n_list[k]));
                slopes.push(f64::NAN);
            }
        }
    }
    let worst = slopes.iter().copied().fold(f64::NAN, |a, s| if (s - 1.5).abs() > (a - 1.5).abs() || a.is_nan() { s } else { a });
    report.checks.push(Check::new(
        "gap_time_slope",
        slopes.iter().all(|s| (1.3..=1.7).contains(s)),
        worst,
        1.5,
        format!(
            "median W2 gap vs t up to its first local maximum: {} (accepted [1.3, 1.7])",
            parts.join("; ")
        ),
    ));
    let medians: Vec<f64> = (0..cfg.n_list.len())
        .map(|k| median(&(0..cfg.seeds).map(|s| results[k * cfg.seeds + s].stop_err).collect::<Vec<_>>()))
        .collect();
    report.env("stopping_times", format!("{stops:?}"));
    if cfg.n_list.len() >= 2 {
        report.checks.push(exponent_check("early_stopping_exponent", &cfg.n_list, &medians, -1.0 / 8.0));
    }
    Ok(report)
}
