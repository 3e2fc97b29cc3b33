use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::bounds::slow_deterioration_lower_bound;
use super::sampling::sample_density;
use super::stats::median;
use super::{fraction_check, tags, Check, ExperimentConfig, ExperimentKind, ExperimentReport, Value};
use crate::error::{Error, Result};
use crate::grid::{make_grid, Grid, GridDensity};
use crate::kernel::{feature_matrix, sample_rho0, FeatureEnsemble};
use crate::rng::{derive_seed, rng_from_seed};
use crate::transport::w1_dual;

/// Random points used to compare the grid Lipschitz estimate with the
/// gradient away from cell centers.
const LIPSCHITZ_PROBES: usize = 4096;

/// Duality residual accepted for the W1 potential.
const DUALITY_TOL: f64 = 1e-7;

/// Gradient of the finite-feature discriminator at every cell center.
struct GradientMaps {
    /// `B_k[i, j] = 1[w_j·x_i + b_j > 0] w_jk`, one matrix per axis.
    axes: Vec<DMatrix<f64>>,
    m: f64,
}

impl GradientMaps {
    fn new(ens: &FeatureEnsemble, grid: &Grid) -> Self {
        let axes = (0..grid.dim())
            .map(|k| {
                DMatrix::from_fn(grid.cells(), ens.m(), |i, j| {
                    if ens.preactivation(j, grid.center(i)) > 0.0 {
                        ens.weight(j)[k]
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        GradientMaps {
            axes,
            m: ens.m() as f64,
        }
    }

    /// Largest gradient norm over the cells and the cell attaining it.
    fn lipschitz(&self, a: &DVector<f64>) -> (f64, usize, Vec<f64>) {
        let grads: Vec<DVector<f64>> = self.axes.iter().map(|b| b * a / self.m).collect();
        let mut best = (0.0, 0);
        for i in 0..grads[0].len() {
            let n2: f64 = grads.iter().map(|g| g[i] * g[i]).sum();
            if n2 > best.0 {
                best = (n2, i);
            }
        }
        let dir = grads.iter().map(|g| g[best.1]).collect();
        (best.0.sqrt(), best.1, dir)
    }
}

/// Halvings allowed when a step would lower the penalised objective.
const MAX_HALVINGS: u32 = 0;

/// Penalised objective at a coefficient vector, with the cell where the
/// Lipschitz estimate is attained.
struct Eval {
    objective: f64,
    lip: f64,
    argmax: usize,
    dir: Vec<f64>,
}

struct Ascent<'a> {
    g: &'a DVector<f64>,
    maps: &'a GradientMaps,
    ens: &'a FeatureEnsemble,
    grid: &'a Grid,
    penalty: f64,
}

impl Ascent<'_> {
    fn eval(&self, a: &DVector<f64>) -> Eval {
        let (lip, argmax, dir) = self.maps.lipschitz(a);
        let objective = a.dot(self.g) / self.maps.m - self.penalty * (lip - 1.0).max(0.0);
        Eval {
            objective,
            lip,
            argmax,
            dir,
        }
    }

    fn subgradient(&self, e: &Eval) -> DVector<f64> {
        let mut grad = self.g.clone();
        if e.lip > 1.0 {
            let u: Vec<f64> = e.dir.iter().map(|v| v / e.lip).collect();
            let x = self.grid.center(e.argmax);
            for j in 0..self.ens.m() {
                if self.ens.preactivation(j, x) > 0.0 {
                    let wu: f64 = self.ens.weight(j).iter().zip(&u).map(|(w, u)| w * u).sum();
                    grad[j] -= self.penalty * wu;
                }
            }
        }
        grad
    }

    /// Euler step of length `h`, split in two halves whenever the full step
    /// would lower the objective.
    fn advance(&self, a: DVector<f64>, e: Eval, h: f64, depth: u32) -> (DVector<f64>, Eval) {
        let trial = &a + self.subgradient(&e) * h;
        let te = self.eval(&trial);
        if te.objective >= e.objective || depth == MAX_HALVINGS {
            return (trial, te);
        }
        let (mid, me) = self.advance(a, e, 0.5 * h, depth + 1);
        self.advance(mid, me, 0.5 * h, depth + 1)
    }
}

struct Trajectory {
    rows: Vec<[f64; 6]>,
    ok: bool,
    duality: f64,
    w1: f64,
    start_distance: f64,
    objective_drop: f64,
    probe_slack: f64,
    /// Time at which the penalty first switches on.
    activation: f64,
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a
        .iter()
        .zip(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| (lo.min(x - y), hi.max(x - y)));
    (hi - lo) / 2.0
}

fn ascend(cfg: &ExperimentConfig, root_seed: u64, grid: &std::sync::Arc<Grid>, n: usize, s: usize, steps: &[usize]) -> Result<Trajectory> {
    let uniform = GridDensity::uniform(grid.clone());
    let mut rng = rng_from_seed(derive_seed(root_seed, &[tags::SAMPLE, s as u64, n as u64]));
    let atoms = sample_density(&uniform, n, &mut rng)?;
    let ens = sample_rho0(cfg.dim, cfg.m_model, derive_seed(root_seed, &[tags::MODEL, s as u64, n as u64]))?;
    let m = ens.m();
    let phi = feature_matrix(&ens, grid)?;
    let atom_mean = ens.atom_moments(&atoms)?;
    let cell = grid.cell_weight();
    let g: DVector<f64> = DVector::from_fn(m, |j, _| atom_mean[j] - phi.matrix().row(j).sum() * cell);
    let maps = GradientMaps::new(&ens, grid);
    let star = w1_dual(&uniform, &atoms)?;

    let ascent = Ascent {
        g: &g,
        maps: &maps,
        ens: &ens,
        grid,
        penalty: cfg.penalty,
    };
    let mut a = DVector::zeros(m);
    let mut e = ascent.eval(&a);
    let mut rows = Vec::with_capacity(steps.len());
    let mut ok = true;
    let mut best_objective = f64::NEG_INFINITY;
    let mut objective_drop: f64 = 0.0;
    let mut next = 0;
    let last = steps.last().copied().unwrap_or(0);
    // Until the penalty switches on the iterates are exactly k dt g.
    let (lip_g, _, _) = maps.lipschitz(&g);
    let free = if lip_g > 0.0 { (1.0 / (cfg.ascent_dt * lip_g)).floor() as usize + 1 } else { usize::MAX };
    let mut step = 0;
    loop {
        if step < free {
            let stop = steps.get(next).copied().unwrap_or(last).min(free).min(last);
            if stop > step {
                step = stop;
                a = &g * (step as f64 * cfg.ascent_dt);
                e = ascent.eval(&a);
            }
        }
        if e.objective > cfg.loss_ceiling {
            return Err(Error::Integration(format!(
                "ascent diverged at step {step}: objective {:.6e} exceeds loss_ceiling {}",
                e.objective, cfg.loss_ceiling
            )));
        }
        if next < steps.len() && steps[next] == step {
            let t = step as f64 * cfg.ascent_dt;
            let norm_a = a.norm() / (m as f64).sqrt();
            let d_t = phi.matrix().transpose() * &a / m as f64;
            let dist = sup_distance(d_t.as_slice(), star.potential.values());
            let bound = slow_deterioration_lower_bound(cfg.dim, n, cfg.delta, norm_a);
            if t > 0.0 {
                ok &= dist >= bound;
                objective_drop = objective_drop.max(best_objective - e.objective);
                best_objective = best_objective.max(e.objective);
            }
            rows.push([t, norm_a, e.objective, e.lip, dist, bound]);
            next += 1;
        }
        if step == last {
            break;
        }
        (a, e) = ascent.advance(a, e, cfg.ascent_dt, 0);
        step += 1;
    }

    let (grid_lip, _, _) = maps.lipschitz(&a);
    let mut probe_rng = rng_from_seed(derive_seed(root_seed, &[tags::TRIAL, s as u64, n as u64]));
    let mut probe_max: f64 = 0.0;
    let mut x = vec![0.0; cfg.dim];
    for _ in 0..LIPSCHITZ_PROBES {
        x.iter_mut().for_each(|v| *v = probe_rng.gen::<f64>());
        let mut grad = vec![0.0; cfg.dim];
        for j in 0..m {
            if ens.preactivation(j, &x) > 0.0 {
                for (gk, wk) in grad.iter_mut().zip(ens.weight(j)) {
                    *gk += a[j] * wk / m as f64;
                }
            }
        }
        probe_max = probe_max.max(grad.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(Trajectory {
        start_distance: sup_distance(&vec![0.0; grid.cells()], star.potential.values()),
        rows,
        ok,
        duality: (star.value - star.primal).abs(),
        w1: star.value,
        objective_drop,
        probe_slack: probe_max - grid_lip,
        activation: free as f64 * cfg.ascent_dt,
    })
}

/// Subgradient ascent of a Lipschitz-penalised finite-feature discriminator
/// against the empirical W1 objective, with `P` fixed at the uniform target.
pub fn run_slow_deterioration(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    if cfg.ascent_dt <= 0.0 {
        return Err(Error::Config("ascent_dt: must be positive".into()));
    }
    let steps: Vec<usize> = std::iter::once(0)
        .chain(cfg.t_grid.iter().map(|t| (t / cfg.ascent_dt).round() as usize))
        .collect();
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("t_grid: times must be increasing multiples of ascent_dt".into()));
    }
    if *steps.last().unwrap_or(&0) > cfg.ascent_steps {
        return Err(Error::Config(format!(
            "ascent_steps: t_grid needs {} steps, only {} configured",
            steps.last().unwrap_or(&0),
            cfg.ascent_steps
        )));
    }
    let grid = make_grid(cfg.dim, cfg.res)?;
    let mut report = ExperimentReport::new(ExperimentKind::SlowDeterioration, cfg, root_seed);
    report.env("grid_cells", grid.cells());
    report.env("w1_solver", "network simplex on snapped atoms, lp cap 1024 cells");

    let cells: Vec<(usize, usize)> = (0..cfg.n_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect();
    let runs: Vec<Trajectory> = cells
        .par_iter()
        .map(|&(k, s)| ascend(cfg, root_seed, &grid, cfg.n_list[k], s, &steps))
        .collect::<Result<_>>()?;

    let mut ok = vec![vec![true; cfg.seeds]; cfg.n_list.len()];
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let run = &runs[k * cfg.seeds + s];
            ok[k][s] = run.ok;
            for r in &run.rows {
                let ratio = if r[0] > 0.0 { Value::Float(r[1] / r[0].sqrt()) } else { Value::Empty };
                report.push_row(
                    Some(s),
                    vec![n.into(), r[0].into(), r[1].into(), ratio, r[2].into(), r[3].into(), r[4].into(), r[5].into(), (r[4] >= r[5]).into()],
                );
            }
        }
    }

    report.checks.push(fraction_check("lower_bound", &cfg.n_list, &ok, cfg.delta, "n"));

    for (k, &n) in cfg.n_list.iter().enumerate() {
        let group = &runs[k * cfg.seeds..(k + 1) * cfg.seeds];
        let burn_in = median(&group.iter().map(|r| r.activation).collect::<Vec<_>>());
        let tail_start = steps
            .iter()
            .position(|&st| st as f64 * cfg.ascent_dt >= burn_in)
            .unwrap_or(steps.len());
        if steps.len() < tail_start + 2 {
            report.checks.push(Check::new(
                &format!("norm_ratio_trend_n{n}"),
                false,
                burn_in,
                *cfg.t_grid.last().unwrap_or(&0.0),
                format!("fewer than two recorded times after the penalty switches on at the median t = {burn_in:.4}"),
            ));
            continue;
        }
        let ratios: Vec<f64> = (tail_start..steps.len())
            .map(|i| median(&group.iter().map(|r| r.rows[i][1] / r.rows[i][0].sqrt()).collect::<Vec<_>>()))
            .collect();
        let rising = group
            .iter()
            .filter(|r| r.rows[tail_start..].windows(2).any(|w| w[1][1] / w[1][0].sqrt() > w[0][1] / w[0][0].sqrt()))
            .count();
        let worst = ratios.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        report.checks.push(Check::new(
            &format!("norm_ratio_trend_n{n}"),
            ratios.windows(2).all(|w| w[1] <= w[0]),
            worst,
            0.0,
            format!(
                "median ||a_t||/sqrt(t) over recorded t >= {} (median penalty switch-on t = {burn_in:.4}): {ratios:?}; {rising} of {} seeds rise somewhere",
                steps[tail_start] as f64 * cfg.ascent_dt,
                cfg.seeds
            ),
        ));
    }

    let duality = runs.iter().map(|r| r.duality).fold(0.0, f64::max);
    report.checks.push(Check::new(
        "w1_duality",
        duality <= DUALITY_TOL,
        duality,
        DUALITY_TOL,
        format!("largest |dual - primal| of the W1 potential: {duality:e}"),
    ));

    let zero_fail: Vec<String> = cells
        .iter()
        .zip(&runs)
        .filter(|(_, r)| r.start_distance < 0.5 * r.w1)
        .map(|(&(k, s), r)| format!("n={} seed={s}: {} < {}", cfg.n_list[k], r.start_distance, 0.5 * r.w1))
        .collect();
    report.checks.push(
        Check::new(
            "zero_start_distance",
            zero_fail.is_empty(),
            zero_fail.len() as f64,
            0.0,
            "at a = 0 the distance to D_* is at least half the W1 value".to_string(),
        )
        .with_failures(zero_fail),
    );

    let drop = runs.iter().map(|r| r.objective_drop).fold(0.0, f64::max);
    let top = runs
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row[2]))
        .fold(f64::NEG_INFINITY, f64::max);
    report.checks.push(Check::new(
        "objective_monotone",
        drop <= 1e-3 * top.abs().max(1e-12),
        drop,
        1e-3 * top.abs(),
        format!("largest decrease of the penalised objective between recorded times: {drop:e}; largest value {top:e}"),
    ));
    let slack = runs.iter().map(|r| r.probe_slack).fold(f64::NEG_INFINITY, f64::max);
    report.env("lipschitz_probe_slack", slack);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_shift_distance() {
        assert_eq!(sup_distance(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]), 0.0);
        assert_eq!(sup_distance(&[0.0, 2.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn small_run() {
        let cfg = ExperimentConfig {
            res: 16,
            m_model: 64,
            n_list: vec![16],
            seeds: 3,
            t_grid: vec![1.0, 2.0, 4.0],
            ascent_steps: 200,
            ..ExperimentKind::SlowDeterioration.defaults()
        };
        let r = run_slow_deterioration(&cfg, 3).unwrap();
        assert_eq!(r.rows.len(), 3 * 4);
        assert!(r.check("w1_duality").unwrap().passed);
        assert!(r.check("zero_start_distance").unwrap().passed);
    }

    #[test]
    fn steps_must_cover_the_time_grid() {
        let cfg = ExperimentConfig {
            ascent_steps: 10,
            ..ExperimentKind::SlowDeterioration.defaults()
        };
        assert!(matches!(run_slow_deterioration(&cfg, 1), Err(Error::Config(_))));
    }
}
