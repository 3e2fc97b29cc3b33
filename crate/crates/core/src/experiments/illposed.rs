use rayon::prelude::*;

use super::sampling::sample_density;
use super::stats::{loglog_fit, median};
use super::{tags, Check, ExperimentConfig, ExperimentKind, ExperimentReport};
use crate::error::{Error, Result};
use crate::grid::{make_grid, GridDensity, SampleSet};
use crate::rng::{derive_seed, rng_from_seed};

/// Excess over `−d/2` of the singular exponent.
const EXPONENT_SHIFT: f64 = 1.1;

/// Largest admissible resolution.
const MAX_RES: usize = 48;

const RADIAL_NODES: usize = 4000;
const TABLE_POINTS: usize = 8000;
const TABLE_MIN: f64 = 1e-4;

/// Radial profile `g(s) = (η * |·|^α)(s)` of the unit-radius mollified power
/// in three dimensions, tabulated with its derivative.
///
/// `η` is the standard bump `exp(−1/(1−|y|²))` on the unit ball. The
/// spherical mean of `|·|^α` over a sphere of radius `ρ` at distance `s` is
/// `((s+ρ)^{α+2} − |s−ρ|^{α+2}) / (2(α+2)sρ)`; the radial integral is done by
/// the midpoint rule.
#[derive(Debug, Clone)]
pub struct MollifiedProfile {
    alpha: f64,
    log_step: f64,
    s_max: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
    at_zero: f64,
}

fn spherical_mean(alpha: f64, s: f64, rho: f64) -> (f64, f64) {
    if s < 1e-10 {
        return (rho.powf(alpha), 0.0);
    }
    let b = alpha + 2.0;
    let d = s - rho;
    let m = ((s + rho).powf(b) - d.abs().powf(b)) / (2.0 * b * s * rho);
    let dm = ((s + rho).powf(b - 1.0) - d.signum() * d.abs().powf(b - 1.0)) / (2.0 * s * rho) - m / s;
    (m, dm)
}

/// Profile for exponent `alpha` tabulated on `[0, s_max]`.
pub fn mollified_profile(alpha: f64, s_max: f64) -> MollifiedProfile {
    let width = 1.0 / RADIAL_NODES as f64;
    let nodes: Vec<(f64, f64)> = (0..RADIAL_NODES)
        .map(|k| {
            let rho = (k as f64 + 0.5) * width;
            (rho, rho * rho * (-1.0 / (1.0 - rho * rho)).exp())
        })
        .collect();
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    let eval = |s: f64| {
        nodes.iter().fold((0.0, 0.0), |(g, dg), &(rho, w)| {
            let (m, dm) = spherical_mean(alpha, s, rho);
            (g + w * m, dg + w * dm)
        })
    };
    let s_max = s_max.max(2.0 * TABLE_MIN);
    let log_step = (s_max / TABLE_MIN).ln() / (TABLE_POINTS - 1) as f64;
    let (values, slopes): (Vec<f64>, Vec<f64>) = (0..TABLE_POINTS)
        .into_par_iter()
        .map(|k| {
            let (g, dg) = eval(TABLE_MIN * (log_step * k as f64).exp());
            (g / total, dg / total)
        })
        .unzip();
    MollifiedProfile {
        alpha,
        log_step,
        s_max,
        values,
        slopes,
        at_zero: eval(0.0).0 / total,
    }
}

impl MollifiedProfile {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(g(s), g'(s))`; beyond the table the unmollified power is used.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        if s >= self.s_max {
            return (s.powf(self.alpha), self.alpha * s.powf(self.alpha - 1.0));
        }
        if s < TABLE_MIN {
            let w = s / TABLE_MIN;
            return (self.at_zero + w * (self.values[0] - self.at_zero), w * self.slopes[0]);
        }
        let pos = (s / TABLE_MIN).ln() / self.log_step;
        let k = (pos.floor() as usize).min(TABLE_POINTS - 2);
        let w = pos - k as f64;
        let lerp = |v: &[f64]| v[k] + w * (v[k + 1] - v[k]);
        (lerp(&self.values), lerp(&self.slopes))
    }
}

struct Ladder {
    gap: Vec<f64>,
    regs: [Vec<f64>; 4],
}

fn evaluate(profile: &MollifiedProfile, atoms: &SampleSet, centers: &[f64], cell: f64, eps: f64) -> (f64, [f64; 4]) {
    let alpha = profile.alpha();
    let d = 3;
    let n = atoms.len();
    let field = |x: &[f64], grad: Option<&mut [f64; 3]>| -> f64 {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for l in 0..n {
            let a = atoms.point(l);
            let diff = [x[0] - a[0], x[1] - a[1], x[2] - a[2]];
            let r = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            let (gv, dg) = profile.eval(r / eps);
            v += eps.powf(alpha) * gv;
            if r > 0.0 {
                let s = eps.powf(alpha - 1.0) * dg / r;
                for k in 0..d {
                    g[k] += s * diff[k];
                }
            }
        }
        if let Some(out) = grad {
            *out = g;
        }
        v
    };
    let on_atoms: f64 = (0..n).map(|l| field(atoms.point(l), None)).sum::<f64>() / n as f64;
    let mut mean = 0.0;
    let mut regs = [0.0; 4];
    for x in centers.chunks_exact(d) {
        let mut g = [0.0; 3];
        let v = field(x, Some(&mut g));
        let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        mean += v;
        regs[0] += v * v;
        regs[1] += gn * gn;
        regs[2] += (1.0 - gn).powi(2);
        regs[3] += (gn - 1.0).max(0.0).powi(2);
    }
    regs.iter_mut().for_each(|r| *r *= cell);
    (on_atoms - mean * cell, regs)
}

/// Growth of the regularised objective along a mollifier ladder.
pub fn run_illposedness_demo(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    if cfg.dim != 3 {
        return Err(Error::Config(format!("dim: the mollified construction is three-dimensional, got {}", cfg.dim)));
    }
    if cfg.res > MAX_RES {
        return Err(Error::Config(format!("res: at most {MAX_RES}, got {}", cfg.res)));
    }
    if cfg.eps_ladder.len() < 3 {
        return Err(Error::Config("eps_ladder: needs at least three radii".into()));
    }
    if *cfg.eps_ladder.last().unwrap_or(&0.0) < 1.0 {
        return Err(Error::Config("eps_ladder: smallest radius is below one cell width".into()));
    }
    let grid = make_grid(cfg.dim, cfg.res)?;
    let width = grid.cell_width();
    let eps: Vec<f64> = cfg.eps_ladder.iter().map(|e| e * width).collect();
    let alpha = -(cfg.dim as f64) / 2.0 + EXPONENT_SHIFT;
    let profile = mollified_profile(alpha, 3f64.sqrt() / eps[eps.len() - 1] * 1.01);
    let uniform = GridDensity::uniform(grid.clone());

    let mut report = ExperimentReport::new(ExperimentKind::Illposedness, cfg, root_seed);
    report.env("exponent", alpha);
    report.env("profile_at_zero", profile.eval(0.0).0);
    report.env("radial_nodes", RADIAL_NODES);

    let cells: Vec<(usize, usize)> = (0..cfg.n_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect();
    let results: Vec<Ladder> = cells
        .par_iter()
        .map(|&(k, s)| {
            let n = cfg.n_list[k];
            let mut rng = rng_from_seed(derive_seed(root_seed, &[tags::SAMPLE, s as u64, n as u64]));
            let atoms = sample_density(&uniform, n, &mut rng)?;
            let mut out = Ladder {
                gap: Vec::new(),
                regs: Default::default(),
            };
            for &e in &eps {
                let (gap, regs) = evaluate(&profile, &atoms, grid.centers(), grid.cell_weight(), e);
                out.gap.push(gap);
                for (dst, v) in out.regs.iter_mut().zip(regs) {
                    dst.push(v);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let l = &results[k * cfg.seeds + s];
            for (i, &e) in eps.iter().enumerate() {
                report.push_row(
                    Some(s),
                    vec![
                        n.into(),
                        e.into(),
                        l.gap[i].into(),
                        0.0.into(),
                        l.regs[0][i].into(),
                        l.regs[1][i].into(),
                        l.regs[2][i].into(),
                        l.regs[3][i].into(),
                    ],
                );
            }
        }
    }

    let names = ["r_l2", "r_gradient", "r_wgan_gp", "r_wgan_lp"];
    for (k, &n) in cfg.n_list.iter().enumerate() {
        let med = |f: &dyn Fn(&Ladder) -> &Vec<f64>| -> Vec<f64> {
            (0..eps.len())
                .map(|i| median(&(0..cfg.seeds).map(|s| f(&results[k * cfg.seeds + s])[i]).collect::<Vec<_>>()))
                .collect()
        };
        let gaps = med(&|l| &l.gap);
        let growing = gaps.windows(2).all(|w| w[1] > w[0]);
        let diffs: Vec<f64> = gaps.windows(2).map(|w| w[1] - w[0]).collect();
        let mids: Vec<f64> = eps.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let target = alpha;
        report.checks.push(match loglog_fit(&mids, &diffs) {
            Ok(fit) => Check::new(
                &format!("gap_slope_n{n}"),
                growing && (fit.slope - target).abs() <= 0.1,
                fit.slope,
                target,
                format!(
                    "successive-difference slope of the median objective gap vs eps: {:.4} +/- {:.4} \
                     (accepted [{:.2}, {:.2}]), gaps {gaps:?}",
                    fit.slope,
                    fit.slope_ci,
                    target - 0.1,
                    target + 0.1
                ),
            ),
            Err(e) => Check::new(&format!("gap_slope_n{n}"), false, f64::NAN, target, format!("{e}; gaps {gaps:?}")),
        });
        for (r, name) in names.iter().enumerate() {
            let vals = med(&|l| &l.regs[r]);
            let mid = median(&vals);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let spread = (hi / mid).max(mid / lo);
            report.checks.push(Check::new(
                &format!("{name}_bounded_n{n}"),
                spread < 2.0,
                spread,
                2.0,
                format!("median {name} along the ladder {vals:?}; max/median and median/min at most {spread:.4}"),
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spherical_mean_limits() {
        let alpha = -0.4;
        let (m, dm) = spherical_mean(alpha, 1e-12, 0.5);
        assert_relative_eq!(m, 0.5f64.powf(alpha));
        assert_eq!(dm, 0.0);
        let (m, _) = spherical_mean(alpha, 1e-4, 0.5);
        assert_relative_eq!(m, 0.5f64.powf(alpha), max_relative = 1e-6);
        let (m, _) = spherical_mean(alpha, 100.0, 1e-3);
        assert_relative_eq!(m, 100f64.powf(alpha), max_relative = 1e-9);
    }

    #[test]
    fn profile_matches_power_far_away_and_is_differentiable() {
        let p = mollified_profile(-0.4, 60.0);
        let (g, dg) = p.eval(40.0);
        assert_relative_eq!(g, 40f64.powf(-0.4), max_relative = 1e-3);
        assert_relative_eq!(dg, -0.4 * 40f64.powf(-1.4), max_relative = 1e-2);
        for s in [0.3, 0.9, 1.5, 3.0] {
            let h = 1e-4;
            let fd = (p.eval(s + h).0 - p.eval(s - h).0) / (2.0 * h);
            assert_relative_eq!(p.eval(s).1, fd, max_relative = 1e-3);
        }
        assert!(p.eval(0.0).0.is_finite() && p.eval(0.0).0 > p.eval(1.0).0);
    }

    #[test]
    fn configuration_errors() {
        let mut cfg = ExperimentKind::Illposedness.defaults();
        cfg.eps_ladder = vec![2.0, 1.0, 0.5];
        assert!(matches!(run_illposedness_demo(&cfg, 1), Err(Error::Config(_))));
        cfg = ExperimentKind::Illposedness.defaults();
        cfg.dim = 2;
        assert!(matches!(run_illposedness_demo(&cfg, 1), Err(Error::Config(_))));
    }
}
