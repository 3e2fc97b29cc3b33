//! Fixed-size property suites run by the `selftest` command.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::experiments::stats::{binomial_slack, fraction_passes, loglog_fit, median};
use crate::experiments::{ExperimentConfig, ExperimentKind};
use crate::flow::{
    forcing, run_to_times, Dynamics, FlowProblem, Integrator, Snapshot,
};
use crate::grid::{
    cdf_1d, cdf_quantile_1d, integrate, make_grid, norm_l2, project_simplex, Grid, GridDensity, GridField, SampleSet,
};
use crate::kernel::{
    feature_matrix, make_pair_in_h, mmd_loss, rkhs_norm_sq, sample_rho0, spectral_decompose, KernelOperator,
    MeasureRef, SignedMeasure,
};
use crate::oracles::{mmd_double_sum, simplex_qp};
use crate::rng::rng_from_seed;
use crate::transport::{lipschitz_excess, w1_dual, w2_1d, w2_exact, w2_l2_bound_check};

/// Names of the suites in the order they run.
pub const SUITES: [&str; 5] = ["grid", "kernel", "flow", "transport", "experiments"];

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteVerdict {
    pub suite: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteVerdict {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(f, "{}: PASS ({} checks)", self.suite, self.checks)
        } else {
            write!(
                f,
                "{}: FAIL ({} of {} checks): {}",
                self.suite,
                self.failures.len(),
                self.checks,
                self.failures[0]
            )
        }
    }
}

struct Tally {
    suite: &'static str,
    checks: usize,
    failures: Vec<String>,
}

impl Tally {
    fn new(suite: &'static str) -> Self {
        Tally {
            suite,
            checks: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn finish(self, outcome: Result<()>) -> SuiteVerdict {
        let mut failures = self.failures;
        let mut checks = self.checks;
        if let Err(e) = outcome {
            checks += 1;
            failures.push(format!("error: {e}"));
        }
        SuiteVerdict {
            suite: self.suite,
            checks,
            failures,
        }
    }
}

fn random_field(grid: &Arc<Grid>, rng: &mut ChaCha8Rng, spread: f64) -> GridField {
    let values = (0..grid.cells()).map(|_| spread * (rng.gen::<f64>() - 0.3)).collect();
    GridField::new(grid.clone(), values).expect("finite values")
}

fn random_density(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> GridDensity {
    let values = (0..grid.cells()).map(|_| 0.05 + rng.gen::<f64>()).collect();
    GridDensity::normalized(GridField::new(grid.clone(), values).expect("finite values")).expect("positive mass")
}

fn grid_suite() -> SuiteVerdict {
    let mut t = Tally::new("grid");
    let outcome = (|| -> Result<()> {
        let mut rng = rng_from_seed(11);
        for (dim, res) in [(1, 16), (2, 4), (1, 37)] {
            let g = make_grid(dim, res)?;
            for _ in 0..20 {
                let f = random_field(&g, &mut rng, 3.0);
                let h = random_field(&g, &mut rng, 3.0);
                let pf = project_simplex(&f);
                let again = project_simplex(pf.field());
                let drift = norm_l2(&again.field().sub(pf.field())?);
                t.check(drift <= 1e-12, || format!("projection not idempotent on ({dim}, {res}): {drift:e}"));
                let ph = project_simplex(&h);
                let before = norm_l2(&f.sub(&h)?);
                let after = norm_l2(&pf.field().sub(ph.field())?);
                t.check(after <= before + 1e-12, || format!("projection expands on ({dim}, {res}): {after} > {before}"));
                let mass = integrate(pf.field());
                t.check((mass - 1.0).abs() <= 1e-10, || format!("projected mass {mass} on ({dim}, {res})"));
            }
        }
        for (dim, res) in [(1, 2), (1, 5), (1, 8), (1, 12), (2, 2), (2, 3)] {
            let g = make_grid(dim, res)?;
            for _ in 0..25 {
                let f = random_field(&g, &mut rng, 4.0);
                let fast = project_simplex(&f);
                let slow = simplex_qp(f.values());
                let worst = fast.values().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                t.check(worst <= 1e-9, || format!("projection differs from the QP oracle by {worst:e} on {} cells", g.cells()));
            }
        }
        let g = make_grid(1, 64)?;
        for _ in 0..5 {
            let p = random_density(&g, &mut rng);
            for _ in 0..20 {
                let x = 0.05 + 0.9 * rng.gen::<f64>();
                let back = cdf_quantile_1d(&p, cdf_1d(&p, x)?)?;
                t.check((back - x).abs() <= g.cell_width(), || format!("quantile(cdf({x})) = {back}"));
            }
        }
        Ok(())
    })();
    t.finish(outcome)
}

fn kernel_suite() -> SuiteVerdict {
    let mut t = Tally::new("kernel");
    let outcome = (|| -> Result<()> {
        let mut rng = rng_from_seed(12);
        for (dim, res, m) in [(1, 32, 200), (2, 8, 150)] {
            let g = make_grid(dim, res)?;
            let ens = Arc::new(sample_rho0(dim, m, 5)?);
            let phi = feature_matrix(&ens, &g)?;
            let (lo, hi) = phi.matrix().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            t.check(lo >= 0.0 && hi <= 1.0, || format!("feature values span [{lo}, {hi}] in d={dim}"));
            let op = KernelOperator::new(ens.clone(), &g)?;
            let k = op.matrix();
            let asym = (&k - k.transpose()).amax();
            t.check(asym <= 1e-12, || format!("kernel asymmetry {asym:e} in d={dim}"));
            let eig = k.symmetric_eigenvalues();
            let (emin, emax) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            t.check(emin >= -1e-9, || format!("smallest Gram eigenvalue {emin:e} in d={dim}"));
            t.check(emax <= 1.0 + 1e-8, || format!("operator norm {emax} in d={dim}"));

            let spec = spectral_decompose(&op, None)?;
            for _ in 0..5 {
                let gf = random_field(&g, &mut rng, 1.0);
                let (c, _) = spec.split(gf.values());
                let inside = GridField::new(g.clone(), spec.synthesize(&c))?;
                let kg = op.apply(&inside)?;
                let lhs = rkhs_norm_sq(&kg, &spec)?.value;
                let rhs = g.cell_weight() * inside.values().iter().zip(kg.values()).map(|(a, b)| a * b).sum::<f64>();
                let rel = (lhs - rhs).abs() / rhs.abs().max(1e-300);
                t.check(rel <= 1e-5, || format!("RKHS norm of k*g off by {rel:e} relative in d={dim}"));
            }

            let again = sample_rho0(dim, m, 5)?;
            t.check(again.hash_hex() == ens.hash_hex(), || format!("ensemble hash not reproducible in d={dim}"));
            let p = random_density(&g, &mut rng);
            let q = random_density(&g, &mut rng);
            let a = mmd_loss(&op, &SignedMeasure::difference(&p, &q))?;
            let op2 = KernelOperator::new(Arc::new(again), &g)?;
            let b = mmd_loss(&op2, &SignedMeasure::difference(&p, &q))?;
            t.check((a - b).abs() <= 1e-12, || format!("MMD not reproducible: {a} vs {b}"));
        }
        for (dim, res) in [(1, 8), (1, 64), (2, 8)] {
            let g = make_grid(dim, res)?;
            let ens = Arc::new(sample_rho0(dim, 40, 9)?);
            let op = KernelOperator::new(ens.clone(), &g)?;
            let p = random_density(&g, &mut rng);
            let points: Vec<f64> = (0..7 * dim).map(|_| rng.gen::<f64>()).collect();
            let atoms = SampleSet::new(dim, points)?;
            let mu = SignedMeasure::new()
                .with(1.0, MeasureRef::from(&p))
                .with(-1.0, MeasureRef::from(&atoms));
            let fast = mmd_loss(&op, &mu)?;
            let slow = mmd_double_sum(&ens, &mu);
            t.check((fast - slow).abs() <= 1e-10, || format!("MMD {fast} vs double sum {slow} on {} cells", g.cells()));
        }
        Ok(())
    })();
    t.finish(outcome)
}

fn flow_suite() -> SuiteVerdict {
    let mut t = Tally::new("flow");
    let outcome = (|| -> Result<()> {
        let g = make_grid(1, 64)?;
        let op = KernelOperator::new(Arc::new(sample_rho0(1, 512, 21)?), &g)?;
        let spec = spectral_decompose(&op, None)?;
        let pair = make_pair_in_h(&spec, 4, f64::MAX, 1.2)?;
        let target = pair.p_star.field();
        let f = forcing(&op, &pair.p_star)?;
        let p0 = pair.p0.field();
        let dt = 0.1 / op.lambda_max();
        let times: Vec<f64> = (0..=80).map(|k| 0.25 * k as f64).collect();
        let nh2 = pair.norm_h * pair.norm_h;

        let problem = |dynamics| FlowProblem {
            op: &op,
            spec: Some(&spec),
            forcing: &f,
            p0,
            dynamics,
        };
        let mut probe = |s: &Snapshot<'_>| -> Result<Vec<f64>> {
            let err = norm_l2(&s.p.sub(target)?);
            let loss = mmd_loss(&op, &SignedMeasure::difference(s.p, &pair.p_star))?;
            let v = f.sub(&op.apply(s.p)?)?;
            Ok(vec![err, loss, integrate(s.p), s.p.min_value(), integrate(&v)])
        };

        let plain = run_to_times(&problem(Dynamics::TwoTimeScale { projected: false }), &times, dt, Integrator::Rk4, &mut probe)?;
        for w in plain.windows(2) {
            let rise = w[1].values[1] - w[0].values[1];
            t.check(rise <= dt * dt, || format!("MMD rose by {rise:e} at t = {}", w[1].t));
        }
        for w in plain.windows(3).step_by(2) {
            let dm = w[2].values[2] - w[0].values[2];
            let predicted = (w[2].t - w[0].t) / 6.0 * (w[0].values[4] + 4.0 * w[1].values[4] + w[2].values[4]);
            t.check((dm - predicted).abs() <= 1e-6, || format!("mass change {dm:e} vs forcing integral {predicted:e}"));
        }
        for r in plain.iter().filter(|r| r.t > 0.0) {
            let bound = nh2 / r.t;
            t.check(r.values[0].powi(2) <= bound, || format!("training error {} above bound {bound} at t = {}", r.values[0].powi(2), r.t));
        }

        let projected = run_to_times(&problem(Dynamics::TwoTimeScale { projected: true }), &times, dt, Integrator::Rk4, &mut probe)?;
        for r in &projected {
            t.check(r.values[3] >= -1e-8 && (r.values[2] - 1.0).abs() <= 1e-8, || {
                format!("projected flow left the simplex at t = {}: min {}, mass {}", r.t, r.values[3], r.values[2])
            });
        }

        let c = 1.0;
        let dt1 = 0.1 / op.lambda_max().sqrt();
        let one = run_to_times(&problem(Dynamics::OneTimeScale { c }), &times, dt1, Integrator::Rk4, &mut probe)?;
        let exact = run_to_times(&problem(Dynamics::OneTimeScale { c }), &times, dt1, Integrator::SpectralExact, &mut probe)?;
        for (a, b) in one.iter().zip(&exact) {
            if a.t > 0.0 {
                let bound = pair.norm_h / (c * a.t).sqrt();
                t.check(a.values[0] <= bound, || format!("one-time-scale error {} above {bound} at t = {}", a.values[0], a.t));
            }
            let gap = (a.values[0] - b.values[0]).abs();
            t.check(gap <= 1e-5, || format!("RK4 and closed form differ by {gap:e} at t = {}", a.t));
        }
        Ok(())
    })();
    t.finish(outcome)
}

fn transport_suite() -> SuiteVerdict {
    let mut t = Tally::new("transport");
    let outcome = (|| -> Result<()> {
        let mut rng = rng_from_seed(13);
        let g1 = make_grid(1, 24)?;
        let g2 = make_grid(2, 5)?;
        for g in [&g1, &g2] {
            let w2 = |p: &GridDensity, q: &GridDensity| -> Result<f64> {
                if g.dim() == 1 {
                    w2_1d(p, q)
                } else {
                    Ok(w2_exact(p, q)?.0)
                }
            };
            for _ in 0..10 {
                let p = random_density(g, &mut rng);
                let q = random_density(g, &mut rng);
                let r = random_density(g, &mut rng);
                let (pq, qp, pr, rq) = (w2(&p, &q)?, w2(&q, &p)?, w2(&p, &r)?, w2(&r, &q)?);
                t.check((pq - qp).abs() <= 1e-9, || format!("asymmetric W2 {pq} vs {qp}"));
                t.check(pq >= 0.0, || format!("negative W2 {pq}"));
                t.check(w2(&p, &p)? <= 1e-9, || "W2(p, p) is not zero".into());
                t.check(pq <= pr + rq + 1e-9, || format!("triangle inequality fails: {pq} > {pr} + {rq}"));
                if g.dim() == 1 {
                    let lp = w2_exact(&p, &q)?.0;
                    t.check((lp - pq).abs() <= 1e-6, || format!("LP W2 {lp} vs 1-d W2 {pq}"));
                }
                let f = random_field(g, &mut rng, 3.0);
                let h = random_field(g, &mut rng, 3.0);
                let (lhs, rhs) = w2_l2_bound_check(&f, &h)?;
                t.check(lhs <= rhs + 1e-9, || format!("W2 {lhs} above sqrt(d) L2 {rhs}"));
            }
            for seed in 0..3u64 {
                let p = random_density(g, &mut rng);
                let points: Vec<f64> = (0..12 * g.dim()).map(|_| rng.gen::<f64>()).collect();
                let atoms = SampleSet::new(g.dim(), points)?;
                let star = w1_dual(&p, &atoms)?;
                let gap = (star.value - star.primal).abs();
                t.check(gap <= 1e-7, || format!("W1 dual {} vs primal {}", star.value, star.primal));
                let excess = lipschitz_excess(&star.potential, 200, seed);
                t.check(excess <= 1e-9, || format!("potential exceeds the Lipschitz constraint by {excess:e}"));
            }
        }
        Ok(())
    })();
    t.finish(outcome)
}

fn experiments_suite() -> SuiteVerdict {
    let mut t = Tally::new("experiments");
    let outcome = (|| -> Result<()> {
        let slack = binomial_slack(0.1, 100);
        t.check((slack - 0.06).abs() <= 1e-12, || format!("binomial slack {slack}"));
        t.check(fraction_passes(0.85, 0.1, 100) && !fraction_passes(0.83, 0.1, 100), || "pass-fraction rule".into());
        t.check(median(&[3.0, 1.0, 2.0, 10.0]) == 2.5, || "median of four values".into());
        let x: Vec<f64> = (1..=8).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.powf(-0.5)).collect();
        let fit = loglog_fit(&x, &y)?;
        t.check((fit.slope + 0.5).abs() <= 1e-12 && fit.slope_ci <= 1e-9, || format!("fit slope {}", fit.slope));

        let cfg = ExperimentConfig {
            res: 32,
            m_model: 32,
            m_kernel: 512,
            n_list: vec![20, 80],
            seeds: 3,
            t_grid: vec![1.0, 4.0],
            ..ExperimentKind::GeneralizationGap.defaults()
        };
        let a = ExperimentKind::GeneralizationGap.run(&cfg, 17)?;
        let b = ExperimentKind::GeneralizationGap.run(&cfg, 17)?;
        t.check(a.rows == b.rows, || "repeated run changed its rows".into());
        t.check(a.rows.len() == 3 * 2 * 2, || format!("{} rows for 3 seeds x 2 n x 2 t", a.rows.len()));
        Ok(())
    })();
    t.finish(outcome)
}

/// Runs one suite by name.
pub fn run_suite(name: &str) -> Option<SuiteVerdict> {
    Some(match name {
        "grid" => grid_suite(),
        "kernel" => kernel_suite(),
        "flow" => flow_suite(),
        "transport" => transport_suite(),
        "experiments" => experiments_suite(),
        _ => return None,
    })
}

pub fn run_all() -> Vec<SuiteVerdict> {
    SUITES.iter().filter_map(|s| run_suite(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope").is_none());
    }

    #[test]
    fn verdict_lines() {
        let v = SuiteVerdict {
            suite: "grid",
            checks: 3,
            failures: vec!["bad".into()],
        };
        assert_eq!(v.to_string(), "grid: FAIL (1 of 3 checks): bad");
    }
}
