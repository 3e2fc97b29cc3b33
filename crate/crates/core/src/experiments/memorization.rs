use std::sync::Arc;

use rayon::prelude::*;

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};

use super::sampling::sample_density;
use super::{tags, Check, ExperimentConfig, ExperimentKind, ExperimentReport, Value};
use crate::error::Result;
use crate::flow::duhamel_state;
use crate::grid::{make_grid, GridDensity, SampleSet};
use crate::kernel::{make_pair_in_h, sample_rho0, spectral_decompose, KernelOperator};
use crate::rng::{derive_seed, rng_from_seed};

/// Final MMD ratio required at the horizon.
const FINAL_RATIO: f64 = 1e-6;

/// Relative per-mode decay tolerance.
const MODE_TOL: f64 = 1e-6;

/// Horizon in units of `1/λ_median`.
const HORIZON: f64 = 20.0;

struct Series {
    mmd: Vec<f64>,
    mode_error: Vec<f64>,
}

/// Moment-space view of the unprojected dynamics. With `y` the feature
/// moments of `P_t − target`, the two-time-scale flow is `ẏ = −M y` and the
/// one-time-scale flow is `ÿ + cMẏ + My = 0` with `M = (h/m)ΦΦᵀ`; the loss is
/// `|y|²/(2m)`.
struct MomentFlow {
    m: f64,
    mu: Vec<f64>,
    basis: DMatrix<f64>,
}

impl MomentFlow {
    fn new(op: &KernelOperator) -> Self {
        let phi = op.features().matrix();
        let m = op.m() as f64;
        let mat = phi * phi.transpose() * (op.grid().cell_weight() / m);
        let eig = SymmetricEigen::new(mat);
        MomentFlow {
            m,
            mu: eig.eigenvalues.as_slice().to_vec(),
            basis: eig.eigenvectors,
        }
    }

    fn modes(&self, y: &[f64]) -> Vec<f64> {
        (self.basis.transpose() * DVector::from_column_slice(y)).as_slice().to_vec()
    }

    fn loss(&self, modes: &[f64]) -> f64 {
        modes.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.m)
    }

    fn two_time_scale(&self, c0: &[f64], t: f64) -> Vec<f64> {
        c0.iter().zip(&self.mu).map(|(c, mu)| c * (-mu * t).exp()).collect()
    }

    fn one_time_scale(&self, c0: &[f64], friction: f64, t: f64) -> Result<Vec<f64>> {
        c0.iter()
            .zip(&self.mu)
            .map(|(&c, &mu)| {
                if mu > 0.0 {
                    Ok(duhamel_state(mu, friction * mu, c, 0.0, 0.0, t)?.0)
                } else {
                    Ok(c)
                }
            })
            .collect()
    }

    /// `exp(−Mt)` from the assembled matrix, without the eigendecomposition.
    fn propagator(&self, t: f64) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&self.mu));
        (&self.basis * d * self.basis.transpose() * -t).exp()
    }

    /// One-time-scale modes from the exponential of each balanced 2×2
    /// generator `[[0, √μ], [−√μ, −cμ]]`.
    fn one_time_scale_expm(&self, c0: &[f64], friction: f64, t: f64) -> Vec<f64> {
        c0.iter()
            .zip(&self.mu)
            .map(|(&c, &mu)| {
                if mu > 0.0 {
                    let r = mu.sqrt();
                    (Matrix2::new(0.0, r, -r, -friction * mu) * t).exp()[(0, 0)] * c
                } else {
                    c
                }
            })
            .collect()
    }
}

fn relative_error(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Long-horizon MMD decay of both dynamics towards the empirical measure and
/// towards a signed target.
pub fn run_memorization(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    let grid = make_grid(cfg.dim, cfg.res)?;
    let ens = Arc::new(sample_rho0(cfg.dim, cfg.m_model, derive_seed(root_seed, &[tags::MODEL, cfg.m_model as u64]))?);
    let op = KernelOperator::new(ens.clone(), &grid)?;
    let spec = spectral_decompose(&op, None)?;
    let pair = make_pair_in_h(
        &spec,
        derive_seed(root_seed, &[tags::PAIR]),
        cfg.target_scale.unwrap_or(f64::MAX),
        cfg.profile_exponent,
    )?;
    let horizon = HORIZON / spec.lambda_median();
    let mut times = vec![0.0];
    times.extend(cfg.t_grid.iter().copied().filter(|&t| t < horizon));
    times.push(horizon);

    let mut report = ExperimentReport::new(ExperimentKind::Memorization, cfg, root_seed);
    report.env("kernel_ensemble_sha256", ens.hash_hex());
    report.env("kernel_features", ens.m());
    report.env("spectral_rank", spec.rank());
    report.env("lambda_median", spec.lambda_median());
    report.env("horizon", horizon);

    let flow = MomentFlow::new(&op);
    let propagators: Vec<DMatrix<f64>> = times.iter().map(|&t| flow.propagator(t)).collect();
    let p0 = op.grid_moments(pair.p0.values());
    let uniform = op.grid_moments(GridDensity::uniform(grid.clone()).values());
    let cells: Vec<(usize, usize)> = (0..cfg.n_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect();
    let results: Vec<[Series; 3]> = cells
        .par_iter()
        .map(|&(k, s)| {
            let n = cfg.n_list[k];
            let mut rng = rng_from_seed(derive_seed(root_seed, &[tags::SAMPLE, s as u64, n as u64]));
            let atoms: SampleSet = sample_density(&pair.p_star, n, &mut rng)?;
            let emp = ens.atom_moments(&atoms)?;
            let y_emp: Vec<f64> = p0.iter().zip(&emp).map(|(a, b)| a - b).collect();
            let y_sig: Vec<f64> = (0..p0.len()).map(|j| p0[j] - 1.5 * emp[j] + 0.5 * uniform[j]).collect();
            let c_emp = flow.modes(&y_emp);
            let c_sig = flow.modes(&y_sig);
            let scale = c_emp.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let y0 = DVector::from_column_slice(&y_emp);

            let mut out: [Series; 3] = std::array::from_fn(|_| Series { mmd: vec![], mode_error: vec![] });
            for (&t, prop) in times.iter().zip(&propagators) {
                let two = flow.two_time_scale(&c_emp, t);
                let one = flow.one_time_scale(&c_emp, cfg.c, t)?;
                out[0].mmd.push(flow.loss(&two));
                out[0].mode_error.push(relative_error(&flow.modes((prop * &y0).as_slice()), &two, scale));
                out[1].mmd.push(flow.loss(&one));
                out[1].mode_error.push(relative_error(&flow.one_time_scale_expm(&c_emp, cfg.c, t), &one, scale));
                out[2].mmd.push(flow.loss(&flow.two_time_scale(&c_sig, t)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let labels = ["two_time_scale", "one_time_scale", "signed_target"];
    let mut monotone_fail = Vec::new();
    let mut ratio_fail = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_mode = [0.0f64; 2];
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let series = &results[k * cfg.seeds + s];
            for (d, ser) in series.iter().enumerate() {
                let init = ser.mmd[0];
                for (i, &t) in times.iter().enumerate() {
                    let ratio = if init > 0.0 { ser.mmd[i] / init } else { 0.0 };
                    let mode = ser.mode_error.get(i).map_or(Value::Empty, |&v| Value::Float(v));
                    report.push_row(Some(s), vec![n.into(), t.into(), labels[d].into(), ser.mmd[i].into(), ratio.into(), mode]);
                }
                let final_ratio = if init > 0.0 { ser.mmd[times.len() - 1] / init } else { 0.0 };
                worst_ratio = worst_ratio.max(final_ratio);
                if final_ratio > FINAL_RATIO {
                    ratio_fail.push(format!("{} n={n} seed={s}: ratio {final_ratio:e}", labels[d]));
                }
                if d != 1 && ser.mmd.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
                    monotone_fail.push(format!("{} n={n} seed={s}", labels[d]));
                }
            }
            for (w, ser) in worst_mode.iter_mut().zip(&series[..2]) {
                *w = ser.mode_error.iter().fold(*w, |a, &v| a.max(v));
            }
        }
    }
    report.checks.push(
        Check::new(
            "monotone_decay",
            monotone_fail.is_empty(),
            monotone_fail.len() as f64,
            0.0,
            format!("{} gradient-flow series with an MMD increase", monotone_fail.len()),
        )
        .with_failures(monotone_fail),
    );
    report.checks.push(
        Check::new(
            "final_ratio",
            ratio_fail.is_empty(),
            worst_ratio,
            FINAL_RATIO,
            format!("largest MMD ratio at t = {HORIZON}/lambda_median = {horizon:.6e}: {worst_ratio:e}"),
        )
        .with_failures(ratio_fail),
    );
    report.checks.push(Check::new(
        "mode_decay",
        worst_mode[0] <= MODE_TOL,
        worst_mode[0],
        MODE_TOL,
        format!(
            "largest relative deviation of exp(-Mt) y0 from per-mode exp(-lambda_i t) decay: {:e}",
            worst_mode[0]
        ),
    ));
    report.checks.push(Check::new(
        "oscillator_modes",
        worst_mode[1] <= MODE_TOL,
        worst_mode[1],
        MODE_TOL,
        format!(
            "largest relative deviation of the closed-form oscillator modes from their balanced matrix exponentials: {:e}",
            worst_mode[1]
        ),
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{forcing, solve_one_time_scale_forced, solve_two_time_scale_forced};
    use crate::grid::GridField;
    use crate::kernel::{mmd_loss, SignedMeasure};

    #[test]
    fn moment_flow_matches_grid_solvers() {
        let g = make_grid(1, 64).unwrap();
        let ens = Arc::new(sample_rho0(1, 24, 1).unwrap());
        let op = KernelOperator::new(ens.clone(), &g).unwrap();
        let spec = spectral_decompose(&op, None).unwrap();
        let p0 = GridDensity::uniform(g.clone());
        let atoms = SampleSet::new(1, vec![0.21, 0.5, 0.77]).unwrap();
        let f = forcing(&op, &atoms).unwrap();
        let flow = MomentFlow::new(&op);
        let y0: Vec<f64> = op
            .grid_moments(p0.values())
            .iter()
            .zip(ens.atom_moments(&atoms).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let c0 = flow.modes(&y0);
        let zeros = GridField::zeros(g.clone());
        for t in [0.0, 0.5, 3.0, 20.0] {
            let pt = solve_two_time_scale_forced(p0.field(), &f, &spec, t).unwrap();
            let grid_loss = mmd_loss(&op, &SignedMeasure::difference(&pt, &atoms)).unwrap();
            let loss = flow.loss(&flow.two_time_scale(&c0, t));
            assert!((grid_loss - loss).abs() <= 1e-9 * loss.max(1e-300), "{grid_loss} vs {loss}");
            let (qt, _) = solve_one_time_scale_forced(p0.field(), &zeros, &f, &spec, 1.0, t).unwrap();
            let grid_loss = mmd_loss(&op, &SignedMeasure::difference(&qt, &atoms)).unwrap();
            let loss = flow.loss(&flow.one_time_scale(&c0, 1.0, t).unwrap());
            assert!((grid_loss - loss).abs() <= 1e-9 * loss.max(1e-300), "{grid_loss} vs {loss}");
        }
    }

    #[test]
    fn small_run_memorizes() {
        let cfg = ExperimentConfig {
            res: 64,
            m_model: 32,
            n_list: vec![10],
            seeds: 2,
            t_grid: vec![1.0, 100.0],
            ..ExperimentKind::Memorization.defaults()
        };
        let r = run_memorization(&cfg, 1).unwrap();
        assert!(r.check("monotone_decay").unwrap().passed);
        assert!(r.check("mode_decay").unwrap().passed);
        assert_eq!(r.rows.len(), 2 * 3 * 4);
    }
}
