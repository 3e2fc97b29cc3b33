use std::sync::Arc;

use rayon::prelude::*;

use super::bounds::{finite_neuron_trajectory_bound, mc_rate, operator_gap_bound};
use super::sampling::sample_density;
use super::stats::median;
use super::{fraction_check, level_check, population, tags, Check, ExperimentConfig, ExperimentKind, ExperimentReport, Value};
use crate::error::{Error, Result};
use crate::flow::solve_two_time_scale_spectral;
use crate::grid::norm_l2;
use crate::kernel::{feature_sup_gap, operator_gap, sample_rho0, spectral_decompose, KernelOperator,
    DEFAULT_POPULATION_FEATURES};
use crate::rng::{derive_seed, rng_from_seed};

/// Ratio pairs `(k, k')` of the list with `v[k'] = 4 v[k]`.
fn quadruplings(v: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..v.len() {
        for j in 0..v.len() {
            if v[j] == 4 * v[i] {
                out.push((i, j));
            }
        }
    }
    out
}

fn halving_check(name: &str, label: &str, list: &[usize], medians: &[f64]) -> Option<Check> {
    let pairs = quadruplings(list);
    if pairs.is_empty() {
        return None;
    }
    let ratios: Vec<f64> = pairs.iter().map(|&(i, j)| medians[i] / medians[j]).collect();
    let worst = ratios.iter().copied().fold(2.0f64, |a, r| if (r - 2.0).abs() > (a - 2.0).abs() { r } else { a });
    let detail = pairs
        .iter()
        .zip(&ratios)
        .map(|(&(i, j), r)| format!("{label} {}->{}: {r:.4}", list[i], list[j]))
        .collect::<Vec<_>>()
        .join(", ");
    Some(Check::new(
        name,
        ratios.iter().all(|r| (1.7..=2.3).contains(r)),
        worst,
        2.0,
        format!("median ratios {detail} (accepted [1.7, 2.3])"),
    ))
}

/// Sup-gap of the probe features between `p_*` and its samples.
pub fn run_monte_carlo_rate(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    if cfg.m_kernel < DEFAULT_POPULATION_FEATURES {
        return Err(Error::Config(format!(
            "m_kernel: probe ensemble needs at least {DEFAULT_POPULATION_FEATURES} features, got {}",
            cfg.m_kernel
        )));
    }
    let pop = population(cfg, root_seed)?;
    let mut report = ExperimentReport::new(ExperimentKind::MonteCarloRate, cfg, root_seed);
    pop.describe(&mut report);
    let cells: Vec<(usize, usize)> = (0..cfg.n_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect();
    let gaps: Vec<f64> = cells
        .par_iter()
        .map(|&(k, s)| {
            let n = cfg.n_list[k];
            let mut rng = rng_from_seed(derive_seed(root_seed, &[tags::SAMPLE, s as u64, n as u64]));
            let atoms = sample_density(&pop.pair.p_star, n, &mut rng)?;
            feature_sup_gap(&pop.op, &pop.pair.p_star, &atoms)
        })
        .collect::<Result<_>>()?;
    let mut ok = vec![vec![true; cfg.seeds]; cfg.n_list.len()];
    for s in 0..cfg.seeds {
        for (k, &n) in cfg.n_list.iter().enumerate() {
            let g = gaps[k * cfg.seeds + s];
            let b = mc_rate(cfg.dim, n, cfg.delta);
            ok[k][s] = g <= b;
            report.push_row(Some(s), vec![n.into(), g.into(), b.into(), (g <= b).into()]);
        }
    }
    report.checks.push(fraction_check("rate_bound", &cfg.n_list, &ok, cfg.delta, "n"));
    let medians: Vec<f64> = (0..cfg.n_list.len())
        .map(|k| median(&gaps[k * cfg.seeds..(k + 1) * cfg.seeds]))
        .collect();
    report.env("median_gaps", format!("{medians:?}"));
    report.checks.extend(halving_check("sqrt_n_scaling", "n", &cfg.n_list, &medians));
    Ok(report)
}

/// Operator-norm gap of finite-feature kernels and trajectory discrepancy
/// against the reference kernel.
pub fn run_finite_neuron(cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
    let pop = population(cfg, root_seed)?;
    let mut report = ExperimentReport::new(ExperimentKind::FiniteNeuron, cfg, root_seed);
    pop.describe(&mut report);
    let mut m_list = cfg.m_list.clone();
    if !m_list.contains(&cfg.m_model) {
        m_list.push(cfg.m_model);
    }
    let model = |m: usize, stream: u64, index: usize| -> Result<KernelOperator> {
        let seed = derive_seed(root_seed, &[stream, m as u64, index as u64]);
        KernelOperator::new(Arc::new(sample_rho0(cfg.dim, m, seed)?), &pop.grid)
    };

    let trials: Vec<(usize, usize)> = (0..m_list.len()).flat_map(|k| (0..cfg.trials).map(move |s| (k, s))).collect();
    let op_gaps: Vec<f64> = trials
        .par_iter()
        .map(|&(k, s)| operator_gap(&pop.op, &model(m_list[k], tags::TRIAL, s)?))
        .collect::<Result<_>>()?;
    let mut ok_gap = vec![vec![true; cfg.trials]; m_list.len()];
    for (k, &m) in m_list.iter().enumerate() {
        let b = operator_gap_bound(m, cfg.delta);
        for s in 0..cfg.trials {
            let g = op_gaps[k * cfg.trials + s];
            ok_gap[k][s] = g <= b;
            report.push_row(Some(s), vec![m.into(), Value::Empty, "operator_gap".into(), g.into(), b.into(), (g <= b).into()]);
        }
    }
    report
        .checks
        .push(level_check("operator_gap_bound", &m_list, &ok_gap, 1.0 - cfg.delta, "m", "1 - delta"));

    let times = &cfg.t_grid;
    let p0 = pop.pair.p0.field();
    let p_star = pop.pair.p_star.field();
    let reference: Vec<_> = times
        .iter()
        .map(|&t| solve_two_time_scale_spectral(p0, p_star, &pop.spec, t))
        .collect::<Result<_>>()?;
    let seeds: Vec<(usize, usize)> = (0..m_list.len()).flat_map(|k| (0..cfg.seeds).map(move |s| (k, s))).collect();
    let disc: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&(k, s)| {
            let op = model(m_list[k], tags::MODEL, s)?;
            let spec = spectral_decompose(&op, None)?;
            times
                .iter()
                .zip(&reference)
                .map(|(&t, r)| Ok(norm_l2(&solve_two_time_scale_spectral(p0, p_star, &spec, t)?.sub(r)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut ok = vec![vec![true; cfg.seeds]; m_list.len()];
    for (k, &m) in m_list.iter().enumerate() {
        for s in 0..cfg.seeds {
            for (i, &t) in times.iter().enumerate() {
                let v = disc[k * cfg.seeds + s][i];
                let b = finite_neuron_trajectory_bound(pop.pair.norm_h, m, cfg.delta, t);
                ok[k][s] &= v <= b;
                report.push_row(Some(s), vec![m.into(), t.into(), "discrepancy".into(), v.into(), b.into(), (v <= b).into()]);
            }
        }
    }
    report
        .checks
        .push(level_check("trajectory_bound", &m_list, &ok, 1.0 - 2.0 * cfg.delta, "m", "1 - 2 delta"));

    let last = times.len() - 1;
    let medians: Vec<f64> = (0..m_list.len())
        .map(|k| median(&(0..cfg.seeds).map(|s| disc[k * cfg.seeds + s][last]).collect::<Vec<_>>()))
        .collect();
    report.env("median_discrepancy_at_last_t", format!("{medians:?}"));
    report.checks.extend(halving_check("sqrt_m_scaling", "m", &m_list, &medians));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    #[test]
    fn quadrupling_pairs() {
        assert_eq!(quadruplings(&[64, 256, 1024]), vec![(0, 1), (1, 2)]);
        assert!(quadruplings(&[10, 20]).is_empty());
    }

    #[test]
    fn identical_ensembles_have_zero_discrepancy() {
        let g = make_grid(1, 32).unwrap();
        let ens = Arc::new(sample_rho0(1, 64, 5).unwrap());
        let a = KernelOperator::new(ens.clone(), &g).unwrap();
        let b = KernelOperator::new(ens, &g).unwrap();
        assert_eq!(operator_gap(&a, &b).unwrap(), 0.0);
        let sa = spectral_decompose(&a, None).unwrap();
        let sb = spectral_decompose(&b, None).unwrap();
        let p0 = crate::grid::GridField::constant(g.clone(), 1.0);
        let target = crate::grid::GridField::from_fn(g, |x| 0.5 + x[0]);
        let pa = solve_two_time_scale_spectral(&p0, &target, &sa, 3.0).unwrap();
        let pb = solve_two_time_scale_spectral(&p0, &target, &sb, 3.0).unwrap();
        assert_eq!(norm_l2(&pa.sub(&pb).unwrap()), 0.0);
    }

    #[test]
    fn quadrature_atoms_give_zero_gap() {
        let g = make_grid(1, 64).unwrap();
        let op = KernelOperator::new(Arc::new(sample_rho0(1, 256, 2).unwrap()), &g).unwrap();
        let p = crate::grid::GridDensity::uniform(g);
        let atoms = crate::grid::SampleSet::from_density(&p);
        assert!(feature_sup_gap(&op, &p, &atoms).unwrap() < 1e-12);
    }

    #[test]
    fn probe_size_is_enforced() {
        let cfg = ExperimentConfig {
            m_kernel: 1024,
            ..ExperimentKind::MonteCarloRate.defaults()
        };
        assert!(matches!(run_monte_carlo_rate(&cfg, 1), Err(Error::Config(_))));
    }
}
