//! Wasserstein distances between gridded densities and atoms, the W1
//! Kantorovich potential, and the checks that relate them to L² norms and
//! to 1-d generators.
//!
//! Grid densities enter every transport problem as weighted atoms at cell
//! centers.

pub mod network_simplex;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{cdf_quantile_1d, norm_l2, project_simplex, GridDensity, GridField, SampleSet};
use crate::rng::rng_from_seed;

/// Largest support handled by the exact LP on each side.
pub const DEFAULT_LP_CAP: usize = 1024;

/// Integer resolution of masses inside the LP.
const MASS_UNITS: i64 = 1 << 52;

/// Marginal violation at which Sinkhorn stops.
pub const SINKHORN_TOL: f64 = 1e-9;

/// Default Sinkhorn iteration budget.
pub const SINKHORN_MAX_ITER: usize = 100_000;

/// A coupling between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub source: Vec<f64>,
    pub sink: Vec<f64>,
    /// `(source, sink, mass)` entries with positive mass.
    pub plan: Vec<(usize, usize, f64)>,
    /// Total cost of the plan.
    pub cost: f64,
}

impl TransportPlan {
    /// Largest absolute deviation of the plan's marginals from the masses.
    pub fn marginal_error(&self) -> f64 {
        let mut rows = vec![0.0; self.source.len()];
        let mut cols = vec![0.0; self.sink.len()];
        for &(i, j, m) in &self.plan {
            rows[i] += m;
            cols[j] += m;
        }
        rows.iter()
            .zip(&self.source)
            .chain(cols.iter().zip(&self.sink))
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn require_1d(p: &GridDensity) -> Result<()> {
    if p.grid().dim() == 1 {
        Ok(())
    } else {
        Err(Error::usage(format!("operation needs a 1-d grid, got dimension {}", p.grid().dim())))
    }
}

/// W2 between two weighted point sets on the line by monotone matching.
/// Inputs need not be sorted; weights are normalised.
pub fn w2_discrete_1d(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    let sorted = |x: &[f64], w: &[f64]| {
        let total: f64 = w.iter().sum();
        let mut v: Vec<(f64, f64)> = x.iter().zip(w).filter(|(_, &m)| m > 0.0).map(|(&a, &m)| (a, m / total)).collect();
        v.sort_by(|p, q| p.0.total_cmp(&q.0));
        v
    };
    let a = sorted(xa, wa);
    let b = sorted(xb, wb);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    loop {
        let m = ra.min(rb);
        total += m * (a[i].0 - b[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            if i + 1 == a.len() {
                break;
            }
            i += 1;
            ra += a[i].1;
        }
        if rb <= 1e-15 {
            if j + 1 == b.len() {
                break;
            }
            j += 1;
            rb += b[j].1;
        }
    }
    total.max(0.0).sqrt()
}

/// Exact W2 between two 1-d grid densities.
pub fn w2_1d(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    require_1d(p)?;
    require_1d(q)?;
    Ok(w2_discrete_1d(p.grid().centers(), &p.masses(), q.grid().centers(), &q.masses()))
}

/// Positive-mass cells as `(u_start, u_end, x_left)` in quantile order.
fn quantile_segments(p: &GridDensity) -> Vec<(f64, f64, f64)> {
    let h = p.grid().cell_width();
    let masses = p.masses();
    let total: f64 = masses.iter().sum();
    let mut u = 0.0;
    let mut out = Vec::new();
    for (i, m) in masses.iter().enumerate() {
        if *m > 0.0 {
            let next = u + m / total;
            out.push((u, next, i as f64 * h));
            u = next;
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    out
}

/// W2 between two 1-d grid densities read as piecewise-constant densities on
/// their cells. Quantile functions are piecewise linear and the integral of
/// their squared difference is exact on every common segment.
pub fn w2_1d_continuous(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    require_1d(p)?;
    require_1d(q)?;
    let a = quantile_segments(p);
    let b = quantile_segments(q);
    let (ha, hb) = (p.grid().cell_width(), q.grid().cell_width());
    let at = |s: &(f64, f64, f64), h: f64, u: f64| s.2 + h * ((u - s.0) / (s.1 - s.0)).clamp(0.0, 1.0);
    let (mut i, mut j) = (0, 0);
    let mut lo = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            let d0 = at(&a[i], ha, lo) - at(&b[j], hb, lo);
            let d1 = at(&a[i], ha, hi) - at(&b[j], hb, hi);
            total += (hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
            lo = hi;
        }
        if a[i].1 <= hi {
            i += 1;
        }
        if b[j].1 <= hi {
            j += 1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

struct Support {
    index: Vec<usize>,
    mass: Vec<f64>,
}

fn support_of(masses: &[f64]) -> Support {
    let index: Vec<usize> = (0..masses.len()).filter(|&i| masses[i] > 0.0).collect();
    let mass = index.iter().map(|&i| masses[i]).collect();
    Support { index, mass }
}

fn check_cap(n: usize, cap: usize, what: &str) -> Result<()> {
    if n > cap {
        Err(Error::resource(format!("{what} support (use w2_sinkhorn beyond the cap)"), n, cap))
    } else {
        Ok(())
    }
}

/// LP between two supports with the given cost, returned as a plan in
/// support coordinates together with the duals.
fn solve_lp(
    a: &Support,
    b: &Support,
    cost: impl Fn(usize, usize) -> f64,
) -> (Vec<(usize, usize, f64)>, Vec<f64>, Vec<f64>, f64) {
    let ua = network_simplex::to_units(&a.mass, MASS_UNITS);
    let ub = network_simplex::to_units(&b.mass, MASS_UNITS);
    let keep_a: Vec<usize> = (0..ua.len()).filter(|&k| ua[k] > 0).collect();
    let keep_b: Vec<usize> = (0..ub.len()).filter(|&k| ub[k] > 0).collect();
    let supply: Vec<i64> = keep_a.iter().map(|&k| ua[k]).collect();
    let demand: Vec<i64> = keep_b.iter().map(|&k| ub[k]).collect();
    let n2 = keep_b.len();
    let c: Vec<f64> = (0..keep_a.len() * n2).map(|k| cost(keep_a[k / n2], keep_b[k % n2])).collect();
    let sol = network_simplex::solve(&supply, &demand, &c);
    let total_a: f64 = a.mass.iter().sum();
    let scale = total_a / MASS_UNITS as f64;
    let mut plan = Vec::with_capacity(sol.flows.len());
    let mut value = 0.0;
    for &(i, j, f) in &sol.flows {
        let m = f as f64 * scale;
        value += m * c[i * n2 + j];
        plan.push((keep_a[i], keep_b[j], m));
    }
    let mut u = vec![f64::NAN; a.mass.len()];
    let mut v = vec![f64::NAN; b.mass.len()];
    for (k, &i) in keep_a.iter().enumerate() {
        u[i] = sol.u[k];
    }
    for (k, &j) in keep_b.iter().enumerate() {
        v[j] = sol.v[k];
    }
    (plan, u, v, value)
}

/// Exact W2 between grid densities by the transport LP.
pub fn w2_exact(p: &GridDensity, q: &GridDensity) -> Result<(f64, TransportPlan)> {
    w2_exact_with_cap(p, q, DEFAULT_LP_CAP)
}

pub fn w2_exact_with_cap(p: &GridDensity, q: &GridDensity, cap: usize) -> Result<(f64, TransportPlan)> {
    if !p.grid().same_as(q.grid()) {
        return Err(Error::usage("densities live on different grids"));
    }
    let pm = p.masses();
    let qm = q.masses();
    let a = support_of(&pm);
    let b = support_of(&qm);
    check_cap(a.index.len(), cap, "w2_exact source")?;
    check_cap(b.index.len(), cap, "w2_exact sink")?;
    let g = p.grid();
    let (plan, _, _, value) = solve_lp(&a, &b, |i, j| sq_dist(g.center(a.index[i]), g.center(b.index[j])));
    let plan = plan.into_iter().map(|(i, j, m)| (a.index[i], b.index[j], m)).collect();
    let cost = value.max(0.0);
    Ok((
        cost.sqrt(),
        TransportPlan {
            source: pm,
            sink: qm,
            plan,
            cost,
        },
    ))
}

/// Outcome of an entropic transport solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    /// Square root of the entropic cost (or of the debiased divergence).
    pub value: f64,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct EntropicOt {
    cost: f64,
    converged: bool,
    iterations: usize,
    marginal_error: f64,
}

fn entropic_ot(xa: &[f64], a: &[f64], xb: &[f64], b: &[f64], dim: usize, eps: f64, max_iter: usize) -> EntropicOt {
    let n = a.len();
    let m = b.len();
    let c: Vec<f64> = (0..n * m)
        .map(|k| sq_dist(&xa[(k / m) * dim..(k / m + 1) * dim], &xb[(k % m) * dim..(k % m + 1) * dim]))
        .collect();
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = -eps * logsumexp((0..m).map(|j| (g[j] - c[i * m + j]) / eps + lb[j]));
        }
        for j in 0..m {
            g[j] = -eps * logsumexp((0..n).map(|i| (f[i] - c[i * m + j]) / eps + la[i]));
        }
        if iterations % 10 == 0 || iterations == max_iter {
            err = (0..n)
                .map(|i| {
                    let row: f64 = (0..m).map(|j| ((f[i] + g[j] - c[i * m + j]) / eps + la[i] + lb[j]).exp()).sum();
                    (row - a[i]).abs()
                })
                .sum();
            if err < SINKHORN_TOL {
                break;
            }
        }
    }
    let dual = (0..n).map(|i| f[i] * a[i]).sum::<f64>() + (0..m).map(|j| g[j] * b[j]).sum::<f64>();
    EntropicOt {
        cost: dual,
        converged: err < SINKHORN_TOL,
        iterations,
        marginal_error: err,
    }
}

/// Entropic W2 (log-domain Sinkhorn) with relative-entropy regularisation
/// against the product of the marginals; `debias` returns the square root of
/// the Sinkhorn divergence.
pub fn w2_sinkhorn(p: &GridDensity, q: &GridDensity, epsilon: f64, debias: bool) -> Result<SinkhornResult> {
    w2_sinkhorn_with_budget(p, q, epsilon, debias, SINKHORN_MAX_ITER)
}

pub fn w2_sinkhorn_with_budget(
    p: &GridDensity,
    q: &GridDensity,
    epsilon: f64,
    debias: bool,
    max_iter: usize,
) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) {
        return Err(Error::usage("entropic regularisation must be positive"));
    }
    if !p.grid().same_as(q.grid()) {
        return Err(Error::usage("densities live on different grids"));
    }
    let g = p.grid();
    let dim = g.dim();
    let restrict = |d: &GridDensity| {
        let s = support_of(&d.masses());
        let pts: Vec<f64> = s.index.iter().flat_map(|&i| g.center(i).iter().copied()).collect();
        (pts, s.mass)
    };
    let (xp, mp) = restrict(p);
    let (xq, mq) = restrict(q);
    let pq = entropic_ot(&xp, &mp, &xq, &mq, dim, epsilon, max_iter);
    let mut converged = pq.converged;
    let mut iterations = pq.iterations;
    let mut marginal_error = pq.marginal_error;
    let value = if debias {
        let pp = entropic_ot(&xp, &mp, &xp, &mp, dim, epsilon, max_iter);
        let qq = entropic_ot(&xq, &mq, &xq, &mq, dim, epsilon, max_iter);
        converged &= pp.converged && qq.converged;
        iterations = iterations.max(pp.iterations).max(qq.iterations);
        marginal_error = marginal_error.max(pp.marginal_error).max(qq.marginal_error);
        (pq.cost - 0.5 * pp.cost - 0.5 * qq.cost).max(0.0).sqrt()
    } else {
        pq.cost.max(0.0).sqrt()
    };
    Ok(SinkhornResult {
        value,
        epsilon,
        converged,
        iterations,
        marginal_error,
    })
}

/// Both sides of `W2(Π_Δ p, Π_Δ q) ≤ √d ‖p − q‖_{L²}`.
pub fn w2_l2_bound_check(p: &GridField, q: &GridField) -> Result<(f64, f64)> {
    let pp = project_simplex(p);
    let pq = project_simplex(q);
    let lhs = if p.grid().dim() == 1 {
        w2_1d(&pp, &pq)?
    } else {
        w2_exact(&pp, &pq)?.0
    };
    let rhs = (p.grid().dim() as f64).sqrt() * norm_l2(&p.sub(q)?);
    Ok((lhs, rhs))
}

/// Maximiser of the discrete W1 dual together with its value.
#[derive(Debug, Clone)]
pub struct KantorovichPotential {
    /// 1-Lipschitz potential `D_*` on the grid with
    /// `E_{atoms}[D_*] − E_p[D_*] = W1`.
    pub potential: GridField,
    /// Dual objective attained by `potential`.
    pub value: f64,
    /// Primal LP cost.
    pub primal: f64,
    /// Largest distance from an atom to the cell center it was moved to.
    pub snap_distance: f64,
    /// Snapped atom masses per cell.
    pub snapped: Vec<f64>,
}

/// W1 LP between `p` and the atoms snapped to cell centers, with the
/// potential recovered by a c-transform of the sink duals.
pub fn w1_dual(p: &GridDensity, s: &SampleSet) -> Result<KantorovichPotential> {
    w1_dual_with_cap(p, s, DEFAULT_LP_CAP)
}

pub fn w1_dual_with_cap(p: &GridDensity, s: &SampleSet, cap: usize) -> Result<KantorovichPotential> {
    let g = p.grid().clone();
    if s.dim() != g.dim() {
        return Err(Error::usage("sample dimension differs from the grid dimension"));
    }
    let mut snapped = vec![0.0; g.cells()];
    let mut snap_distance: f64 = 0.0;
    let total: f64 = s.total_weight();
    for l in 0..s.len() {
        let c = g.cell_of(s.point(l));
        snap_distance = snap_distance.max(sq_dist(s.point(l), g.center(c)).sqrt());
        snapped[c] += s.weights()[l] / total;
    }
    let pm = p.masses();
    let a = support_of(&pm);
    let b = support_of(&snapped);
    check_cap(a.index.len(), cap, "w1_dual source")?;
    check_cap(b.index.len(), cap, "w1_dual sink")?;
    let dist = |x: usize, y: usize| sq_dist(g.center(x), g.center(y)).sqrt();
    let (_, _, v, primal) = solve_lp(&a, &b, |i, j| dist(a.index[i], b.index[j]));
    let phi: Vec<f64> = (0..g.cells())
        .map(|x| {
            (0..b.index.len())
                .map(|j| dist(x, b.index[j]) - v[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let shift = phi.iter().sum::<f64>() / phi.len() as f64;
    let potential: Vec<f64> = phi.iter().map(|f| shift - f).collect();
    let value = (0..g.cells()).map(|i| (snapped[i] - pm[i]) * potential[i]).sum();
    Ok(KantorovichPotential {
        potential: GridField::from_raw(g, potential),
        value,
        primal,
        snap_distance,
        snapped,
    })
}

/// Largest excess of `|D(x) − D(y)|` over `‖x − y‖₂` on all axis-neighbour
/// pairs and `random_pairs` seeded random pairs.
pub fn lipschitz_excess(d: &GridField, random_pairs: usize, seed: u64) -> f64 {
    let g = d.grid();
    let v = d.values();
    let mut worst = f64::NEG_INFINITY;
    let mut check = |i: usize, j: usize| {
        let excess = (v[i] - v[j]).abs() - sq_dist(g.center(i), g.center(j)).sqrt();
        worst = worst.max(excess);
    };
    for i in 0..g.cells() {
        for axis in 0..g.dim() {
            if let Some(j) = g.forward_neighbor(i, axis) {
                check(i, j);
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..random_pairs {
        let i = rng.gen_range(0..g.cells());
        let j = rng.gen_range(0..g.cells());
        if i != j {
            check(i, j);
        }
    }
    worst
}

/// Both sides of the 1-d identity `W2(G#U, P_*) = ‖G − F_{P_*}^{-1}‖_{L²(U)}`
/// for a nondecreasing map `G` sampled at the midpoints of `[0,1]`.
pub fn w2_matching_1d(g_samples: &[f64], p_star: &GridDensity) -> Result<(f64, f64)> {
    require_1d(p_star)?;
    if g_samples.len() < 2 {
        return Err(Error::usage("a sampled map needs at least two values"));
    }
    if g_samples.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::usage("the map must be nondecreasing"));
    }
    if g_samples.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::usage("the map must take values in [0,1]"));
    }
    let k = g_samples.len();
    let w = vec![1.0 / k as f64; k];
    let lhs = w2_discrete_1d(g_samples, &w, p_star.grid().centers(), &p_star.masses());
    let mut acc = 0.0;
    for (i, &gv) in g_samples.iter().enumerate() {
        let u = (i as f64 + 0.5) / k as f64;
        let q = cdf_quantile_1d(p_star, u)?;
        acc += (gv - q).powi(2);
    }
    Ok((lhs, (acc / k as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::oracles::w1_discrete_1d;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn half_density(res: usize) -> GridDensity {
        let g = make_grid(1, res).unwrap();
        GridDensity::new(GridField::from_fn(g, |x| if x[0] < 0.5 { 2.0 } else { 0.0 })).unwrap()
    }

    fn random_density(dim: usize, res: usize, seed: u64) -> GridDensity {
        let g = make_grid(dim, res).unwrap();
        let mut rng = rng_from_seed(seed);
        let vals: Vec<f64> = (0..g.cells()).map(|_| rng.gen::<f64>().powi(2)).collect();
        GridDensity::normalized(GridField::new(g, vals).unwrap()).unwrap()
    }

    #[test]
    fn w2_1d_examples() {
        let q = half_density(512);
        let p = GridDensity::uniform(q.grid().clone());
        assert_eq!(w2_1d(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_1d(&p, &q).unwrap(), 1.0 / 12f64.sqrt(), epsilon = 1e-4);
        assert!(w2_1d(&GridDensity::uniform(make_grid(2, 4).unwrap()), &GridDensity::uniform(make_grid(2, 4).unwrap())).is_err());
    }

    #[test]
    fn continuous_1d_examples() {
        let q = half_density(64);
        let p = GridDensity::uniform(q.grid().clone());
        assert_eq!(w2_1d_continuous(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_1d_continuous(&p, &q).unwrap(), 1.0 / 12f64.sqrt(), epsilon = 1e-14);
        let spike = |i: usize| {
            let g = make_grid(1, 8).unwrap();
            let mut v = vec![0.0; 8];
            v[i] = 8.0;
            GridDensity::new(GridField::new(g, v).unwrap()).unwrap()
        };
        assert_abs_diff_eq!(w2_1d_continuous(&spike(1), &spike(5)).unwrap(), 0.5, epsilon = 1e-14);
        let a = random_density(1, 32, 4);
        let b = random_density(1, 32, 5);
        assert_abs_diff_eq!(w2_1d_continuous(&a, &b).unwrap(), w2_1d_continuous(&b, &a).unwrap(), epsilon = 1e-14);
        let fine_a = random_density(1, 512, 6);
        let fine_b = random_density(1, 512, 7);
        assert_abs_diff_eq!(
            w2_1d_continuous(&fine_a, &fine_b).unwrap(),
            w2_1d(&fine_a, &fine_b).unwrap(),
            epsilon = 1e-3
        );
    }

    #[test]
    fn continuous_1d_is_linear_in_small_perturbations() {
        let g = make_grid(1, 128).unwrap();
        let p = GridDensity::uniform(g.clone());
        let bump = |eps: f64| {
            GridDensity::new(GridField::from_fn(g.clone(), |x| 1.0 + eps * (2.0 * std::f64::consts::PI * x[0]).cos())).unwrap()
        };
        let r = w2_1d_continuous(&p, &bump(1e-3)).unwrap() / w2_1d_continuous(&p, &bump(1e-5)).unwrap();
        assert_abs_diff_eq!(r, 100.0, epsilon = 0.1);
        let r_atoms = w2_1d(&p, &bump(1e-3)).unwrap() / w2_1d(&p, &bump(1e-5)).unwrap();
        assert!(r_atoms < 20.0);
    }

    #[test]
    fn exact_lp_examples() {
        let g = make_grid(2, 2).unwrap();
        let a = GridDensity::new(GridField::new(g.clone(), vec![4.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let b = GridDensity::new(GridField::new(g.clone(), vec![0.0, 0.0, 0.0, 4.0]).unwrap()).unwrap();
        let (d, plan) = w2_exact(&a, &b).unwrap();
        assert_abs_diff_eq!(d, 0.5 * 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(plan.plan.len(), 1);
        let p = random_density(1, 40, 3);
        let (z, same) = w2_exact(&p, &p).unwrap();
        assert!(z < 1e-9);
        assert!(same.plan.iter().all(|&(i, j, _)| i == j));
        assert!(same.marginal_error() < 1e-9);
        let big = GridDensity::uniform(make_grid(1, 2048).unwrap());
        assert!(matches!(w2_exact(&big, &big), Err(Error::Resource { .. })));
    }

    #[test]
    fn exact_matches_1d_closed_form() {
        for seed in 0..5 {
            let p = random_density(1, 64, seed);
            let q = random_density(1, 64, 100 + seed);
            let (lp, plan) = w2_exact(&p, &q).unwrap();
            assert!((lp - w2_1d(&p, &q).unwrap()).abs() < 1e-6);
            assert!(plan.marginal_error() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_behaviour() {
        let p = random_density(1, 16, 7);
        let q = random_density(1, 16, 8);
        let same = w2_sinkhorn(&p, &p, 0.01, true).unwrap();
        assert!(same.value < 1e-6 && same.converged);
        let exact = w2_exact(&p, &q).unwrap().0;
        let small = w2_sinkhorn(&p, &q, 1e-3, true).unwrap().value;
        assert!((small - exact).abs() < 2e-2, "{small} vs {exact}");
        let lo = w2_sinkhorn(&p, &q, 0.01, false).unwrap().value;
        let hi = w2_sinkhorn(&p, &q, 0.05, false).unwrap().value;
        assert!(hi >= lo);
        let limited = w2_sinkhorn_with_budget(&p, &q, 1e-4, false, 3).unwrap();
        assert!(!limited.converged);
    }

    #[test]
    fn w1_dual_properties() {
        let g = make_grid(1, 64).unwrap();
        let p = GridDensity::uniform(g.clone());
        let mut rng = rng_from_seed(5);
        let pts: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let s = SampleSet::new(1, pts).unwrap();
        let k = w1_dual(&p, &s).unwrap();
        assert!((k.value - k.primal).abs() < 1e-7);
        assert!(lipschitz_excess(&k.potential, 500, 1) < 1e-7);
        let snapped_atoms = SampleSet::weighted(1, g.centers().to_vec(), k.snapped.clone()).unwrap();
        let closed = w1_discrete_1d(&SampleSet::from_density(&p), &snapped_atoms);
        assert!((k.value - closed).abs() < 1e-5);
        let quad = SampleSet::from_density(&p);
        let selfd = w1_dual(&p, &quad).unwrap();
        assert!(selfd.value <= selfd.snap_distance + 1e-9);
    }

    #[test]
    fn w1_dual_in_two_dimensions() {
        let g = make_grid(2, 12).unwrap();
        let p = GridDensity::uniform(g.clone());
        let mut rng = rng_from_seed(9);
        let pts: Vec<f64> = (0..2 * 30).map(|_| rng.gen::<f64>()).collect();
        let s = SampleSet::new(2, pts).unwrap();
        let k = w1_dual(&p, &s).unwrap();
        assert!((k.value - k.primal).abs() < 1e-7);
        assert!(lipschitz_excess(&k.potential, 2000, 2) < 1e-7);
    }

    #[test]
    fn matching_examples() {
        let q = half_density(1024);
        let uni = GridDensity::uniform(q.grid().clone());
        let k = 1024;
        let ident: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
        let (l, r) = w2_matching_1d(&ident, &uni).unwrap();
        assert!(l < 1e-3 && r < 1e-12);
        let (l, r) = w2_matching_1d(&ident, &q).unwrap();
        assert_abs_diff_eq!(l, 1.0 / 12f64.sqrt(), epsilon = 1e-3);
        assert_abs_diff_eq!(r, 1.0 / 12f64.sqrt(), epsilon = 1e-3);
        let opt: Vec<f64> = ident.iter().map(|&u| cdf_quantile_1d(&q, u).unwrap()).collect();
        let (l, r) = w2_matching_1d(&opt, &q).unwrap();
        assert!(l < 1e-3 && r < 1e-12);
        assert!(w2_matching_1d(&[0.5, 0.2], &q).is_err());
    }

    #[test]
    fn bound_check_zero_pair() {
        let g = make_grid(1, 32).unwrap();
        let f = GridField::from_fn(g, |x| x[0]);
        assert_eq!(w2_l2_bound_check(&f, &f).unwrap(), (0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn metric_axioms(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
            let a = random_density(1, 48, s1);
            let b = random_density(1, 48, s2 + 1000);
            let c = random_density(1, 48, s3 + 2000);
            let ab = w2_1d(&a, &b).unwrap();
            let ba = w2_1d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= w2_1d(&a, &c).unwrap() + w2_1d(&c, &b).unwrap() + 1e-8);
            let (e_ab, _) = w2_exact(&a, &b).unwrap();
            let (e_ac, _) = w2_exact(&a, &c).unwrap();
            let (e_cb, _) = w2_exact(&c, &b).unwrap();
            prop_assert!(e_ab <= e_ac + e_cb + 1e-8);
        }

        #[test]
        fn l2_bound_on_random_pairs(seed in 0u64..10_000) {
            let g = make_grid(1, 64).unwrap();
            let mut rng = rng_from_seed(seed);
            let p = GridField::new(g.clone(), (0..64).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect()).unwrap();
            let q = GridField::new(g, (0..64).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect()).unwrap();
            let (lhs, rhs) = w2_l2_bound_check(&p, &q).unwrap();
            prop_assert!(lhs <= rhs + 1e-8);
        }
    }
}
