//! Slow, obviously-correct reference computations used to cross-check the
//! fast paths (by the unit tests, the acceptance suite and `selftest`).

use crate::grid::SampleSet;
use crate::kernel::{FeatureEnsemble, MeasureRef, SignedMeasure};

/// Exhaustive active-set solution of `min Σ (p_i − f_i)²` subject to
/// `p ≥ 0`, `(1/n) Σ p_i = 1`. Exponential in `n`; meant for `n ≤ 16`.
pub fn simplex_qp(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    assert!(n <= 20, "exhaustive oracle is limited to small problems");
    let target = n as f64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << n) {
        let k = mask.count_ones() as f64;
        let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| f[i]).sum();
        let tau = (sum - target) / k;
        let cand: Vec<f64> = (0..n)
            .map(|i| if mask >> i & 1 == 1 { f[i] - tau } else { 0.0 })
            .collect();
        if cand.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let obj: f64 = cand.iter().zip(f).map(|(p, q)| (p - q) * (p - q)).sum();
        if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-14) {
            best = Some((obj, cand.into_iter().map(|v| v.max(0.0)).collect()));
        }
    }
    best.expect("some support is always feasible").1
}

fn atoms_of(mu: &SignedMeasure<'_>) -> (usize, Vec<f64>, Vec<f64>) {
    let mut dim = 0;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (coef, part) in mu.parts() {
        match part {
            MeasureRef::Density(f) => {
                let g = f.grid();
                dim = g.dim();
                points.extend_from_slice(g.centers());
                weights.extend(f.values().iter().map(|v| coef * v * g.cell_weight()));
            }
            MeasureRef::Atoms(s) => {
                dim = s.dim();
                points.extend_from_slice(s.points());
                weights.extend(s.weights().iter().map(|w| coef * w));
            }
        }
    }
    (dim, points, weights)
}

/// `½ ∬ k(x, y) dμ(x) dμ(y)` by explicit double sum over all atoms and cells.
pub fn mmd_double_sum(ens: &FeatureEnsemble, mu: &SignedMeasure<'_>) -> f64 {
    let (dim, pts, w) = atoms_of(mu);
    let n = w.len();
    let m = ens.m();
    let kernel = |a: &[f64], b: &[f64]| -> f64 {
        (0..m).map(|j| ens.feature(j, a) * ens.feature(j, b)).sum::<f64>() / m as f64
    };
    let mut total = 0.0;
    for i in 0..n {
        for l in 0..n {
            total += w[i] * w[l] * kernel(&pts[i * dim..(i + 1) * dim], &pts[l * dim..(l + 1) * dim]);
        }
    }
    0.5 * total
}

/// Classic RK4 on `ẍ + b ẋ + a x = q` from `(x0, v0)`, with `steps` steps to `t`.
pub fn rk4_damped_oscillator(a: f64, b: f64, q: f64, x0: f64, v0: f64, t: f64, steps: usize) -> (f64, f64) {
    let f = |x: f64, v: f64| (v, q - a * x - b * v);
    let dt = t / steps as f64;
    let (mut x, mut v) = (x0, v0);
    for _ in 0..steps {
        let (k1x, k1v) = f(x, v);
        let (k2x, k2v) = f(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v);
        let (k3x, k3v) = f(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v);
        let (k4x, k4v) = f(x + dt * k3x, v + dt * k3v);
        x += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    (x, v)
}

/// `∫ |F_a − F_b| dx` between two weighted point sets on the line.
pub fn w1_discrete_1d(a: &SampleSet, b: &SampleSet) -> f64 {
    let mut events: Vec<(f64, f64)> = a
        .points()
        .iter()
        .zip(a.weights())
        .map(|(&x, &w)| (x, w))
        .chain(b.points().iter().zip(b.weights()).map(|(&x, &w)| (x, -w)))
        .collect();
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for k in 0..events.len() {
        diff += events[k].1;
        if k + 1 < events.len() {
            total += diff.abs() * (events[k + 1].0 - events[k].0);
        }
    }
    total
}
