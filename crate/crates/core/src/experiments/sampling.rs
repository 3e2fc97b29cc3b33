//! Exact sampling from piecewise-constant grid densities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{GridDensity, SampleSet};

/// Proposals allowed per accepted point in rejection sampling.
pub const REJECTION_CAP: usize = 1000;

/// `n` i.i.d. points from `p`: inverse CDF in one dimension, rejection from
/// the uniform envelope otherwise.
pub fn sample_density(p: &GridDensity, n: usize, rng: &mut impl Rng) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::usage("sample size must be positive"));
    }
    let g = p.grid();
    if g.dim() == 1 {
        let masses = p.masses();
        let mut cum = Vec::with_capacity(masses.len());
        let mut acc = 0.0;
        for m in &masses {
            acc += m;
            cum.push(acc);
        }
        let width = g.cell_width();
        let points = (0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let k = cum.partition_point(|&c| c <= u).min(masses.len() - 1);
                let before = if k == 0 { 0.0 } else { cum[k - 1] };
                let frac = ((u - before) / masses[k]).clamp(0.0, 1.0);
                (k as f64 + frac) * width
            })
            .collect();
        return SampleSet::new(1, points);
    }
    let dim = g.dim();
    let peak = p.values().iter().copied().fold(0.0, f64::max);
    let mut points = Vec::with_capacity(n * dim);
    let mut x = vec![0.0; dim];
    let mut accepted = 0;
    let mut proposals = 0;
    while accepted < n {
        proposals += 1;
        if proposals > REJECTION_CAP * n {
            return Err(Error::Config(format!(
                "rejection sampling accepted {accepted} of {n} points within {} proposals",
                REJECTION_CAP * n
            )));
        }
        x.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        if rng.gen::<f64>() * peak < p.values()[g.cell_of(&x)] {
            points.extend_from_slice(&x);
            accepted += 1;
        }
    }
    SampleSet::new(dim, points)
}
