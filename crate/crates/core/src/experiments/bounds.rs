//! Right-hand sides of the verified inequalities, with explicit constants.

/// Rademacher-type rate `(4√(2 log 2d) + √(2 log(2/δ)))/√n`.
pub fn mc_rate(dim: usize, n: usize, delta: f64) -> f64 {
    let d = dim as f64;
    (4.0 * (2.0 * (2.0 * d).ln()).sqrt() + (2.0 * (2.0 / delta).ln()).sqrt()) / (n as f64).sqrt()
}

/// `√d · rate · t`.
pub fn gap_bound(dim: usize, n: usize, delta: f64, t: f64) -> f64 {
    (dim as f64).sqrt() * mc_rate(dim, n, delta) * t
}

/// `‖p_0 − p_*‖²_ℋ / t`.
pub fn training_error_sq_bound(norm_h: f64, t: f64) -> f64 {
    norm_h * norm_h / t
}

/// `√d (‖p_* − p_0‖_ℋ/√t + rate · t)`.
pub fn generalization_error_bound(dim: usize, n: usize, delta: f64, norm_h: f64, t: f64) -> f64 {
    (dim as f64).sqrt() * (norm_h / t.sqrt() + mc_rate(dim, n, delta) * t)
}

/// `‖p_* − p_0‖_ℋ / √(ct)`.
pub fn one_time_scale_training_bound(norm_h: f64, c: f64, t: f64) -> f64 {
    norm_h / (c * t).sqrt()
}

/// `rate · t^{3/2} / √c`, the L² gap in the second-order dynamics.
pub fn one_time_scale_gap_bound(dim: usize, n: usize, delta: f64, c: f64, t: f64) -> f64 {
    mc_rate(dim, n, delta) * t.powf(1.5) / c.sqrt()
}

/// `√(d/c) (‖p_* − p_0‖_ℋ/√t + rate · t^{3/2})`.
pub fn one_time_scale_error_bound(dim: usize, n: usize, delta: f64, c: f64, norm_h: f64, t: f64) -> f64 {
    (dim as f64 / c).sqrt() * (norm_h / t.sqrt() + mc_rate(dim, n, delta) * t.powf(1.5))
}

/// Minimiser of `A/√t + B t`.
pub fn two_time_scale_stop(norm_h: f64, rate: f64) -> f64 {
    (norm_h / (2.0 * rate)).powf(2.0 / 3.0)
}

/// Minimiser of `A/√t + B t^{3/2}`.
pub fn one_time_scale_stop(norm_h: f64, rate: f64) -> f64 {
    (norm_h / (3.0 * rate)).sqrt()
}

/// Stopping time `A^{2/3} (n / log d)^{1/3}` with unit constant; infinite for `d = 1`.
pub fn two_time_scale_rate_schedule(norm_h: f64, dim: usize, n: usize) -> f64 {
    norm_h.powf(2.0 / 3.0) * (n as f64 / (dim as f64).ln()).powf(1.0 / 3.0)
}

/// Stopping time `A^{1/2} (n / log d)^{1/4}` with unit constant; infinite for `d = 1`.
pub fn one_time_scale_rate_schedule(norm_h: f64, dim: usize, n: usize) -> f64 {
    norm_h.sqrt() * (n as f64 / (dim as f64).ln()).powf(0.25)
}

/// `(2 + √(log(4/δ)/2)) / √m`.
pub fn operator_gap_bound(m: usize, delta: f64) -> f64 {
    (2.0 + ((4.0 / delta).ln() / 2.0).sqrt()) / (m as f64).sqrt()
}

/// `‖p_* − p_0‖_ℋ (4 + √(2 log(4/δ))) √t / √m`.
pub fn finite_neuron_trajectory_bound(norm_h: f64, m: usize, delta: f64, t: f64) -> f64 {
    norm_h * (4.0 + (2.0 * (4.0 / delta).ln()).sqrt()) * t.sqrt() / (m as f64).sqrt()
}

/// The three-term generalization bound with finite neurons.
pub fn finite_neuron_error_bound(dim: usize, n: usize, m: usize, delta: f64, norm_h: f64, t: f64) -> f64 {
    (dim as f64).sqrt()
        * (norm_h / t.sqrt() + finite_neuron_trajectory_bound(norm_h, m, delta, t) + mc_rate(dim, n, delta) * t)
}

/// `(3/40) n^{−1/d} − ½ ‖D‖_ℋ · rate`.
pub fn slow_deterioration_lower_bound(dim: usize, n: usize, delta: f64, norm_d: f64) -> f64 {
    0.075 * (n as f64).powf(-1.0 / dim as f64) - 0.5 * norm_d * mc_rate(dim, n, delta)
}
