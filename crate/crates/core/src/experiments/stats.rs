//! Summary statistics shared by the drivers.

use crate::error::{Error, Result};

/// Median of a nonempty slice; mean of the two central values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// One-sided binomial tolerance `2√(δ(1−δ)/seeds)`.
pub fn binomial_slack(delta: f64, seeds: usize) -> f64 {
    2.0 * (delta * (1.0 - delta) / seeds as f64).sqrt()
}

/// Pass-fraction rule for probability-`1−δ` statements.
pub fn fraction_passes(fraction: f64, delta: f64, seeds: usize) -> bool {
    fraction >= 1.0 - delta - binomial_slack(delta, seeds)
}

/// Least-squares line through `(log x, log y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci: f64,
    pub points: usize,
}

/// Two-sided 97.5% Student quantile.
fn t_quantile(dof: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match dof {
        0 => f64::INFINITY,
        d if d <= 30 => TABLE[d - 1],
        _ => 1.96,
    }
}

pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<LogLogFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage("a log-log fit needs at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("log-log fit needs distinct abscissae"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let n = lx.len();
    let slope_ci = if n > 2 {
        let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        t_quantile(n - 2) * (sse / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(LogLogFit {
        slope,
        intercept,
        slope_ci,
        points: n,
    })
}
