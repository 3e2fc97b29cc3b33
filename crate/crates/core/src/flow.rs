//! Training dynamics of the density: the two-time-scale MMD flow (plain and
//! simplex-projected) and the one-time-scale damped system, integrated by
//! fixed-step RK4 or solved mode by mode in closed form.

use crate::error::{Error, Result};
use crate::grid::{check_same, dot, project_simplex, project_tangent_cone, GridField, DEFAULT_CONE_EPS};
use crate::kernel::{KernelOperator, MeasureRef, SignedMeasure, SpectralDecomposition};

/// Default RK4 step for the first-order flow, as a multiple of `1/λ_max`.
pub const DEFAULT_DT_FACTOR: f64 = 0.1;

/// Largest admissible friction of the one-time-scale system.
pub const MAX_FRICTION: f64 = std::f64::consts::SQRT_2;

/// Relative norm growth within one step that is reported as a blow-up.
pub const BLOWUP_FACTOR: f64 = 10.0;

/// Density (or signed field) of the two-time-scale flow at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimeScaleState {
    pub p: GridField,
    pub t: f64,
    pub projected: bool,
}

impl TwoTimeScaleState {
    pub fn new(p0: GridField, projected: bool) -> Result<Self> {
        let p = if projected {
            project_simplex(&p0).into_field()
        } else {
            p0
        };
        Ok(TwoTimeScaleState { p, t: 0.0, projected })
    }
}

/// Density and discriminator field of the one-time-scale system.
#[derive(Debug, Clone, PartialEq)]
pub struct OneTimeScaleState {
    pub p: GridField,
    pub d: GridField,
    pub t: f64,
    pub c: f64,
}

fn check_friction(c: f64) -> Result<()> {
    if c > 0.0 && c <= MAX_FRICTION {
        Ok(())
    } else {
        Err(Error::Domain(format!("friction {c} outside (0, √2]")))
    }
}

impl OneTimeScaleState {
    /// Starts from `p0` with a zero discriminator.
    pub fn new(p0: GridField, c: f64) -> Result<Self> {
        check_friction(c)?;
        let d = GridField::zeros(p0.grid().clone());
        Ok(OneTimeScaleState { p: p0, d, t: 0.0, c })
    }
}

/// The constant drive `k * target` of both dynamics.
pub fn forcing<'a>(op: &KernelOperator, target: impl Into<MeasureRef<'a>>) -> Result<GridField> {
    op.convolve(&SignedMeasure::new().with(1.0, target.into()))
}

fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

fn check_blowup(before: &[f64], after: &[f64]) -> Result<()> {
    let b = norm_sq(before).sqrt();
    let a = norm_sq(after).sqrt();
    if !a.is_finite() || a > BLOWUP_FACTOR * b.max(1e-300) && a > 1e-12 {
        return Err(Error::Integration(format!("state norm grew from {b:e} to {a:e} in one step")));
    }
    Ok(())
}

fn check_dt(dt: f64, limit: f64, what: &str) -> Result<()> {
    if !(dt > 0.0) || dt > limit {
        return Err(Error::Integration(format!(
            "step {dt} outside the {what} stability limit {limit}"
        )));
    }
    Ok(())
}

/// Largest step accepted for the first-order flow (`2/λ_max` with margin ½).
pub fn two_time_scale_dt_limit(op: &KernelOperator) -> f64 {
    1.0 / op.lambda_max()
}

/// Largest step accepted for the second-order system.
pub fn one_time_scale_dt_limit(op: &KernelOperator) -> f64 {
    0.5 / op.lambda_max().sqrt()
}

fn two_scale_velocity(
    p: &[f64],
    f: &GridField,
    op: &KernelOperator,
    projected: bool,
    scratch: &mut [f64],
) -> Result<Vec<f64>> {
    if projected {
        let q = project_simplex(&GridField::from_raw(f.grid().clone(), p.to_vec()));
        op.apply_slice(q.values(), scratch);
        let raw: Vec<f64> = f.values().iter().zip(scratch.iter()).map(|(a, b)| a - b).collect();
        let v = project_tangent_cone(&GridField::from_raw(f.grid().clone(), raw), &q, DEFAULT_CONE_EPS)?;
        Ok(v.into_values())
    } else {
        op.apply_slice(p, scratch);
        Ok(f.values().iter().zip(scratch.iter()).map(|(a, b)| a - b).collect())
    }
}

/// One RK4 step of `ṗ = k*target − k*p`; the projected variant projects the
/// velocity at every stage and the state after the step.
pub fn step_two_time_scale(
    state: &TwoTimeScaleState,
    forcing: &GridField,
    op: &KernelOperator,
    dt: f64,
) -> Result<TwoTimeScaleState> {
    check_same(&state.p, forcing)?;
    check_dt(dt, two_time_scale_dt_limit(op), "first-order")?;
    let n = state.p.len();
    let p = state.p.values();
    let mut scratch = vec![0.0; n];
    let stage = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> { base.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = two_scale_velocity(p, forcing, op, state.projected, &mut scratch)?;
    let k2 = two_scale_velocity(&stage(p, &k1, 0.5 * dt), forcing, op, state.projected, &mut scratch)?;
    let k3 = two_scale_velocity(&stage(p, &k2, 0.5 * dt), forcing, op, state.projected, &mut scratch)?;
    let k4 = two_scale_velocity(&stage(p, &k3, dt), forcing, op, state.projected, &mut scratch)?;
    let next: Vec<f64> = (0..n)
        .map(|i| p[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_blowup(p, &next)?;
    let mut field = GridField::from_raw(state.p.grid().clone(), next);
    if state.projected {
        field = project_simplex(&field).into_field();
    }
    Ok(TwoTimeScaleState {
        p: field,
        t: state.t + dt,
        projected: state.projected,
    })
}

/// One RK4 step of `ṗ = D`, `Ḋ = k*target − k*p − c k*D`.
pub fn step_one_time_scale(
    state: &OneTimeScaleState,
    forcing: &GridField,
    op: &KernelOperator,
    dt: f64,
) -> Result<OneTimeScaleState> {
    check_same(&state.p, forcing)?;
    check_friction(state.c)?;
    check_dt(dt, one_time_scale_dt_limit(op), "second-order")?;
    let n = state.p.len();
    let c = state.c;
    let f = forcing.values();
    let mut kp = vec![0.0; n];
    let mut kd = vec![0.0; n];
    let mut rhs = |p: &[f64], d: &[f64]| -> (Vec<f64>, Vec<f64>) {
        op.apply_slice(p, &mut kp);
        op.apply_slice(d, &mut kd);
        let dd = (0..n).map(|i| f[i] - kp[i] - c * kd[i]).collect();
        (d.to_vec(), dd)
    };
    let comb = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> { base.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let p = state.p.values();
    let d = state.d.values();
    let (a1, b1) = rhs(p, d);
    let (a2, b2) = rhs(&comb(p, &a1, 0.5 * dt), &comb(d, &b1, 0.5 * dt));
    let (a3, b3) = rhs(&comb(p, &a2, 0.5 * dt), &comb(d, &b2, 0.5 * dt));
    let (a4, b4) = rhs(&comb(p, &a3, dt), &comb(d, &b3, dt));
    let np: Vec<f64> = (0..n).map(|i| p[i] + dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i])).collect();
    let nd: Vec<f64> = (0..n).map(|i| d[i] + dt / 6.0 * (b1[i] + 2.0 * b2[i] + 2.0 * b3[i] + b4[i])).collect();
    let before: Vec<f64> = p.iter().chain(d).copied().collect();
    let after: Vec<f64> = np.iter().chain(&nd).copied().collect();
    check_blowup(&before, &after)?;
    let grid = state.p.grid().clone();
    Ok(OneTimeScaleState {
        p: GridField::from_raw(grid.clone(), np),
        d: GridField::from_raw(grid, nd),
        t: state.t + dt,
        c,
    })
}

/// `(1 − e^{−λt})/λ`, continuous at `λ = 0`.
fn relaxation_weight(lambda: f64, t: f64) -> f64 {
    if lambda * t < 1e-300 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

/// Closed-form two-time-scale solution driven by an arbitrary forcing field:
/// each retained mode relaxes to `f_i/λ_i`, the rest moves linearly with the
/// out-of-range part of the forcing.
pub fn solve_two_time_scale_forced(
    p0: &GridField,
    forcing: &GridField,
    spec: &SpectralDecomposition,
    t: f64,
) -> Result<GridField> {
    check_same(p0, forcing)?;
    let (c, null0) = spec.split(p0.values());
    let (fc, fnull) = spec.split(forcing.values());
    let coef: Vec<f64> = (0..spec.rank())
        .map(|i| {
            let l = spec.eigenvalues()[i];
            (-l * t).exp() * c[i] + relaxation_weight(l, t) * fc[i]
        })
        .collect();
    let range = spec.synthesize(&coef);
    let values = (0..p0.len()).map(|i| range[i] + null0[i] + t * fnull[i]).collect();
    Ok(GridField::from_raw(p0.grid().clone(), values))
}

/// Closed-form solution `p_t = target + Σ e^{−λ_i t}⟨u_0,e_i⟩e_i + null(u_0)`
/// with `u_0 = p_0 − target`.
pub fn solve_two_time_scale_spectral(
    p0: &GridField,
    target: &GridField,
    spec: &SpectralDecomposition,
    t: f64,
) -> Result<GridField> {
    let u0 = p0.sub(target)?;
    let (c, null0) = spec.split(u0.values());
    let coef: Vec<f64> = c.iter().zip(spec.eigenvalues()).map(|(a, l)| a * (-l * t).exp()).collect();
    let range = spec.synthesize(&coef);
    let values = (0..p0.len()).map(|i| target.values()[i] + range[i] + null0[i]).collect();
    Ok(GridField::from_raw(p0.grid().clone(), values))
}

/// Unit responses of `ẍ + b ẋ + a x = q` in the oscillatory regime.
#[derive(Debug, Clone, Copy)]
struct Oscillator {
    a: f64,
    b: f64,
    omega: f64,
}

impl Oscillator {
    fn new(a: f64, b: f64) -> Result<Self> {
        let disc = 4.0 * a - b * b;
        if !(disc > 0.0) {
            return Err(Error::Domain(format!("4a ≤ b² for a = {a}, b = {b}")));
        }
        Ok(Oscillator {
            a,
            b,
            omega: 0.5 * disc.sqrt(),
        })
    }

    /// `(x, ẋ)` at time `t` for initial data `(x0, v0)` and constant forcing `q`.
    fn state(&self, x0: f64, v0: f64, q: f64, t: f64) -> (f64, f64) {
        let (a, b, w) = (self.a, self.b, self.omega);
        let decay = (-0.5 * b * t).exp();
        let (sn, cs) = (w * t).sin_cos();
        let h = decay * (cs + 0.5 * b / w * sn);
        let s = decay * sn / w;
        let s_dot = decay * (cs - 0.5 * b / w * sn);
        let (r, r_dot) = self.unit_forced(t, h, s);
        (x0 * h + v0 * s + q * r, -a * s * x0 + v0 * s_dot + q * r_dot)
    }

    /// Zero-data response to unit forcing and its derivative; a Taylor series
    /// avoids the cancellation in `(1 − H)/a` for small `a t²`.
    fn unit_forced(&self, t: f64, h: f64, s: f64) -> (f64, f64) {
        if self.a * t * t > 0.25 || self.b * t > 0.5 {
            return ((1.0 - h) / self.a, s);
        }
        let mut coef = [0.0f64; 40];
        coef[2] = 0.5;
        for k in 1..38 {
            coef[k + 2] = -(self.b * (k + 1) as f64 * coef[k + 1] + self.a * coef[k]) / ((k + 2) * (k + 1)) as f64;
        }
        let mut x = 0.0;
        let mut v = 0.0;
        for k in (1..40).rev() {
            x = x * t + coef[k];
            v = v * t + k as f64 * coef[k];
        }
        (x * t, v)
    }
}

/// Position at time `t` of `ẍ + b ẋ + a x = q`, `x(0) = x0`, `ẋ(0) = 0`.
pub fn duhamel_solve(a: f64, b: f64, x0: f64, q: f64, t: f64) -> Result<f64> {
    Ok(Oscillator::new(a, b)?.state(x0, 0.0, q, t).0)
}

/// Position and velocity with general initial velocity.
pub fn duhamel_state(a: f64, b: f64, x0: f64, v0: f64, q: f64, t: f64) -> Result<(f64, f64)> {
    Ok(Oscillator::new(a, b)?.state(x0, v0, q, t))
}

/// Closed-form one-time-scale solution with a general forcing field and
/// initial discriminator. Retained modes follow the damped oscillator with
/// `a = λ_i`, `b = cλ_i`; the remaining component accelerates uniformly
/// under the out-of-range part of the forcing.
pub fn solve_one_time_scale_forced(
    p0: &GridField,
    d0: &GridField,
    forcing: &GridField,
    spec: &SpectralDecomposition,
    c: f64,
    t: f64,
) -> Result<(GridField, GridField)> {
    check_friction(c)?;
    check_same(p0, forcing)?;
    check_same(d0, forcing)?;
    let (pc, pn) = spec.split(p0.values());
    let (dc, dn) = spec.split(d0.values());
    let (fc, fnull) = spec.split(forcing.values());
    let mut xp = vec![0.0; spec.rank()];
    let mut xd = vec![0.0; spec.rank()];
    for i in 0..spec.rank() {
        let l = spec.eigenvalues()[i];
        let (x, v) = Oscillator::new(l, c * l)?.state(pc[i], dc[i], fc[i], t);
        xp[i] = x;
        xd[i] = v;
    }
    let rp = spec.synthesize(&xp);
    let rd = spec.synthesize(&xd);
    let n = p0.len();
    let p = (0..n).map(|i| rp[i] + pn[i] + dn[i] * t + 0.5 * fnull[i] * t * t).collect();
    let d = (0..n).map(|i| rd[i] + dn[i] + fnull[i] * t).collect();
    let grid = p0.grid().clone();
    Ok((GridField::from_raw(grid.clone(), p), GridField::from_raw(grid, d)))
}

/// Closed-form one-time-scale solution from `(p0, D = 0)` towards a grid target.
pub fn solve_one_time_scale_spectral(
    p0: &GridField,
    target: &GridField,
    spec: &SpectralDecomposition,
    c: f64,
    t: f64,
) -> Result<(GridField, GridField)> {
    check_friction(c)?;
    let u0 = p0.sub(target)?;
    let (uc, un) = spec.split(u0.values());
    let mut xp = vec![0.0; spec.rank()];
    let mut xd = vec![0.0; spec.rank()];
    for i in 0..spec.rank() {
        let l = spec.eigenvalues()[i];
        let (x, v) = Oscillator::new(l, c * l)?.state(uc[i], 0.0, 0.0, t);
        xp[i] = x;
        xd[i] = v;
    }
    let rp = spec.synthesize(&xp);
    let rd = spec.synthesize(&xd);
    let p = (0..p0.len()).map(|i| target.values()[i] + rp[i] + un[i]).collect();
    let grid = p0.grid().clone();
    Ok((GridField::from_raw(grid.clone(), p), GridField::from_raw(grid, rd)))
}

/// Integration scheme of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    SpectralExact,
}

/// Which dynamics a trajectory follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    TwoTimeScale { projected: bool },
    OneTimeScale { c: f64 },
}

/// Step size, scheme and uniform recording grid of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dt: f64,
    pub integrator: Integrator,
    pub t_end: f64,
    pub record_every: f64,
}

impl FlowConfig {
    /// Recording times `0, r, 2r, …` up to `t_end`.
    pub fn record_times(&self) -> Result<Vec<f64>> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::usage("flow step must be positive and the horizon nonnegative"));
        }
        if self.t_end == 0.0 {
            return Ok(vec![0.0]);
        }
        if !(self.record_every > 0.0) {
            return Err(Error::usage("record interval must be positive"));
        }
        let count = (self.t_end / self.record_every + 1e-9).floor() as usize;
        Ok((0..=count).map(|k| k as f64 * self.record_every).collect())
    }
}

/// Everything that defines one trajectory except the recording schedule.
#[derive(Debug, Clone, Copy)]
pub struct FlowProblem<'a> {
    pub op: &'a KernelOperator,
    pub spec: Option<&'a SpectralDecomposition>,
    pub forcing: &'a GridField,
    pub p0: &'a GridField,
    pub dynamics: Dynamics,
}

/// What a probe sees at a recording time.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub t: f64,
    pub p: &'a GridField,
    pub d: Option<&'a GridField>,
}

/// Probe values at one recording time.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub values: Vec<f64>,
}

/// Trajectory recorded on the uniform grid of `config`.
pub fn run_trajectory(
    problem: &FlowProblem<'_>,
    config: &FlowConfig,
    probe: &mut dyn FnMut(&Snapshot<'_>) -> Result<Vec<f64>>,
) -> Result<Vec<Record>> {
    let times = config.record_times()?;
    run_to_times(problem, &times, config.dt, config.integrator, probe)
}

/// Trajectory recorded at the given nondecreasing times; RK4 takes the
/// fewest equal steps of size at most `dt_max` between recording times.
pub fn run_to_times(
    problem: &FlowProblem<'_>,
    times: &[f64],
    dt_max: f64,
    integrator: Integrator,
    probe: &mut dyn FnMut(&Snapshot<'_>) -> Result<Vec<f64>>,
) -> Result<Vec<Record>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(Error::usage("recording times must be nonnegative and sorted"));
    }
    let mut out = Vec::with_capacity(times.len());
    match integrator {
        Integrator::SpectralExact => {
            let spec = problem
                .spec
                .ok_or_else(|| Error::usage("the closed-form integrator needs a spectral decomposition"))?;
            for &t in times {
                match problem.dynamics {
                    Dynamics::TwoTimeScale { projected: false } => {
                        let p = solve_two_time_scale_forced(problem.p0, problem.forcing, spec, t)?;
                        out.push(Record { t, values: probe(&Snapshot { t, p: &p, d: None })? });
                    }
                    Dynamics::TwoTimeScale { projected: true } => {
                        return Err(Error::usage("the projected flow has no closed form"));
                    }
                    Dynamics::OneTimeScale { c } => {
                        let d0 = GridField::zeros(problem.p0.grid().clone());
                        let (p, d) = solve_one_time_scale_forced(problem.p0, &d0, problem.forcing, spec, c, t)?;
                        out.push(Record { t, values: probe(&Snapshot { t, p: &p, d: Some(&d) })? });
                    }
                }
            }
        }
        Integrator::Rk4 => {
            if !(dt_max > 0.0) {
                return Err(Error::usage("flow step must be positive"));
            }
            let mut two = None;
            let mut one = None;
            match problem.dynamics {
                Dynamics::TwoTimeScale { projected } => {
                    two = Some(TwoTimeScaleState::new(problem.p0.clone(), projected)?);
                }
                Dynamics::OneTimeScale { c } => one = Some(OneTimeScaleState::new(problem.p0.clone(), c)?),
            }
            let mut now = 0.0;
            for &t in times {
                let span = t - now;
                if span > 0.0 {
                    let steps = (span / dt_max - 1e-9).ceil().max(1.0) as usize;
                    let dt = span / steps as f64;
                    for _ in 0..steps {
                        if let Some(s) = two.as_mut() {
                            *s = step_two_time_scale(s, problem.forcing, problem.op, dt)?;
                        }
                        if let Some(s) = one.as_mut() {
                            *s = step_one_time_scale(s, problem.forcing, problem.op, dt)?;
                        }
                    }
                    now = t;
                }
                let values = if let Some(s) = two.as_ref() {
                    probe(&Snapshot { t, p: &s.p, d: None })?
                } else {
                    let s = one.as_ref().expect("one dynamics is active");
                    probe(&Snapshot { t, p: &s.p, d: Some(&s.d) })?
                };
                out.push(Record { t, values });
            }
        }
    }
    Ok(out)
}
