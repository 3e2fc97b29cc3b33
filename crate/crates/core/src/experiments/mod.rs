//! Seeded, replicated drivers that check each bound of the theory on a
//! concrete discretisation.
//!
//! Every driver takes an [`ExperimentConfig`] and a root seed and returns an
//! [`ExperimentReport`] whose rows and checks are a pure function of the two.
//! Randomness is derived per cell with [`derive_seed`], so results do not
//! depend on the number of worker threads.

pub mod bounds;
mod deterioration;
mod illposed;
mod memorization;
pub mod sampling;
mod sampling_error;
pub mod stats;
mod training;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{make_grid, Grid, GridDensity};
use crate::kernel::{
    make_pair_in_h, sample_rho0, spectral_decompose, FeatureEnsemble, KernelOperator, PairInH, SpectralDecomposition,
};
use crate::rng::derive_seed;
use crate::transport::{w2_1d_continuous, w2_exact};

pub use deterioration::run_slow_deterioration;
pub use illposed::{mollified_profile, run_illposedness_demo, MollifiedProfile};
pub use memorization::run_memorization;
pub use sampling_error::{run_finite_neuron, run_monte_carlo_rate};
pub use training::{run_generalization_error, run_generalization_gap, run_one_time_scale};

/// How the early-stopping time is chosen from the configured constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopRule {
    /// Minimiser of the explicit two-term bound.
    BoundMinimizer,
    /// The asymptotic schedule with unit constant; needs `dim ≥ 2`.
    RateSchedule,
}

/// Parameters of one experiment. Fields an experiment does not use are
/// ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub res: usize,
    /// Features of the model (finite-neuron) kernel or discriminator.
    pub m_model: usize,
    /// Features of the reference kernel and of the probe ensemble.
    pub m_kernel: usize,
    pub n_list: Vec<usize>,
    pub seeds: usize,
    /// Friction of the one-time-scale dynamics.
    pub c: f64,
    pub delta: f64,
    pub t_grid: Vec<f64>,
    pub early_stop_rule: EarlyStopRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Coefficient-profile exponent of the target construction.
    pub profile_exponent: f64,
    /// Requested scale of the target perturbation, lowered to keep the
    /// target above its density floor; absent means the largest such scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_scale: Option<f64>,
    /// Ensemble sizes swept by the finite-neuron experiment.
    pub m_list: Vec<usize>,
    /// Independent operator-gap draws per ensemble size.
    pub trials: usize,
    /// Mollifier radii as multiples of the cell width, decreasing.
    pub eps_ladder: Vec<f64>,
    /// Lipschitz-penalty weight of the regularised discriminator.
    pub penalty: f64,
    pub ascent_dt: f64,
    pub ascent_steps: usize,
    /// Objective value at which subgradient ascent is declared divergent.
    pub loss_ceiling: f64,
}

fn require(ok: bool, name: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name}: {msg}")))
    }
}

impl ExperimentConfig {
    /// Checks the invariants shared by all experiments; errors name the field.
    pub fn validate(&self) -> Result<()> {
        require((1..=3).contains(&self.dim), "dim", "must be 1, 2 or 3")?;
        require(self.res >= 2, "res", "must be at least 2")?;
        require(self.m_model > 0, "m_model", "must be positive")?;
        require(self.m_kernel > 0, "m_kernel", "must be positive")?;
        require(!self.n_list.is_empty(), "n_list", "must be nonempty")?;
        require(self.n_list.iter().all(|&n| n > 0), "n_list", "entries must be positive")?;
        require(self.seeds > 0, "seeds", "must be positive")?;
        require(self.c > 0.0 && self.c.is_finite(), "c", "must be positive")?;
        require(self.delta > 0.0 && self.delta < 1.0, "delta", "must lie in (0,1)")?;
        require(!self.t_grid.is_empty(), "t_grid", "must be nonempty")?;
        require(
            self.t_grid.iter().all(|&t| t > 0.0 && t.is_finite()),
            "t_grid",
            "times must be positive",
        )?;
        require(self.t_grid.windows(2).all(|w| w[0] < w[1]), "t_grid", "times must increase")?;
        require(self.profile_exponent > 0.0, "profile_exponent", "must be positive")?;
        require(
            self.target_scale.map_or(true, |s| s >= 0.0 && s.is_finite()),
            "target_scale",
            "must be finite and nonnegative",
        )?;
        require(self.m_list.iter().all(|&m| m > 0), "m_list", "entries must be positive")?;
        require(self.trials > 0, "trials", "must be positive")?;
        require(self.eps_ladder.iter().all(|&e| e > 0.0), "eps_ladder", "entries must be positive")?;
        require(
            self.eps_ladder.windows(2).all(|w| w[0] > w[1]),
            "eps_ladder",
            "must be strictly decreasing",
        )?;
        require(self.penalty >= 0.0, "penalty", "must be nonnegative")?;
        require(self.ascent_dt > 0.0, "ascent_dt", "must be positive")?;
        require(self.ascent_steps > 0, "ascent_steps", "must be positive")?;
        require(self.loss_ceiling > 0.0, "loss_ceiling", "must be positive")?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the configuration and root seed.
    pub fn hash_hex(&self, root_seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}|{root_seed}").as_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn geometric(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let r = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|k| lo * (r * k as f64).exp()).collect()
}

/// The eight experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    GeneralizationGap,
    GeneralizationError,
    OneTimeScale,
    Memorization,
    MonteCarloRate,
    FiniteNeuron,
    Illposedness,
    SlowDeterioration,
}

/// Documentation of one output column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnDoc {
    pub name: &'static str,
    pub doc: &'static str,
}

const fn col(name: &'static str, doc: &'static str) -> ColumnDoc {
    ColumnDoc { name, doc }
}

const SEED: ColumnDoc = col("seed", "replicate index (empty for seed-free rows)");
const HASH: ColumnDoc = col("config_hash", "hash of the configuration and root seed");

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::GeneralizationGap,
        ExperimentKind::GeneralizationError,
        ExperimentKind::OneTimeScale,
        ExperimentKind::Memorization,
        ExperimentKind::MonteCarloRate,
        ExperimentKind::FiniteNeuron,
        ExperimentKind::Illposedness,
        ExperimentKind::SlowDeterioration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GeneralizationGap => "generalization_gap",
            ExperimentKind::GeneralizationError => "generalization_error",
            ExperimentKind::OneTimeScale => "one_time_scale",
            ExperimentKind::Memorization => "memorization",
            ExperimentKind::MonteCarloRate => "monte_carlo_rate",
            ExperimentKind::FiniteNeuron => "finite_neuron",
            ExperimentKind::Illposedness => "illposedness",
            ExperimentKind::SlowDeterioration => "slow_deterioration",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// The statement the experiment checks.
    pub fn anchor(self) -> &'static str {
        match self {
            ExperimentKind::GeneralizationGap => {
                "Generalization-gap proposition, two-time-scale flow, plain (metric taken after projection) and projected"
            }
            ExperimentKind::GeneralizationError => {
                "Generalization-error theorem and early-stopping corollary, two-time-scale flow"
            }
            ExperimentKind::OneTimeScale => {
                "One-time-scale generalization-error theorem, its training-error and gap lemmas, and early-stopping corollary"
            }
            ExperimentKind::Memorization => {
                "Memorization propositions for both dynamics and the universal-convergence lemma"
            }
            ExperimentKind::MonteCarloRate => "Monte Carlo rate lemma for the random-feature function class",
            ExperimentKind::FiniteNeuron => "Finite-neuron remark and the kernel operator-norm lemma",
            ExperimentKind::Illposedness => "Ill-posedness proposition for function-value regularisers (d >= 3)",
            ExperimentKind::SlowDeterioration => {
                "Slow-deterioration proposition for Lipschitz-regularised discriminators and the norm-growth lemma"
            }
        }
    }

    /// The inequality or identity being checked, with explicit constants.
    pub fn bound(self) -> &'static str {
        match self {
            ExperimentKind::GeneralizationGap => {
                "W2(Pi p_t, Pi p_t^(n)) <= sqrt(d) (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) t / sqrt(n), w.p. 1-delta"
            }
            ExperimentKind::GeneralizationError => {
                "W2(P*, Pi p_t^(n)) <= sqrt(d) ||p*-p0||_H / sqrt(t) + sqrt(d) (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) t / sqrt(n); \
                 ||p_t - p*||^2 <= ||p0-p*||_H^2 / t; error at T(n) ~ n^(-1/6)"
            }
            ExperimentKind::OneTimeScale => {
                "W2(Pi p_t^(n), P*) <= sqrt(d/c) ||p*-p0||_H / sqrt(t) + sqrt(d/c) (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) t^(3/2) / sqrt(n); \
                 ||p_t - p*|| <= ||p*-p0||_H / sqrt(ct); |x_i(t)| <= sqrt(2) |x_i(0)| exp(-c lambda_i t / 2); error at T(n) ~ n^(-1/8)"
            }
            ExperimentKind::Memorization => {
                "MMD(P_t^(n), P*^(n)) -> 0; two-time-scale modes decay as exp(-lambda_i t); target MMD ratio 1e-6 at t = 20 / lambda_median"
            }
            ExperimentKind::MonteCarloRate => {
                "sup_j |E_P*[sigma_j] - E_P*^(n)[sigma_j]| <= (4 sqrt(2 log 2d) + sqrt(2 log(2/delta))) / sqrt(n), w.p. 1-delta"
            }
            ExperimentKind::FiniteNeuron => {
                "||k - k^(m)||_op <= (2 + sqrt(log(4/delta)/2)) / sqrt(m); \
                 ||p_t - p_t^(m)|| <= ||p*-p0||_H (4 + sqrt(2 log(4/delta))) sqrt(t) / sqrt(m), w.p. 1-2delta"
            }
            ExperimentKind::Illposedness => {
                "E_Pn[D_eps] - E_P[D_eps] ~ eps^(-(d/2 - 1.1)) for D = sum_i |x - x_i|^(-d/2 + 1.1) mollified at scale eps, \
                 while the L2, gradient, WGAN-GP and WGAN-LP penalties stay bounded"
            }
            ExperimentKind::SlowDeterioration => {
                "||D_t - D*||_inf >= (3/40) n^(-1/d) - ||D_t||_H (2 sqrt(2 log 2d) + sqrt(log(2/delta)/2)) / sqrt(n), w.p. 1-delta; \
                 ||a_t|| / sqrt(t) -> 0. D* from the exact W1 LP (support cap 1024 per side)"
            }
        }
    }

    /// Output columns in order.
    pub fn columns(self) -> Vec<ColumnDoc> {
        let mut v = vec![SEED, HASH];
        v.extend(match self {
            ExperimentKind::GeneralizationGap => vec![
                col("n", "sample size"),
                col("t", "training time"),
                col("gap_plain", "W2 between projected population and empirical plain trajectories"),
                col("gap_projected", "W2 between population and empirical projected trajectories"),
                col("bound", "right-hand side of the gap bound"),
                col("ok_plain", "gap_plain <= bound"),
                col("ok_projected", "gap_projected <= bound"),
            ],
            ExperimentKind::GeneralizationError => vec![
                col("n", "sample size (empty for population rows)"),
                col("t", "training time"),
                col("series", "train_error_sq | error | error_at_stop"),
                col("value", "squared L2 training error, or W2(P*, Pi p_t^(n))"),
                col("bound", "matching right-hand side"),
                col("ok", "value <= bound"),
            ],
            ExperimentKind::OneTimeScale => vec![
                col("n", "sample size (empty for population rows)"),
                col("t", "training time"),
                col("series", "train_error | envelope_excess | gap_w2 | gap_l2 | error | error_at_stop"),
                col("value", "metric named by series"),
                col("bound", "matching right-hand side (0 for envelope_excess tolerance rows)"),
                col("ok", "value <= bound (envelope rows use the 1e-6 tolerance)"),
            ],
            ExperimentKind::Memorization => vec![
                col("n", "sample size"),
                col("t", "training time"),
                col("dynamics", "two_time_scale | one_time_scale | signed_target"),
                col("mmd", "MMD loss between the trajectory and its target"),
                col("ratio", "mmd divided by its initial value"),
                col("mode_error", "largest per-mode deviation of the closed form from an independent matrix exponential, relative to the largest initial mode"),
            ],
            ExperimentKind::MonteCarloRate => vec![
                col("n", "sample size"),
                col("gap", "sup over probe features of the mean discrepancy"),
                col("bound", "Monte Carlo rate"),
                col("ok", "gap <= bound"),
            ],
            ExperimentKind::FiniteNeuron => vec![
                col("m", "features of the model kernel"),
                col("t", "training time (empty for operator_gap rows)"),
                col("series", "operator_gap | discrepancy"),
                col("value", "operator-norm gap, or L2 distance of the trajectories"),
                col("bound", "matching right-hand side"),
                col("ok", "value <= bound"),
            ],
            ExperimentKind::Illposedness => vec![
                col("n", "number of atoms"),
                col("eps", "mollifier radius"),
                col("objective_gap", "E_Pn[D_eps] - E_P[D_eps]"),
                col("self_gap", "the same with P replaced by Pn (zero)"),
                col("r_l2", "||D_eps||^2"),
                col("r_gradient", "||grad D_eps||^2"),
                col("r_wgan_gp", "||1 - |grad D_eps| ||^2"),
                col("r_wgan_lp", "||max(0, |grad D_eps| - 1)||^2"),
            ],
            ExperimentKind::SlowDeterioration => vec![
                col("n", "sample size"),
                col("t", "ascent time"),
                col("norm_a", "||a_t|| in L2 of the feature distribution"),
                col("norm_ratio", "norm_a / sqrt(t)"),
                col("objective", "E_Pn[D_t] - E_P[D_t] - penalty max(0, Lip - 1)"),
                col("lipschitz", "grid max of |grad D_t|"),
                col("sup_distance", "min over constants of ||D_t - D* - const||_inf on the grid"),
                col("lower_bound", "explicit lower bound on sup_distance"),
                col("ok", "sup_distance >= lower_bound"),
            ],
        });
        v
    }

    /// Defaults at desk scale.
    pub fn defaults(self) -> ExperimentConfig {
        let base = ExperimentConfig {
            dim: 1,
            res: 512,
            m_model: 256,
            m_kernel: 1 << 14,
            n_list: vec![100, 400, 1600],
            seeds: 200,
            c: 1.0,
            delta: 0.1,
            t_grid: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            early_stop_rule: EarlyStopRule::BoundMinimizer,
            output_dir: None,
            profile_exponent: crate::kernel::DEFAULT_PROFILE_EXPONENT,
            target_scale: None,
            m_list: vec![64, 256, 1024],
            trials: 100,
            eps_ladder: vec![8.0, 4.0 * 2f64.sqrt(), 4.0, 2.0 * 2f64.sqrt(), 2.0, 2f64.sqrt(), 1.0],
            penalty: 10.0,
            ascent_dt: 0.02,
            ascent_steps: 4000,
            loss_ceiling: 10.0,
        };
        match self {
            ExperimentKind::GeneralizationGap => base,
            ExperimentKind::GeneralizationError => ExperimentConfig {
                n_list: vec![100, 400, 1600, 6400],
                seeds: 100,
                t_grid: geometric(0.5, 200.0, 40),
                ..base
            },
            ExperimentKind::OneTimeScale => ExperimentConfig {
                n_list: vec![100, 400, 1600, 6400],
                seeds: 100,
                t_grid: geometric(0.5, 200.0, 40),
                ..base
            },
            ExperimentKind::Memorization => ExperimentConfig {
                res: 256,
                m_model: 128,
                n_list: vec![50],
                seeds: 5,
                t_grid: geometric(1.0, 1e4, 9),
                ..base
            },
            ExperimentKind::MonteCarloRate => ExperimentConfig {
                n_list: vec![100, 400],
                ..base
            },
            ExperimentKind::FiniteNeuron => ExperimentConfig {
                res: 256,
                m_model: 64,
                n_list: vec![1],
                seeds: 100,
                ..base
            },
            ExperimentKind::Illposedness => ExperimentConfig {
                dim: 3,
                res: 32,
                n_list: vec![16],
                seeds: 10,
                ..base
            },
            ExperimentKind::SlowDeterioration => ExperimentConfig {
                dim: 2,
                res: 32,
                m_model: 64,
                n_list: vec![64, 256],
                seeds: 100,
                t_grid: vec![4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0, 16384.0],
                penalty: 0.5,
                ascent_dt: 0.25,
                ascent_steps: 65536,
                ..base
            },
        }
    }

    pub fn run(self, cfg: &ExperimentConfig, root_seed: u64) -> Result<ExperimentReport> {
        cfg.validate()?;
        match self {
            ExperimentKind::GeneralizationGap => run_generalization_gap(cfg, root_seed),
            ExperimentKind::GeneralizationError => run_generalization_error(cfg, root_seed),
            ExperimentKind::OneTimeScale => run_one_time_scale(cfg, root_seed),
            ExperimentKind::Memorization => run_memorization(cfg, root_seed),
            ExperimentKind::MonteCarloRate => run_monte_carlo_rate(cfg, root_seed),
            ExperimentKind::FiniteNeuron => run_finite_neuron(cfg, root_seed),
            ExperimentKind::Illposedness => run_illposedness_demo(cfg, root_seed),
            ExperimentKind::SlowDeterioration => run_slow_deterioration(cfg, root_seed),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Empty,
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Value {
    /// Shortest round-trip decimal for floats.
    pub fn render(&self) -> String {
        match self {
            Value::Empty => String::new(),
            Value::Int(v) => v.to_string(),
            Value::Float(v) => format!("{v:?}"),
            Value::Text(s) => s.clone(),
            Value::Bool(b) => b.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

/// Outcome of one configured check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The statistic compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
    /// Human-readable descriptions of failing rows, capped.
    pub failures: Vec<String>,
}

const FAILURE_CAP: usize = 20;

impl Check {
    pub fn new(name: &str, passed: bool, value: f64, threshold: f64, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            value,
            threshold,
            detail,
            failures: Vec::new(),
        }
    }

    fn with_failures(mut self, failures: Vec<String>) -> Self {
        self.failures = failures.into_iter().take(FAILURE_CAP).collect();
        self
    }
}

/// Rows, checks and environment of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub root_seed: u64,
    pub config_hash: String,
    pub columns: Vec<ColumnDoc>,
    pub rows: Vec<Vec<Value>>,
    pub checks: Vec<Check>,
    /// Environment entries: ensemble hashes, grid, tolerances.
    pub environment: Vec<(String, String)>,
}

impl ExperimentReport {
    fn new(kind: ExperimentKind, cfg: &ExperimentConfig, root_seed: u64) -> Self {
        ExperimentReport {
            kind,
            config: cfg.clone(),
            root_seed,
            config_hash: cfg.hash_hex(root_seed),
            columns: kind.columns(),
            rows: Vec::new(),
            checks: Vec::new(),
            environment: vec![
                ("grid".into(), format!("dim={} res={}", cfg.dim, cfg.res)),
                ("seeds".into(), cfg.seeds.to_string()),
            ],
        }
    }

    fn push_row(&mut self, seed: Option<usize>, rest: Vec<Value>) {
        let mut row = vec![seed.map_or(Value::Empty, Value::from), Value::Text(self.config_hash.clone())];
        row.extend(rest);
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn env(&mut self, key: &str, value: impl fmt::Display) {
        self.environment.push((key.to_string(), value.to_string()));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Seed tags of the independent random streams.
pub(crate) mod tags {
    pub const KERNEL: u64 = 1;
    pub const PAIR: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const MODEL: u64 = 4;
    pub const TRIAL: u64 = 5;
}

/// Reference kernel, its spectrum and the start/target pair.
pub(crate) struct Population {
    pub grid: Arc<Grid>,
    pub ens: Arc<FeatureEnsemble>,
    pub op: KernelOperator,
    pub spec: SpectralDecomposition,
    pub pair: PairInH,
}

pub(crate) fn population(cfg: &ExperimentConfig, root_seed: u64) -> Result<Population> {
    let grid = make_grid(cfg.dim, cfg.res)?;
    let ens = Arc::new(sample_rho0(cfg.dim, cfg.m_kernel, derive_seed(root_seed, &[tags::KERNEL]))?);
    let op = KernelOperator::new(ens.clone(), &grid)?;
    let spec = spectral_decompose(&op, None)?;
    let pair = make_pair_in_h(
        &spec,
        derive_seed(root_seed, &[tags::PAIR]),
        cfg.target_scale.unwrap_or(f64::MAX),
        cfg.profile_exponent,
    )?;
    Ok(Population {
        grid,
        ens,
        op,
        spec,
        pair,
    })
}

impl Population {
    fn describe(&self, report: &mut ExperimentReport) {
        report.env("kernel_ensemble_sha256", self.ens.hash_hex());
        report.env("kernel_features", self.ens.m());
        report.env("spectral_rank", self.spec.rank());
        report.env("spectral_cutoff", self.spec.cutoff());
        report.env("lambda_max", self.spec.lambda_max());
        report.env("target_norm_h", self.pair.norm_h);
        report.env("target_scale", self.pair.scale);
    }
}

/// W2 between densities: piecewise-constant densities in one dimension, the
/// transport LP between cell-center atoms otherwise.
pub(crate) fn w2_between(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    if p.grid().dim() == 1 {
        w2_1d_continuous(p, q)
    } else {
        Ok(w2_exact(p, q)?.0)
    }
}

/// Pass-fraction check with the binomial tolerance; `ok[k][s]` says whether
/// seed `s` passed for `list[k]`.
pub(crate) fn fraction_check(name: &str, list: &[usize], ok: &[Vec<bool>], delta: f64, label: &str) -> Check {
    let seeds = ok.first().map_or(1, Vec::len);
    let level = 1.0 - delta - stats::binomial_slack(delta, seeds);
    level_check(name, list, ok, level, label, "1 - delta - slack")
}

/// Passes iff every pass fraction reaches `level`.
pub(crate) fn level_check(
    name: &str,
    list: &[usize],
    ok: &[Vec<bool>],
    level: f64,
    label: &str,
    rule: &str,
) -> Check {
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (k, &n) in list.iter().enumerate() {
        let frac = ok[k].iter().filter(|&&b| b).count() as f64 / ok[k].len() as f64;
        worst = worst.min(frac);
        parts.push(format!("{label}={n}: {frac:.4}"));
        failures.extend(ok[k].iter().enumerate().filter(|(_, &b)| !b).map(|(s, _)| format!("{label}={n} seed={s}")));
    }
    Check::new(
        name,
        worst >= level,
        worst,
        level,
        format!("pass fractions {} (required >= {rule} = {level:.4})", parts.join(", ")),
    )
    .with_failures(failures)
}
