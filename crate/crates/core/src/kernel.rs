//! Random ReLU features, the kernel they induce, and everything computed
//! from it: convolutions against fields and atoms, eigenpairs, RKHS norms,
//! the optimal discriminator and the MMD loss.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{dot, Grid, GridDensity, GridField, SampleSet};
use crate::rng::rng_from_seed;

/// Size of the ensemble standing in for the population kernel.
pub const DEFAULT_POPULATION_FEATURES: usize = 1 << 14;

/// Largest grid handed to the dense eigensolver.
pub const DEFAULT_EIGEN_CAP: usize = 4096;

/// Eigenvalues below this multiple of the largest one are discarded.
pub const DEFAULT_RELATIVE_CUTOFF: f64 = 1e-12;

/// Residual above which a field is reported as outside the kernel range.
pub const RANGE_RESIDUAL_TOL: f64 = 1e-8;

#[inline]
fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// `m` features `(w_j, b_j)` with `‖w_j‖₁ + |b_j| ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEnsemble {
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    seed: u64,
}

/// Draws `m` features uniformly from the unit L¹ sphere of `R^(dim+1)`.
pub fn sample_rho0(dim: usize, m: usize, seed: u64) -> Result<FeatureEnsemble> {
    if dim == 0 || m == 0 {
        return Err(Error::usage("feature sampling needs dim ≥ 1 and m ≥ 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut weights = Vec::with_capacity(m * dim);
    let mut biases = Vec::with_capacity(m);
    let mut buf = vec![0.0; dim + 1];
    for _ in 0..m {
        let mut total = 0.0;
        for e in buf.iter_mut() {
            *e = Exp1.sample(&mut rng);
            total += *e;
        }
        for (k, e) in buf.iter().enumerate() {
            let signed = if rng.gen::<bool>() { e / total } else { -e / total };
            if k < dim {
                weights.push(signed);
            } else {
                biases.push(signed);
            }
        }
    }
    Ok(FeatureEnsemble {
        dim,
        weights,
        biases,
        seed,
    })
}

impl FeatureEnsemble {
    /// Ensemble from explicit parameters; the support condition is checked.
    pub fn from_parts(dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.len() != dim * biases.len() || biases.is_empty() {
            return Err(Error::usage("feature parameter shapes are inconsistent"));
        }
        for j in 0..biases.len() {
            let l1: f64 = weights[j * dim..(j + 1) * dim].iter().map(|w| w.abs()).sum::<f64>() + biases[j].abs();
            if l1 > 1.0 + 1e-12 {
                return Err(Error::usage(format!("feature {j} violates the unit L1 support")));
            }
        }
        Ok(FeatureEnsemble {
            dim,
            weights,
            biases,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.biases.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn bias(&self, j: usize) -> f64 {
        self.biases[j]
    }

    pub fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        dot(self.weight(j), x) + self.biases[j]
    }

    pub fn feature(&self, j: usize, x: &[f64]) -> f64 {
        relu(self.preactivation(j, x))
    }

    /// Half-scaled union of the ensemble and its mirror image under `x ↦ 1 − x`.
    pub fn symmetrized(&self) -> FeatureEnsemble {
        let mut weights = Vec::with_capacity(2 * self.weights.len());
        let mut biases = Vec::with_capacity(2 * self.m());
        for j in 0..self.m() {
            weights.extend(self.weight(j).iter().map(|w| 0.5 * w));
            biases.push(0.5 * self.biases[j]);
        }
        for j in 0..self.m() {
            let w = self.weight(j);
            weights.extend(w.iter().map(|v| -0.5 * v));
            biases.push(0.5 * (self.biases[j] + w.iter().sum::<f64>()));
        }
        FeatureEnsemble {
            dim: self.dim,
            weights,
            biases,
            seed: self.seed,
        }
    }

    /// `Σ_l weight_l σ(w_j·x_l + b_j)` for every feature `j`.
    pub fn atom_moments(&self, s: &SampleSet) -> Result<Vec<f64>> {
        if s.dim() != self.dim {
            return Err(Error::usage("sample dimension differs from the ensemble dimension"));
        }
        Ok((0..self.m())
            .into_par_iter()
            .with_min_len(64)
            .map(|j| {
                (0..s.len())
                    .map(|l| s.weights()[l] * self.feature(j, s.point(l)))
                    .sum()
            })
            .collect())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.m() as u64).to_le_bytes());
        for v in self.weights.iter().chain(&self.biases) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Features evaluated at every cell center, `Φ[j, i] = σ(w_j·x_i + b_j)`.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    grid: Arc<Grid>,
    phi: DMatrix<f64>,
}

pub fn feature_matrix(ens: &FeatureEnsemble, grid: &Arc<Grid>) -> Result<FeatureMatrix> {
    if ens.dim() != grid.dim() {
        return Err(Error::usage("ensemble and grid dimensions differ"));
    }
    let m = ens.m();
    let cols: Vec<f64> = (0..grid.cells())
        .into_par_iter()
        .with_min_len(16)
        .flat_map_iter(|i| {
            let x = grid.center(i);
            (0..m).map(move |j| ens.feature(j, x))
        })
        .collect();
    Ok(FeatureMatrix {
        grid: grid.clone(),
        phi: DMatrix::from_vec(m, grid.cells(), cols),
    })
}

impl FeatureMatrix {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn entry(&self, j: usize, i: usize) -> f64 {
        self.phi[(j, i)]
    }
}

/// The discretised convolution `K f = (h/m) Φᵀ Φ f` of one ensemble on one grid.
#[derive(Debug)]
pub struct KernelOperator {
    ens: Arc<FeatureEnsemble>,
    features: FeatureMatrix,
    gram: Option<DMatrix<f64>>,
    lambda_max: OnceLock<f64>,
}

impl KernelOperator {
    /// Stores the dense `N × N` operator whenever that makes products cheaper.
    pub fn new(ens: Arc<FeatureEnsemble>, grid: &Arc<Grid>) -> Result<Self> {
        let cells = grid.cells();
        let dense = cells <= 2 * ens.m() && cells <= DEFAULT_EIGEN_CAP;
        Self::build(ens, grid, dense)
    }

    pub fn build(ens: Arc<FeatureEnsemble>, grid: &Arc<Grid>, dense: bool) -> Result<Self> {
        let features = feature_matrix(&ens, grid)?;
        let gram = dense.then(|| dense_operator(&features, ens.m()));
        Ok(KernelOperator {
            ens,
            features,
            gram,
            lambda_max: OnceLock::new(),
        })
    }

    pub fn ensemble(&self) -> &Arc<FeatureEnsemble> {
        &self.ens
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.features.grid
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn m(&self) -> usize {
        self.ens.m()
    }

    /// Dense matrix of the operator (computed on demand when not stored).
    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.gram {
            Some(g) => g.clone(),
            None => dense_operator(&self.features, self.m()),
        }
    }

    pub(crate) fn apply_slice(&self, x: &[f64], out: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        let y = match &self.gram {
            Some(g) => g * xv,
            None => {
                let h = self.grid().cell_weight();
                let a = &self.features.phi * &xv * h;
                self.features.phi.tr_mul(&a) / self.m() as f64
            }
        };
        out.copy_from_slice(y.as_slice());
    }

    pub fn apply(&self, f: &GridField) -> Result<GridField> {
        if !f.grid().same_as(self.grid()) {
            return Err(Error::usage("field and kernel live on different grids"));
        }
        let mut out = vec![0.0; f.len()];
        self.apply_slice(f.values(), &mut out);
        Ok(GridField::from_raw(self.grid().clone(), out))
    }

    /// Quadrature moments `h Σ_i Φ[j,i] f_i`.
    pub fn grid_moments(&self, f: &[f64]) -> Vec<f64> {
        let h = self.grid().cell_weight();
        let a = &self.features.phi * DVector::from_column_slice(f);
        a.iter().map(|v| v * h).collect()
    }

    /// `∫ σ_j dμ` for every feature.
    pub fn moments(&self, mu: &SignedMeasure<'_>) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.m()];
        for (coef, part) in &mu.parts {
            let mom = match part {
                MeasureRef::Density(f) => {
                    if !f.grid().same_as(self.grid()) {
                        return Err(Error::usage("measure and kernel live on different grids"));
                    }
                    self.grid_moments(f.values())
                }
                MeasureRef::Atoms(s) => self.ens.atom_moments(s)?,
            };
            for (a, v) in acc.iter_mut().zip(mom) {
                *a += coef * v;
            }
        }
        Ok(acc)
    }

    /// The field `(1/m) Σ_j a_j σ_j(x_i)`.
    pub fn synthesize(&self, a: &[f64]) -> GridField {
        let y = self.features.phi.tr_mul(&DVector::from_column_slice(a)) / self.m() as f64;
        GridField::from_raw(self.grid().clone(), y.as_slice().to_vec())
    }

    /// `k * μ` on the grid.
    pub fn convolve(&self, mu: &SignedMeasure<'_>) -> Result<GridField> {
        Ok(self.synthesize(&self.moments(mu)?))
    }

    /// Largest eigenvalue, by power iteration.
    pub fn lambda_max(&self) -> f64 {
        *self.lambda_max.get_or_init(|| {
            let n = self.grid().cells();
            let mut x = vec![1.0 / (n as f64).sqrt(); n];
            let mut y = vec![0.0; n];
            let mut lam = 0.0;
            for _ in 0..1000 {
                self.apply_slice(&x, &mut y);
                let norm = dot(&y, &y).sqrt();
                if norm == 0.0 {
                    return 0.0;
                }
                let next = dot(&x, &y);
                x.iter_mut().zip(&y).for_each(|(a, b)| *a = b / norm);
                if (next - lam).abs() <= 1e-14 * next.abs() {
                    lam = next;
                    break;
                }
                lam = next;
            }
            lam
        })
    }
}

fn dense_operator(features: &FeatureMatrix, m: usize) -> DMatrix<f64> {
    let phi = &features.phi;
    let scale = features.grid.cell_weight() / m as f64;
    let mut k = phi.transpose() * phi;
    k *= scale;
    k.fill_lower_triangle_with_upper_triangle();
    k
}

/// `k * f` for a single field.
pub fn kernel_apply(op: &KernelOperator, f: &GridField) -> Result<GridField> {
    op.apply(f)
}

/// `sign · k * P` for an atomic measure `P`.
pub fn kernel_apply_atoms(op: &KernelOperator, s: &SampleSet, sign: f64) -> Result<GridField> {
    op.convolve(&SignedMeasure::new().with(sign, MeasureRef::Atoms(s)))
}

/// A borrowed measure: a grid density (any field is accepted) or exact atoms.
#[derive(Debug, Clone, Copy)]
pub enum MeasureRef<'a> {
    Density(&'a GridField),
    Atoms(&'a SampleSet),
}

impl<'a> From<&'a GridDensity> for MeasureRef<'a> {
    fn from(p: &'a GridDensity) -> Self {
        MeasureRef::Density(p.field())
    }
}

impl<'a> From<&'a GridField> for MeasureRef<'a> {
    fn from(f: &'a GridField) -> Self {
        MeasureRef::Density(f)
    }
}

impl<'a> From<&'a SampleSet> for MeasureRef<'a> {
    fn from(s: &'a SampleSet) -> Self {
        MeasureRef::Atoms(s)
    }
}

/// Finite linear combination of measures.
#[derive(Debug, Clone, Default)]
pub struct SignedMeasure<'a> {
    parts: Vec<(f64, MeasureRef<'a>)>,
}

impl<'a> SignedMeasure<'a> {
    pub fn new() -> Self {
        SignedMeasure { parts: Vec::new() }
    }

    pub fn with(mut self, coef: f64, part: MeasureRef<'a>) -> Self {
        self.parts.push((coef, part));
        self
    }

    /// `a − b`.
    pub fn difference(a: impl Into<MeasureRef<'a>>, b: impl Into<MeasureRef<'a>>) -> Self {
        SignedMeasure::new().with(1.0, a.into()).with(-1.0, b.into())
    }

    pub fn parts(&self) -> &[(f64, MeasureRef<'a>)] {
        &self.parts
    }
}

/// `D_* = ½ k * (P_* − P)`.
pub fn optimal_discriminator<'a>(
    op: &KernelOperator,
    p: impl Into<MeasureRef<'a>>,
    p_star: impl Into<MeasureRef<'a>>,
) -> Result<GridField> {
    Ok(op.convolve(&SignedMeasure::difference(p_star, p))?.scaled(0.5))
}

/// `½ (1/m) Σ_j (∫σ_j dμ)²`.
pub fn mmd_loss(op: &KernelOperator, mu: &SignedMeasure<'_>) -> Result<f64> {
    let mom = op.moments(mu)?;
    Ok(0.5 * dot(&mom, &mom) / op.m() as f64)
}

/// Largest probe-feature discrepancy between a grid density and atoms.
pub fn feature_sup_gap(probe: &KernelOperator, p_star: &GridDensity, s: &SampleSet) -> Result<f64> {
    let mom = probe.moments(&SignedMeasure::difference(p_star, s))?;
    Ok(mom.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Spectral norm of the difference of two discretised kernel operators.
pub fn operator_gap(a: &KernelOperator, b: &KernelOperator) -> Result<f64> {
    if !a.grid().same_as(b.grid()) {
        return Err(Error::usage("operators live on different grids"));
    }
    let cells = a.grid().cells();
    if cells > DEFAULT_EIGEN_CAP {
        return Err(Error::resource("operator-gap eigensolve cells", cells, DEFAULT_EIGEN_CAP));
    }
    let diff = a.matrix() - b.matrix();
    let eig = diff.symmetric_eigenvalues();
    Ok(eig.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

/// Eigenpairs of the discretised kernel operator, eigenfields orthonormal in
/// quadrature L².
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    grid: Arc<Grid>,
    eigenvalues: Vec<f64>,
    eigenfields: DMatrix<f64>,
    cutoff: f64,
    discarded: usize,
}

/// Eigendecomposition with the default eigensolver cap. `lambda_min = None`
/// selects the relative cutoff `1e-12 · λ_max`.
pub fn spectral_decompose(op: &KernelOperator, lambda_min: Option<f64>) -> Result<SpectralDecomposition> {
    spectral_decompose_with_cap(op, lambda_min, DEFAULT_EIGEN_CAP)
}

pub fn spectral_decompose_with_cap(
    op: &KernelOperator,
    lambda_min: Option<f64>,
    cap: usize,
) -> Result<SpectralDecomposition> {
    let grid = op.grid().clone();
    let n = grid.cells();
    if n > cap {
        return Err(Error::resource("eigensolve cells", n, cap));
    }
    let h = grid.cell_weight();
    let m = op.m();
    let phi = op.features.matrix();
    let (vals, vecs) = if n <= m {
        let eig = SymmetricEigen::new(op.matrix());
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let mut small = phi * phi.transpose();
        small *= h / m as f64;
        small.fill_lower_triangle_with_upper_triangle();
        let eig = SymmetricEigen::new(small);
        (eig.eigenvalues, eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let top = vals[order[0]].max(0.0);
    let cutoff = lambda_min.unwrap_or(DEFAULT_RELATIVE_CUTOFF * top);
    let kept: Vec<usize> = order.iter().copied().filter(|&k| vals[k] >= cutoff && vals[k] > 0.0).collect();
    let mut fields = DMatrix::zeros(n, kept.len());
    let inv_sqrt_h = 1.0 / h.sqrt();
    for (c, &k) in kept.iter().enumerate() {
        let mut col = if n <= m {
            vecs.column(k) * inv_sqrt_h
        } else {
            phi.tr_mul(&vecs.column(k)) / (m as f64 * vals[k]).sqrt()
        };
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        fields.set_column(c, &col);
    }
    Ok(SpectralDecomposition {
        grid,
        eigenvalues: kept.iter().map(|&k| vals[k]).collect(),
        eigenfields: fields,
        cutoff,
        discarded: vals.len() - kept.len(),
    })
}

impl SpectralDecomposition {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn lambda_median(&self) -> f64 {
        let r = self.rank();
        if r == 0 {
            return 0.0;
        }
        let mut v = self.eigenvalues.clone();
        v.sort_by(f64::total_cmp);
        if r % 2 == 1 {
            v[r / 2]
        } else {
            0.5 * (v[r / 2 - 1] + v[r / 2])
        }
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn discarded(&self) -> usize {
        self.discarded
    }

    pub fn eigenfield(&self, i: usize) -> GridField {
        GridField::from_raw(self.grid.clone(), self.eigenfields.column(i).iter().copied().collect())
    }

    /// `⟨f, e_i⟩` for every retained mode.
    pub fn coefficients(&self, f: &[f64]) -> Vec<f64> {
        let c = self.eigenfields.tr_mul(&DVector::from_column_slice(f)) * self.grid.cell_weight();
        c.as_slice().to_vec()
    }

    /// `Σ_i c_i e_i`.
    pub fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        (&self.eigenfields * DVector::from_column_slice(c)).as_slice().to_vec()
    }

    /// Range coefficients of `f` and its component outside the retained span.
    pub fn split(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.coefficients(f);
        let back = self.synthesize(&c);
        let rest = f.iter().zip(&back).map(|(a, b)| a - b).collect();
        (c, rest)
    }

    /// `Σ λ_i e_i ⟨e_i, f⟩`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = self.coefficients(f).iter().zip(&self.eigenvalues).map(|(a, l)| a * l).collect();
        self.synthesize(&c)
    }
}

/// Squared RKHS norm over the retained modes and the L² norm of what lies
/// outside them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RkhsNorm {
    pub value: f64,
    pub residual: f64,
}

impl RkhsNorm {
    /// `true` when the residual is numerically zero.
    pub fn in_range(&self) -> bool {
        self.residual <= RANGE_RESIDUAL_TOL
    }
}

pub fn rkhs_norm_sq(f: &GridField, spec: &SpectralDecomposition) -> Result<RkhsNorm> {
    if !f.grid().same_as(&spec.grid) {
        return Err(Error::usage("field and decomposition live on different grids"));
    }
    let (c, rest) = spec.split(f.values());
    let value = c.iter().zip(&spec.eigenvalues).map(|(a, l)| a * a / l).sum();
    let residual = (spec.grid.cell_weight() * dot(&rest, &rest)).sqrt();
    Ok(RkhsNorm { value, residual })
}

/// Exponent β of the coefficient profile `|⟨u, e_i⟩| = λ_i^{β/2}` used by
/// [`make_pair_in_h`].
pub const DEFAULT_PROFILE_EXPONENT: f64 = 1.2;

/// Smallest admissible target density, relative to the uniform start.
pub const PAIR_DENSITY_FLOOR: f64 = 0.1;

/// A start/target pair whose difference lies in the kernel range.
#[derive(Debug, Clone)]
pub struct PairInH {
    pub p0: GridDensity,
    pub p_star: GridDensity,
    /// `‖p_* − p_0‖_ℋ`.
    pub norm_h: f64,
    /// Scale actually applied after the nonnegativity adjustment.
    pub scale: f64,
    /// Field with `p_* − p_0 = scale · k * g`.
    pub g: GridField,
}

/// Uniform start and a target `p_* = 1 + scale · k*g` with zero-mean,
/// in-range perturbation.
///
/// `g` has random-sign coefficients `λ_i^{β/2 − 1}` on the retained modes
/// except the leading one, whose coefficient is solved so that `k*g`
/// integrates to zero. The scale is reduced if needed so that
/// `p_* ≥ PAIR_DENSITY_FLOOR`.
pub fn make_pair_in_h(spec: &SpectralDecomposition, seed: u64, scale: f64, beta: f64) -> Result<PairInH> {
    let grid = spec.grid.clone();
    let p0 = GridDensity::uniform(grid.clone());
    let r = spec.rank();
    if r < 2 {
        return Err(Error::Construction("kernel range has fewer than two modes".into()));
    }
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::usage("pair scale must be finite and nonnegative"));
    }
    let ones = vec![1.0; grid.cells()];
    let means = spec.coefficients(&ones);
    if means[0].abs() < 1e-8 {
        return Err(Error::Construction("leading eigenfield has zero mean".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut c = vec![0.0; r];
    for i in 1..r {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        c[i] = sign * spec.eigenvalues[i].powf(0.5 * beta);
    }
    c[0] = -(1..r).map(|i| c[i] * means[i]).sum::<f64>() / means[0];
    let u = spec.synthesize(&c);
    let min_u = u.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_u < 0.0) {
        return Err(Error::Construction("perturbation has no negative part".into()));
    }
    let limit = (1.0 - PAIR_DENSITY_FLOOR) / -min_u;
    let applied = scale.min(limit);
    let values: Vec<f64> = u.iter().map(|v| 1.0 + applied * v).collect();
    let p_star = GridDensity::new(GridField::from_raw(grid.clone(), values))
        .map_err(|e| Error::Construction(format!("target is not a density: {e}")))?;
    let norm_sq: f64 = c.iter().zip(&spec.eigenvalues).map(|(a, l)| a * a / l).sum();
    let g_coef: Vec<f64> = c.iter().zip(&spec.eigenvalues).map(|(a, l)| a / l).collect();
    Ok(PairInH {
        p0,
        p_star,
        norm_h: applied * norm_sq.sqrt(),
        scale: applied,
        g: GridField::from_raw(grid, spec.synthesize(&g_coef)),
    })
}

/// Finite-neuron discriminator `D(x) = (1/m) Σ_j a_j σ(w_j·x + b_j)`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    ens: Arc<FeatureEnsemble>,
    coeffs: Vec<f64>,
}

impl Discriminator {
    pub fn new(ens: Arc<FeatureEnsemble>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != ens.m() {
            return Err(Error::usage("one coefficient per feature is required"));
        }
        Ok(Discriminator { ens, coeffs })
    }

    pub fn zero(ens: Arc<FeatureEnsemble>) -> Self {
        let m = ens.m();
        Discriminator { ens, coeffs: vec![0.0; m] }
    }

    pub fn ensemble(&self) -> &Arc<FeatureEnsemble> {
        &self.ens
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let m = self.ens.m();
        (0..m).map(|j| self.coeffs[j] * self.ens.feature(j, x)).sum::<f64>() / m as f64
    }

    /// Gradient in `x`, using the right derivative of ReLU at the kink.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        let m = self.ens.m();
        for j in 0..m {
            if self.ens.preactivation(j, x) > 0.0 {
                for (g, w) in out.iter_mut().zip(self.ens.weight(j)) {
                    *g += self.coeffs[j] * w;
                }
            }
        }
        out.iter_mut().for_each(|g| *g /= m as f64);
    }

    /// `‖a‖_{L²(ρ0^{(m)})} = sqrt((1/m) Σ a_j²)`.
    pub fn rkhs_norm(&self) -> f64 {
        (dot(&self.coeffs, &self.coeffs) / self.coeffs.len() as f64).sqrt()
    }

    pub fn on_grid(&self, grid: &Arc<Grid>) -> GridField {
        GridField::from_fn(grid.clone(), |x| self.eval(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inner_l2, integrate, make_grid, norm_l2};
    use crate::oracles::mmd_double_sum;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn op(dim: usize, res: usize, m: usize, seed: u64) -> KernelOperator {
        let g = make_grid(dim, res).unwrap();
        KernelOperator::new(Arc::new(sample_rho0(dim, m, seed).unwrap()), &g).unwrap()
    }

    #[test]
    fn sampler_support_and_determinism() {
        let e = sample_rho0(3, 500, 11).unwrap();
        for j in 0..e.m() {
            let l1: f64 = e.weight(j).iter().map(|w| w.abs()).sum::<f64>() + e.bias(j).abs();
            assert_abs_diff_eq!(l1, 1.0, epsilon = 1e-12);
        }
        assert_eq!(e, sample_rho0(3, 500, 11).unwrap());
        assert_ne!(e, sample_rho0(3, 500, 12).unwrap());
    }

    #[test]
    fn bias_mean_is_symmetric() {
        let m = 100_000;
        let e = sample_rho0(1, m, 3).unwrap();
        let mean = e.biases.iter().sum::<f64>() / m as f64;
        let var = e.biases.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / m as f64).sqrt());
    }

    #[test]
    fn feature_values() {
        let e = FeatureEnsemble::from_parts(1, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(e.feature(0, &[0.5]), 0.5);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(e.feature(1, &[x]), 0.0);
        }
        assert!(FeatureEnsemble::from_parts(1, vec![0.8], vec![0.5]).is_err());
        let k = op(2, 8, 300, 1);
        assert!(k.features().matrix().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn kernel_is_symmetric_and_bounded() {
        let k = op(1, 64, 400, 2);
        let g = k.grid().clone();
        let f = GridField::from_fn(g.clone(), |x| (5.0 * x[0]).cos());
        let q = GridField::from_fn(g.clone(), |x| x[0] * x[0] - 0.2);
        assert_eq!(k.apply(&GridField::zeros(g)).unwrap().max_abs(), 0.0);
        let lhs = inner_l2(&k.apply(&f).unwrap(), &q).unwrap();
        let rhs = inner_l2(&f, &k.apply(&q).unwrap()).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        let eig = k.matrix().symmetric_eigenvalues();
        assert!(eig.max() <= 1.0 + 1e-8);
        assert!(eig.min() >= -1e-9);
        assert_abs_diff_eq!(k.lambda_max(), eig.max(), epsilon = 1e-9);
    }

    #[test]
    fn feature_route_matches_dense_route() {
        let g = make_grid(1, 40).unwrap();
        let ens = Arc::new(sample_rho0(1, 15, 4).unwrap());
        let a = KernelOperator::build(ens.clone(), &g, true).unwrap();
        let b = KernelOperator::build(ens, &g, false).unwrap();
        let f = GridField::from_fn(g, |x| (9.0 * x[0]).sin());
        let fa = a.apply(&f).unwrap();
        let fb = b.apply(&f).unwrap();
        assert!(norm_l2(&fa.sub(&fb).unwrap()) < 1e-14);
    }

    #[test]
    fn atoms_reproduce_kernel_sections() {
        let k = op(1, 32, 200, 5);
        let g = k.grid().clone();
        let c = 9;
        let s = SampleSet::new(1, g.center(c).to_vec()).unwrap();
        let col = kernel_apply_atoms(&k, &s, 1.0).unwrap();
        let kmat = k.matrix();
        let h = g.cell_weight();
        for i in 0..g.cells() {
            assert_abs_diff_eq!(col.values()[i], kmat[(i, c)] / h, epsilon = 1e-12);
        }
        let quad = SampleSet::from_density(&GridDensity::uniform(g.clone()));
        let via_atoms = kernel_apply_atoms(&k, &quad, 1.0).unwrap();
        let via_grid = k.apply(&GridField::constant(g, 1.0)).unwrap();
        assert!(norm_l2(&via_atoms.sub(&via_grid).unwrap()) < 1e-12);
    }

    #[test]
    fn symmetrized_ensemble_gives_symmetric_fields() {
        let g = make_grid(1, 64).unwrap();
        let ens = Arc::new(sample_rho0(1, 300, 6).unwrap().symmetrized());
        let k = KernelOperator::new(ens, &g).unwrap();
        let s = SampleSet::new(1, vec![0.2, 0.8]).unwrap();
        let f = kernel_apply_atoms(&k, &s, 1.0).unwrap();
        let n = g.cells();
        for i in 0..n {
            assert_abs_diff_eq!(f.values()[i], f.values()[n - 1 - i], epsilon = 1e-12);
        }
    }

    #[test]
    fn spectral_identities() {
        let k = op(1, 64, 40, 7);
        let spec = spectral_decompose(&k, None).unwrap();
        assert!(spec.rank() <= 40);
        assert!(spec.eigenvalues().iter().all(|&l| l > 0.0 && l <= 1.0));
        let g = k.grid().clone();
        for i in 0..spec.rank().min(10) {
            let ei = spec.eigenfield(i);
            let kei = k.apply(&ei).unwrap();
            assert!(norm_l2(&kei.axpy(-spec.eigenvalues()[i], &ei).unwrap()) < 1e-8);
            for j in 0..=i {
                let ip = inner_l2(&ei, &spec.eigenfield(j)).unwrap();
                assert_abs_diff_eq!(ip, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-8);
            }
        }
        let e1 = spec.eigenfield(0);
        let n = rkhs_norm_sq(&e1, &spec).unwrap();
        assert_abs_diff_eq!(n.value, 1.0 / spec.eigenvalues()[0], epsilon = 1e-8);
        assert!(n.residual < 1e-10);
        let f = GridField::from_fn(g.clone(), |x| (3.0 * x[0]).sin());
        let kf = k.apply(&f).unwrap();
        let recon = spec.apply(f.values());
        for (a, b) in recon.iter().zip(kf.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
        let (_, rest) = spec.split(f.values());
        let orth = GridField::new(g, rest).unwrap();
        let on = rkhs_norm_sq(&orth, &spec).unwrap();
        assert!(on.value < 1e-12);
        assert_abs_diff_eq!(on.residual, norm_l2(&orth), epsilon = 1e-10);
    }

    #[test]
    fn both_eigen_routes_agree() {
        let g = make_grid(1, 30).unwrap();
        let ens = Arc::new(sample_rho0(1, 60, 8).unwrap());
        let wide = KernelOperator::new(ens.clone(), &g).unwrap();
        let a = spectral_decompose(&wide, None).unwrap();
        let g2 = make_grid(1, 120).unwrap();
        let tall = KernelOperator::new(ens, &g2).unwrap();
        let b = spectral_decompose(&tall, None).unwrap();
        assert!(b.rank() <= 60);
        for i in 0..b.rank().min(8) {
            let e = b.eigenfield(i);
            let ke = tall.apply(&e).unwrap();
            assert!(norm_l2(&ke.axpy(-b.eigenvalues()[i], &e).unwrap()) < 1e-8);
        }
        assert!(a.rank() <= 30);
    }

    #[test]
    fn rkhs_norm_of_convolution() {
        let k = op(1, 128, 2000, 9);
        let spec = spectral_decompose(&k, None).unwrap();
        let g = GridField::from_fn(k.grid().clone(), |x| (4.0 * x[0]).cos() + x[0]);
        let kg = k.apply(&g).unwrap();
        let n = rkhs_norm_sq(&kg, &spec).unwrap();
        let expect = inner_l2(&g, &kg).unwrap();
        assert!((n.value - expect).abs() <= 1e-6 * expect.max(1.0));
    }

    #[test]
    fn pair_construction() {
        let k = op(1, 128, 2000, 10);
        let spec = spectral_decompose(&k, None).unwrap();
        let pair = make_pair_in_h(&spec, 3, 10.0, DEFAULT_PROFILE_EXPONENT).unwrap();
        assert_abs_diff_eq!(integrate(pair.p_star.field()), 1.0, epsilon = 1e-10);
        assert!(pair.p_star.field().min_value() >= PAIR_DENSITY_FLOOR - 1e-12);
        let diff = pair.p_star.field().sub(pair.p0.field()).unwrap();
        let n = rkhs_norm_sq(&diff, &spec).unwrap();
        assert!((n.value.sqrt() - pair.norm_h).abs() <= 1e-5 * pair.norm_h);
        let kg = k.apply(&pair.g).unwrap().scaled(pair.scale);
        assert!(norm_l2(&kg.sub(&diff).unwrap()) < 1e-8);
        let zero = make_pair_in_h(&spec, 3, 0.0, DEFAULT_PROFILE_EXPONENT).unwrap();
        assert_eq!(zero.norm_h, 0.0);
        assert_eq!(zero.p_star, zero.p0);
    }

    #[test]
    fn discriminator_identities() {
        let k = op(1, 32, 300, 12);
        let g = k.grid().clone();
        let p = GridDensity::uniform(g.clone());
        let q = GridDensity::new(GridField::from_fn(g.clone(), |x| 2.0 * x[0])).unwrap();
        assert_eq!(optimal_discriminator(&k, &p, &p).unwrap().max_abs(), 0.0);
        let d1 = optimal_discriminator(&k, &p, &q).unwrap();
        let d2 = optimal_discriminator(&k, &q, &p).unwrap();
        assert!(d1.add(&d2).unwrap().max_abs() < 1e-15);
        let loss = mmd_loss(&k, &SignedMeasure::difference(&q, &p)).unwrap();
        let gap = inner_l2(&d1, q.field()).unwrap() - inner_l2(&d1, p.field()).unwrap();
        assert_abs_diff_eq!(gap, loss, epsilon = 1e-10);

        let atoms = SampleSet::new(1, vec![0.1, 0.45, 0.9]).unwrap();
        let d3 = optimal_discriminator(&k, &p, &atoms).unwrap();
        let loss3 = mmd_loss(&k, &SignedMeasure::difference(&atoms, &p)).unwrap();
        let on_atoms: f64 = (0..3)
            .map(|l| {
                let x = atoms.point(l);
                let m = k.m();
                let mom = k.moments(&SignedMeasure::difference(&atoms, &p)).unwrap();
                (0..m).map(|j| mom[j] * k.ensemble().feature(j, x)).sum::<f64>() / m as f64 * 0.5 / 3.0
            })
            .sum();
        let gap3 = on_atoms - inner_l2(&d3, p.field()).unwrap();
        assert_abs_diff_eq!(gap3, loss3, epsilon = 1e-10);
    }

    #[test]
    fn operator_gap_basics() {
        let g = make_grid(1, 32).unwrap();
        let e = Arc::new(sample_rho0(1, 64, 1).unwrap());
        let a = KernelOperator::new(e.clone(), &g).unwrap();
        let b = KernelOperator::new(e, &g).unwrap();
        assert_eq!(operator_gap(&a, &b).unwrap(), 0.0);
        let c = KernelOperator::new(Arc::new(sample_rho0(1, 64, 2).unwrap()), &g).unwrap();
        let gap = operator_gap(&a, &c).unwrap();
        assert!(gap > 0.0 && gap <= 1.0);
    }

    #[test]
    fn sup_gap_of_quadrature_atoms_is_tiny() {
        let k = op(1, 64, 500, 13);
        let p = GridDensity::uniform(k.grid().clone());
        let s = SampleSet::from_density(&p);
        assert!(feature_sup_gap(&k, &p, &s).unwrap() < 1e-12);
    }

    #[test]
    fn discriminator_norm_and_gradient() {
        let ens = Arc::new(FeatureEnsemble::from_parts(2, vec![0.5, 0.25, -0.5, 0.0], vec![0.0, 0.1]).unwrap());
        let d = Discriminator::new(ens, vec![2.0, -4.0]).unwrap();
        assert_abs_diff_eq!(d.rkhs_norm(), 10f64.sqrt(), epsilon = 1e-14);
        let mut grad = [0.0; 2];
        d.gradient(&[0.1, 0.1], &mut grad);
        assert_abs_diff_eq!(grad[0], 0.5 * (2.0 * 0.5 + 4.0 * 0.5), epsilon = 1e-14);
        assert_abs_diff_eq!(grad[1], 0.5 * (2.0 * 0.25), epsilon = 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mmd_matches_double_sum(seed in 0u64..500, res in 2usize..=8, dim in 1usize..=2) {
            let g = make_grid(dim, res).unwrap();
            prop_assume!(g.cells() <= 64);
            let ens = Arc::new(sample_rho0(dim, 50, seed).unwrap());
            let k = KernelOperator::new(ens.clone(), &g).unwrap();
            let p = GridDensity::normalized(GridField::from_fn(g.clone(), |x| 1.0 + x[0] * (seed % 7) as f64)).unwrap();
            let pts: Vec<f64> = (0..3 * dim).map(|i| ((i as f64 + 1.0) * 0.377 + seed as f64 * 0.01).fract()).collect();
            let s = SampleSet::new(dim, pts).unwrap();
            let mu = SignedMeasure::difference(&s, &p);
            let fast = mmd_loss(&k, &mu).unwrap();
            let slow = mmd_double_sum(&ens, &mu);
            prop_assert!(fast >= 0.0);
            prop_assert!((fast - slow).abs() < 1e-10);
        }

        #[test]
        fn rkhs_norm_identity_holds(seed in 0u64..200) {
            let k = op(1, 48, 200, seed);
            let spec = spectral_decompose(&k, None).unwrap();
            let coef: Vec<f64> = (0..spec.rank()).map(|i| ((i as f64 + seed as f64) * 0.71).sin()).collect();
            let g = GridField::new(k.grid().clone(), spec.synthesize(&coef)).unwrap();
            let kg = k.apply(&g).unwrap();
            let n = rkhs_norm_sq(&kg, &spec).unwrap();
            let expect = inner_l2(&g, &kg).unwrap();
            prop_assert!((n.value - expect).abs() <= 1e-5 * expect.abs().max(1e-12));
        }
    }
}
