//! Midpoint grids on the unit cube and the field algebra built on them.
//!
//! Every cell carries the same quadrature weight `h = r^-d`, so L² inner
//! products are `h * Σ f_i g_i` and the simplex projection reduces to the
//! shift-and-clip rule.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Default upper bound on the number of cells of a grid.
pub const DEFAULT_CELL_CAP: usize = 1 << 20;

/// Default step of the finite-difference tangent-cone projection.
pub const DEFAULT_CONE_EPS: f64 = 1e-6;

/// Regular midpoint grid on `[0,1]^dim` with `res` cells per axis.
///
/// Cells are ordered lexicographically with the first axis varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    res: usize,
    cells: usize,
    h: f64,
    centers: Vec<f64>,
}

/// Builds a grid with the default cell cap.
pub fn make_grid(dim: usize, res: usize) -> Result<Arc<Grid>> {
    Grid::with_cap(dim, res, DEFAULT_CELL_CAP)
}

impl Grid {
    pub fn with_cap(dim: usize, res: usize, cap: usize) -> Result<Arc<Grid>> {
        if dim == 0 {
            return Err(Error::usage("grid dimension must be at least 1"));
        }
        if res < 2 {
            return Err(Error::usage("grid resolution must be at least 2"));
        }
        let cells = (0..dim)
            .try_fold(1usize, |acc, _| acc.checked_mul(res))
            .filter(|&c| c <= cap)
            .ok_or_else(|| {
                let requested = (res as f64).powi(dim as i32).min(usize::MAX as f64) as usize;
                Error::resource("grid cells", requested, cap)
            })?;
        let width = 1.0 / res as f64;
        let mut centers = Vec::with_capacity(cells * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..cells {
            centers.extend(idx.iter().map(|&k| (k as f64 + 0.5) * width));
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < res {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Arc::new(Grid {
            dim,
            res,
            cells,
            h: 1.0 / cells as f64,
            centers,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Quadrature weight of a single cell.
    pub fn cell_weight(&self) -> f64 {
        self.h
    }

    /// Side length of a cell.
    pub fn cell_width(&self) -> f64 {
        1.0 / self.res as f64
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    /// All centers, flattened cell-major.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Per-axis integer coordinates of cell `i`.
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        for a in (0..self.dim).rev() {
            idx[a] = i % self.res;
            i /= self.res;
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &k| acc * self.res + k)
    }

    /// Index of the cell containing `x` (points on faces go to the upper cell,
    /// the boundary `1` to the last one).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = x
            .iter()
            .map(|&c| ((c * self.res as f64).floor().max(0.0) as usize).min(self.res - 1))
            .collect();
        self.linear_index(&idx)
    }

    /// Neighbouring cell along `axis` in the positive direction, if any.
    pub fn forward_neighbor(&self, i: usize, axis: usize) -> Option<usize> {
        let mut idx = self.multi_index(i);
        if idx[axis] + 1 >= self.res {
            return None;
        }
        idx[axis] += 1;
        Some(self.linear_index(&idx))
    }

    pub(crate) fn same_as(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.res == other.res
    }
}

/// One real value per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::usage(format!(
                "field has {} values for a grid of {} cells",
                values.len(),
                grid.cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::usage(format!("field value at cell {i} is not finite")));
        }
        Ok(GridField { grid, values })
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cells());
        GridField { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.cells();
        GridField::from_raw(grid, vec![0.0; n])
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.cells();
        GridField::from_raw(grid, vec![c; n])
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.cells()).map(|i| f(grid.center(i))).collect();
        GridField::from_raw(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, s: f64) -> GridField {
        GridField::from_raw(self.grid.clone(), self.values.iter().map(|v| v * s).collect())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &GridField) -> Result<GridField> {
        check_same(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + s * b)
            .collect();
        Ok(GridField::from_raw(self.grid.clone(), values))
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &GridField) -> Result<GridField> {
        self.axpy(1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn check_same(f: &GridField, g: &GridField) -> Result<()> {
    if f.grid.same_as(&g.grid) {
        Ok(())
    } else {
        Err(Error::usage("fields live on different grids"))
    }
}

/// A nonnegative field with unit integral.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity(GridField);

/// Tolerance on the unit-mass constraint of a density.
pub const DENSITY_MASS_TOL: f64 = 1e-10;

impl GridDensity {
    pub fn new(field: GridField) -> Result<Self> {
        if let Some(i) = field.values.iter().position(|&v| v < 0.0) {
            return Err(Error::usage(format!("density is negative at cell {i}")));
        }
        let mass = integrate(&field);
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::usage(format!("density integrates to {mass}, expected 1")));
        }
        Ok(GridDensity(field))
    }

    pub fn uniform(grid: Arc<Grid>) -> Self {
        GridDensity(GridField::constant(grid, 1.0))
    }

    /// Nonnegative `f`, rescaled to unit mass.
    pub fn normalized(field: GridField) -> Result<Self> {
        let mass = integrate(&field);
        if field.values.iter().any(|&v| v < 0.0) || mass <= 0.0 {
            return Err(Error::usage("cannot normalise a field with negative values or zero mass"));
        }
        Ok(GridDensity(field.scaled(1.0 / mass)))
    }

    pub fn field(&self) -> &GridField {
        &self.0
    }

    pub fn into_field(self) -> GridField {
        self.0
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.0.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    /// Probability mass of each cell.
    pub fn masses(&self) -> Vec<f64> {
        let h = self.0.grid.cell_weight();
        self.0.values.iter().map(|v| v * h).collect()
    }
}

/// Empirical measure given by exact atoms, `Σ weight_l δ_{x_l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl SampleSet {
    /// Atoms with equal weights `1/n`.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        SampleSet::weighted(dim, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::usage("sample coordinates do not match the dimension"));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::usage("a sample set needs at least one atom"));
        }
        if weights.len() != n {
            return Err(Error::usage("one weight per atom is required"));
        }
        if points.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::usage("sample coordinates must lie in [0,1]"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::usage("sample weights must be finite"));
        }
        Ok(SampleSet { dim, points, weights })
    }

    /// Quadrature atoms of a density: one atom per cell center with its cell mass.
    pub fn from_density(p: &GridDensity) -> Self {
        SampleSet {
            dim: p.grid().dim(),
            points: p.grid().centers().to_vec(),
            weights: p.masses(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, l: usize) -> &[f64] {
        &self.points[l * self.dim..(l + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `h * Σ f_i`.
pub fn integrate(f: &GridField) -> f64 {
    f.grid.cell_weight() * f.values.iter().sum::<f64>()
}

/// `h * Σ f_i g_i`.
pub fn inner_l2(f: &GridField, g: &GridField) -> Result<f64> {
    check_same(f, g)?;
    Ok(f.grid.cell_weight() * dot(&f.values, &g.values))
}

pub fn norm_l2(f: &GridField) -> f64 {
    (f.grid.cell_weight() * dot(&f.values, &f.values)).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L² projection of `f` onto the probability simplex.
pub fn project_simplex(f: &GridField) -> GridDensity {
    let n = f.len();
    let target = n as f64;
    let mut sorted = f.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = sorted[0] - target;
    for (k, &v) in sorted.iter().enumerate() {
        acc += v;
        let t = (acc - target) / (k + 1) as f64;
        if v > t {
            tau = t;
        } else {
            break;
        }
    }
    #[cfg(not(feature = "fault-inject-simplex"))]
    let mut values: Vec<f64> = f.values.iter().map(|&v| (v - tau).max(0.0)).collect();
    #[cfg(feature = "fault-inject-simplex")]
    let mut values: Vec<f64> = f.values.iter().map(|&v| v.max(0.0) + 1e-3 + 0.0 * tau).collect();
    let mass: f64 = values.iter().sum::<f64>() / target;
    if mass > 0.0 && (mass - 1.0).abs() > 1e-15 {
        values.iter_mut().for_each(|v| *v /= mass);
    }
    GridDensity(GridField::from_raw(f.grid.clone(), values))
}

/// Finite-difference tangent-cone projection `(Π_Δ(p + eps v) − p) / eps`.
pub fn project_tangent_cone(v: &GridField, p: &GridDensity, eps: f64) -> Result<GridField> {
    if !(eps > 0.0) {
        return Err(Error::usage("tangent-cone step must be positive"));
    }
    let moved = p.field().axpy(eps, v)?;
    let proj = project_simplex(&moved);
    let values = proj
        .values()
        .iter()
        .zip(p.values())
        .map(|(a, b)| (a - b) / eps)
        .collect();
    Ok(GridField::from_raw(v.grid.clone(), values))
}

fn require_1d(g: &Grid) -> Result<()> {
    if g.dim() == 1 {
        Ok(())
    } else {
        Err(Error::usage(format!("operation needs a 1-d grid, got dimension {}", g.dim())))
    }
}

/// Piecewise-linear CDF of a 1-d density at `x`.
pub fn cdf_1d(p: &GridDensity, x: f64) -> Result<f64> {
    require_1d(p.grid())?;
    let r = p.grid().res();
    let h = p.grid().cell_weight();
    let pos = (x.clamp(0.0, 1.0) * r as f64).min(r as f64);
    let full = (pos.floor() as usize).min(r);
    let mut acc: f64 = p.values()[..full].iter().sum::<f64>() * h;
    if full < r {
        acc += p.values()[full] * h * (pos - full as f64);
    }
    Ok(acc.min(1.0))
}

/// Generalised inverse `inf{x : F(x) ≥ u}` of the piecewise-linear CDF.
pub fn cdf_quantile_1d(p: &GridDensity, u: f64) -> Result<f64> {
    require_1d(p.grid())?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::usage("quantile level must lie in [0,1]"));
    }
    Ok(quantile_from_masses(&p.masses(), u))
}

pub(crate) fn quantile_from_masses(masses: &[f64], u: f64) -> f64 {
    let r = masses.len();
    let width = 1.0 / r as f64;
    if u <= 0.0 {
        return 0.0;
    }
    let total: f64 = masses.iter().sum();
    let u = u.min(total);
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &m) in masses.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        last_positive = k;
        if acc + m >= u - 1e-15 * total.max(1.0) {
            let frac = ((u - acc) / m).clamp(0.0, 1.0);
            return (k as f64 + frac) * width;
        }
        acc += m;
    }
    (last_positive + 1) as f64 * width
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::simplex_qp;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn centers_of_small_grids() {
        let g = make_grid(1, 4).unwrap();
        assert_eq!(g.centers(), &[0.125, 0.375, 0.625, 0.875]);
        assert_eq!(g.cell_weight(), 0.25);
        let g2 = make_grid(2, 2).unwrap();
        assert_eq!(g2.cells(), 4);
        assert_eq!(g2.center(0), &[0.25, 0.25]);
        assert_eq!(g2.center(1), &[0.25, 0.75]);
        assert_eq!(g2.center(3), &[0.75, 0.75]);
        assert_eq!(g2.cell_weight(), 0.25);
    }

    #[test]
    fn cell_cap() {
        assert!(make_grid(3, 64).is_ok());
        match make_grid(3, 128) {
            Err(Error::Resource { cap, requested, .. }) => {
                assert_eq!(cap, DEFAULT_CELL_CAP);
                assert_eq!(requested, 1 << 21);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(make_grid(0, 4), Err(Error::Usage(_))));
        assert!(matches!(make_grid(1, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn indexing_round_trip() {
        let g = make_grid(3, 5).unwrap();
        for i in [0, 7, 63, 124] {
            let idx = g.multi_index(i);
            assert_eq!(g.linear_index(&idx), i);
            assert_eq!(g.cell_of(g.center(i)), i);
        }
        assert_eq!(g.cell_of(&[1.0, 1.0, 1.0]), 124);
    }

    #[test]
    fn quadrature() {
        let g = make_grid(1, 4).unwrap();
        assert_eq!(integrate(&GridField::constant(g.clone(), 1.0)), 1.0);
        let two = GridField::constant(g, 2.0);
        assert_eq!(inner_l2(&two, &two).unwrap(), 4.0);
        let fine = make_grid(1, 1024).unwrap();
        let x = GridField::from_fn(fine, |x| x[0]);
        assert_abs_diff_eq!(integrate(&x), 0.5, epsilon = 1e-6);
        let other = GridField::zeros(make_grid(1, 8).unwrap());
        assert!(inner_l2(&x, &other).is_err());
    }

    #[test]
    fn simplex_fixed_points_and_shift() {
        let g = make_grid(1, 8).unwrap();
        let p = GridDensity::new(GridField::from_fn(g.clone(), |x| 2.0 * x[0])).unwrap();
        let q = project_simplex(p.field());
        for (a, b) in q.values().iter().zip(p.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for c in [-3.0, 0.0, 7.5] {
            let u = project_simplex(&GridField::constant(g.clone(), c));
            assert!(u.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn simplex_three_cells_matches_qp() {
        let g = make_grid(1, 3).unwrap();
        let f = GridField::new(g, vec![2.0, 1.0, -1.0]).unwrap();
        let p = project_simplex(&f);
        let oracle = simplex_qp(f.values());
        for (a, b) in p.values().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.values()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 1.0, epsilon = 1e-12);
        assert_eq!(p.values()[2], 0.0);
    }

    #[test]
    fn tangent_cone_cases() {
        let g = make_grid(1, 16).unwrap();
        let uni = GridDensity::uniform(g.clone());
        let v = GridField::from_fn(g.clone(), |x| (6.0 * x[0]).sin() - integrate_sin6());
        let t = project_tangent_cone(&v, &uni, DEFAULT_CONE_EPS).unwrap();
        for (a, b) in t.values().iter().zip(v.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        let c = project_tangent_cone(&GridField::constant(g.clone(), 3.0), &uni, 1e-6).unwrap();
        assert!(c.max_abs() < 1e-6);

        let mut vals = vec![16.0 / 15.0; 16];
        vals[3] = 0.0;
        let p = GridDensity::new(GridField::new(g.clone(), vals).unwrap()).unwrap();
        let mut w = vec![0.0; 16];
        w[3] = -1.0;
        w[5] = 1.0;
        let v = GridField::new(g, w).unwrap();
        let eps = 1e-6;
        let t = project_tangent_cone(&v, &p, eps).unwrap();
        assert!(t.values()[3].abs() < 1e-9);
        let moved: Vec<f64> = p.values().iter().zip(v.values()).map(|(a, b)| a + eps * b).collect();
        let oracle = simplex_qp(&moved);
        for i in 0..16 {
            assert_abs_diff_eq!(t.values()[i], (oracle[i] - p.values()[i]) / eps, epsilon = 1e-6);
        }
    }

    fn integrate_sin6() -> f64 {
        let g = make_grid(1, 16).unwrap();
        integrate(&GridField::from_fn(g, |x| (6.0 * x[0]).sin()))
    }

    #[test]
    fn quantiles() {
        let g = make_grid(1, 512).unwrap();
        let uni = GridDensity::uniform(g.clone());
        assert_abs_diff_eq!(cdf_quantile_1d(&uni, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        let half = GridDensity::new(GridField::from_fn(g.clone(), |x| if x[0] < 0.5 { 2.0 } else { 0.0 }))
            .unwrap();
        assert_abs_diff_eq!(cdf_quantile_1d(&half, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cdf_quantile_1d(&half, 0.3).unwrap(), 0.15, epsilon = 1e-3);
        assert!(cdf_quantile_1d(&half, 1.5).is_err());
        let g2 = make_grid(2, 4).unwrap();
        assert!(cdf_quantile_1d(&GridDensity::uniform(g2), 0.5).is_err());
    }

    fn field_strategy(max_cells: usize) -> impl Strategy<Value = Vec<f64>> {
        (2..=max_cells).prop_flat_map(|n| proptest::collection::vec(-3.0f64..3.0, n))
    }

    proptest! {
        #[test]
        fn simplex_matches_qp_oracle(vals in field_strategy(12)) {
            let g = make_grid(1, vals.len()).unwrap();
            let f = GridField::new(g, vals.clone()).unwrap();
            let p = project_simplex(&f);
            let oracle = simplex_qp(&vals);
            for (a, b) in p.values().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn simplex_idempotent_nonexpansive_unit_mass(a in field_strategy(40), seed in 0u64..1000) {
            let n = a.len();
            let g = make_grid(1, n).unwrap();
            let b: Vec<f64> = (0..n).map(|i| ((i as f64 + seed as f64) * 1.7).sin() * 2.0).collect();
            let fa = GridField::new(g.clone(), a).unwrap();
            let fb = GridField::new(g, b).unwrap();
            let pa = project_simplex(&fa);
            let pb = project_simplex(&fb);
            prop_assert!((integrate(pa.field()) - 1.0).abs() < 1e-10);
            let again = project_simplex(pa.field());
            for (x, y) in again.values().iter().zip(pa.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let d_out = norm_l2(&pa.field().sub(pb.field()).unwrap());
            let d_in = norm_l2(&fa.sub(&fb).unwrap());
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn quantile_inverts_cdf(vals in proptest::collection::vec(0.1f64..3.0, 8..64), x in 0.01f64..0.99) {
            let g = make_grid(1, vals.len()).unwrap();
            let p = GridDensity::normalized(GridField::new(g.clone(), vals).unwrap()).unwrap();
            let u = cdf_1d(&p, x).unwrap();
            let back = cdf_quantile_1d(&p, u).unwrap();
            prop_assert!((back - x).abs() <= g.cell_width());
        }
    }
}
