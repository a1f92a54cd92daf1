//! Box-domain geometry and cell-centred field storage.
//!
//! Cells are stored row-major with the first axis slowest. Two-dimensional
//! grids use the same indexing with a unit third extent, so every kernel can
//! loop over three coordinates and simply skip inactive axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest allowed cell count along any axis.
pub const MIN_EXTENT: usize = 4;

/// Axis-aligned box `[0, L_0] x [0, L_1] (x [0, L_2])` split into uniform cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    ndim: usize,
    dims: [usize; 3],
    lengths: [f64; 3],
}

impl Grid {
    pub fn new(dims: &[usize], lengths: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidParameter(format!(
                "grid must have 2 or 3 axes, got {ndim}"
            )));
        }
        if lengths.len() != ndim {
            return Err(Error::InvalidParameter(format!(
                "grid has {ndim} extents but {} lengths",
                lengths.len()
            )));
        }
        let mut g = Grid {
            ndim,
            dims: [1; 3],
            lengths: [1.0; 3],
        };
        for a in 0..ndim {
            if dims[a] < MIN_EXTENT {
                return Err(Error::InvalidParameter(format!(
                    "extent along axis {a} is {}, must be >= {MIN_EXTENT}",
                    dims[a]
                )));
            }
            if !(lengths[a].is_finite() && lengths[a] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "length along axis {a} must be positive and finite, got {}",
                    lengths[a]
                )));
            }
            g.dims[a] = dims[a];
            g.lengths[a] = lengths[a];
        }
        Ok(g)
    }

    /// Unit square with `n x n` cells.
    pub fn unit_square(n: usize) -> Result<Self> {
        Grid::new(&[n, n], &[1.0, 1.0])
    }

    /// Unit cube with `n x n x n` cells.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Grid::new(&[n, n, n], &[1.0, 1.0, 1.0])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.ndim]
    }

    /// Extent along `axis`; inactive axes report 1.
    #[inline]
    pub fn extent(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    #[inline]
    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.dims[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.ndim)
            .map(|a| self.spacing(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_length(&self) -> f64 {
        self.lengths().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_length(&self) -> f64 {
        self.lengths().iter().copied().fold(0.0, f64::max)
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.ndim).map(|a| self.spacing(a)).product()
    }

    /// Flat-index offset between neighbours along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.dims[1] * self.dims[2],
            1 => self.dims[2],
            _ => 1,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    /// Physical position of a cell centre. Inactive axes report 0.
    pub fn center(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut x = [0.0; 3];
        for a in 0..self.ndim {
            x[a] = (c[a] as f64 + 0.5) * self.spacing(a);
        }
        x
    }

    /// Distance from `x` to the nearest wall of the box.
    pub fn wall_distance(&self, x: &[f64; 3]) -> f64 {
        (0..self.ndim)
            .map(|a| x[a].min(self.lengths[a] - x[a]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest Neumann eigenvalue of the continuous Laplacian on the box, `(pi / L_max)^2`.
    pub fn neumann_lambda1(&self) -> f64 {
        (std::f64::consts::PI / self.max_length()).powi(2)
    }

    /// Smallest nonzero eigenvalue of the discrete Neumann `-laplacian`,
    /// `min_a 4 sin^2(pi h_a / 2 L_a) / h_a^2`.
    pub fn discrete_neumann_lambda1(&self) -> f64 {
        (0..self.ndim)
            .map(|a| {
                let h = self.spacing(a);
                let s = (std::f64::consts::PI * h / (2.0 * self.lengths[a])).sin();
                4.0 * s * s / (h * h)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    /// Zero normal derivative, realised by mirrored ghost cells.
    NeumannZero,
    /// Zero wall value, realised by sign-flipped ghost cells.
    DirichletZero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    bc: BoundaryCondition,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>, bc: BoundaryCondition) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values for a grid of {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value {} at cell {i}",
                values[i]
            )));
        }
        Ok(ScalarField { grid, values, bc })
    }

    /// Neumann field; the usual case for every scalar unknown.
    pub fn neumann(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, values, BoundaryCondition::NeumannZero)
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField {
            grid,
            values: vec![value; grid.n_cells()],
            bc: BoundaryCondition::NeumannZero,
        }
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64; 3]) -> f64) -> Self {
        let values = (0..grid.n_cells()).map(|i| f(&grid.center(i))).collect();
        ScalarField {
            grid,
            values,
            bc: BoundaryCondition::NeumannZero,
        }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_cells());
        ScalarField {
            grid,
            values,
            bc: BoundaryCondition::NeumannZero,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
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

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `a * self + b * other`, keeping this field's boundary condition.
    pub fn lin_comb(&self, a: f64, other: &ScalarField, b: f64) -> ScalarField {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        ScalarField {
            grid: self.grid,
            values,
            bc: self.bc,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            bc: self.bc,
        }
    }

    pub fn add_constant(&self, c: f64) -> ScalarField {
        self.map(|v| v + c)
    }

    /// Grid-weighted inner product.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        dot(&self.values, &other.values) * self.grid.cell_volume()
    }
}

/// Velocity-like field with one cell-centred array per active axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    components: Vec<Vec<f64>>,
    bc: BoundaryCondition,
    divergence_free: bool,
}

impl VectorField {
    /// No-slip zero field. Trivially divergence free.
    pub fn zeros(grid: Grid) -> Self {
        VectorField {
            grid,
            components: vec![vec![0.0; grid.n_cells()]; grid.ndim()],
            bc: BoundaryCondition::DirichletZero,
            divergence_free: true,
        }
    }

    pub fn new(grid: Grid, components: Vec<Vec<f64>>, bc: BoundaryCondition) -> Result<Self> {
        if components.len() != grid.ndim() {
            return Err(Error::InvalidParameter(format!(
                "vector field needs {} components, got {}",
                grid.ndim(),
                components.len()
            )));
        }
        for (a, c) in components.iter().enumerate() {
            if c.len() != grid.n_cells() {
                return Err(Error::InvalidParameter(format!(
                    "component {a} has {} values for {} cells",
                    c.len(),
                    grid.n_cells()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {a} has non-finite values"
                )));
            }
        }
        Ok(VectorField {
            grid,
            components,
            bc,
            divergence_free: false,
        })
    }

    /// Samples `f` at every cell centre as a no-slip field (not flagged divergence free).
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64; 3]) -> [f64; 3]) -> Self {
        let mut components = vec![vec![0.0; grid.n_cells()]; grid.ndim()];
        for i in 0..grid.n_cells() {
            let v = f(&grid.center(i));
            for (a, comp) in components.iter_mut().enumerate() {
                comp[i] = v[a];
            }
        }
        VectorField {
            grid,
            components,
            bc: BoundaryCondition::DirichletZero,
            divergence_free: false,
        }
    }

    pub(crate) fn from_raw(
        grid: Grid,
        components: Vec<Vec<f64>>,
        bc: BoundaryCondition,
        divergence_free: bool,
    ) -> Self {
        VectorField {
            grid,
            components,
            bc,
            divergence_free,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn ndim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Mutable access clears the divergence-free flag.
    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        self.divergence_free = false;
        &mut self.components[axis]
    }

    pub fn divergence_free(&self) -> bool {
        self.divergence_free
    }

    pub(crate) fn set_divergence_free(&mut self, flag: bool) {
        self.divergence_free = flag;
    }

    /// Component as a scalar field carrying this field's boundary condition.
    pub fn component_field(&self, axis: usize) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.components[axis].clone(),
            bc: self.bc,
        }
    }

    /// Largest Euclidean magnitude over all cells.
    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.n_cells())
            .map(|i| self.magnitude_at(i))
            .fold(0.0, f64::max)
    }

    #[inline]
    pub fn magnitude_at(&self, idx: usize) -> f64 {
        self.components
            .iter()
            .map(|c| c[idx] * c[idx])
            .sum::<f64>()
            .sqrt()
    }

    /// `sqrt(sum_a ||v_a||_2^2)`.
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.components.iter().map(|c| dot(c, c)).sum();
        (s * self.grid.cell_volume()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().flatten().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Midpoint-rule integral over the box.
pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_volume()
}

/// Spatial average `integrate(f) / |Omega|`.
pub fn mean(f: &ScalarField) -> f64 {
    integrate(f) / f.grid.volume()
}

/// Discrete `L^p` norm; pass `f64::INFINITY` for the max norm.
pub fn lp_norm(f: &ScalarField, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "lp_norm needs p >= 1 or infinity, got {p}"
        )));
    }
    let v = &f.values;
    if p.is_infinite() {
        return Ok(v.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    let vol = f.grid.cell_volume();
    if p == 1.0 {
        return Ok(v.iter().map(|x| x.abs()).sum::<f64>() * vol);
    }
    if p == 2.0 {
        return Ok((dot(v, v) * vol).sqrt());
    }
    Ok((v.iter().map(|x| x.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p))
}

/// `||f - mean(f)||_2`.
pub fn l2_deviation(f: &ScalarField) -> f64 {
    let m = mean(f);
    let s: f64 = f.values.iter().map(|v| (v - m) * (v - m)).sum();
    (s * f.grid.cell_volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn strip(n: usize) -> Grid {
        Grid::new(&[n, 4], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(&[3, 8], &[1.0, 1.0]).is_err());
        assert!(Grid::new(&[8], &[1.0]).is_err());
        assert!(Grid::new(&[8, 8, 8, 8], &[1.0; 4]).is_err());
        assert!(Grid::new(&[8, 8], &[1.0, 0.0]).is_err());
        assert!(Grid::new(&[8, 8], &[1.0]).is_err());
        let g = Grid::new(&[8, 16, 4], &[2.0, 1.0, 0.5]).unwrap();
        assert_eq!(g.n_cells(), 512);
        assert_abs_diff_eq!(g.spacing(0), 0.25);
        assert_abs_diff_eq!(g.volume(), 1.0);
    }

    #[test]
    fn index_coords_roundtrip() {
        let g = Grid::new(&[5, 6, 7], &[1.0, 1.0, 1.0]).unwrap();
        for idx in 0..g.n_cells() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
        assert_eq!(g.stride(0), 42);
        assert_eq!(g.stride(1), 7);
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::unit_square(8).unwrap();
        assert_eq!(integrate(&ScalarField::zeros(g)), 0.0);
        assert_abs_diff_eq!(integrate(&ScalarField::constant(g, 2.0)), 2.0, epsilon = 1e-14);
        let f = ScalarField::from_fn(strip(64), |x| (PI * x[0]).cos());
        assert_abs_diff_eq!(integrate(&f), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_examples() {
        let g = Grid::unit_square(8).unwrap();
        assert_abs_diff_eq!(mean(&ScalarField::constant(g, 3.0)), 3.0, epsilon = 1e-14);
        let f = ScalarField::from_fn(strip(64), |x| (PI * x[0]).cos());
        assert_abs_diff_eq!(mean(&f), 0.0, epsilon = 1e-12);
        // integral 2 on the unit box
        let rho0 = ScalarField::from_fn(g, |x| 2.0 + (PI * x[1]).cos());
        assert_abs_diff_eq!(integrate(&rho0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean(&rho0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn lp_norm_examples() {
        let g = Grid::unit_square(8).unwrap();
        assert_abs_diff_eq!(
            lp_norm(&ScalarField::constant(g, 1.0), 2.0).unwrap(),
            1.0,
            epsilon = 1e-14
        );
        assert_eq!(
            lp_norm(&ScalarField::constant(g, -2.0), f64::INFINITY).unwrap(),
            2.0
        );
        let f = ScalarField::from_fn(strip(64), |x| (PI * x[0]).cos());
        assert_abs_diff_eq!(lp_norm(&f, 2.0).unwrap(), 0.5f64.sqrt(), epsilon = 1e-6);
        assert!(matches!(
            lp_norm(&f, 0.5),
            Err(Error::InvalidParameter(_))
        ));
        assert!(lp_norm(&f, f64::NAN).is_err());
    }

    #[test]
    fn field_rejects_bad_input() {
        let g = Grid::unit_square(4).unwrap();
        assert!(ScalarField::neumann(g, vec![0.0; 15]).is_err());
        let mut v = vec![0.0; 16];
        v[3] = f64::NAN;
        assert!(ScalarField::neumann(g, v).is_err());
        assert!(VectorField::new(g, vec![vec![0.0; 16]], BoundaryCondition::DirichletZero).is_err());
    }

    fn arb_field(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n * n)
    }

    proptest! {
        #[test]
        fn integrate_is_linear(f in arb_field(6), g in arb_field(6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let grid = Grid::unit_square(6).unwrap();
            let f = ScalarField::neumann(grid, f).unwrap();
            let g = ScalarField::neumann(grid, g).unwrap();
            let lhs = integrate(&f.lin_comb(a, &g, b));
            let rhs = a * integrate(&f) + b * integrate(&g);
            let scale = a.abs() * lp_norm(&f, 1.0).unwrap() + b.abs() * lp_norm(&g, 1.0).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn norms_scale_exactly(f in arb_field(5), s in 0.0f64..5.0) {
            let grid = Grid::new(&[5, 5], &[1.3, 0.7]).unwrap();
            let f = ScalarField::neumann(grid, f).unwrap();
            let g = f.map(|v| s * v);
            for p in [1.0, 2.0, 3.5, f64::INFINITY] {
                let a = lp_norm(&g, p).unwrap();
                let b = s * lp_norm(&f, p).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
            }
        }

        #[test]
        fn holder_l1_l2(f in arb_field(7)) {
            let grid = Grid::new(&[7, 7], &[2.0, 0.5]).unwrap();
            let f = ScalarField::neumann(grid, f).unwrap();
            let l1 = lp_norm(&f, 1.0).unwrap();
            let l2 = lp_norm(&f, 2.0).unwrap();
            prop_assert!(l1 <= grid.volume().sqrt() * l2 * (1.0 + 1e-12));
        }
    }
}
