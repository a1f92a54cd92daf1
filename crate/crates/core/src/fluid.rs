//! Stokes flow: pressure projection, buoyancy forcing and the velocity step.
//!
//! The projection solves `div grad q = div v` with the same centred operators
//! used to measure divergence, so the projected field is divergence free up
//! to the solver residual rather than up to a truncation error.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::domain::{dot, BoundaryCondition, Grid, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::operators::{apply_divergence, apply_gradient, diffuse_implicit};
use crate::solver::{self, CgOptions};

/// Unit viscosity.
pub const VISCOSITY: f64 = 1.0;
pub const DEFAULT_PROJ_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct StokesParams {
    /// Gravitational potential.
    pub phi: ScalarField,
    /// Max-norm bound on the divergence after projection.
    pub proj_tol: f64,
}

impl StokesParams {
    pub fn new(phi: ScalarField) -> Self {
        StokesParams {
            phi,
            proj_tol: DEFAULT_PROJ_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.phi.is_finite() {
            return Err(Error::Validation("phi must be finite".into()));
        }
        if !(self.proj_tol > 0.0) {
            return Err(Error::Validation("proj_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Pressure-Poisson iteration cap. The wide centred stencil is worse
/// conditioned than the compact Laplacian, so the cap scales with the
/// number of cells along the longest axis as well.
fn poisson_max_iter(grid: &Grid) -> usize {
    let longest = grid.dims().iter().copied().max().unwrap_or(1);
    solver::default_max_iter(grid.n_cells()).max(20 * longest)
}

/// Helmholtz-Leray projection `v = w + grad q` with `div w = 0` and `mean(q) = 0`.
pub fn leray_project(v: &VectorField) -> Result<(VectorField, ScalarField)> {
    leray_project_with(v, DEFAULT_PROJ_TOL)
}

pub fn leray_project_with(v: &VectorField, proj_tol: f64) -> Result<(VectorField, ScalarField)> {
    let grid = *v.grid();
    let n = grid.n_cells();
    let ndim = grid.ndim();
    let mut div = vec![0.0; n];
    apply_divergence(&grid, v.components(), &mut div);
    // solve A q = -div v with A = -div grad (positive semidefinite, kernel = constants)
    let rhs: Vec<f64> = div.iter().map(|d| -d).collect();
    let b_norm = dot(&rhs, &rhs).sqrt();
    let max_iter = poisson_max_iter(&grid);
    let opts = CgOptions {
        rel_tol: 0.0,
        // relative target, floored at roundoff and capped by the divergence tolerance
        abs_tol: (solver::CG_REL_TOL * b_norm).max(1e-13).min(0.1 * proj_tol),
        max_iter,
        zero_mean: true,
        name: "pressure Poisson CG",
    };
    let mut q = vec![0.0; n];
    let mut g = vec![vec![0.0; n]; ndim];
    let stats = solver::conjugate_gradient(
        |p, out| {
            apply_gradient(&grid, p, &mut g);
            apply_divergence(&grid, &g, out);
            out.iter_mut().for_each(|o| *o = -*o);
        },
        &rhs,
        &mut q,
        &opts,
    )?;
    log::trace!("pressure Poisson: {} iterations", stats.iterations);
    apply_gradient(&grid, &q, &mut g);
    let comps: Vec<Vec<f64>> = v
        .components()
        .iter()
        .zip(&g)
        .map(|(va, ga)| va.iter().zip(ga).map(|(a, b)| a - b).collect())
        .collect();
    let mut w = VectorField::from_raw(grid, comps, BoundaryCondition::DirichletZero, false);
    let mut check = vec![0.0; n];
    apply_divergence(&grid, w.components(), &mut check);
    let worst = check.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    if worst > proj_tol {
        return Err(Error::SolverFailure {
            solver: "pressure projection",
            residual: worst,
            iterations: max_iter,
        });
    }
    w.set_divergence_free(true);
    Ok((w, ScalarField::from_raw(grid, q)))
}

/// Buoyancy force `(rho + m) grad phi`.
pub fn buoyancy(rho: &ScalarField, m: &ScalarField, phi: &ScalarField) -> Result<VectorField> {
    let grid = *rho.grid();
    if m.grid() != &grid || phi.grid() != &grid {
        return Err(Error::ContractViolation("buoyancy: fields on different grids".into()));
    }
    let mut g = vec![vec![0.0; grid.n_cells()]; grid.ndim()];
    apply_gradient(&grid, phi.values(), &mut g);
    let (r, mv) = (rho.values(), m.values());
    for comp in g.iter_mut() {
        for (i, v) in comp.iter_mut().enumerate() {
            *v *= r[i] + mv[i];
        }
    }
    Ok(VectorField::from_raw(grid, g, BoundaryCondition::DirichletZero, false))
}

fn is_zero(v: &VectorField) -> bool {
    v.components().iter().flatten().all(|x| *x == 0.0)
}

/// One projected backward-Euler step of the Stokes system.
///
/// The buoyancy force is projected before the viscous solve, so a pure
/// gradient force is balanced entirely by pressure and drives no flow. The
/// returned pressure is `q_force + q_visc / dt`, mean zero.
pub fn stokes_step(
    u: &VectorField,
    rho: &ScalarField,
    m: &ScalarField,
    dt: f64,
    params: &StokesParams,
) -> Result<(VectorField, ScalarField)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if u.bc() != BoundaryCondition::DirichletZero {
        return Err(Error::ContractViolation("velocity must carry no-slip data".into()));
    }
    let grid = *u.grid();
    let force = buoyancy(rho, m, &params.phi)?;
    let (force, q_force) = if is_zero(&force) {
        (force, ScalarField::zeros(grid))
    } else {
        leray_project_with(&force, params.proj_tol)?
    };
    let mut star = Vec::with_capacity(grid.ndim());
    for a in 0..grid.ndim() {
        let rhs: Vec<f64> = u
            .component(a)
            .iter()
            .zip(force.component(a))
            .map(|(ui, fi)| ui + dt * fi)
            .collect();
        let field = ScalarField::new(grid, rhs, BoundaryCondition::DirichletZero)?;
        star.push(diffuse_implicit(&field, dt, VISCOSITY, 0.0)?.into_values());
    }
    let star = VectorField::from_raw(grid, star, BoundaryCondition::DirichletZero, false);
    let (next, q_visc) = leray_project_with(&star, params.proj_tol)?;
    let p = q_force.lin_comb(1.0, &q_visc, 1.0 / dt);
    Ok((next, p))
}

/// Smallest eigenvalue of the discrete Stokes operator `-P laplacian_D P` on
/// divergence-free fields, by inverse iteration. Each inverse solve runs CG on
/// the divergence-free subspace with a projected matrix-vector product.
/// Results are cached per grid.
pub fn stokes_eigenvalue(grid: &Grid) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let key = format!("{:?}/{:?}", grid.dims(), grid.lengths());
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("cache poisoned").get(&key) {
        return Ok(*v);
    }
    let lam = stokes_eigenvalue_uncached(grid)?;
    cache.lock().expect("cache poisoned").insert(key, lam);
    Ok(lam)
}

fn flatten(v: &VectorField) -> Vec<f64> {
    v.components().iter().flatten().copied().collect()
}

fn stokes_apply(grid: Grid, x: &[f64], out: &mut [f64]) -> Result<()> {
    let n = grid.n_cells();
    let mut lap = vec![0.0; n];
    let mut comps = Vec::with_capacity(grid.ndim());
    for chunk in x.chunks(n) {
        crate::operators::apply_laplacian(&grid, BoundaryCondition::DirichletZero, chunk, &mut lap);
        comps.push(lap.iter().map(|v| -v).collect::<Vec<f64>>());
    }
    let v = VectorField::from_raw(grid, comps, BoundaryCondition::DirichletZero, false);
    let (w, _) = leray_project_with(&v, 1e-11)?;
    out.copy_from_slice(&flatten(&w));
    Ok(())
}

fn stokes_eigenvalue_uncached(grid: &Grid) -> Result<f64> {
    let grid = *grid;
    let total = grid.n_cells() * grid.ndim();
    // start from a smooth swirl
    let seed = VectorField::from_fn(grid, |x| {
        let l = grid.lengths();
        let s = |i: usize| (std::f64::consts::PI * x[i] / l[i]).sin();
        let mut v = [0.0; 3];
        v[0] = s(0) * s(0) * s(1) * (std::f64::consts::PI * x[1] / l[1]).cos();
        v[1] = -s(1) * s(1) * s(0) * (std::f64::consts::PI * x[0] / l[0]).cos();
        if grid.ndim() == 3 {
            v[0] *= s(2);
            v[1] *= s(2);
        }
        v
    });
    let (w, _) = leray_project_with(&seed, 1e-11)?;
    let mut x = flatten(&w);
    let norm = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    let mut lam = f64::NAN;
    let mut ax = vec![0.0; total];
    for _ in 0..60 {
        let mut y = vec![0.0; total];
        let mut failure = None;
        let opts = CgOptions {
            rel_tol: 1e-9,
            abs_tol: 0.0,
            max_iter: 20 * solver::default_max_iter(total),
            zero_mean: false,
            name: "Stokes inverse iteration CG",
        };
        solver::conjugate_gradient(
            |p, out| {
                if let Err(e) = stokes_apply(grid, p, out) {
                    failure = Some(e);
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            },
            &x,
            &mut y,
            &opts,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        let ny = dot(&y, &y).sqrt();
        y.iter_mut().for_each(|v| *v /= ny);
        stokes_apply(grid, &y, &mut ax)?;
        let next = dot(&y, &ax);
        x = y;
        if (next - lam).abs() <= 1e-9 * next {
            return Ok(next);
        }
        lam = next;
    }
    Ok(lam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{lp_norm, mean};
    use crate::operators::{divergence, gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_vector(grid: Grid, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..grid.ndim())
            .map(|_| (0..grid.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        VectorField::new(grid, comps, BoundaryCondition::DirichletZero).unwrap()
    }

    fn max_diff(a: &VectorField, b: &VectorField) -> f64 {
        a.components()
            .iter()
            .flatten()
            .zip(b.components().iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn projection_removes_divergence() {
        for (seed, grid) in [
            (1, Grid::unit_square(32).unwrap()),
            (2, Grid::new(&[24, 16], &[1.5, 1.0]).unwrap()),
            (3, Grid::unit_cube(12).unwrap()),
        ] {
            let v = random_vector(grid, seed);
            let (w, q) = leray_project(&v).unwrap();
            assert!(w.divergence_free());
            assert!(divergence(&w).values().iter().all(|d| d.abs() <= DEFAULT_PROJ_TOL));
            assert!(mean(&q).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_of_solenoidal_field_is_identity() {
        let grid = Grid::unit_square(24).unwrap();
        let (w, _) = leray_project(&random_vector(grid, 5)).unwrap();
        let (w2, q2) = leray_project(&w).unwrap();
        assert!(max_diff(&w, &w2) <= 1e-9);
        assert!(q2.values().iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn projection_annihilates_gradients() {
        let grid = Grid::unit_square(32).unwrap();
        let f = ScalarField::from_fn(grid, |x| (PI * x[0]).cos() * (2.0 * PI * x[1]).cos() + x[0] * x[1]);
        let (w, q) = leray_project(&gradient(&f)).unwrap();
        assert!(w.max_abs() <= 1e-8);
        let shifted = f.add_constant(-mean(&f));
        let err = q
            .values()
            .iter()
            .zip(shifted.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8);
    }

    #[test]
    fn buoyancy_examples() {
        let grid = Grid::unit_square(16).unwrap();
        let rho = ScalarField::constant(grid, 1.0);
        let m = ScalarField::constant(grid, 1.0);
        let flat = ScalarField::constant(grid, 4.0);
        assert_eq!(buoyancy(&rho, &m, &flat).unwrap().max_abs(), 0.0);
        let phi = ScalarField::from_fn(grid, |x| x[0]);
        let zero = ScalarField::zeros(grid);
        assert_eq!(buoyancy(&zero, &zero, &phi).unwrap().max_abs(), 0.0);
        let f = buoyancy(&rho, &m, &phi).unwrap();
        for i in 1..15 {
            for j in 0..16 {
                let id = grid.index(i, j, 0);
                assert!((f.component(0)[id] - 2.0).abs() < 1e-10);
                assert!(f.component(1)[id].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let grid = Grid::unit_square(16).unwrap();
        let zero = ScalarField::zeros(grid);
        let params = StokesParams::new(ScalarField::from_fn(grid, |x| x[0]));
        let (u, p) = stokes_step(&VectorField::zeros(grid), &zero, &zero, 0.01, &params).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert!(p.values().iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn gradient_forcing_drives_no_flow() {
        for grid in [Grid::unit_square(24).unwrap(), Grid::unit_cube(10).unwrap()] {
            let rho = ScalarField::constant(grid, 1.3);
            let m = ScalarField::constant(grid, 0.4);
            for phi in [
                ScalarField::from_fn(grid, |x| 2.0 * x[0]),
                ScalarField::from_fn(grid, |x| 0.5 * ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2))),
            ] {
                let params = StokesParams::new(phi);
                let mut u = VectorField::zeros(grid);
                for _ in 0..5 {
                    u = stokes_step(&u, &rho, &m, 0.01, &params).unwrap().0;
                }
                assert!(u.max_abs() <= 1e-8, "max |u| = {}", u.max_abs());
            }
        }
    }

    #[test]
    fn unforced_flow_decays_at_stokes_rate() {
        let grid = Grid::unit_square(16).unwrap();
        let lam = stokes_eigenvalue(&grid).unwrap();
        // unit-square Stokes eigenvalue is about 52.3; the coarse discrete one sits nearby
        assert!(lam > 30.0 && lam < 70.0, "lambda = {lam}");
        let seed = VectorField::from_fn(grid, |x| {
            let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
            [sx * sx * (2.0 * PI * x[1]).sin(), -sy * sy * (2.0 * PI * x[0]).sin(), 0.0]
        });
        let (mut u, _) = leray_project(&seed).unwrap();
        let zero = ScalarField::zeros(grid);
        let params = StokesParams::new(ScalarField::from_fn(grid, |x| x[0]));
        let dt = 1e-3;
        let mut series = vec![(0.0, u.l2_norm())];
        for k in 1..=150 {
            let before = u.l2_norm();
            let comps_before: Vec<f64> = (0..2).map(|a| lp_norm(&u.component_field(a), 2.0).unwrap()).collect();
            u = stokes_step(&u, &zero, &zero, dt, &params).unwrap().0;
            assert!(u.l2_norm() <= before);
            for a in 0..2 {
                assert!(lp_norm(&u.component_field(a), 2.0).unwrap() <= comps_before[a] * (1.0 + 1e-12));
            }
            series.push((k as f64 * dt, u.l2_norm()));
        }
        let fit = crate::diagnostics::fit_rate(&series, (0.1, 0.15)).unwrap();
        assert!((fit.rate - lam).abs() <= 0.15 * lam, "rate {} vs {lam}", fit.rate);
    }
}
