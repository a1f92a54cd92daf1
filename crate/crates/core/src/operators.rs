//! Finite-volume operators on the collocated grid.
//!
//! Scalars use mirrored ghost cells (zero normal derivative), velocity
//! components use sign-flipped ghost cells (zero wall value). The centred
//! `gradient` and `divergence` are built so that `divergence = -gradient^T`
//! exactly, which is what makes the pressure projection land on a
//! discretely divergence-free field.

use serde::{Deserialize, Serialize};

use crate::domain::{BoundaryCondition, Grid, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::model::SensitivityTensor;
use crate::solver::{self, CgOptions};

/// Negative values above `-POSCLAMP_TOL` are treated as roundoff.
pub const POSCLAMP_TOL: f64 = 1e-12;

/// Flux reconstruction for the transport terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilSpec {
    /// First-order donor cell.
    #[default]
    Upwind1,
    /// Second-order face average.
    Central2,
}

/// Calls `f(lo, hi)` for every interior face normal to `axis`.
#[inline]
pub(crate) fn for_each_face(grid: &Grid, axis: usize, mut f: impl FnMut(usize, usize)) {
    let [n0, n1, n2] = [grid.extent(0), grid.extent(1), grid.extent(2)];
    let stride = grid.stride(axis);
    let lim = [
        if axis == 0 { n0 - 1 } else { n0 },
        if axis == 1 { n1 - 1 } else { n1 },
        if axis == 2 { n2 - 1 } else { n2 },
    ];
    for i in 0..lim[0] {
        for j in 0..lim[1] {
            let row = grid.index(i, j, 0);
            for k in 0..lim[2] {
                let lo = row + k;
                f(lo, lo + stride);
            }
        }
    }
}

/// Calls `f(cell)` for every cell touching the low and the high wall normal to `axis`.
#[inline]
fn for_each_wall_cell(grid: &Grid, axis: usize, mut f: impl FnMut(usize)) {
    let n = grid.extent(axis);
    let s = grid.stride(axis);
    for_each_face_row(grid, axis, |base| {
        f(base);
        f(base + (n - 1) * s);
    });
}

/// Calls `f(first)` for the first cell of every grid line running along `axis`.
#[inline]
fn for_each_face_row(grid: &Grid, axis: usize, mut f: impl FnMut(usize)) {
    let e = [grid.extent(0), grid.extent(1), grid.extent(2)];
    let lim = [
        if axis == 0 { 1 } else { e[0] },
        if axis == 1 { 1 } else { e[1] },
        if axis == 2 { 1 } else { e[2] },
    ];
    for i in 0..lim[0] {
        for j in 0..lim[1] {
            for k in 0..lim[2] {
                f(grid.index(i, j, k));
            }
        }
    }
}

/// Raw 2nd-order Laplacian with the ghost rule implied by `bc`.
pub(crate) fn apply_laplacian(grid: &Grid, bc: BoundaryCondition, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..grid.ndim() {
        let inv_h2 = 1.0 / (grid.spacing(a) * grid.spacing(a));
        for_each_face(grid, a, |lo, hi| {
            let flux = (x[hi] - x[lo]) * inv_h2;
            out[lo] += flux;
            out[hi] -= flux;
        });
        if bc == BoundaryCondition::DirichletZero {
            // ghost = -x, so each wall face contributes (ghost - x) / h^2
            for_each_wall_cell(grid, a, |c| out[c] -= 2.0 * x[c] * inv_h2);
        }
    }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    let grid = *f.grid();
    let mut out = vec![0.0; grid.n_cells()];
    apply_laplacian(&grid, f.bc(), f.values(), &mut out);
    ScalarField::new(grid, out, f.bc()).expect("laplacian of finite field")
}

/// Dirichlet energy `-<laplacian(f), f>`, i.e. the squared L2 norm of the
/// face-difference gradient consistent with `laplacian`.
pub fn grad_norm_sq(f: &ScalarField) -> f64 {
    let grid = *f.grid();
    let x = f.values();
    let mut s = 0.0;
    for a in 0..grid.ndim() {
        let inv_h2 = 1.0 / (grid.spacing(a) * grid.spacing(a));
        for_each_face(&grid, a, |lo, hi| {
            let d = x[hi] - x[lo];
            s += d * d * inv_h2;
        });
        if f.bc() == BoundaryCondition::DirichletZero {
            for_each_wall_cell(&grid, a, |c| s += 2.0 * x[c] * x[c] * inv_h2);
        }
    }
    s * grid.cell_volume()
}

/// Centred differences with mirrored ghosts.
pub(crate) fn apply_gradient(grid: &Grid, x: &[f64], out: &mut [Vec<f64>]) {
    for a in 0..grid.ndim() {
        let n = grid.extent(a);
        let s = grid.stride(a);
        let inv_2h = 0.5 / grid.spacing(a);
        let g = &mut out[a];
        for_each_face_row(grid, a, |base| {
            for c in 0..n {
                let idx = base + c * s;
                let lo = if c == 0 { idx } else { idx - s };
                let hi = if c + 1 == n { idx } else { idx + s };
                g[idx] = (x[hi] - x[lo]) * inv_2h;
            }
        });
    }
}

/// Centred differences with sign-flipped ghosts; the negative adjoint of `apply_gradient`.
pub(crate) fn apply_divergence(grid: &Grid, v: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for a in 0..grid.ndim() {
        let n = grid.extent(a);
        let s = grid.stride(a);
        let inv_2h = 0.5 / grid.spacing(a);
        let va = &v[a];
        for_each_face_row(grid, a, |base| {
            for c in 0..n {
                let idx = base + c * s;
                let lo = if c == 0 { -va[idx] } else { va[idx - s] };
                let hi = if c + 1 == n { -va[idx] } else { va[idx + s] };
                out[idx] += (hi - lo) * inv_2h;
            }
        });
    }
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = *f.grid();
    let mut comps = vec![vec![0.0; grid.n_cells()]; grid.ndim()];
    apply_gradient(&grid, f.values(), &mut comps);
    VectorField::from_raw(grid, comps, BoundaryCondition::DirichletZero, false)
}

pub fn divergence(v: &VectorField) -> ScalarField {
    let grid = *v.grid();
    let mut out = vec![0.0; grid.n_cells()];
    apply_divergence(&grid, v.components(), &mut out);
    ScalarField::from_raw(grid, out)
}

fn check_same_grid(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ContractViolation(format!("{what}: fields live on different grids")));
    }
    Ok(())
}

/// Conservative transport term `div(u f)` with face velocities averaged from
/// the cell values and zero wall flux.
pub fn advect(f: &ScalarField, u: &VectorField, scheme: StencilSpec) -> Result<ScalarField> {
    check_same_grid(f.grid(), u.grid(), "advect")?;
    if !u.divergence_free() {
        return Err(Error::ContractViolation(
            "advect requires a projected (divergence-free) velocity".into(),
        ));
    }
    let grid = *f.grid();
    let x = f.values();
    let mut out = vec![0.0; grid.n_cells()];
    for a in 0..grid.ndim() {
        let inv_h = 1.0 / grid.spacing(a);
        let ua = u.component(a);
        for_each_face(&grid, a, |lo, hi| {
            let uf = 0.5 * (ua[lo] + ua[hi]);
            let fv = match scheme {
                StencilSpec::Upwind1 => {
                    if uf >= 0.0 {
                        x[lo]
                    } else {
                        x[hi]
                    }
                }
                StencilSpec::Central2 => 0.5 * (x[lo] + x[hi]),
            };
            let flux = uf * fv * inv_h;
            out[lo] += flux;
            out[hi] -= flux;
        });
    }
    Ok(ScalarField::from_raw(grid, out))
}

/// Divergence of the chemotactic flux `rho S(x, rho, c) grad c`.
///
/// Fluxes live on interior faces: `rho` is the arithmetic face average, the
/// normal derivative of `c` is the face difference and the tangential
/// derivatives average the two adjacent centred gradients. The sensitivity is
/// evaluated at the face centre with the face-averaged `rho` and `c`. Wall
/// faces carry no flux.
pub fn chemo_flux_div(
    rho: &ScalarField,
    c: &ScalarField,
    sens: &SensitivityTensor,
) -> Result<ScalarField> {
    check_same_grid(rho.grid(), c.grid(), "chemo_flux_div")?;
    let grid = *rho.grid();
    let r = rho.values();
    if let Some(bad) = r.iter().find(|v| **v < -POSCLAMP_TOL) {
        return Err(Error::ContractViolation(format!(
            "chemo_flux_div needs rho >= 0, found {bad:e}"
        )));
    }
    let mut out = vec![0.0; grid.n_cells()];
    if sens.c_s == 0.0 {
        return Ok(ScalarField::from_raw(grid, out));
    }
    let cv = c.values();
    let mut gc = vec![vec![0.0; grid.n_cells()]; grid.ndim()];
    apply_gradient(&grid, cv, &mut gc);
    let rot = sens.rotation(grid.ndim());
    let ndim = grid.ndim();
    for a in 0..ndim {
        let h = grid.spacing(a);
        let inv_h = 1.0 / h;
        for_each_face(&grid, a, |lo, hi| {
            let rho_f = 0.5 * (r[lo] + r[hi]);
            if rho_f == 0.0 {
                return;
            }
            let mut x = grid.center(lo);
            x[a] += 0.5 * h;
            let c_f = 0.5 * (cv[lo] + cv[hi]);
            let mag = sens.magnitude(&grid, &x, rho_f, c_f);
            if mag == 0.0 {
                return;
            }
            let mut drift = 0.0;
            for b in 0..ndim {
                let g = if b == a {
                    (cv[hi] - cv[lo]) * inv_h
                } else {
                    0.5 * (gc[b][lo] + gc[b][hi])
                };
                drift += rot[a][b] * g;
            }
            let flux = rho_f * mag * drift * inv_h;
            out[lo] += flux;
            out[hi] -= flux;
        });
    }
    Ok(ScalarField::from_raw(grid, out))
}

/// Backward-Euler step `(I - dt kappa laplacian + dt damping) g = f`, solved by CG.
///
/// The field's boundary condition selects the ghost rule. For Neumann fields
/// the constant mode is restored exactly after the solve, since it is an
/// eigenvector with known eigenvalue `1 + dt damping`.
pub fn diffuse_implicit(f: &ScalarField, dt: f64, kappa: f64, damping: f64) -> Result<ScalarField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")));
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "damping must be >= 0, got {damping}"
        )));
    }
    let grid = *f.grid();
    let bc = f.bc();
    let n = grid.n_cells();
    let diag = 1.0 + dt * damping;
    let coef = dt * kappa;
    let opts = CgOptions {
        rel_tol: solver::CG_REL_TOL,
        abs_tol: 0.0,
        max_iter: solver::default_max_iter(n),
        zero_mean: false,
        name: "implicit diffusion CG",
    };
    let mut x: Vec<f64> = f.values().iter().map(|v| v / diag).collect();
    let stats = solver::conjugate_gradient(
        |p, out| {
            apply_laplacian(&grid, bc, p, out);
            for i in 0..n {
                out[i] = diag * p[i] - coef * out[i];
            }
        },
        f.values(),
        &mut x,
        &opts,
    )?;
    log::trace!("implicit diffusion: {} iterations", stats.iterations);
    if bc == BoundaryCondition::NeumannZero {
        let target = f.values().iter().sum::<f64>() / diag;
        let shift = (target - x.iter().sum::<f64>()) / n as f64;
        x.iter_mut().for_each(|v| *v += shift);
    }
    ScalarField::new(grid, x, bc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{integrate, lp_norm, mean};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn strip(n: usize) -> Grid {
        Grid::new(&[n, 4], &[1.0, 1.0]).unwrap()
    }

    fn random_field(grid: Grid, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.n_cells()).map(|_| rng.random_range(0.0..2.0)).collect();
        ScalarField::neumann(grid, v).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Discrete Neumann eigenvalue of cos(k pi x / L) on n cells.
    fn discrete_eig(n: usize, l: f64, k: usize) -> f64 {
        let h = l / n as f64;
        4.0 * (k as f64 * PI * h / (2.0 * l)).sin().powi(2) / (h * h)
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let g = Grid::new(&[6, 5, 4], &[1.0, 2.0, 0.5]).unwrap();
        let l = laplacian(&ScalarField::constant(g, 3.7));
        assert!(l.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn laplacian_of_cosine() {
        let g = strip(128);
        let f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let exact = ScalarField::from_fn(g, |x| -PI * PI * (PI * x[0]).cos());
        assert!(max_diff(laplacian(&f).values(), exact.values()) < 1e-3);
    }

    #[test]
    fn laplacian_integrates_to_zero() {
        for seed in 0..5 {
            let g = Grid::new(&[9, 7, 5], &[1.0, 1.3, 0.7]).unwrap();
            let f = random_field(g, seed);
            assert!(integrate(&laplacian(&f)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_examples() {
        let g = Grid::unit_square(8).unwrap();
        let z = gradient(&ScalarField::constant(g, 2.0));
        assert_eq!(z.max_abs(), 0.0);

        let g = strip(128);
        let f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let exact = ScalarField::from_fn(g, |x| -PI * (PI * x[0]).sin());
        assert!(max_diff(gradient(&f).component(0), exact.values()) < 1e-3);

        let g = Grid::unit_square(16).unwrap();
        let f = ScalarField::from_fn(g, |x| (2.0 * x[1]).sin());
        assert!(gradient(&f).component(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn divergence_examples() {
        let g = Grid::unit_square(8).unwrap();
        assert_eq!(divergence(&VectorField::zeros(g)).max(), 0.0);

        let g = strip(128);
        let f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let exact = ScalarField::from_fn(g, |x| -PI * PI * (PI * x[0]).cos());
        // wide stencil: truncation error pi^4 (2h)^2 / 12 ~ 2e-3
        assert!(max_diff(divergence(&gradient(&f)).values(), exact.values()) < 3e-3);
    }

    #[test]
    fn stream_function_field_is_solenoidal_in_interior() {
        let n = 24;
        let g = Grid::unit_square(n).unwrap();
        let psi = ScalarField::from_fn(g, |x| (PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
        let p = psi.values();
        let h = g.spacing(0);
        let mut comps = vec![vec![0.0; g.n_cells()]; 2];
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let id = g.index(i, j, 0);
                comps[0][id] = (p[g.index(i, j + 1, 0)] - p[g.index(i, j - 1, 0)]) / (2.0 * h);
                comps[1][id] = -(p[g.index(i + 1, j, 0)] - p[g.index(i - 1, j, 0)]) / (2.0 * h);
            }
        }
        let v = VectorField::new(g, comps, BoundaryCondition::DirichletZero).unwrap();
        let d = divergence(&v);
        for i in 2..n - 2 {
            for j in 2..n - 2 {
                assert!(d.values()[g.index(i, j, 0)].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_divergence_adjoint() {
        let g = Grid::new(&[7, 6, 5], &[1.0, 0.8, 1.1]).unwrap();
        let f = random_field(g, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let comps = (0..3)
            .map(|_| (0..g.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let v = VectorField::new(g, comps, BoundaryCondition::DirichletZero).unwrap();
        let gf = gradient(&f);
        let lhs: f64 = (0..3)
            .map(|a| crate::domain::dot(gf.component(a), v.component(a)))
            .sum();
        let rhs = -crate::domain::dot(f.values(), divergence(&v).values());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn advect_examples() {
        let g = Grid::unit_square(16).unwrap();
        let f = random_field(g, 1);
        let a = advect(&f, &VectorField::zeros(g), StencilSpec::Upwind1).unwrap();
        assert_eq!(a.max(), 0.0);
        assert_eq!(a.min(), 0.0);

        let raw = VectorField::from_fn(g, |x| [x[1].sin(), x[0] * x[1], 0.0]);
        assert!(matches!(
            advect(&f, &raw, StencilSpec::Upwind1),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn chemo_flux_trivial_cases() {
        let g = Grid::unit_square(12).unwrap();
        let s = SensitivityTensor::new(1.5, 0.5, 0.7, None).unwrap();
        let rho = random_field(g, 2);
        let flat = ScalarField::constant(g, 0.3);
        assert!(chemo_flux_div(&rho, &flat, &s)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
        let c = random_field(g, 4);
        assert!(chemo_flux_div(&ScalarField::zeros(g), &c, &s)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 0.0));
        let neg = ScalarField::constant(g, -1e-6);
        assert!(matches!(
            chemo_flux_div(&neg, &c, &s),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn chemo_flux_conserves_mass() {
        for (seed, ndim) in [(1u64, 2usize), (2, 3), (3, 2)] {
            let g = if ndim == 2 {
                Grid::new(&[20, 14], &[1.0, 0.7]).unwrap()
            } else {
                Grid::unit_cube(8).unwrap()
            };
            let rho = random_field(g, seed);
            let c = random_field(g, seed + 100);
            let s = SensitivityTensor::new(2.0, 0.3, 1.1, Some(0.1)).unwrap();
            let d = chemo_flux_div(&rho, &c, &s).unwrap();
            assert!(integrate(&d).abs() < 1e-10);
        }
    }

    #[test]
    fn diffuse_constant_is_fixed() {
        let g = Grid::unit_square(10).unwrap();
        let f = ScalarField::constant(g, 5.0);
        let out = diffuse_implicit(&f, 0.1, 1.0, 0.0).unwrap();
        assert!(out.values().iter().all(|v| *v == 5.0));
    }

    #[test]
    fn diffuse_cosine_eigenmode() {
        let n = 64;
        let g = strip(n);
        let f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let (dt, kappa) = (0.01, 1.0);
        let lam = discrete_eig(n, 1.0, 1);
        let out = diffuse_implicit(&f, dt, kappa, 0.0).unwrap();
        let expect = f.map(|v| v / (1.0 + dt * kappa * lam));
        assert!(max_diff(out.values(), expect.values()) < 1e-8);
    }

    #[test]
    fn diffuse_cosine_matches_dense_eigen_oracle() {
        let g = Grid::new(&[16, 4], &[1.0, 0.25]).unwrap();
        let f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let lam = crate::oracle::discrete_neumann_eigenvalues(&g).unwrap()[1];
        let out = diffuse_implicit(&f, 0.05, 1.0, 0.0).unwrap();
        let expect = f.map(|v| v / (1.0 + 0.05 * lam));
        assert!(max_diff(out.values(), expect.values()) < 1e-8);
    }

    #[test]
    fn diffuse_rejects_bad_parameters() {
        let g = Grid::unit_square(6).unwrap();
        let f = ScalarField::constant(g, 1.0);
        assert!(diffuse_implicit(&f, 0.0, 1.0, 0.0).is_err());
        assert!(diffuse_implicit(&f, 0.1, 0.0, 0.0).is_err());
        assert!(diffuse_implicit(&f, 0.1, 1.0, -1.0).is_err());
    }

    #[test]
    fn diffuse_damped_mean() {
        let g = Grid::unit_square(12).unwrap();
        let f = random_field(g, 5);
        let out = diffuse_implicit(&f, 0.2, 1.0, 1.0).unwrap();
        assert!((mean(&out) - mean(&f) / 1.2).abs() < 1e-12);
    }

    #[test]
    fn repeated_diffusion_decays_at_discrete_rate() {
        let n = 32;
        let g = strip(n);
        let lam = discrete_eig(n, 1.0, 1);
        let mut f = ScalarField::from_fn(g, |x| (PI * x[0]).cos());
        let f0 = lp_norm(&f, 2.0).unwrap();
        let dt = 1e-3;
        let steps = 200;
        for _ in 0..steps {
            f = diffuse_implicit(&f, dt, 1.0, 0.0).unwrap();
        }
        let t = dt * steps as f64;
        let ratio = lp_norm(&f, 2.0).unwrap() / f0;
        // backward Euler factor (1 + dt lam)^-n lies between e^{-lam t} and e^{-lam t}(1 + O(dt))
        assert!(ratio >= (-lam * t).exp());
        assert!(ratio <= (-lam * t).exp() * (1.0 + lam * lam * dt * t));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn laplacian_is_symmetric(seed in 0u64..1000) {
            let g = Grid::new(&[9, 6], &[1.0, 0.5]).unwrap();
            let f = random_field(g, seed);
            let h = random_field(g, seed + 7);
            let a = laplacian(&f).dot(&h);
            let b = f.dot(&laplacian(&h));
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
        }

        #[test]
        fn diffusion_conserves_contracts_and_stays_positive(seed in 0u64..1000, dt in 0.001f64..0.5) {
            let g = Grid::new(&[10, 8], &[1.0, 0.8]).unwrap();
            let f = random_field(g, seed);
            let out = diffuse_implicit(&f, dt, 1.0, 0.0).unwrap();
            prop_assert!((mean(&out) - mean(&f)).abs() < 1e-11);
            prop_assert!(lp_norm(&out, 2.0).unwrap() <= lp_norm(&f, 2.0).unwrap() * (1.0 + 1e-12));
            prop_assert!(out.min() >= -1e-12);
            let damped = diffuse_implicit(&f, dt, 1.0, 0.7).unwrap();
            prop_assert!(lp_norm(&damped, 2.0).unwrap() <= lp_norm(&f, 2.0).unwrap());
            prop_assert!(damped.min() >= -1e-12);
        }
    }
}
