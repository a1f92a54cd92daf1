//! Reference solutions that do not go through the simulator's code paths:
//! the closed-form homogeneous ODE, analytic heat eigenmodes, and the exact
//! heat semigroup of the discrete Neumann Laplacian by dense
//! eigendecomposition.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::domain::{Grid, ScalarField};
use crate::error::{Error, Result};

/// Per-axis limit for the dense oracle.
pub const DENSE_MAX_EXTENT: usize = 16;
/// Total-cell limit for the dense oracle.
pub const DENSE_MAX_CELLS: usize = 1024;

/// Spatially homogeneous solution of the full system with `u = 0`:
/// `rho' = m' = -rho m`, `c' = m - c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneousSolution {
    pub rho0: f64,
    pub m0: f64,
    pub c0: f64,
}

impl HomogeneousSolution {
    pub fn new(rho0: f64, m0: f64, c0: f64) -> Result<Self> {
        for (name, v) in [("rho0", rho0), ("m0", m0), ("c0", c0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(HomogeneousSolution { rho0, m0, c0 })
    }

    /// `rho0 - m0`, conserved along the flow.
    pub fn d(&self) -> f64 {
        self.rho0 - self.m0
    }

    /// Right-hand side of the reduced ODE.
    pub fn rhs(&self, rho: f64, m: f64, c: f64) -> (f64, f64, f64) {
        (-rho * m, -rho * m, m - c)
    }

    /// Closed-form egg density.
    pub fn m_at(&self, t: f64) -> f64 {
        let d = self.d();
        if d == 0.0 {
            return self.m0 / (1.0 + self.m0 * t);
        }
        d * self.m0 / ((d + self.m0) * (d * t).exp() - self.m0)
    }

    /// Limits as `t -> infinity`: `(d_+, (-d)_+, (-d)_+)`.
    pub fn limit(&self) -> (f64, f64, f64) {
        let d = self.d();
        (d.max(0.0), (-d).max(0.0), (-d).max(0.0))
    }
}

/// Exact `(rho, m, c)` at time `t`. `c` comes from the integrating factor,
/// `c(t) = e^{-t} (c0 + int_0^t e^s m(s) ds)`, with the integral done by
/// adaptive Simpson quadrature.
pub fn homogeneous_exact(sol: &HomogeneousSolution, t: f64) -> (f64, f64, f64) {
    assert!(t >= 0.0, "homogeneous_exact needs t >= 0");
    let m = sol.m_at(t);
    let rho = m + sol.d();
    if t == 0.0 {
        return (sol.rho0, sol.m0, sol.c0);
    }
    if !t.is_finite() {
        return sol.limit();
    }
    // integrate e^{s - t} m(s) to keep the integrand bounded for large t
    let integrand = |s: f64| (s - t).exp() * sol.m_at(s);
    let integral = adaptive_simpson(&integrand, 0.0, t, 1e-12, 50);
    let c = sol.c0 * (-t).exp() + integral;
    (rho, m, c)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, depth)
}

/// `cos(k pi x_0 / L_0) e^{-(k pi / L_0)^2 t}` sampled at the cell centres.
/// Passing one mode index per axis gives the product mode with the summed
/// exponent.
pub fn heat_eigenmode_reference(grid: &Grid, modes: &[usize], t: f64) -> Result<ScalarField> {
    if modes.is_empty() || modes.len() > grid.ndim() || modes.iter().all(|k| *k == 0) {
        return Err(Error::InvalidParameter(
            "need at least one nonzero mode index and at most one per axis".into(),
        ));
    }
    let lengths = grid.lengths().to_vec();
    let rate: f64 = modes
        .iter()
        .zip(&lengths)
        .map(|(k, l)| (*k as f64 * PI / l).powi(2))
        .sum();
    let amp = (-rate * t).exp();
    Ok(ScalarField::from_fn(*grid, |x| {
        amp * modes
            .iter()
            .enumerate()
            .map(|(a, k)| (*k as f64 * PI * x[a] / lengths[a]).cos())
            .product::<f64>()
    }))
}

fn check_dense_size(grid: &Grid) -> Result<()> {
    let too_long = grid.dims().iter().any(|n| *n > DENSE_MAX_EXTENT);
    if too_long || grid.n_cells() > DENSE_MAX_CELLS {
        return Err(Error::GridTooLarge {
            cells: grid.n_cells(),
            limit: DENSE_MAX_CELLS.min(DENSE_MAX_EXTENT.pow(grid.ndim() as u32)),
        });
    }
    Ok(())
}

/// The discrete Neumann Laplacian as a dense matrix, assembled cell by cell
/// from the stencil definition.
pub fn dense_neumann_laplacian(grid: &Grid) -> Result<DMatrix<f64>> {
    check_dense_size(grid)?;
    let n = grid.n_cells();
    let mut lap = DMatrix::zeros(n, n);
    for idx in 0..n {
        let c = grid.coords(idx);
        for a in 0..grid.ndim() {
            let w = 1.0 / grid.spacing(a).powi(2);
            let mut nb = c;
            if c[a] > 0 {
                nb[a] = c[a] - 1;
                let j = grid.index(nb[0], nb[1], nb[2]);
                lap[(idx, j)] += w;
                lap[(idx, idx)] -= w;
            }
            nb = c;
            if c[a] + 1 < grid.extent(a) {
                nb[a] = c[a] + 1;
                let j = grid.index(nb[0], nb[1], nb[2]);
                lap[(idx, j)] += w;
                lap[(idx, idx)] -= w;
            }
        }
    }
    Ok(lap)
}

/// Eigenvalues of `-laplacian` in ascending order (the first is zero).
pub fn discrete_neumann_eigenvalues(grid: &Grid) -> Result<Vec<f64>> {
    let lap = dense_neumann_laplacian(grid)?;
    let eig = SymmetricEigen::new(-lap);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    Ok(vals)
}

/// Smallest nonzero Neumann eigenvalue of the discrete Laplacian.
pub fn discrete_lambda1(grid: &Grid) -> Result<f64> {
    let vals = discrete_neumann_eigenvalues(grid)?;
    vals.into_iter()
        .find(|v| *v > 1e-9)
        .ok_or_else(|| Error::InvalidParameter("no nonzero eigenvalue".into()))
}

/// Exact `exp(t laplacian) f` through a symmetric eigendecomposition.
pub fn dense_semigroup(grid: &Grid, t: f64, f: &ScalarField) -> Result<ScalarField> {
    if f.grid() != grid {
        return Err(Error::InvalidParameter("field lives on a different grid".into()));
    }
    let lap = dense_neumann_laplacian(grid)?;
    let eig = SymmetricEigen::new(lap);
    let q = &eig.eigenvectors;
    let x = DVector::from_column_slice(f.values());
    let mut coeff = q.transpose() * x;
    for (c, lam) in coeff.iter_mut().zip(eig.eigenvalues.iter()) {
        // eigenvalues of the Laplacian are <= 0; clip roundoff on the null mode
        *c *= (lam.min(0.0) * t).exp();
    }
    let out = q * coeff;
    ScalarField::neumann(*grid, out.iter().copied().collect())
}
