//! The coupled sperm/egg/signal/fluid model: sensitivity tensor, reaction
//! terms, state container and the explicit right-hand side.

use crate::domain::{Grid, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::fluid::{self, StokesParams};
use crate::operators::{self, StencilSpec, POSCLAMP_TOL};

/// Chemotactic sensitivity `S(x, rho, c) = rho_eta(x) C_S (1 + rho)^-alpha R`.
///
/// `R` is a constant rotation. In 2D it turns by `rotation_angle`; in 3D it is
/// `R_xy(theta_xy) R_yz(theta_yz) R_xz(theta_xz)` with `theta_xy =
/// rotation_angle` unless `pair_angles` overrides all three. `rho_eta` is the
/// optional wall cutoff: zero within `eta * L_min` of the boundary, a C1
/// smoothstep ramp over the next `eta * L_min`, one beyond.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTensor {
    pub c_s: f64,
    pub alpha: f64,
    pub rotation_angle: f64,
    pub pair_angles: Option<[f64; 3]>,
    pub cutoff_eta: Option<f64>,
}

impl SensitivityTensor {
    pub fn new(c_s: f64, alpha: f64, rotation_angle: f64, cutoff_eta: Option<f64>) -> Result<Self> {
        let s = SensitivityTensor {
            c_s,
            alpha,
            rotation_angle,
            pair_angles: None,
            cutoff_eta,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scalar sensitivity `C_S` times identity.
    pub fn isotropic(c_s: f64) -> Self {
        SensitivityTensor {
            c_s,
            alpha: 0.0,
            rotation_angle: 0.0,
            pair_angles: None,
            cutoff_eta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // C_S = 0 switches chemotaxis off entirely
        if !(self.c_s >= 0.0 && self.c_s.is_finite()) {
            return Err(Error::Validation(format!("c_s must be >= 0, got {}", self.c_s)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation("alpha must be ≥ 0".into()));
        }
        if !self.rotation_angle.is_finite()
            || self
                .pair_angles
                .is_some_and(|p| p.iter().any(|a| !a.is_finite()))
        {
            return Err(Error::Validation("rotation angles must be finite".into()));
        }
        if let Some(eta) = self.cutoff_eta {
            if !(eta > 0.0 && eta < 1.0) {
                return Err(Error::Validation(format!(
                    "cutoff_eta must lie in (0, 1), got {eta}"
                )));
            }
        }
        Ok(())
    }

    /// Wall cutoff multiplier in `[0, 1]`.
    pub fn cutoff(&self, grid: &Grid, x: &[f64; 3]) -> f64 {
        let Some(eta) = self.cutoff_eta else {
            return 1.0;
        };
        let width = eta * grid.min_length();
        let s = ((grid.wall_distance(x) - width) / width).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    }

    /// Operator norm of `S` at the given point.
    #[inline]
    pub fn magnitude(&self, grid: &Grid, x: &[f64; 3], rho: f64, _c: f64) -> f64 {
        if self.c_s == 0.0 {
            return 0.0;
        }
        let base = if self.alpha == 0.0 {
            self.c_s
        } else {
            self.c_s * (1.0 + rho.max(0.0)).powf(-self.alpha)
        };
        base * self.cutoff(grid, x)
    }

    /// Upper bound `C_S (1 + rho)^-alpha` from the model assumptions.
    pub fn norm_bound(&self, rho: f64) -> f64 {
        self.c_s * (1.0 + rho.max(0.0)).powf(-self.alpha)
    }

    /// The constant rotation part, embedded in a 3x3 array.
    pub fn rotation(&self, ndim: usize) -> [[f64; 3]; 3] {
        let plane = |theta: f64, p: usize, q: usize| {
            let mut r = [[0.0; 3]; 3];
            (0..3).for_each(|i| r[i][i] = 1.0);
            let (s, c) = theta.sin_cos();
            r[p][p] = c;
            r[p][q] = -s;
            r[q][p] = s;
            r[q][q] = c;
            r
        };
        if ndim == 2 {
            let mut r = plane(self.rotation_angle, 0, 1);
            r[2][2] = 0.0;
            return r;
        }
        let [xy, yz, xz] = self
            .pair_angles
            .unwrap_or([self.rotation_angle, 0.0, 0.0]);
        matmul(&matmul(&plane(xy, 0, 1), &plane(yz, 1, 2)), &plane(xz, 0, 2))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// A 2x2 or 3x3 sensitivity matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensitivityMatrix {
    pub ndim: usize,
    pub entries: [[f64; 3]; 3],
}

impl SensitivityMatrix {
    /// Spectral norm, computed by SVD.
    pub fn operator_norm(&self) -> f64 {
        let n = self.ndim;
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| self.entries[i][j]);
        m.singular_values().max()
    }
}

/// Evaluates `S(x, rho, c)`.
pub fn eval_sensitivity(
    sens: &SensitivityTensor,
    grid: &Grid,
    x: &[f64; 3],
    rho: f64,
    c: f64,
) -> SensitivityMatrix {
    let ndim = grid.ndim();
    let mag = sens.magnitude(grid, x, rho, c);
    let mut entries = sens.rotation(ndim);
    for row in entries.iter_mut() {
        for v in row.iter_mut() {
            *v *= mag;
        }
    }
    SensitivityMatrix { ndim, entries }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub sensitivity: SensitivityTensor,
    pub stokes: StokesParams,
    pub advect_scheme: StencilSpec,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.sensitivity.validate()?;
        self.stokes.validate()
    }
}

/// The evolving solution together with the running integrals the invariant
/// checks need.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub rho: ScalarField,
    pub m: ScalarField,
    pub c: ScalarField,
    pub u: VectorField,
    pub p: ScalarField,
    pub t: f64,
    /// Mass consumed by the reaction, `int_0^t int rho m`, summed exactly per step.
    pub cum_reaction: f64,
    /// `2 * sum dt * ||grad m||_2^2`.
    pub cum_dissipation_m: f64,
    /// Mass added by the positivity clamp, summed over scalars and steps.
    pub clamped_mass: f64,
    pub steps: u64,
}

impl SimState {
    /// Builds a state at `t = 0` with zero pressure and fresh accumulators.
    pub fn new(rho: ScalarField, m: ScalarField, c: ScalarField, u: VectorField) -> Result<Self> {
        let grid = *rho.grid();
        let s = SimState {
            rho,
            m,
            c,
            u,
            p: ScalarField::zeros(grid),
            t: 0.0,
            cum_reaction: 0.0,
            cum_dissipation_m: 0.0,
            clamped_mass: 0.0,
            steps: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// All-zero state.
    pub fn rest(grid: Grid) -> Self {
        SimState {
            rho: ScalarField::zeros(grid),
            m: ScalarField::zeros(grid),
            c: ScalarField::zeros(grid),
            u: VectorField::zeros(grid),
            p: ScalarField::zeros(grid),
            t: 0.0,
            cum_reaction: 0.0,
            cum_dissipation_m: 0.0,
            clamped_mass: 0.0,
            steps: 0,
        }
    }

    /// Spatially constant scalars at rest.
    pub fn homogeneous(grid: Grid, rho: f64, m: f64, c: f64) -> Result<Self> {
        SimState::new(
            ScalarField::constant(grid, rho),
            ScalarField::constant(grid, m),
            ScalarField::constant(grid, c),
            VectorField::zeros(grid),
        )
    }

    pub fn grid(&self) -> &Grid {
        self.rho.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.rho.grid();
        if self.m.grid() != g || self.c.grid() != g || self.u.grid() != g || self.p.grid() != g {
            return Err(Error::ContractViolation("state fields on different grids".into()));
        }
        for (name, f) in [("rho", &self.rho), ("m", &self.m), ("c", &self.c)] {
            if !f.is_finite() {
                return Err(Error::ContractViolation(format!("{name} has non-finite values")));
            }
            let lo = f.min();
            if lo < -POSCLAMP_TOL {
                return Err(Error::ContractViolation(format!(
                    "{name} must be nonnegative, min is {lo:e}"
                )));
            }
        }
        if !self.u.divergence_free() {
            return Err(Error::ContractViolation(
                "velocity is not flagged divergence free".into(),
            ));
        }
        if !self.u.is_finite() || !self.p.is_finite() {
            return Err(Error::ContractViolation("non-finite velocity or pressure".into()));
        }
        Ok(())
    }
}

/// Pointwise `(-rho m, -rho m)`.
pub fn reaction_rates(rho: &ScalarField, m: &ScalarField) -> (ScalarField, ScalarField) {
    let vals: Vec<f64> = rho
        .values()
        .iter()
        .zip(m.values())
        .map(|(a, b)| -a * b)
        .collect();
    let out = ScalarField::from_raw(*rho.grid(), vals);
    (out.clone(), out)
}

/// Exact solution of the local reaction pair `rho' = m' = -rho m` over `dt`,
/// returning `(rho(dt), m(dt))`. Both lose the same amount, so `rho - m` is
/// preserved to roundoff and neither value can turn negative.
#[inline]
pub fn react_exact(rho: f64, m: f64, dt: f64) -> (f64, f64) {
    if rho <= 0.0 || m <= 0.0 {
        return (rho, m);
    }
    // integrate the smaller species: s(t) = s0 / (e^{d t} + s0 (e^{d t} - 1) / d), d = big - small >= 0
    let (small, big) = if m <= rho { (m, rho) } else { (rho, m) };
    let d = big - small;
    let x = d * dt;
    let phi = if x.abs() < 1e-8 { dt * (1.0 + 0.5 * x) } else { x.exp_m1() / d };
    let s = small / (x.exp() + small * phi);
    let consumed = small - s;
    (rho - consumed, m - consumed)
}

/// Explicit tendencies of every unknown.
#[derive(Clone, Debug)]
pub struct Tendencies {
    pub rho: ScalarField,
    pub m: ScalarField,
    pub c: ScalarField,
    pub u: VectorField,
}

/// Transport and source terms without the reaction: `-div(u rho) -
/// div(rho S grad c)`, `-div(u m)`, `-div(u c) + m`.
pub fn transport_rhs(
    rho: &ScalarField,
    m: &ScalarField,
    c: &ScalarField,
    u: &VectorField,
    params: &ModelParams,
) -> Result<(ScalarField, ScalarField, ScalarField)> {
    let scheme = params.advect_scheme;
    let adv_rho = operators::advect(rho, u, scheme)?;
    let chemo = operators::chemo_flux_div(rho, c, &params.sensitivity)?;
    let rho_dot = adv_rho.lin_comb(-1.0, &chemo, -1.0);
    let m_dot = operators::advect(m, u, scheme)?.map(|v| -v);
    let c_dot = operators::advect(c, u, scheme)?.lin_comb(-1.0, m, 1.0);
    Ok((rho_dot, m_dot, c_dot))
}

/// Explicit part of the full system. Diffusion and the linear `-c` decay are
/// left to the implicit solves.
pub fn assemble_rhs(state: &SimState, params: &ModelParams) -> Result<Tendencies> {
    let (rho_t, m_t, c_t) = transport_rhs(&state.rho, &state.m, &state.c, &state.u, params)?;
    let (r_rho, r_m) = reaction_rates(&state.rho, &state.m);
    let u = fluid::buoyancy(&state.rho, &state.m, &params.stokes.phi)?;
    Ok(Tendencies {
        rho: rho_t.lin_comb(1.0, &r_rho, 1.0),
        m: m_t.lin_comb(1.0, &r_m, 1.0),
        c: c_t,
        u,
    })
}
