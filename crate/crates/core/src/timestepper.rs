//! First-order split stepping of the coupled system.
//!
//! One step: exact local reaction, explicit transport and chemotaxis,
//! implicit diffusion (with the linear decay of `c`), a Stokes solve, then
//! the positivity clamp.

use crate::domain::{integrate, ScalarField};
use crate::error::{Error, Result};
use crate::fluid;
use crate::model::{react_exact, transport_rhs, ModelParams, SimState};
use crate::operators::{self, POSCLAMP_TOL};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub dt: f64,
    pub cfl_target: f64,
    pub posclamp_tol: f64,
    /// Largest clamped mass per step, relative to the total scalar mass.
    pub clamp_budget: f64,
}

impl StepControl {
    pub fn new(dt: f64) -> Result<Self> {
        let c = StepControl {
            dt,
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.cfl_target > 0.0 && self.cfl_target <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "cfl_target must lie in (0, 1], got {}",
                self.cfl_target
            )));
        }
        if !(self.posclamp_tol >= 0.0 && self.clamp_budget >= 0.0) {
            return Err(Error::InvalidParameter("clamp tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            dt: 1e-3,
            cfl_target: 0.4,
            posclamp_tol: POSCLAMP_TOL,
            clamp_budget: 1e-8,
        }
    }
}

/// `min(dt, cfl h / max(|u| + |S| |grad c|), 0.5 / max(rho, m))`.
pub fn stable_dt(state: &SimState, params: &ModelParams, ctrl: &StepControl) -> f64 {
    let grid = state.grid();
    let grad_c = operators::gradient(&state.c);
    let sens = &params.sensitivity;
    let mut speed: f64 = 0.0;
    for idx in 0..grid.n_cells() {
        let rho = state.rho.values()[idx];
        let s = state.u.magnitude_at(idx) + sens.norm_bound(rho) * grad_c.magnitude_at(idx);
        speed = speed.max(s);
    }
    let mut dt = ctrl.dt;
    if speed > 0.0 {
        dt = dt.min(ctrl.cfl_target * grid.min_spacing() / speed);
    }
    let peak = state.rho.max().max(state.m.max());
    if peak > 0.0 {
        dt = dt.min(0.5 / peak);
    }
    dt
}

/// Advances by `stable_dt`.
pub fn step(state: &SimState, params: &ModelParams, ctrl: &StepControl) -> Result<SimState> {
    let dt = stable_dt(state, params, ctrl);
    advance(state, params, ctrl, dt)
}

/// Advances by `min(stable_dt, t_limit - t)`, so a sequence of calls lands on
/// `t_limit` exactly.
pub fn step_until(
    state: &SimState,
    params: &ModelParams,
    ctrl: &StepControl,
    t_limit: f64,
) -> Result<SimState> {
    let gap = t_limit - state.t;
    if !(gap > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "t_limit {t_limit} is not ahead of t = {}",
            state.t
        )));
    }
    let dt = stable_dt(state, params, ctrl);
    // avoid leaving a sliver step behind
    let mut next = if dt >= gap * (1.0 - 1e-9) { gap } else { dt };
    if next < gap && gap - next < 1e-6 * dt {
        next = 0.5 * gap;
    }
    let mut out = advance(state, params, ctrl, next)?;
    if next == gap {
        out.t = t_limit;
    }
    Ok(out)
}

/// One step with the given `dt`, which must not exceed `stable_dt`.
pub fn advance(state: &SimState, params: &ModelParams, ctrl: &StepControl, dt: f64) -> Result<SimState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    let grid = *state.grid();
    let cell = grid.cell_volume();

    // local reaction, solved exactly
    let mut rho_r = state.rho.clone();
    let mut m_r = state.m.clone();
    let mut consumed = 0.0;
    for ((r, m), (r0, m0)) in rho_r
        .values_mut()
        .iter_mut()
        .zip(m_r.values_mut())
        .zip(state.rho.values().iter().zip(state.m.values()))
    {
        let (rn, mn) = react_exact(*r0, *m0, dt);
        consumed += r0 - rn;
        *r = rn;
        *m = mn;
    }

    // explicit transport
    let (rho_t, m_t, c_t) = transport_rhs(&rho_r, &m_r, &state.c, &state.u, params)?;
    let rho_s = rho_r.lin_comb(1.0, &rho_t, dt);
    let m_s = m_r.lin_comb(1.0, &m_t, dt);
    let c_s = state.c.lin_comb(1.0, &c_t, dt);

    // implicit diffusion
    let rho_n = operators::diffuse_implicit(&rho_s, dt, 1.0, 0.0)?;
    let m_n = operators::diffuse_implicit(&m_s, dt, 1.0, 0.0)?;
    let c_n = operators::diffuse_implicit(&c_s, dt, 1.0, 1.0)?;

    let (u_n, p_n) = fluid::stokes_step(&state.u, &state.rho, &state.m, dt, &params.stokes)?;

    let total = integrate(&state.rho) + integrate(&state.m) + integrate(&state.c);
    let budget = ctrl.clamp_budget * total.max(f64::MIN_POSITIVE);
    let mut clamped = 0.0;
    let mut fields = [("rho", rho_n), ("m", m_n), ("c", c_n)];
    for (name, f) in fields.iter_mut() {
        let added = clamp(f) * cell;
        if added > budget {
            return Err(Error::Stability {
                field: name,
                clamped: added / total.max(f64::MIN_POSITIVE),
                budget: ctrl.clamp_budget,
            });
        }
        clamped += added;
    }
    let [(_, rho_n), (_, m_n), (_, c_n)] = fields;

    let dissipation = 2.0 * dt * operators::grad_norm_sq(&m_n);
    Ok(SimState {
        rho: rho_n,
        m: m_n,
        c: c_n,
        u: u_n,
        p: p_n,
        t: state.t + dt,
        cum_reaction: state.cum_reaction + consumed * cell,
        cum_dissipation_m: state.cum_dissipation_m + dissipation,
        clamped_mass: state.clamped_mass + clamped,
        steps: state.steps + 1,
    })
}

/// Sets negative entries to zero and returns the sum of what was added.
fn clamp(f: &mut ScalarField) -> f64 {
    let mut added = 0.0;
    for v in f.values_mut() {
        if *v < 0.0 {
            added -= *v;
            *v = 0.0;
        }
    }
    added
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{lp_norm, Grid, VectorField};
    use crate::fluid::{leray_project, StokesParams};
    use crate::model::SensitivityTensor;
    use crate::operators::StencilSpec;
    use crate::oracle::{homogeneous_exact, HomogeneousSolution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(grid: Grid, c_s: f64, alpha: f64) -> ModelParams {
        ModelParams {
            sensitivity: SensitivityTensor::new(c_s, alpha, 0.7, None).unwrap(),
            stokes: StokesParams::new(ScalarField::from_fn(grid, |x| x[1])),
            advect_scheme: StencilSpec::Upwind1,
        }
    }

    fn random_state(grid: Grid, seed: u64) -> SimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = |base: f64, amp: f64| {
            let (a, b, kx, ky): (f64, f64, f64, f64) = (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
            );
            ScalarField::from_fn(grid, move |x| {
                base + amp * (a * (kx * x[0] * 3.1).cos() + b * (ky * x[1] * 2.3).sin()) / 2.0
            })
        };
        let rho = field(1.0, 0.5);
        let m = field(0.8, 0.5);
        let c = field(0.5, 0.4);
        let u = VectorField::from_fn(grid, |x| {
            let s = (3.0 * x[0]).sin() * (2.0 * x[1]).cos();
            [0.3 * s, -0.2 * s, 0.0]
        });
        let (u, _) = leray_project(&u).unwrap();
        SimState::new(rho, m, c, u).unwrap()
    }

    #[test]
    fn stable_dt_examples() {
        let g = Grid::unit_square(64).unwrap();
        let p = params(g, 1.0, 0.0);
        let ctrl = StepControl::new(0.05).unwrap();
        assert_eq!(stable_dt(&SimState::rest(g), &p, &ctrl), 0.05);

        let mut s = SimState::rest(g);
        s.u = VectorField::from_fn(g, |_| [1.0, 0.0, 0.0]);
        assert!((stable_dt(&s, &p, &ctrl) - 0.4 / 64.0).abs() < 1e-15);

        let s = SimState::homogeneous(g, 2.0, 0.5, 0.0).unwrap();
        let ctrl = StepControl::new(1.0).unwrap();
        assert_eq!(stable_dt(&s, &p, &ctrl), 0.25);
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let g = Grid::unit_square(8).unwrap();
        let p = params(g, 1.0, 0.5);
        let ctrl = StepControl::new(0.01).unwrap();
        let s = step(&SimState::rest(g), &p, &ctrl).unwrap();
        assert_eq!(s.t, 0.01);
        assert!(s.rho.values().iter().chain(s.m.values()).chain(s.c.values()).all(|v| *v == 0.0));
        assert_eq!(s.u.max_abs(), 0.0);
    }

    #[test]
    fn homogeneous_hundred_steps() {
        let g = Grid::unit_square(8).unwrap();
        let p = params(g, 1.0, 0.0);
        let ctrl = StepControl::new(0.01).unwrap();
        let mut s = SimState::homogeneous(g, 2.0, 1.0, 1.0).unwrap();
        for _ in 0..100 {
            s = step(&s, &p, &ctrl).unwrap();
        }
        assert!((s.t - 1.0).abs() < 1e-12);
        let exact = homogeneous_exact(&HomogeneousSolution::new(2.0, 1.0, 1.0).unwrap(), s.t);
        for idx in [0, 17, 63] {
            assert!((s.rho.values()[idx] - 1.22540).abs() < 2e-3);
            assert!((s.m.values()[idx] - 0.22540).abs() < 2e-3);
            assert!((s.c.values()[idx] - exact.2).abs() < 2e-3);
        }
        assert!(s.u.max_abs() < 1e-8);
    }

    #[test]
    fn homogeneous_tracks_oracle_on_long_window() {
        let g = Grid::unit_square(4).unwrap();
        let p = params(g, 0.0, 0.0);
        let sol = HomogeneousSolution::new(1.5, 2.0, 0.3).unwrap();
        let errs: Vec<f64> = [0.02, 0.01]
            .iter()
            .map(|dt| {
                let ctrl = StepControl::new(*dt).unwrap();
                let mut s = SimState::homogeneous(g, 1.5, 2.0, 0.3).unwrap();
                let mut worst: f64 = 0.0;
                while s.t < 5.0 - 1e-12 {
                    s = step_until(&s, &p, &ctrl, 5.0).unwrap();
                    let (r, m, c) = homogeneous_exact(&sol, s.t);
                    worst = worst
                        .max((s.rho.values()[0] - r).abs())
                        .max((s.m.values()[0] - m).abs())
                        .max((s.c.values()[0] - c).abs());
                }
                worst
            })
            .collect();
        assert!(errs[0] < 2e-2);
        let ratio = errs[0] / errs[1];
        assert!((1.5..2.7).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn step_until_lands_exactly() {
        let g = Grid::unit_square(8).unwrap();
        let p = params(g, 1.0, 0.0);
        let ctrl = StepControl::new(0.03).unwrap();
        let mut s = random_state(g, 3);
        while s.t < 0.1 {
            s = step_until(&s, &p, &ctrl, 0.1).unwrap();
        }
        assert_eq!(s.t, 0.1);
        assert!(step_until(&s, &p, &ctrl, 0.1).is_err());
    }

    #[test]
    fn invariants_over_random_runs() {
        for (seed, dims) in [(1u64, vec![16, 16]), (2, vec![12, 10]), (3, vec![8, 8, 6])] {
            let lengths: Vec<f64> = dims.iter().map(|_| 1.0).collect();
            let g = Grid::new(&dims, &lengths).unwrap();
            let p = params(g, 0.8, 0.3);
            let ctrl = StepControl::new(0.005).unwrap();
            let s0 = random_state(g, seed);
            let diff0 = integrate(&s0.rho) - integrate(&s0.m);
            let scale = integrate(&s0.rho) + integrate(&s0.m);
            let mmax0 = s0.m.max();
            let cmax0 = s0.m.max().max(s0.c.max());
            let m20 = lp_norm(&s0.m, 2.0).unwrap().powi(2);
            let bound = integrate(&s0.rho).min(integrate(&s0.m));
            let mut s = s0;
            for _ in 0..150 {
                let prev = s.clone();
                s = step(&s, &p, &ctrl).unwrap();
                assert!(((integrate(&s.rho) - integrate(&s.m)) - diff0).abs() <= 1e-8 * scale);
                assert!(integrate(&s.rho) <= integrate(&prev.rho) * (1.0 + 1e-12));
                assert!(integrate(&s.m) <= integrate(&prev.m) * (1.0 + 1e-12));
                assert!(s.m.max() <= prev.m.max() + 1e-10);
                assert!(s.m.max() <= mmax0 + 1e-10);
                assert!(s.c.max() <= cmax0 + 1e-10);
                assert!(s.cum_reaction <= bound * (1.0 + 1e-8));
                let lhs = lp_norm(&s.m, 2.0).unwrap().powi(2) + s.cum_dissipation_m;
                assert!(lhs <= m20 * (1.0 + 1e-6));
                for f in [&s.rho, &s.m, &s.c] {
                    assert!(f.min() >= 0.0);
                }
                assert!(operators::divergence(&s.u).values().iter().all(|v| v.abs() <= 1e-9));
                assert!(s.u.divergence_free());
            }
        }
    }

    #[test]
    fn clamp_budget_violation_is_reported() {
        let g = Grid::unit_square(16).unwrap();
        let p = params(g, 50.0, 0.0);
        let rho = ScalarField::from_fn(g, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
        let c = ScalarField::from_fn(g, |x| 5.0 * x[0] * x[0]);
        let m = ScalarField::constant(g, 0.1);
        let s = SimState::new(rho, m, c, VectorField::zeros(g)).unwrap();
        let ctrl = StepControl {
            dt: 0.5,
            cfl_target: 1.0,
            clamp_budget: 0.0,
            ..Default::default()
        };
        match advance(&s, &p, &ctrl, 0.05) {
            Err(Error::Stability { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn control_validation() {
        assert!(StepControl::new(0.0).is_err());
        assert!(StepControl::new(f64::NAN).is_err());
        let bad = StepControl {
            cfl_target: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
