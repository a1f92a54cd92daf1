//! Per-sample diagnostics, invariant checks over a run history, and
//! exponential rate fits.

use serde::{Deserialize, Serialize};

use crate::domain::{integrate, l2_deviation, lp_norm, mean, ScalarField};
use crate::error::{Error, Result};
use crate::model::SimState;
use crate::operators::grad_norm_sq;

/// Lower and upper factors applied to the reference rate in rate checks.
pub const RATE_BAND: (f64, f64) = (0.5, 1.2);
/// Minimum number of samples a rate fit accepts.
pub const MIN_FIT_SAMPLES: usize = 10;

/// One sampled row. Field order matches the CSV column order; the last two
/// columns are extras used by the offline L2 dissipation check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass_rho: f64,
    pub mass_m: f64,
    pub mass_diff: f64,
    pub linf_rho: f64,
    pub linf_m: f64,
    pub linf_c: f64,
    pub linf_u: f64,
    pub l2_rho_dev: f64,
    pub l2_m_dev: f64,
    pub l2_c_dev: f64,
    pub l2_u: f64,
    pub l2_grad_c: f64,
    pub l2_grad_u: f64,
    pub cum_reaction: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(default = "nan")]
    pub l2_m: f64,
    #[serde(default = "nan")]
    pub cum_dissipation_m: f64,
}

fn nan() -> f64 {
    f64::NAN
}

/// Weights of the three deviation terms and the reaction term in `G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for GWeights {
    fn default() -> Self {
        GWeights { a: 1.0, b: 1.0, c: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquilibriumSpec {
    pub rho_inf: f64,
    pub m_inf: f64,
}

impl EquilibriumSpec {
    /// True when the two masses agree to `rel_tol` of their sum.
    pub fn is_balanced(&self, mass_scale: f64, rel_tol: f64) -> bool {
        (self.rho_inf - self.m_inf).abs() <= rel_tol * mass_scale
    }
}

pub fn equilibrium(rho0: &ScalarField, m0: &ScalarField) -> EquilibriumSpec {
    let d = mean(rho0) - mean(m0);
    EquilibriumSpec {
        rho_inf: d.max(0.0),
        m_inf: (-d).max(0.0),
    }
}

pub fn record(state: &SimState, eps_y: f64, weights: &GWeights) -> DiagnosticsRecord {
    let (rho, m, c) = (&state.rho, &state.m, &state.c);
    let mass_rho = integrate(rho);
    let mass_m = integrate(m);
    let l2_rho_dev = l2_deviation(rho);
    let l2_m_dev = l2_deviation(m);
    let l2_c_dev = l2_deviation(c);
    let grad_c_sq = grad_norm_sq(c);
    let grad_u_sq: f64 = (0..state.u.ndim())
        .map(|a| grad_norm_sq(&state.u.component_field(a)))
        .sum();
    let l2_u = state.u.l2_norm();
    let l2_rho = lp_norm(rho, 2.0).expect("p = 2");
    let l2_m = lp_norm(m, 2.0).expect("p = 2");
    let rho_m = rho.dot(m);
    DiagnosticsRecord {
        t: state.t,
        mass_rho,
        mass_m,
        mass_diff: mass_rho - mass_m,
        linf_rho: rho.max().max(-rho.min()),
        linf_m: m.max().max(-m.min()),
        linf_c: c.max().max(-c.min()),
        linf_u: state.u.max_magnitude(),
        l2_rho_dev,
        l2_m_dev,
        l2_c_dev,
        l2_u,
        l2_grad_c: grad_c_sq.sqrt(),
        l2_grad_u: grad_u_sq.sqrt(),
        cum_reaction: state.cum_reaction,
        y: l2_rho * l2_rho + l2_u * l2_u + grad_u_sq + grad_c_sq / eps_y,
        g: l2_rho_dev * l2_rho_dev
            + weights.a * l2_m_dev * l2_m_dev
            + weights.b * l2_c_dev * l2_c_dev
            + weights.c * rho_m,
        l2_m,
        cum_dissipation_m: state.cum_dissipation_m,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub rate: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

/// Least-squares fit of `log(value) = a - rate t` over samples with
/// `t0 <= t <= t1`.
pub fn fit_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    let (t0, t1) = window;
    if !(t0 < t1) {
        return Err(Error::InvalidParameter(format!("empty window {t0}:{t1}")));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= t0 && *t <= t1)
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "window {t0}:{t1} holds {} samples, need at least {MIN_FIT_SAMPLES}",
            pts.len()
        )));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "non-positive value {v:e} at t = {t} inside window; shrink the window"
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for (t, v) in &pts {
        let (dt, dy) = (t - tm, v.ln() - ym);
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if stt == 0.0 {
        return Err(Error::InvalidParameter("all samples share one time".into()));
    }
    let slope = sty / stt;
    let r_squared = if syy == 0.0 { 1.0 } else { sty * sty / (stt * syy) };
    Ok(RateFit {
        rate: -slope,
        r_squared,
        window,
        samples: pts.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateCheck {
    pub fit: RateFit,
    pub reference: f64,
    pub lower: f64,
    pub upper: f64,
    pub passed: bool,
}

/// Checks `fit.rate` against `RATE_BAND` scaled by `reference`.
pub fn check_rate(fit: RateFit, reference: f64) -> RateCheck {
    let lower = RATE_BAND.0 * reference;
    let upper = RATE_BAND.1 * reference;
    RateCheck {
        fit,
        reference,
        lower,
        upper,
        passed: fit.rate >= lower && fit.rate <= upper,
    }
}

/// True iff `value` does not increase by more than `slack` (relative) from
/// one sample to the next, among samples with `t >= t0`.
pub fn monotone_after(series: &[(f64, f64)], t0: f64, slack: f64) -> bool {
    series
        .iter()
        .filter(|(t, _)| *t >= t0)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 + slack * w[0].1.abs())
}

/// Tolerances for `check_invariants`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvariantBudget {
    /// Drift of `mass_diff`, relative to the initial total mass.
    pub conservation_rel: f64,
    /// Allowed relative growth of each mass between samples.
    pub monotone_rel: f64,
    /// Absolute slack on the two maximum principles.
    pub max_principle_abs: f64,
    /// Relative slack on the cumulative reaction bound.
    pub reaction_rel: f64,
    /// Relative slack on the L2 dissipation inequality for `m`.
    pub dissipation_rel: f64,
}

impl Default for InvariantBudget {
    fn default() -> Self {
        InvariantBudget {
            conservation_rel: 1e-8,
            monotone_rel: 1e-12,
            max_principle_abs: 1e-10,
            reaction_rel: 1e-8,
            dissipation_rel: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The history lacks the columns this check needs.
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Smallest `allowed - observed` over the history; negative on failure.
    pub worst_margin: f64,
    /// Record at which the worst margin occurred.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "skip",
            };
            writeln!(
                f,
                "{tag:4} {:<22} worst margin {:+.3e} at record {}",
                c.name, c.worst_margin, c.worst_index
            )?;
        }
        Ok(())
    }
}

fn margin_check(
    name: &'static str,
    history: &[DiagnosticsRecord],
    first: usize,
    margin: impl Fn(usize) -> f64,
) -> InvariantCheck {
    let mut worst = f64::INFINITY;
    let mut worst_index = first;
    for i in first..history.len() {
        let m = margin(i);
        // NaN margins count as failures
        if !(m >= worst) {
            worst = m;
            worst_index = i;
        }
    }
    InvariantCheck {
        name,
        status: if worst >= 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
        worst_margin: worst,
        worst_index,
    }
}

/// Conservation, monotonicity, maximum principles, reaction bound and L2
/// dissipation over a run history.
pub fn check_invariants(history: &[DiagnosticsRecord], budget: &InvariantBudget) -> InvariantReport {
    let mut checks = Vec::new();
    if history.len() < 2 {
        return InvariantReport { checks };
    }
    let h0 = history[0];
    let scale = (h0.mass_rho + h0.mass_m).max(f64::MIN_POSITIVE);
    checks.push(margin_check("mass_difference", history, 1, |i| {
        budget.conservation_rel * scale - (history[i].mass_diff - h0.mass_diff).abs()
    }));
    checks.push(margin_check("mass_rho_monotone", history, 1, |i| {
        history[i - 1].mass_rho * (1.0 + budget.monotone_rel) - history[i].mass_rho
    }));
    checks.push(margin_check("mass_m_monotone", history, 1, |i| {
        history[i - 1].mass_m * (1.0 + budget.monotone_rel) - history[i].mass_m
    }));
    checks.push(margin_check("linf_m_monotone", history, 1, |i| {
        history[i - 1].linf_m + budget.max_principle_abs - history[i].linf_m
    }));
    let c_cap = h0.linf_m.max(h0.linf_c) + budget.max_principle_abs;
    checks.push(margin_check("linf_c_bound", history, 0, |i| c_cap - history[i].linf_c));
    let r_cap = h0.mass_rho.min(h0.mass_m) * (1.0 + budget.reaction_rel);
    checks.push(margin_check("cum_reaction_bound", history, 0, |i| {
        r_cap - history[i].cum_reaction
    }));
    checks.push(margin_check("cum_reaction_monotone", history, 1, |i| {
        history[i].cum_reaction - history[i - 1].cum_reaction
    }));
    let has_extras = history
        .iter()
        .all(|r| r.l2_m.is_finite() && r.cum_dissipation_m.is_finite());
    if has_extras {
        let cap = h0.l2_m * h0.l2_m * (1.0 + budget.dissipation_rel);
        checks.push(margin_check("l2_dissipation_m", history, 0, |i| {
            cap - (history[i].l2_m * history[i].l2_m + history[i].cum_dissipation_m)
        }));
    } else {
        checks.push(InvariantCheck {
            name: "l2_dissipation_m",
            status: CheckStatus::Skipped,
            worst_margin: f64::NAN,
            worst_index: 0,
        });
    }
    InvariantReport { checks }
}
