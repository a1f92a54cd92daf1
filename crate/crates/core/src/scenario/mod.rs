//! Scenario runs: presets and configs in, CSV time series, snapshots and a
//! checked summary out.

mod config;
mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

pub use config::{
    parse_config, parse_config_with, preset_config, GridSpec, InitialSpec, ModelSpec, OutputSpec, PhiSpec, Preset,
    RateSpec, ScalarInit, ScenarioConfig, StepSpec, VelocityInit,
};
pub use io::{read_csv, read_snapshot, write_snapshot, CsvSink, CSV_COLUMNS, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use crate::diagnostics::{
    check_invariants, check_rate, equilibrium, fit_rate, record, DiagnosticsRecord, EquilibriumSpec,
    InvariantBudget, InvariantReport, RateCheck,
};
use crate::domain::mean;
use crate::error::{Error, Result};
use crate::model::SimState;
use crate::operators::divergence;
use crate::oracle::{homogeneous_exact, HomogeneousSolution};
use crate::timestepper::step_until;

/// Relative mass gap under which a scenario counts as balanced.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this snapshot instead of the initial data.
    pub resume_from: Option<PathBuf>,
    /// Stop at the first sample time at or after this, writing the checkpoint.
    pub stop_at: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// `int rho_0 > int m_0`: eggs die out, sperm survive.
    RhoSurvives,
    /// `int rho_0 < int m_0`.
    MSurvives,
    Balanced,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RateOutcome {
    NotAsserted { reason: String },
    Fitted {
        /// CSV column that was fitted.
        quantity: &'static str,
        /// When false the fit is informational only.
        asserted: bool,
        result: std::result::Result<RateCheck, String>,
    },
}

impl RateOutcome {
    pub fn passed(&self) -> bool {
        match self {
            RateOutcome::NotAsserted { .. } => true,
            RateOutcome::Fitted { asserted: false, .. } => true,
            RateOutcome::Fitted { result, .. } => result.as_ref().is_ok_and(|c| c.passed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<DiagnosticsRecord>,
    pub final_state: SimState,
    /// Index of the last sample taken.
    pub sample_index: u64,
    /// False when the run stopped early at `stop_at`.
    pub completed: bool,
    pub regime: Regime,
    pub equilibrium: EquilibriumSpec,
    pub lambda1_d: f64,
    pub invariants: InvariantReport,
    /// Largest `max |div u|` seen after any step.
    pub max_divergence: f64,
    pub divergence_tol: f64,
    /// Smallest K with `||u_{n+1}||^2 - ||u_n||^2 <= dt K (||rho_n||^2 + ||m_n||^2)`
    /// over every step taken; must stay finite.
    pub energy_k: f64,
    /// Max componentwise gap to the homogeneous closed form at the final time.
    pub oracle_deviation: Option<f64>,
    pub rates: RateOutcome,
    pub elapsed: Duration,
}

impl RunSummary {
    /// Invariants, post-step divergence and any asserted rate all pass.
    pub fn passed(&self) -> bool {
        self.invariants.passed()
            && self.max_divergence <= self.divergence_tol
            && self.energy_k.is_finite()
            && self.rates.passed()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.final_state;
        writeln!(
            f,
            "t = {} after {} steps ({} samples, {:.2?}){}",
            s.t,
            s.steps,
            self.records.len(),
            self.elapsed,
            if self.completed { "" } else { ", stopped early" }
        )?;
        writeln!(
            f,
            "regime {:?}: rho_inf = {:.6}, m_inf = {:.6}, lambda1_d = {:.6}",
            self.regime, self.equilibrium.rho_inf, self.equilibrium.m_inf, self.lambda1_d
        )?;
        write!(f, "{}", self.invariants)?;
        writeln!(
            f,
            "{:4} post-step divergence   max {:.3e} (tol {:.1e})",
            if self.max_divergence <= self.divergence_tol { "pass" } else { "FAIL" },
            self.max_divergence,
            self.divergence_tol
        )?;
        writeln!(
            f,
            "{:4} energy constant K      {:.3e}",
            if self.energy_k.is_finite() { "pass" } else { "FAIL" },
            self.energy_k
        )?;
        if let Some(d) = self.oracle_deviation {
            writeln!(f, "oracle deviation at t = {}: {d:.3e}", s.t)?;
        }
        match &self.rates {
            RateOutcome::NotAsserted { reason } => writeln!(f, "no rate assertion: {reason}")?,
            RateOutcome::Fitted {
                quantity,
                asserted,
                result,
            } => {
                let label = if *asserted { "rate" } else { "rate (informational)" };
                match result {
                    Ok(c) => writeln!(
                        f,
                        "{} {label} of {quantity}: {:.4} over [{}, {}], band [{:.4}, {:.4}], r^2 = {:.5}",
                        if c.passed { "pass" } else { "FAIL" },
                        c.fit.rate,
                        c.fit.window.0,
                        c.fit.window.1,
                        c.lower,
                        c.upper,
                        c.fit.r_squared
                    )?,
                    Err(e) => writeln!(f, "FAIL {label} of {quantity}: {e}")?,
                }
            }
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn column(records: &[DiagnosticsRecord], quantity: &str) -> Vec<(f64, f64)> {
    records
        .iter()
        .map(|r| {
            let v = match quantity {
                "linf_m" => r.linf_m,
                "linf_rho" => r.linf_rho,
                _ => unreachable!("unknown rate quantity {quantity}"),
            };
            (r.t, v)
        })
        .collect()
}

pub fn classify(eq: &EquilibriumSpec, mass_scale: f64) -> Regime {
    if eq.is_balanced(mass_scale, BALANCE_TOL) {
        Regime::Balanced
    } else if eq.rho_inf > 0.0 {
        Regime::RhoSurvives
    } else {
        Regime::MSurvives
    }
}

fn rate_outcome(
    cfg: &ScenarioConfig,
    regime: Regime,
    eq: &EquilibriumSpec,
    lambda1_d: f64,
    records: &[DiagnosticsRecord],
) -> RateOutcome {
    let (quantity, survivor) = match regime {
        Regime::Balanced => {
            return RateOutcome::NotAsserted {
                reason: "balanced masses, exponential decay is not expected".into(),
            }
        }
        Regime::RhoSurvives => ("linf_m", eq.rho_inf),
        Regime::MSurvives => ("linf_rho", eq.m_inf),
    };
    let window = cfg
        .rates
        .window
        .map(|[a, b]| (a, b))
        .unwrap_or((0.5 * cfg.t_end, cfg.t_end));
    let result = fit_rate(&column(records, quantity), window)
        .map(|fit| check_rate(fit, lambda1_d.min(survivor)))
        .map_err(|e| e.to_string());
    RateOutcome::Fitted {
        quantity,
        asserted: cfg.rates.assert,
        result,
    }
}

fn oracle_deviation(cfg: &ScenarioConfig, state: &SimState) -> Option<f64> {
    let (r0, m0, c0) = cfg.homogeneous_data()?;
    let sol = HomogeneousSolution::new(r0, m0, c0).ok()?;
    let (r, m, c) = homogeneous_exact(&sol, state.t);
    let worst = |vals: &[f64], exact: f64| vals.iter().fold(0.0f64, |w, v| w.max((v - exact).abs()));
    Some(
        worst(state.rho.values(), r)
            .max(worst(state.m.values(), m))
            .max(worst(state.c.values(), c)),
    )
}

fn snapshot_path(dir: &Path, k: u64) -> PathBuf {
    dir.join(format!("snap_{k:06}.bin"))
}

/// Runs a scenario from its initial data.
#[derive(Default)]
struct StepWatch {
    max_divergence: f64,
    energy_k: f64,
}

impl StepWatch {
    fn energy(&mut self, old: &SimState, new: &SimState) {
        let dt = new.t - old.t;
        let gain = new.u.l2_norm().powi(2) - old.u.l2_norm().powi(2);
        if gain <= 0.0 {
            return;
        }
        let load = old.rho.dot(&old.rho) + old.m.dot(&old.m);
        let k = if load > 0.0 { gain / (dt * load) } else { f64::INFINITY };
        if k > self.energy_k {
            log::trace!("energy constant K rises to {k:e} at t = {}", new.t);
            self.energy_k = k;
        }
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunSummary> {
    run_with(cfg, &RunOptions::default())
}

pub fn run_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let params = cfg.model_params()?;
    let ctrl = cfg.step_control()?;
    let grid = cfg.grid()?;
    let initial = cfg.initial_state()?;
    if opts.stop_at.is_some() && cfg.output.checkpoint.is_none() {
        return Err(Error::Validation("stop_at needs output.checkpoint".into()));
    }

    let interval = cfg.sample_interval;
    let n_samples = (cfg.t_end / interval + 1e-9).floor() as u64;
    let sample_time = |k: u64| k as f64 * interval;

    let (mut state, mut k, mut records, mut sink) = match &opts.resume_from {
        Some(path) => {
            let (state, k) = read_snapshot(path)?;
            if state.grid() != &grid {
                return Err(Error::Validation(format!(
                    "snapshot grid {:?} does not match the config grid {:?}",
                    state.grid().dims(),
                    grid.dims()
                )));
            }
            let keep = k as usize + 1;
            let (records, sink) = match &cfg.output.csv {
                Some(csv) => {
                    let sink = CsvSink::resume(csv, keep)?;
                    (read_csv(csv)?, Some(sink))
                }
                None => (Vec::new(), None),
            };
            log::info!("resuming at t = {} (sample {k})", state.t);
            (state, k, records, sink)
        }
        None => {
            let first = record(&initial, cfg.eps_y, &cfg.weights);
            let mut sink = match &cfg.output.csv {
                Some(csv) => Some(CsvSink::create(csv)?),
                None => None,
            };
            if let Some(s) = sink.as_mut() {
                s.append(&first)?;
            }
            (initial.clone(), 0, vec![first], sink)
        }
    };

    let eq = equilibrium(&initial.rho, &initial.m);
    let regime = classify(&eq, mean(&initial.rho) + mean(&initial.m));
    let lambda1_d = grid.discrete_neumann_lambda1();
    let checkpoint = |s: &SimState, k: u64| -> Result<()> {
        match &cfg.output.checkpoint {
            Some(path) => write_snapshot(s, k, path),
            None => Ok(()),
        }
    };
    let mut snapshot_due: Vec<f64> = cfg
        .output
        .snapshot_times
        .iter()
        .copied()
        .filter(|t| *t > sample_time(k) + 1e-9 * interval)
        .collect();
    snapshot_due.sort_by(f64::total_cmp);

    let mut watch = StepWatch::default();
    let mut completed = true;
    let advance_to = |state: &mut SimState, target: f64, k: u64, watch: &mut StepWatch| -> Result<()> {
        while state.t < target {
            match step_until(state, &params, &ctrl, target) {
                Ok(next) => {
                    watch.energy(state, &next);
                    *state = next;
                }
                Err(e) => {
                    log::error!("step failed at t = {}: {e}", state.t);
                    if let Err(ce) = checkpoint(state, k) {
                        log::error!("checkpoint failed: {ce}");
                    }
                    return Err(e);
                }
            }
            let div = divergence(&state.u).values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            watch.max_divergence = watch.max_divergence.max(div);
        }
        Ok(())
    };

    while k < n_samples {
        let target = sample_time(k + 1);
        advance_to(&mut state, target, k, &mut watch)?;
        k += 1;
        let rec = record(&state, cfg.eps_y, &cfg.weights);
        if let Some(s) = sink.as_mut() {
            s.append(&rec)?;
        }
        records.push(rec);
        log::debug!("sample {k} t = {} linf_m = {:e}", state.t, rec.linf_m);
        let tol = 1e-9 * interval;
        if let Some(dir) = &cfg.output.snapshot_dir {
            if snapshot_due.first().is_some_and(|t| *t <= state.t + tol) {
                write_snapshot(&state, k, &snapshot_path(dir, k))?;
                snapshot_due.retain(|t| *t > state.t + tol);
            }
        }
        if opts.stop_at.is_some_and(|t| t <= state.t + tol) {
            checkpoint(&state, k)?;
            completed = false;
            break;
        }
    }
    if completed && state.t < cfg.t_end {
        advance_to(&mut state, cfg.t_end, k, &mut watch)?;
    }

    log::info!("energy constant K = {:e}", watch.energy_k);
    let invariants = check_invariants(&records, &InvariantBudget::default());
    let rates = rate_outcome(cfg, regime, &eq, lambda1_d, &records);
    Ok(RunSummary {
        oracle_deviation: oracle_deviation(cfg, &state),
        records,
        final_state: state,
        sample_index: k,
        completed,
        regime,
        equilibrium: eq,
        lambda1_d,
        invariants,
        max_divergence: watch.max_divergence,
        divergence_tol: params.stokes.proj_tol,
        energy_k: watch.energy_k,
        rates,
        elapsed: started.elapsed(),
    })
}
