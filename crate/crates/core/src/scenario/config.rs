//! Scenario configuration: TOML documents layered over named presets.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::diagnostics::GWeights;
use crate::domain::{Grid, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::fluid::{leray_project, StokesParams, DEFAULT_PROJ_TOL};
use crate::model::{ModelParams, SensitivityTensor, SimState};
use crate::operators::StencilSpec;
use crate::timestepper::StepControl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Preset the document was layered on, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub t_end: f64,
    pub sample_interval: f64,
    /// The `epsilon` in the `(1/epsilon) ||grad c||^2` term of `Y`.
    pub eps_y: f64,
    pub grid: GridSpec,
    pub model: ModelSpec,
    pub phi: PhiSpec,
    pub initial: InitialSpec,
    pub step: StepSpec,
    pub weights: GWeights,
    pub rates: RateSpec,
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    pub lengths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub c_s: f64,
    pub alpha: f64,
    pub rotation_angle: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_angles: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_eta: Option<f64>,
    #[serde(default)]
    pub advect_scheme: StencilSpec,
    #[serde(default = "default_proj_tol")]
    pub proj_tol: f64,
}

fn default_proj_tol() -> f64 {
    DEFAULT_PROJ_TOL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    /// `strength * x_axis`.
    Linear { strength: f64, axis: usize },
    /// `strength * |x - centre|^2 / 2`.
    QuadraticWell { strength: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarInit {
    Constant {
        value: f64,
    },
    /// `offset + amplitude * prod_a cos(k_a pi x_a / L_a)`.
    Cosine {
        offset: f64,
        amplitude: f64,
        modes: Vec<usize>,
    },
    /// `offset` plus a seeded sum of low cosine modes, scaled so the
    /// perturbation stays within `amplitude`.
    RandomModes {
        offset: f64,
        amplitude: f64,
        n_modes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityInit {
    Zero,
    /// Projected cellular flow with peak speed near `amplitude`.
    Vortex { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub rho: ScalarInit,
    pub m: ScalarInit,
    pub c: ScalarInit,
    pub u: VelocityInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub dt: f64,
    #[serde(default = "default_cfl")]
    pub cfl_target: f64,
    #[serde(default = "default_budget")]
    pub clamp_budget: f64,
}

fn default_cfl() -> f64 {
    0.4
}

fn default_budget() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    /// Fails the run when the late-time rate leaves its band.
    #[serde(default)]
    pub assert: bool,
    /// Fit window; defaults to the second half of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Written when a run stops early or aborts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_dir: Option<PathBuf>,
    /// Each entry is taken at the first sample time at or after it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    BoundedRegime,
    SmalldataRho,
    SmalldataM,
    Balanced,
    HomogeneousOracle,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::BoundedRegime,
        Preset::SmalldataRho,
        Preset::SmalldataM,
        Preset::Balanced,
        Preset::HomogeneousOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BoundedRegime => "bounded_regime",
            Preset::SmalldataRho => "smalldata_rho",
            Preset::SmalldataM => "smalldata_m",
            Preset::Balanced => "balanced",
            Preset::HomogeneousOracle => "homogeneous_oracle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Validation(format!("unknown preset {name:?}; known: {}", known.join(", ")))
            })
    }

    pub fn config(self) -> ScenarioConfig {
        let unit = |n: usize, d: usize| GridSpec {
            dims: vec![n; d],
            lengths: vec![1.0; d],
        };
        let random = |offset, amplitude| ScalarInit::RandomModes {
            offset,
            amplitude,
            n_modes: 4,
        };
        let base = ScenarioConfig {
            preset: Some(self.name().to_string()),
            seed: 1,
            t_end: 1.0,
            sample_interval: 0.1,
            eps_y: 1.0,
            grid: unit(32, 2),
            model: ModelSpec {
                c_s: 1.0,
                alpha: 0.0,
                rotation_angle: 0.5,
                pair_angles: None,
                cutoff_eta: None,
                advect_scheme: StencilSpec::Upwind1,
                proj_tol: DEFAULT_PROJ_TOL,
            },
            phi: PhiSpec::Linear {
                strength: 1.0,
                axis: 0,
            },
            initial: InitialSpec {
                rho: ScalarInit::Constant { value: 1.0 },
                m: ScalarInit::Constant { value: 1.0 },
                c: ScalarInit::Constant { value: 1.0 },
                u: VelocityInit::Zero,
            },
            step: StepSpec {
                dt: 0.01,
                cfl_target: default_cfl(),
                clamp_budget: default_budget(),
            },
            weights: GWeights::default(),
            rates: RateSpec::default(),
            output: OutputSpec::default(),
        };
        match self {
            Preset::HomogeneousOracle => ScenarioConfig {
                t_end: 1.0,
                sample_interval: 0.01,
                grid: unit(16, 3),
                model: ModelSpec {
                    c_s: 0.0,
                    rotation_angle: 0.0,
                    ..base.model.clone()
                },
                initial: InitialSpec {
                    rho: ScalarInit::Constant { value: 2.0 },
                    m: ScalarInit::Constant { value: 1.0 },
                    c: ScalarInit::Constant { value: 1.0 },
                    u: VelocityInit::Zero,
                },
                step: StepSpec {
                    dt: 1e-3,
                    ..base.step.clone()
                },
                ..base
            },
            Preset::SmalldataRho | Preset::SmalldataM => {
                let (big, small) = (random(1.05, 0.05), random(0.05, 0.02));
                let (rho, m) = if self == Preset::SmalldataRho {
                    (big, small)
                } else {
                    (small, big)
                };
                ScenarioConfig {
                    t_end: 20.0,
                    sample_interval: 0.1,
                    grid: unit(64, 2),
                    initial: InitialSpec {
                        rho,
                        m,
                        c: random(0.05, 0.02),
                        u: VelocityInit::Vortex { amplitude: 0.02 },
                    },
                    rates: RateSpec {
                        assert: true,
                        window: Some([8.0, 16.0]),
                    },
                    ..base
                }
            }
            Preset::BoundedRegime => ScenarioConfig {
                t_end: 5.0,
                sample_interval: 0.05,
                model: ModelSpec {
                    c_s: 2.0,
                    alpha: 0.5,
                    rotation_angle: 1.0,
                    cutoff_eta: Some(0.05),
                    ..base.model.clone()
                },
                phi: PhiSpec::QuadraticWell { strength: 1.0 },
                initial: InitialSpec {
                    rho: random(1.0, 0.5),
                    m: random(0.6, 0.3),
                    c: random(0.5, 0.4),
                    u: VelocityInit::Vortex { amplitude: 0.1 },
                },
                step: StepSpec {
                    dt: 0.005,
                    ..base.step.clone()
                },
                ..base
            },
            Preset::Balanced => ScenarioConfig {
                t_end: 10.0,
                sample_interval: 0.1,
                model: ModelSpec {
                    alpha: 0.5,
                    rotation_angle: 0.3,
                    ..base.model.clone()
                },
                initial: InitialSpec {
                    rho: ScalarInit::Cosine {
                        offset: 1.0,
                        amplitude: 0.3,
                        modes: vec![1, 0],
                    },
                    m: ScalarInit::Cosine {
                        offset: 1.0,
                        amplitude: 0.3,
                        modes: vec![0, 1],
                    },
                    c: ScalarInit::Cosine {
                        offset: 0.5,
                        amplitude: 0.2,
                        modes: vec![1, 1],
                    },
                    u: VelocityInit::Vortex { amplitude: 0.05 },
                },
                ..base
            },
        }
    }
}

fn to_table(cfg: &ScenarioConfig) -> Table {
    match Value::try_from(cfg).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

/// Merges `top` into `base`. A table whose `profile` differs from the base
/// replaces it wholesale, since profiles carry different keys.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => {
                let same_profile = match (b.get("profile"), t.get("profile")) {
                    (Some(x), Some(y)) => x == y,
                    _ => true,
                };
                if same_profile {
                    merge(b, t);
                } else {
                    *b = t;
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn base_for(doc: &Table) -> Result<ScenarioConfig> {
    match doc.get("preset") {
        Some(Value::String(name)) => Ok(Preset::from_name(name)?.config()),
        Some(other) => Err(Error::Validation(format!("preset must be a string, got {other}"))),
        None => Ok(Preset::Balanced.config()),
    }
}

fn finish(base: ScenarioConfig, doc: Table) -> Result<ScenarioConfig> {
    let mut table = to_table(&base);
    if !doc.contains_key("preset") {
        table.remove("preset");
    }
    merge(&mut table, doc);
    let cfg: ScenarioConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Validation(e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a TOML scenario. Keys missing from the document come from the
/// named `preset`, or from the balanced preset when none is given.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    parse_config_with(text, &[])
}

/// `parse_config` with `key.path=value` overrides applied to the document.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut doc: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let base = base_for(&doc)?;
    finish(base, doc)
}

/// Expands a preset and applies `key=value` overrides.
pub fn preset_config(name: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    Preset::from_name(name)?;
    parse_config_with(&format!("preset = {name:?}"), overrides)
}

/// Splits `key.path=value` and parses the value as TOML, falling back to a
/// bare string.
fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = doc;
    for part in parents {
        node = match node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(Error::Parse(format!("override {spec:?} descends into a value"))),
        };
    }
    // a new profile replaces the whole table, so drop keys the document set for the old one
    if *last == "profile" && node.get("profile").is_some_and(|p| *p != value) {
        node.clear();
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ScalarInit {
    fn validate(&self, name: &str, ndim: usize, must_be_nonzero: bool) -> Result<()> {
        let (low, high) = match self {
            ScalarInit::Constant { value } => (*value, *value),
            ScalarInit::Cosine {
                offset,
                amplitude,
                modes,
            } => {
                if modes.len() != ndim {
                    return Err(invalid(format!("{name}: cosine needs one mode per axis")));
                }
                if !(*amplitude >= 0.0) {
                    return Err(invalid(format!("{name}: amplitude must be ≥ 0")));
                }
                (offset - amplitude, offset + amplitude)
            }
            ScalarInit::RandomModes {
                offset,
                amplitude,
                n_modes,
            } => {
                if !(*amplitude >= 0.0) {
                    return Err(invalid(format!("{name}: amplitude must be ≥ 0")));
                }
                if *n_modes == 0 {
                    return Err(invalid(format!("{name}: n_modes must be ≥ 1")));
                }
                (offset - amplitude, offset + amplitude)
            }
        };
        if !(low.is_finite() && high.is_finite()) {
            return Err(invalid(format!("{name}: initial data must be finite")));
        }
        if low < 0.0 {
            return Err(invalid(format!("{name}: initial data must be nonnegative")));
        }
        if must_be_nonzero && high <= 0.0 {
            return Err(invalid(format!("{name}: initial data must not vanish identically")));
        }
        Ok(())
    }

    fn build(&self, grid: Grid, seed: u64) -> ScalarField {
        match self {
            ScalarInit::Constant { value } => ScalarField::constant(grid, *value),
            ScalarInit::Cosine {
                offset,
                amplitude,
                modes,
            } => {
                let l = grid.lengths().to_vec();
                let modes = modes.clone();
                ScalarField::from_fn(grid, move |x| {
                    let shape: f64 = modes
                        .iter()
                        .enumerate()
                        .map(|(a, k)| (*k as f64 * PI * x[a] / l[a]).cos())
                        .product();
                    offset + amplitude * shape
                })
            }
            ScalarInit::RandomModes {
                offset,
                amplitude,
                n_modes,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ndim = grid.ndim();
                let terms: Vec<(f64, [usize; 3])> = (0..*n_modes)
                    .map(|_| {
                        let mut k = [0usize; 3];
                        // at least one nonzero wavenumber so each term has zero mean
                        while k[..ndim].iter().all(|v| *v == 0) {
                            for kv in k.iter_mut().take(ndim) {
                                *kv = rng.random_range(0..=3);
                            }
                        }
                        (rng.random_range(-1.0..1.0), k)
                    })
                    .collect();
                let norm: f64 = terms.iter().map(|t| t.0.abs()).sum::<f64>().max(1e-300);
                let l = grid.lengths().to_vec();
                ScalarField::from_fn(grid, move |x| {
                    let s: f64 = terms
                        .iter()
                        .map(|(a, k)| {
                            a * (0..ndim)
                                .map(|ax| (k[ax] as f64 * PI * x[ax] / l[ax]).cos())
                                .product::<f64>()
                        })
                        .sum();
                    offset + amplitude * s / norm
                })
            }
        }
    }
}

impl VelocityInit {
    fn build(&self, grid: Grid) -> Result<VectorField> {
        let VelocityInit::Vortex { amplitude } = self else {
            return Ok(VectorField::zeros(grid));
        };
        if *amplitude == 0.0 {
            return Ok(VectorField::zeros(grid));
        }
        let l = grid.lengths().to_vec();
        let lz = if grid.ndim() == 3 { l[2] } else { 1.0 };
        let three = grid.ndim() == 3;
        // stream function sin^2(pi x) sin^2(pi y) (times sin^2(pi z) in 3D)
        let raw = VectorField::from_fn(grid, move |x| {
            let (sx, cx) = (PI * x[0] / l[0]).sin_cos();
            let (sy, cy) = (PI * x[1] / l[1]).sin_cos();
            let z = if three { (PI * x[2] / lz).sin().powi(2) } else { 1.0 };
            let dpsi_dx = 2.0 * PI / l[0] * sx * cx * sy * sy * z;
            let dpsi_dy = 2.0 * PI / l[1] * sy * cy * sx * sx * z;
            [dpsi_dy, -dpsi_dx, 0.0]
        });
        let (u, _) = leray_project(&raw)?;
        let peak = u.max_magnitude();
        if peak == 0.0 {
            return Ok(u);
        }
        let scale = amplitude / peak;
        let comps: Vec<Vec<f64>> = u
            .components()
            .iter()
            .map(|c| c.iter().map(|v| v * scale).collect())
            .collect();
        Ok(VectorField::from_raw(grid, comps, u.bc(), true))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let grid = self.build_grid()?;
        let ndim = grid.ndim();
        self.sensitivity()?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(invalid("t_end must be > 0"));
        }
        if !(self.sample_interval > 0.0 && self.sample_interval.is_finite()) {
            return Err(invalid("sample_interval must be > 0"));
        }
        if self.sample_interval > self.t_end {
            return Err(invalid("sample_interval must not exceed t_end"));
        }
        if !(self.eps_y > 0.0) {
            return Err(invalid("eps_y must be > 0"));
        }
        if !(self.model.proj_tol > 0.0) {
            return Err(invalid("proj_tol must be > 0"));
        }
        self.step_control()?;
        match &self.phi {
            PhiSpec::Linear { strength, axis } => {
                if *axis >= ndim {
                    return Err(invalid(format!("phi axis {axis} outside a {ndim}-axis grid")));
                }
                if !strength.is_finite() {
                    return Err(invalid("phi strength must be finite"));
                }
            }
            PhiSpec::QuadraticWell { strength } => {
                if !strength.is_finite() {
                    return Err(invalid("phi strength must be finite"));
                }
            }
        }
        self.initial.rho.validate("rho", ndim, true)?;
        self.initial.m.validate("m", ndim, true)?;
        self.initial.c.validate("c", ndim, false)?;
        if let VelocityInit::Vortex { amplitude } = self.initial.u {
            if !(amplitude >= 0.0 && amplitude.is_finite()) {
                return Err(invalid("u: amplitude must be ≥ 0"));
            }
        }
        for w in [self.weights.a, self.weights.b, self.weights.c] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid("G weights must be ≥ 0"));
            }
        }
        if let Some([t0, t1]) = self.rates.window {
            if !(t0 >= 0.0 && t0 < t1) {
                return Err(invalid("rate window must satisfy 0 <= t0 < t1"));
            }
        }
        if self.output.snapshot_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(invalid("snapshot times must be ≥ 0"));
        }
        Ok(())
    }

    fn build_grid(&self) -> Result<Grid> {
        Grid::new(&self.grid.dims, &self.grid.lengths).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::Validation(m),
            other => other,
        })
    }

    pub fn grid(&self) -> Result<Grid> {
        self.build_grid()
    }

    pub fn sensitivity(&self) -> Result<SensitivityTensor> {
        let s = SensitivityTensor {
            c_s: self.model.c_s,
            alpha: self.model.alpha,
            rotation_angle: self.model.rotation_angle,
            pair_angles: self.model.pair_angles,
            cutoff_eta: self.model.cutoff_eta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn step_control(&self) -> Result<StepControl> {
        let c = StepControl {
            dt: self.step.dt,
            cfl_target: self.step.cfl_target,
            clamp_budget: self.step.clamp_budget,
            ..Default::default()
        };
        c.validate().map_err(|e| match e {
            Error::InvalidParameter(m) => Error::Validation(m),
            other => other,
        })?;
        Ok(c)
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let grid = self.grid()?;
        let phi = match self.phi {
            PhiSpec::Linear { strength, axis } => ScalarField::from_fn(grid, |x| strength * x[axis]),
            PhiSpec::QuadraticWell { strength } => {
                let l = grid.lengths().to_vec();
                ScalarField::from_fn(grid, |x| {
                    let r2: f64 = (0..l.len()).map(|a| (x[a] - 0.5 * l[a]).powi(2)).sum();
                    0.5 * strength * r2
                })
            }
        };
        let params = ModelParams {
            sensitivity: self.sensitivity()?,
            stokes: StokesParams {
                phi,
                proj_tol: self.model.proj_tol,
            },
            advect_scheme: self.model.advect_scheme,
        };
        params.validate()?;
        Ok(params)
    }

    /// Initial state. Every random perturbation derives from `seed`.
    pub fn initial_state(&self) -> Result<SimState> {
        let grid = self.grid()?;
        let sub = |k: u64| self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let rho = self.initial.rho.build(grid, sub(1));
        let m = self.initial.m.build(grid, sub(2));
        let c = self.initial.c.build(grid, sub(3)).map(|v| v.max(0.0));
        let rho = rho.map(|v| v.max(0.0));
        let m = m.map(|v| v.max(0.0));
        let u = self.initial.u.build(grid)?;
        SimState::new(rho, m, c, u)
    }

    /// `(rho0, m0, c0)` when the initial data are spatially constant and at rest.
    pub fn homogeneous_data(&self) -> Option<(f64, f64, f64)> {
        match (&self.initial.rho, &self.initial.m, &self.initial.c, &self.initial.u) {
            (
                ScalarInit::Constant { value: r },
                ScalarInit::Constant { value: m },
                ScalarInit::Constant { value: c },
                VelocityInit::Zero,
            ) => Some((*r, *m, *c)),
            _ => None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
