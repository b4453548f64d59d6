//! Scenario files (TOML) and the shipped presets.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::damage::{EnergyModel, TransitionFunction};
use crate::error::{Error, Result};
use crate::evolution::{run_evolution, BoundarySchedule, EvolutionFailure, EvolutionTrace, ScheduleKind};
use crate::lattice::{build_chain, build_triangular, DirichletSpec, LatticeSystem};
use crate::potentials::{RestAngle, TriplePotential};
use crate::solver::{Dissipation, DissipationKind, OrientationGuard, SolverSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seed for the initial perturbation; required when `perturbation > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Amplitude of a uniform random displacement of the free atoms at t = 0.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub perturbation: f64,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    pub damage: DamageConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub three_body: Option<ThreeBodyConfig>,
    pub loading: LoadingConfig,
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    Chain,
    Triangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    BothEnds,
    LeftEnd,
    LeftRightColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub kind: LatticeKind,
    /// Chain length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default = "one")]
    pub spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryKind>,
    #[serde(default)]
    pub next_nearest: bool,
    /// Strength of the next-nearest interaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    #[default]
    LennardJones,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    #[serde(default)]
    pub kind: PotentialKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionShape {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageConfig {
    /// Thresholds for nearest pairs, in units of length.
    pub r1: f64,
    pub r2: f64,
    /// Width used when `r2 == r1`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub shape: TransitionShape,
}

fn default_delta() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RestAngleConfig {
    Named(String),
    Radians(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeBodyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub stiffness: f64,
    /// `"reference"` or an angle in radians.
    pub rest_angle: RestAngleConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingKind {
    SinusoidalStretch,
    LinearRamp,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingConfig {
    pub kind: LoadingKind,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub angular_frequency: f64,
    /// Direction of the driven displacement in radians (two-dimensional only).
    #[serde(default)]
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipationChoice {
    L2,
    KelvinVoigt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub tau: f64,
    pub final_time: f64,
    pub nu: f64,
    pub dissipation: DissipationChoice,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Defaults to `1e-8 * sqrt(free slots)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_tol: Option<f64>,
    /// Weight of the log-barrier against inverted cells; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_barrier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_saddles: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Write `stress_strain.csv`; defaults to on for stretching loads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress_strain: Option<bool>,
}

/// Everything needed to run a scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub sys: LatticeSystem,
    pub model: EnergyModel,
    pub schedule: BoundarySchedule,
    pub dissipation: Dissipation,
    pub settings: SolverSettings,
    pub y0: Vec<f64>,
    pub tau: f64,
    pub final_time: f64,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::scenario(key, format!("must be positive and finite, got {v}")))
    }
}

fn finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::scenario(key, format!("must be finite, got {v}")))
    }
}

impl Scenario {
    /// Checks every constraint and rounds `final_time` to a whole number of
    /// steps (with a warning).
    pub fn validate(&mut self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::scenario("name", "must not be empty"));
        }
        let l = &self.lattice;
        positive("lattice.spacing", l.spacing)?;
        match l.kind {
            LatticeKind::Chain => {
                match l.atoms {
                    None => return Err(Error::scenario("lattice.atoms", "required for a chain")),
                    Some(n) if n < 2 => return Err(Error::scenario("lattice.atoms", "need at least 2 atoms")),
                    _ => {}
                }
                if l.rows.is_some() || l.cols.is_some() {
                    return Err(Error::scenario("lattice.rows", "not used by a chain"));
                }
                if l.next_nearest {
                    return Err(Error::scenario("lattice.next_nearest", "chains have nearest neighbours only"));
                }
                if l.boundary == Some(BoundaryKind::LeftRightColumns) {
                    return Err(Error::scenario("lattice.boundary", "left_right_columns needs a triangular lattice"));
                }
            }
            LatticeKind::Triangular => {
                for (key, v) in [("lattice.rows", l.rows), ("lattice.cols", l.cols)] {
                    match v {
                        None => return Err(Error::scenario(key, "required for a triangular lattice")),
                        Some(n) if n < 2 => return Err(Error::scenario(key, "must be at least 2")),
                        _ => {}
                    }
                }
                if l.atoms.is_some() {
                    return Err(Error::scenario("lattice.atoms", "not used by a triangular lattice"));
                }
                if matches!(l.boundary, Some(BoundaryKind::BothEnds | BoundaryKind::LeftEnd)) {
                    return Err(Error::scenario("lattice.boundary", "triangular lattices use left_right_columns"));
                }
            }
        }
        match (l.next_nearest, l.eta) {
            (true, None) => return Err(Error::scenario("lattice.eta", "required when next_nearest = true")),
            (true, Some(eta)) => positive("lattice.eta", eta)?,
            (false, Some(_)) => return Err(Error::scenario("lattice.eta", "only used with next_nearest = true")),
            (false, None) => {}
        }

        let d = &self.damage;
        positive("damage.r1", d.r1)?;
        positive("damage.r2", d.r2)?;
        positive("damage.delta", d.delta)?;
        if d.r2 < d.r1 {
            return Err(Error::scenario("damage.r2", format!("must be >= r1 = {}, got {}", d.r1, d.r2)));
        }
        if d.r1 <= l.spacing {
            return Err(Error::scenario("damage.r1", "must exceed the lattice spacing"));
        }

        if let Some(tb) = &self.three_body {
            if !(tb.stiffness >= 0.0 && tb.stiffness.is_finite()) {
                return Err(Error::scenario("three_body.stiffness", "must be >= 0 and finite"));
            }
            match &tb.rest_angle {
                RestAngleConfig::Named(s) if s == "reference" => {}
                RestAngleConfig::Named(s) => {
                    return Err(Error::scenario("three_body.rest_angle", format!("expected \"reference\" or radians, got {s:?}")))
                }
                RestAngleConfig::Radians(a) if !(0.0..=PI).contains(a) => {
                    return Err(Error::scenario("three_body.rest_angle", format!("{a} outside [0, pi]")))
                }
                _ => {}
            }
        }

        let ld = &self.loading;
        finite("loading.amplitude", ld.amplitude)?;
        finite("loading.angular_frequency", ld.angular_frequency)?;
        finite("loading.angle", ld.angle)?;

        let dy = &mut self.dynamics;
        positive("dynamics.tau", dy.tau)?;
        positive("dynamics.final_time", dy.final_time)?;
        positive("dynamics.nu", dy.nu)?;
        let ratio = dy.final_time / dy.tau;
        let steps = ratio.round().max(1.0);
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            let t = steps * dy.tau;
            log::warn!(
                "dynamics.final_time = {} is not a multiple of tau = {}; using {} steps, final_time = {}",
                dy.final_time,
                dy.tau,
                steps,
                t
            );
            dy.final_time = t;
        }

        let s = &self.solver;
        if let Some(v) = s.grad_tol {
            positive("solver.grad_tol", v)?;
        }
        if let Some(v) = s.tie_tol {
            positive("solver.tie_tol", v)?;
        }
        if s.max_iters == Some(0) {
            return Err(Error::scenario("solver.max_iters", "must be at least 1"));
        }
        if let Some(v) = s.orientation_barrier {
            positive("solver.orientation_barrier", v)?;
        }
        if self.perturbation != 0.0 {
            if !(self.perturbation > 0.0 && self.perturbation.is_finite()) {
                return Err(Error::scenario("perturbation", "must be >= 0 and finite"));
            }
            if self.seed.is_none() {
                return Err(Error::scenario("seed", "required when perturbation > 0"));
            }
        }
        Ok(())
    }

    pub fn stress_strain_enabled(&self) -> bool {
        self.output
            .stress_strain
            .unwrap_or(self.loading.kind != LoadingKind::Hold && self.lattice.kind == LatticeKind::Triangular)
    }

    pub fn tie_tol(&self) -> f64 {
        self.solver.tie_tol.unwrap_or(SolverSettings::default().tie_tol)
    }

    /// Builds lattice, model, schedule and solver settings.
    pub fn build(&self) -> Result<Setup> {
        let mut s = self.clone();
        s.validate()?;
        let l = &s.lattice;
        let sys = match l.kind {
            LatticeKind::Chain => {
                let spec = match l.boundary.unwrap_or(BoundaryKind::BothEnds) {
                    BoundaryKind::BothEnds => DirichletSpec::BothEnds,
                    BoundaryKind::LeftEnd => DirichletSpec::LeftEnd,
                    BoundaryKind::LeftRightColumns => unreachable!("rejected by validate"),
                };
                build_chain(l.atoms.unwrap_or_default(), l.spacing, spec)?
            }
            LatticeKind::Triangular => build_triangular(
                l.rows.unwrap_or_default(),
                l.cols.unwrap_or_default(),
                l.spacing,
                l.next_nearest,
                DirichletSpec::LeftRightColumns,
            )?,
        };
        let mut sys = sys;
        let triple = match &s.three_body {
            Some(tb) if tb.enabled => {
                let rest = match tb.rest_angle {
                    RestAngleConfig::Radians(a) => RestAngle::Fixed(a),
                    RestAngleConfig::Named(_) => RestAngle::Reference,
                };
                sys.enumerate_triples();
                Some(TriplePotential::new(tb.stiffness, rest)?)
            }
            _ => None,
        };
        let transition = TransitionFunction::with_min_width(s.damage.r1, s.damage.r2, s.damage.delta)?;
        let eta = if l.next_nearest { l.eta } else { None };
        let model = EnergyModel::lennard_jones(l.spacing, eta, transition, triple)?;
        model.check(&sys)?;

        let kind = match s.loading.kind {
            LoadingKind::SinusoidalStretch => ScheduleKind::SinusoidalStretch,
            LoadingKind::LinearRamp => ScheduleKind::LinearRamp,
            LoadingKind::Hold => ScheduleKind::Hold,
        };
        let dy = &s.dynamics;
        let schedule = BoundarySchedule::for_system(
            &sys,
            kind,
            s.loading.amplitude,
            s.loading.angular_frequency,
            s.loading.angle,
            dy.final_time,
        )?;
        let dissipation = Dissipation::new(
            match dy.dissipation {
                DissipationChoice::L2 => DissipationKind::L2,
                DissipationChoice::KelvinVoigt => DissipationKind::KelvinVoigt,
            },
            dy.nu,
        )?;

        let mut settings = SolverSettings::for_system(&sys);
        if let Some(v) = s.solver.grad_tol {
            settings.grad_tol = v;
        }
        if let Some(v) = s.solver.max_iters {
            settings.max_iters = v;
        }
        if let Some(v) = s.solver.tie_tol {
            settings.tie_tol = v;
        }
        if let Some(w) = s.solver.orientation_barrier {
            settings.orientation_guard = OrientationGuard::Barrier(w);
        }
        if let Some(v) = s.solver.escape_saddles {
            settings.escape_saddles = v;
        }
        settings.validate()?;

        let mut y0 = sys.positions().to_vec();
        if s.perturbation > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed.unwrap_or_default());
            let n = sys.ambient_dim();
            for &a in sys.free_atoms() {
                for k in 0..n {
                    y0[a * n + k] += rng.gen_range(-s.perturbation..=s.perturbation);
                }
            }
        }
        let g0 = crate::evolution::sample_boundary(&schedule, &sys, 0.0)?;
        let n = sys.ambient_dim();
        for &a in sys.dirichlet() {
            for k in 0..n {
                y0[a * n + k] = g0[a * n + k];
            }
        }
        Ok(Setup {
            sys,
            model,
            schedule,
            dissipation,
            settings,
            y0,
            tau: dy.tau,
            final_time: dy.final_time,
        })
    }

    /// Same scenario with another time step and the final time kept.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.dynamics.tau = tau;
        s
    }
}

impl Setup {
    pub fn run(&self) -> std::result::Result<EvolutionTrace, Box<EvolutionFailure>> {
        run_evolution(
            &self.sys,
            &self.model,
            &self.y0,
            &self.schedule,
            self.tau,
            self.final_time,
            &self.dissipation,
            &self.settings,
        )
    }
}

/// Parses and validates a scenario from TOML text. Errors name the key.
pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let de = toml::Deserializer::new(text);
    let mut s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut key = e.path().to_string();
        let message = e.inner().message().to_string();
        if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            key = if key == "." { field.to_string() } else { format!("{key}.{field}") };
        }
        Error::scenario(key, message)
    })?;
    s.validate()?;
    Ok(s)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn write_scenario(s: &Scenario) -> Result<String> {
    toml::to_string(s).map_err(|e| Error::scenario("<root>", e.to_string()))
}

pub const PRESET_NAMES: [&str; 7] = [
    "paper-1d-l2",
    "paper-1d-kv",
    "paper-2d-horizontal-nu1",
    "paper-2d-diag-nu0.01",
    "paper-2d-horizontal-nu0.01",
    "paper-stress-strain-R1.2",
    "paper-stress-strain-R1.07",
];

fn chain_preset(name: &str, dissipation: DissipationChoice) -> Scenario {
    Scenario {
        name: name.into(),
        seed: None,
        perturbation: 0.0,
        lattice: LatticeConfig {
            kind: LatticeKind::Chain,
            atoms: Some(13),
            rows: None,
            cols: None,
            spacing: 1.0,
            boundary: Some(BoundaryKind::BothEnds),
            next_nearest: false,
            eta: None,
        },
        potential: PotentialConfig::default(),
        damage: DamageConfig {
            r1: 1.2,
            r2: 1.2,
            delta: 1e-6,
            shape: TransitionShape::Linear,
        },
        three_body: None,
        loading: LoadingConfig {
            kind: LoadingKind::SinusoidalStretch,
            amplitude: 2.0,
            angular_frequency: 2.0 * PI,
            angle: 0.0,
        },
        dynamics: DynamicsConfig {
            tau: 1.0 / 60.0,
            final_time: 1.0,
            nu: 0.1,
            dissipation,
        },
        solver: SolverConfig::default(),
        output: OutputConfig::default(),
    }
}

/// Triangular patch, 10 rows by 15 columns with next-nearest pairs, loaded by
/// a quarter period of a sinusoid (monotone stretching to `3 eps`).
fn patch_preset(name: &str, r1: f64, angle: f64, nu: f64, dissipation: DissipationChoice) -> Scenario {
    Scenario {
        name: name.into(),
        seed: None,
        perturbation: 0.0,
        lattice: LatticeConfig {
            kind: LatticeKind::Triangular,
            atoms: None,
            rows: Some(10),
            cols: Some(15),
            spacing: 1.0,
            boundary: Some(BoundaryKind::LeftRightColumns),
            next_nearest: true,
            eta: Some(0.25),
        },
        potential: PotentialConfig::default(),
        damage: DamageConfig {
            r1,
            r2: r1,
            delta: 1e-6,
            shape: TransitionShape::Linear,
        },
        three_body: None,
        loading: LoadingConfig {
            kind: LoadingKind::SinusoidalStretch,
            amplitude: 3.0,
            angular_frequency: 0.5 * PI,
            angle,
        },
        dynamics: DynamicsConfig {
            tau: 1.0 / 60.0,
            final_time: 1.0,
            nu,
            dissipation,
        },
        solver: SolverConfig::default(),
        output: OutputConfig::default(),
    }
}

pub fn preset(name: &str) -> Option<Scenario> {
    use DissipationChoice::{KelvinVoigt, L2};
    let diag = PI / 8.0;
    let s = match name {
        "paper-1d-l2" => chain_preset(name, L2),
        "paper-1d-kv" => chain_preset(name, KelvinVoigt),
        "paper-2d-horizontal-nu1" => patch_preset(name, 1.2, 0.0, 1.0, KelvinVoigt),
        "paper-2d-diag-nu0.01" => patch_preset(name, 1.2, diag, 0.01, L2),
        "paper-2d-horizontal-nu0.01" => patch_preset(name, 1.2, 0.0, 0.01, L2),
        "paper-stress-strain-R1.2" => patch_preset(name, 1.2, diag, 0.01, L2),
        "paper-stress-strain-R1.07" => patch_preset(name, 1.07, diag, 0.01, L2),
        _ => return None,
    };
    Some(s)
}
