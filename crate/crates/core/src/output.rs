//! CSV and JSON writers for traces and reports. Floats are written with 17
//! significant digits so the files round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::analysis::{CrackDescriptor, CrackGeometry, StressStrainCurve, VerificationReport};
use crate::damage::{eval_bond, EnergyModel};
use crate::error::Result;
use crate::evolution::{EvolutionTrace, TauStudyReport};
use crate::lattice::LatticeSystem;

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `step,time,atom_id,x[,y]`, one row per atom and step.
pub fn trajectory_csv(trace: &EvolutionTrace, sys: &LatticeSystem) -> String {
    let n = sys.ambient_dim();
    let mut out = String::from(if n == 1 { "step,time,atom_id,x\n" } else { "step,time,atom_id,x,y\n" });
    for s in &trace.snapshots {
        for a in 0..sys.num_atoms() {
            let _ = write!(out, "{},{},{}", s.step, num(s.time), a);
            for k in 0..n {
                let _ = write!(out, ",{}", num(s.y[a * n + k]));
            }
            out.push('\n');
        }
    }
    out
}

/// `step,bond_id,atom_a,atom_b,kind,separation,memory,phi,active_branch`.
///
/// The branch is the one of the energy minimized in that step, i.e. with the
/// memory before the step's update (step 0 uses its own memory).
pub fn bonds_csv(trace: &EvolutionTrace, sys: &LatticeSystem, model: &EnergyModel, tie_tol: f64) -> Result<String> {
    let mut out = String::from("step,bond_id,atom_a,atom_b,kind,separation,memory,phi,active_branch\n");
    for (k, s) in trace.snapshots.iter().enumerate() {
        let before = if k == 0 { &s.memory } else { &trace.snapshots[k - 1].memory };
        for (i, bond) in sys.bonds().iter().enumerate() {
            let e = eval_bond(model, bond.kind, before[i], &s.y, sys.ambient_dim(), bond.a, bond.b)?;
            let phi = model.transition_for(bond.kind).evaluate(s.memory[i]);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.step,
                i,
                bond.a,
                bond.b,
                bond.kind.as_str(),
                num(e.r),
                num(s.memory[i]),
                num(phi),
                e.branch(tie_tol).as_str()
            );
        }
    }
    Ok(out)
}

/// `step,strain,stress,damaged_bonds`.
pub fn stress_strain_csv(curve: &StressStrainCurve) -> String {
    let mut out = String::from("step,strain,stress,damaged_bonds\n");
    for s in &curve.samples {
        let _ = writeln!(out, "{},{},{},{}", s.step, num(s.strain), num(s.stress), s.damaged);
    }
    out
}

/// `tau,steps,sup_distance,dissipation_sum,lipschitz_estimate`; the distance
/// of the coarsest run is empty.
pub fn tau_study_csv(report: &TauStudyReport) -> String {
    let mut out = String::from("tau,steps,sup_distance,dissipation_sum,lipschitz_estimate\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            num(r.tau),
            r.steps,
            r.sup_distance.map(num).unwrap_or_default(),
            num(r.dissipation_sum),
            num(r.lipschitz_estimate)
        );
    }
    out
}

/// Contents of `verify.json`.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyFile {
    pub scenario: String,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub grad_tol: f64,
    pub all_green: bool,
    /// Atom ids held by the boundary condition; every other atom is free.
    pub dirichlet_atoms: Vec<usize>,
    /// The loaded subset of the Dirichlet atoms.
    pub driven_atoms: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<VerificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crack: Option<CrackSummary>,
    /// How the stress column is defined, when one is written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stress_definition: Option<&'static str>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrackSummary {
    pub geometry: &'static str,
    pub broken_nearest: usize,
    pub best_line_fraction: f64,
    pub directions_deg: Vec<f64>,
}

impl From<&CrackDescriptor> for CrackSummary {
    fn from(d: &CrackDescriptor) -> Self {
        let directions_deg = match &d.geometry {
            CrackGeometry::SingleLine(l) => vec![l.direction_deg],
            CrackGeometry::Kinked(a, b) => vec![a.direction_deg, b.direction_deg],
            _ => Vec::new(),
        };
        CrackSummary {
            geometry: d.label(),
            broken_nearest: d.broken,
            best_line_fraction: d.best_line_fraction,
            directions_deg,
        }
    }
}

pub const STRESS_DEFINITION: &str = "norm of the summed minimal-norm energy gradient over the driven atoms, \
divided by the number of bonds with an endpoint among them; strain is the driven displacement over the \
reference distance between clamped and driven sides";

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

pub fn verify_json(v: &VerifyFile) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}
