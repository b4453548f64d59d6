//! Post-hoc checks and diagnostics computed from stored traces only.

use crate::damage::{min_norm_gradient_full, pair_energy, pair_energy_scale, DamageState, EnergyModel};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionTrace, LIFT_TOL, SLACK_TOL};
use crate::lattice::{BondKind, LatticeSystem};
use crate::solver::{guarded_objective, guarded_residual, warm_start};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VerificationReport {
    pub lift_identity_max_error: f64,
    pub per_step_inequality_min_slack: f64,
    pub inclusion_residual_max: f64,
    pub irreversibility_ok: bool,
    pub dissipation_sum: f64,
    pub steps: usize,
}

impl VerificationReport {
    pub fn all_green(&self, grad_tol: f64) -> bool {
        self.lift_identity_max_error <= LIFT_TOL
            && self.per_step_inequality_min_slack >= SLACK_TOL
            && self.inclusion_residual_max <= grad_tol
            && self.irreversibility_ok
    }
}

/// Recomputes every per-step check of a trace from its stored deformations
/// and memories.
pub fn verify_trace(
    trace: &EvolutionTrace,
    sys: &LatticeSystem,
    model: &EnergyModel,
    tie_tol: f64,
) -> Result<VerificationReport> {
    let snaps = &trace.snapshots;
    if snaps.is_empty() {
        return Err(Error::config("empty trace"));
    }
    for s in snaps {
        if s.y.len() != sys.full_len() || s.memory.len() != sys.bonds().len() {
            return Err(Error::config(format!("snapshot {} does not match the lattice", s.step)));
        }
    }
    let d = &trace.dissipation;
    let guard = trace.orientation_guard;
    let tau = trace.tau;
    let mut report = VerificationReport {
        lift_identity_max_error: 0.0,
        per_step_inequality_min_slack: if snaps.len() > 1 { f64::INFINITY } else { 0.0 },
        inclusion_residual_max: 0.0,
        irreversibility_ok: true,
        dissipation_sum: 0.0,
        steps: snaps.len() - 1,
    };

    let initial = DamageState::from_deformation(sys, &snaps[0].y)?;
    if initial.memory() != &snaps[0].memory[..] {
        report.irreversibility_ok = false;
    }
    for (m, b) in snaps[0].memory.iter().zip(sys.bonds()) {
        if *m < b.rest_length {
            report.irreversibility_ok = false;
        }
    }

    for w in snaps.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        let before = DamageState::from_memory(sys, prev.memory.clone())?;
        let after = match DamageState::from_memory(sys, cur.memory.clone()) {
            Ok(s) => s,
            Err(_) => {
                report.irreversibility_ok = false;
                continue;
            }
        };
        if cur.memory.iter().zip(&prev.memory).any(|(a, b)| a < b) {
            report.irreversibility_ok = false;
        }
        if before.update_memory(sys, &cur.y)?.memory() != after.memory() {
            report.irreversibility_ok = false;
        }
        if !prev.broken.iter().all(|b| cur.broken.contains(b)) {
            report.irreversibility_ok = false;
        }

        let scale = pair_energy_scale(sys, model, &after, &cur.y)?.max(f64::MIN_POSITIVE);
        let lift = (pair_energy(sys, model, &before, &cur.y)? - pair_energy(sys, model, &after, &cur.y)?).abs() / scale;
        report.lift_identity_max_error = report.lift_identity_max_error.max(lift);

        let start = warm_start(sys, &prev.y, &cur.y);
        let slack = guarded_objective(sys, model, &before, &start, &prev.y, tau, d, guard)?
            - guarded_objective(sys, model, &before, &cur.y, &prev.y, tau, d, guard)?;
        report.per_step_inequality_min_slack = report.per_step_inequality_min_slack.min(slack);

        let fit = guarded_residual(sys, model, &before, &cur.y, &prev.y, tau, d, guard, tie_tol)?;
        report.inclusion_residual_max = report.inclusion_residual_max.max(fit.norm);

        report.dissipation_sum += crate::solver::dissipation_value(d, sys, &cur.y, &prev.y, tau)?;
    }
    if [report.lift_identity_max_error, report.per_step_inequality_min_slack, report.inclusion_residual_max, report.dissipation_sum]
        .iter()
        .any(|v| v.is_nan())
    {
        return Err(Error::numerical("verification produced NaN"));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressStrainSample {
    pub step: usize,
    pub strain: f64,
    pub stress: f64,
    /// Bonds with nonzero damage at this sample.
    pub damaged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressStrainCurve {
    pub samples: Vec<StressStrainSample>,
}

impl StressStrainCurve {
    pub fn peak(&self) -> Option<StressStrainSample> {
        self.samples.iter().copied().max_by(|a, b| a.stress.total_cmp(&b.stress))
    }

    /// Samples before the first damaged bond.
    pub fn elastic_range(&self) -> &[StressStrainSample] {
        let end = self.samples.iter().position(|s| s.damaged > 0).unwrap_or(self.samples.len());
        &self.samples[..end]
    }

    /// Pearson correlation of stress with strain over the first half (by
    /// strain) of the elastic range; `None` with fewer than three samples.
    pub fn early_linearity(&self) -> Option<f64> {
        let elastic = self.elastic_range();
        let half = 0.5 * elastic.last()?.strain;
        let pts: Vec<_> = elastic.iter().filter(|s| s.strain <= half).collect();
        if pts.len() < 3 {
            return None;
        }
        let x: Vec<f64> = pts.iter().map(|s| s.strain).collect();
        let y: Vec<f64> = pts.iter().map(|s| s.stress).collect();
        Some(pearson(&x, &y))
    }

    /// Stress at the end of the stretching phase.
    pub fn final_stress(&self) -> Option<f64> {
        self.samples.last().map(|s| s.stress)
    }
}

fn reference_span(sys: &LatticeSystem) -> Result<f64> {
    let driven = sys.driven();
    let fixed: Vec<usize> = sys.dirichlet().iter().copied().filter(|a| !driven.contains(a)).collect();
    if fixed.is_empty() {
        return Err(Error::config("stress-strain needs a clamped side"));
    }
    let mean_x = |set: &[usize]| set.iter().map(|&a| sys.position(a)[0]).sum::<f64>() / set.len() as f64;
    Ok(mean_x(driven) - mean_x(&fixed))
}

/// Reaction stress at the driven atoms over the first monotone stretching
/// phase: the norm of the summed minimal-norm energy gradient at the driven
/// atoms, divided by the number of bonds touching them. Strain is the driven
/// displacement over the reference distance between clamped and driven sides.
///
/// Along a continuous loading path the memory over all earlier times equals the
/// memory including the current time, so each sample uses the memory stored
/// with its own snapshot; bonds being opened further sit on their kink and
/// contribute their minimal-norm share `(1 - phi) W'`.
pub fn stress_strain(trace: &EvolutionTrace, sys: &LatticeSystem, model: &EnergyModel, tie_tol: f64) -> Result<StressStrainCurve> {
    let driven = sys.driven();
    if driven.is_empty() {
        return Err(Error::config("stress-strain needs a driven atom set"));
    }
    let n = sys.ambient_dim();
    let span = reference_span(sys)?;
    let interactions = sys
        .bonds()
        .iter()
        .filter(|b| driven.contains(&b.a) || driven.contains(&b.b))
        .count();
    if interactions == 0 {
        return Err(Error::config("driven atoms have no bonds"));
    }
    let probe = driven[0];
    let mut samples: Vec<StressStrainSample> = Vec::new();
    for snap in &trace.snapshots {
        let disp: f64 = (0..n)
            .map(|i| (snap.y[probe * n + i] - sys.position(probe)[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let strain = disp / span;
        if let Some(last) = samples.last() {
            if strain <= last.strain {
                break;
            }
        }
        let state = DamageState::from_memory(sys, snap.memory.clone())?;
        let (grad, _) = min_norm_gradient_full(sys, model, &state, &snap.y, tie_tol)?;
        let mut total = [0.0; 2];
        for &a in driven {
            for i in 0..n {
                total[i] += grad[a * n + i];
            }
        }
        let stress = total.iter().map(|v| v * v).sum::<f64>().sqrt() / interactions as f64;
        let damaged = state.phi_values(sys, model).iter().filter(|&&p| p > 0.0).count();
        samples.push(StressStrainSample {
            step: snap.step,
            strain,
            stress,
            damaged,
        });
    }
    Ok(StressStrainCurve { samples })
}

/// Pearson correlation of two equally long samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Perpendicular distance within which a midpoint counts as on a line.
pub const LINE_TOL: f64 = 0.3;
/// Fraction of midpoints a line (or pair of lines) has to explain.
pub const LINE_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeLine {
    /// 0, 60 or 120 degrees.
    pub direction_deg: f64,
    /// Signed distance of the line from the origin along its normal.
    pub offset: f64,
    pub covered: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CrackGeometry {
    Empty,
    SingleLine(LatticeLine),
    Kinked(LatticeLine, LatticeLine),
    Diffuse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrackDescriptor {
    pub geometry: CrackGeometry,
    /// Broken nearest-neighbour bonds the fit was based on.
    pub broken: usize,
    /// Largest fraction explained by a single lattice line.
    pub best_line_fraction: f64,
}

impl CrackDescriptor {
    pub fn label(&self) -> &'static str {
        match self.geometry {
            CrackGeometry::Empty => "empty",
            CrackGeometry::SingleLine(_) => "single_line",
            CrackGeometry::Kinked(..) => "kinked",
            CrackGeometry::Diffuse => "diffuse",
        }
    }
}

/// Best placement of a band of half-width `tol` for projections `s`
/// (restricted to `mask`).
fn best_band(s: &[f64], mask: &[bool], tol: f64) -> (f64, usize) {
    let mut vals: Vec<f64> = s.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    vals.sort_by(f64::total_cmp);
    let mut best = (0.0, 0);
    let mut hi = 0;
    for lo in 0..vals.len() {
        if hi < lo {
            hi = lo;
        }
        while hi < vals.len() && vals[hi] - vals[lo] <= 2.0 * tol + 1e-12 {
            hi += 1;
        }
        if hi - lo > best.1 {
            best = (0.5 * (vals[lo] + vals[hi - 1]), hi - lo);
        }
    }
    best
}

fn best_line(points: &[[f64; 2]], mask: &[bool], dirs: &[f64], tol: f64) -> Option<LatticeLine> {
    let mut best: Option<LatticeLine> = None;
    for &deg in dirs {
        let th = deg.to_radians();
        let normal = [-th.sin(), th.cos()];
        let s: Vec<f64> = points.iter().map(|p| p[0] * normal[0] + p[1] * normal[1]).collect();
        let (offset, covered) = best_band(&s, mask, tol);
        if best.map_or(true, |b| covered > b.covered) {
            best = Some(LatticeLine {
                direction_deg: deg,
                offset,
                covered,
            });
        }
    }
    best
}

fn on_line(p: &[f64; 2], line: &LatticeLine, tol: f64) -> bool {
    let th = line.direction_deg.to_radians();
    let s = -th.sin() * p[0] + th.cos() * p[1];
    (s - line.offset).abs() <= tol + 1e-12
}

/// Classifies the reference midpoints of the broken nearest-neighbour bonds
/// of the last snapshot against the three lattice directions.
pub fn classify_crack(trace: &EvolutionTrace, sys: &LatticeSystem, model: &EnergyModel) -> Result<CrackDescriptor> {
    if sys.dimension() != 2 {
        return Err(Error::config("crack classification needs a two-dimensional lattice"));
    }
    let last = trace.snapshots.last().ok_or_else(|| Error::config("empty trace"))?;
    let state = DamageState::from_memory(sys, last.memory.clone())?;
    let points: Vec<[f64; 2]> = state
        .broken_bonds(sys, model)
        .into_iter()
        .map(|i| &sys.bonds()[i])
        .filter(|b| b.kind == BondKind::Nearest)
        .map(|b| sys.bond_midpoint(b))
        .collect();
    Ok(classify_points(&points))
}

/// Same classification for an explicit set of points.
pub fn classify_points(points: &[[f64; 2]]) -> CrackDescriptor {
    let total = points.len();
    if total == 0 {
        return CrackDescriptor {
            geometry: CrackGeometry::Empty,
            broken: 0,
            best_line_fraction: 0.0,
        };
    }
    let dirs = [0.0, 60.0, 120.0];
    let all = vec![true; total];
    let first = best_line(points, &all, &dirs, LINE_TOL).expect("non-empty");
    let fraction = first.covered as f64 / total as f64;
    let need = (LINE_FRACTION * total as f64 - 1e-9).ceil() as usize;
    let geometry = if first.covered >= need {
        CrackGeometry::SingleLine(first)
    } else {
        // Greedy second segment along another direction.
        let mut best: Option<(LatticeLine, LatticeLine, usize)> = None;
        for &d1 in &dirs {
            let l1 = best_line(points, &all, &[d1], LINE_TOL).expect("non-empty");
            let rest: Vec<bool> = points.iter().map(|p| !on_line(p, &l1, LINE_TOL)).collect();
            let others: Vec<f64> = dirs.iter().copied().filter(|&d| d != d1).collect();
            if let Some(l2) = best_line(points, &rest, &others, LINE_TOL) {
                let covered = l1.covered + l2.covered;
                if best.as_ref().map_or(true, |b| covered > b.2) {
                    best = Some((l1, l2, covered));
                }
            }
        }
        match best {
            Some((l1, l2, covered)) if covered >= need && l2.covered > 0 => CrackGeometry::Kinked(l1, l2),
            _ => CrackGeometry::Diffuse,
        }
    };
    CrackDescriptor {
        geometry,
        broken: total,
        best_line_fraction: fraction,
    }
}
