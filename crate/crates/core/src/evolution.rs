//! Time-incremental evolution: boundary schedules, the step loop with its
//! runtime checks, interpolants and time-step refinement.

use rayon::prelude::*;

use crate::damage::{pair_energy, total_energy, DamageState, EnergyModel};
use crate::error::{Error, Result};
use crate::lattice::{AtomId, LatticeSystem};
use crate::solver::{dissipation_value, guarded_objective, solve_step, warm_start, Dissipation, OrientationGuard, SolverSettings};

/// Relative tolerance of the energy identity under a memory update.
pub const LIFT_TOL: f64 = 1e-12;
/// Smallest accepted slack of the per-step energy inequality.
pub const SLACK_TOL: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `x + A sin(omega t) d` on moving atoms.
    SinusoidalStretch,
    /// `x + A omega t d`, the sinusoid's initial slope held forever.
    LinearRamp,
    Hold,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::SinusoidalStretch => "sinusoidal_stretch",
            ScheduleKind::LinearRamp => "linear_ramp",
            ScheduleKind::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySchedule {
    pub kind: ScheduleKind,
    /// Unit vector in the deformed space.
    pub direction: [f64; 2],
    pub amplitude: f64,
    pub angular_frequency: f64,
    pub moving: Vec<AtomId>,
    pub fixed: Vec<AtomId>,
    pub final_time: f64,
}

impl BoundarySchedule {
    /// Schedule moving the lattice's driven atoms along `angle` (ignored on a chain).
    pub fn for_system(
        sys: &LatticeSystem,
        kind: ScheduleKind,
        amplitude: f64,
        angular_frequency: f64,
        angle: f64,
        final_time: f64,
    ) -> Result<Self> {
        let direction = if sys.ambient_dim() == 1 {
            [1.0, 0.0]
        } else {
            [angle.cos(), angle.sin()]
        };
        let moving = sys.driven().to_vec();
        let fixed = sys.dirichlet().iter().copied().filter(|a| !moving.contains(a)).collect();
        let s = BoundarySchedule {
            kind,
            direction,
            amplitude,
            angular_frequency,
            moving,
            fixed,
            final_time,
        };
        s.validate(sys)?;
        Ok(s)
    }

    pub fn validate(&self, sys: &LatticeSystem) -> Result<()> {
        if !(self.amplitude.is_finite() && self.angular_frequency.is_finite()) {
            return Err(Error::config("schedule amplitude and frequency must be finite"));
        }
        if !(self.final_time > 0.0 && self.final_time.is_finite()) {
            return Err(Error::config("final time must be positive"));
        }
        let norm: f64 = self.direction[..sys.ambient_dim()].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::config("schedule direction must be a unit vector"));
        }
        let mut all: Vec<AtomId> = self.moving.iter().chain(&self.fixed).copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        let mut dirichlet = sys.dirichlet().to_vec();
        dirichlet.sort_unstable();
        if all.len() != before || all != dirichlet {
            return Err(Error::config("moving and fixed sets must partition the Dirichlet set"));
        }
        Ok(())
    }

    /// Scalar displacement factor at time `t`.
    fn factor(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::SinusoidalStretch => self.amplitude * (self.angular_frequency * t).sin(),
            ScheduleKind::LinearRamp => self.amplitude * self.angular_frequency * t,
            ScheduleKind::Hold => 0.0,
        }
    }
}

/// Full-length vector holding `g(t)` on the Dirichlet atoms and the
/// reference positions elsewhere.
pub fn sample_boundary(s: &BoundarySchedule, sys: &LatticeSystem, t: f64) -> Result<Vec<f64>> {
    let slack = 1e-12 * s.final_time;
    if !(t >= -slack && t <= s.final_time + slack) {
        return Err(Error::domain(format!("time {t} outside [0, {}]", s.final_time)));
    }
    let t = t.clamp(0.0, s.final_time);
    let n = sys.ambient_dim();
    let mut g = sys.positions().to_vec();
    let f = s.factor(t);
    for &atom in &s.moving {
        for k in 0..n {
            g[atom * n + k] += f * s.direction[k];
        }
    }
    Ok(g)
}

/// One accepted time step (step 0 is the initial datum).
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub y: Vec<f64>,
    /// Memory after incorporating `y`.
    pub memory: Vec<f64>,
    /// `E_k(y_k)`.
    pub energy: f64,
    pub objective: f64,
    pub residual_norm: f64,
    /// Warm-start objective minus attained objective.
    pub slack: f64,
    /// `nu |y_k - y_{k-1}|^2 / 2 tau` (or its Kelvin-Voigt analogue).
    pub dissipated: f64,
    /// Relative change of the pair energy of `y_k` under the memory update.
    pub lift_error: f64,
    pub iterations: usize,
    pub tie_bonds: Vec<usize>,
    pub broken: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvolutionTrace {
    pub tau: f64,
    pub final_time: f64,
    pub dissipation: Dissipation,
    /// Barrier the steps were solved with; verification accounts for it.
    pub orientation_guard: OrientationGuard,
    pub snapshots: Vec<Snapshot>,
    /// Boundary variation `sum_k |g_k - g_{k-1}|`, per step, cumulative.
    pub boundary_variation: Vec<f64>,
}

impl EvolutionTrace {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn dissipation_sum(&self) -> f64 {
        self.snapshots.iter().map(|s| s.dissipated).sum()
    }

    pub fn interpolants(&self) -> Result<Interpolants<'_>> {
        if self.snapshots.is_empty() {
            return Err(Error::config("empty trace"));
        }
        Ok(Interpolants { trace: self })
    }
}

/// A run that stopped early, with everything computed up to the failure.
#[derive(Debug)]
pub struct EvolutionFailure {
    pub error: Error,
    pub trace: EvolutionTrace,
}

impl std::fmt::Display for EvolutionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.trace.snapshots.len().saturating_sub(1))
    }
}

impl std::error::Error for EvolutionFailure {}

/// Number of steps `T / tau`, which must be integral.
pub fn step_count(tau: f64, final_time: f64) -> Result<usize> {
    if !(tau > 0.0 && final_time > 0.0) {
        return Err(Error::config("tau and final time must be positive"));
    }
    let ratio = final_time / tau;
    let k = ratio.round();
    if (ratio - k).abs() > 1e-9 * ratio.max(1.0) || k < 1.0 {
        return Err(Error::config(format!("T / tau = {ratio} is not a positive integer")));
    }
    Ok(k as usize)
}

fn broken_from(memory: &[f64], sys: &LatticeSystem, model: &EnergyModel) -> Vec<usize> {
    sys.bonds()
        .iter()
        .zip(memory)
        .enumerate()
        .filter(|(_, (b, &m))| model.transition_for(b.kind).evaluate(m) >= 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// Runs the scheme from `y0` for `T / tau` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_evolution(
    sys: &LatticeSystem,
    model: &EnergyModel,
    y0: &[f64],
    schedule: &BoundarySchedule,
    tau: f64,
    final_time: f64,
    d: &Dissipation,
    settings: &SolverSettings,
) -> std::result::Result<EvolutionTrace, Box<EvolutionFailure>> {
    let mut trace = EvolutionTrace {
        tau,
        final_time,
        dissipation: *d,
        orientation_guard: settings.orientation_guard,
        snapshots: Vec::new(),
        boundary_variation: Vec::new(),
    };
    let fail = |error: Error, trace: EvolutionTrace| Box::new(EvolutionFailure { error, trace });
    let setup = (|| -> Result<(usize, Vec<f64>, DamageState)> {
        model.check(sys)?;
        schedule.validate(sys)?;
        settings.validate()?;
        if (schedule.final_time - final_time).abs() > 1e-12 * final_time {
            return Err(Error::config("schedule and run disagree on the final time"));
        }
        let steps = step_count(tau, final_time)?;
        if y0.len() != sys.full_len() {
            return Err(Error::config("initial deformation length does not match the lattice"));
        }
        let g0 = sample_boundary(schedule, sys, 0.0)?;
        let n = sys.ambient_dim();
        for &a in sys.dirichlet() {
            for k in 0..n {
                if (y0[a * n + k] - g0[a * n + k]).abs() > 1e-12 * (1.0 + g0[a * n + k].abs()) {
                    return Err(Error::config("initial deformation violates the boundary datum"));
                }
            }
        }
        let state = DamageState::from_deformation(sys, y0)?;
        Ok((steps, g0, state))
    })();
    let (steps, mut g_prev, mut state) = match setup {
        Ok(v) => v,
        Err(e) => return Err(fail(e, trace)),
    };

    let energy0 = match total_energy(sys, model, &state, y0) {
        Ok(e) => e,
        Err(e) => return Err(fail(e, trace)),
    };
    trace.snapshots.push(Snapshot {
        step: 0,
        time: 0.0,
        y: y0.to_vec(),
        memory: state.memory().to_vec(),
        energy: energy0,
        objective: energy0,
        residual_norm: 0.0,
        slack: 0.0,
        dissipated: 0.0,
        lift_error: 0.0,
        iterations: 0,
        tie_bonds: Vec::new(),
        broken: broken_from(state.memory(), sys, model),
    });
    trace.boundary_variation.push(0.0);

    let mut y_prev = y0.to_vec();
    for k in 1..=steps {
        let t = (k as f64 * tau).min(final_time);
        let step = (|| -> Result<(Snapshot, Vec<f64>, DamageState)> {
            let g = sample_boundary(schedule, sys, t)?;
            let res = solve_step(sys, model, &state, &y_prev, &g, tau, d, settings)?;
            let y = res.y_next.into_inner();

            let start = warm_start(sys, &y_prev, &g);
            let guard = settings.orientation_guard;
            let before = guarded_objective(sys, model, &state, &start, &y_prev, tau, d, guard)?;
            let after = guarded_objective(sys, model, &state, &y, &y_prev, tau, d, guard)?;
            let slack = before - after;
            if slack < SLACK_TOL {
                return Err(Error::numerical(format!("step {k}: energy inequality violated, slack {slack:.3e}")));
            }

            let next = state.update_memory(sys, &y)?;
            let pair_old = pair_energy(sys, model, &state, &y)?;
            let pair_new = pair_energy(sys, model, &next, &y)?;
            let scale = crate::damage::pair_energy_scale(sys, model, &next, &y)?.max(f64::MIN_POSITIVE);
            let lift_error = (pair_old - pair_new).abs() / scale;
            if lift_error > LIFT_TOL {
                return Err(Error::numerical(format!("step {k}: memory update changed the energy by {lift_error:.3e}")));
            }
            let energy = total_energy(sys, model, &next, &y)?;
            let dissipated = dissipation_value(d, sys, &y, &y_prev, tau)?;
            let snap = Snapshot {
                step: k,
                time: t,
                memory: next.memory().to_vec(),
                energy,
                objective: res.objective,
                residual_norm: res.residual_norm,
                slack,
                dissipated,
                lift_error,
                iterations: res.iterations,
                tie_bonds: res.tie_bonds_at_solution,
                broken: broken_from(next.memory(), sys, model),
                y: y.clone(),
            };
            let dg = g.iter().zip(&g_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            g_prev = g;
            let total = trace.boundary_variation.last().copied().unwrap_or(0.0) + dg;
            trace.boundary_variation.push(total);
            Ok((snap, y, next))
        })();
        match step {
            Ok((snap, y, next)) => {
                log::debug!(
                    "step {k}/{steps}: {} iterations, residual {:.2e}, {} broken",
                    snap.iterations,
                    snap.residual_norm,
                    snap.broken.len()
                );
                trace.snapshots.push(snap);
                y_prev = y;
                state = next;
            }
            Err(e) => {
                trace.boundary_variation.truncate(trace.snapshots.len());
                return Err(fail(e, trace));
            }
        }
    }
    Ok(trace)
}

/// Piecewise-constant and piecewise-affine interpolation of a trace.
#[derive(Debug, Clone, Copy)]
pub struct Interpolants<'a> {
    trace: &'a EvolutionTrace,
}

impl<'a> Interpolants<'a> {
    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.trace.snapshots.len() - 1;
        let tau = self.trace.tau;
        if t <= 0.0 || last == 0 {
            return (0, 0.0);
        }
        let mut s = t / tau;
        if (s - s.round()).abs() <= 1e-9 {
            s = s.round();
        }
        let k = (s.floor() as usize).min(last - 1);
        (k, (s - k as f64).clamp(0.0, 1.0))
    }

    /// `y_tau(t) = y_{k+1}` on `(t_k, t_{k+1}]`.
    pub fn piecewise_constant(&self, t: f64) -> &'a [f64] {
        let (k, theta) = self.locate(t);
        let snaps = &self.trace.snapshots;
        if t <= 0.0 || snaps.len() == 1 {
            &snaps[0].y
        } else if theta == 0.0 {
            &snaps[k].y
        } else {
            &snaps[k + 1].y
        }
    }

    /// Affine interpolation between consecutive snapshots.
    pub fn piecewise_affine(&self, t: f64) -> Vec<f64> {
        let (k, theta) = self.locate(t);
        let snaps = &self.trace.snapshots;
        if snaps.len() == 1 {
            return snaps[0].y.clone();
        }
        let a = &snaps[k].y;
        let b = &snaps[k + 1].y;
        a.iter().zip(b).map(|(x, z)| x + theta * (z - x)).collect()
    }

    /// Time grid of the underlying trace.
    pub fn grid(&self) -> Vec<f64> {
        self.trace.times()
    }
}

/// `sup_t |a(t) - b(t)|` between two piecewise-affine interpolants. The
/// difference is affine between consecutive points of the merged grids, so
/// its norm peaks on the grid.
pub fn affine_sup_distance(a: &EvolutionTrace, b: &EvolutionTrace) -> Result<f64> {
    let ia = a.interpolants()?;
    let ib = b.interpolants()?;
    let mut grid: Vec<f64> = ia.grid().into_iter().chain(ib.grid()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * (1.0 + y.abs()));
    let mut best = 0.0f64;
    for t in grid {
        let ya = ia.piecewise_affine(t);
        let yb = ib.piecewise_affine(t);
        if ya.len() != yb.len() {
            return Err(Error::config("traces of different systems"));
        }
        let d = ya.iter().zip(&yb).map(|(x, z)| (x - z) * (x - z)).sum::<f64>().sqrt();
        best = best.max(d);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauStudyRow {
    pub tau: f64,
    pub steps: usize,
    /// Distance to the run with the previous (coarser) time step.
    pub sup_distance: Option<f64>,
    pub dissipation_sum: f64,
    /// Smallest `C` with `E_j(y_j) + sum_{i<=j} D_i <= E_0(y_0) + C sum_{i<=j} |g_i - g_{i-1}|`.
    pub lipschitz_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauStudyReport {
    pub rows: Vec<TauStudyRow>,
}

impl TauStudyReport {
    pub fn distances_decrease(&self) -> bool {
        let d: Vec<f64> = self.rows.iter().filter_map(|r| r.sup_distance).collect();
        d.windows(2).all(|w| w[1] < w[0])
    }
}

fn lipschitz_estimate(trace: &EvolutionTrace) -> f64 {
    let e0 = trace.snapshots[0].energy;
    let mut acc = 0.0;
    let mut c = 0.0f64;
    for (s, &var) in trace.snapshots.iter().zip(&trace.boundary_variation).skip(1) {
        acc += s.dissipated;
        if var > 0.0 {
            c = c.max((s.energy + acc - e0) / var);
        }
    }
    c
}

/// Runs `run(tau)` for every entry of a decreasing list (concurrently) and
/// compares successive piecewise-affine interpolants.
pub fn refine_tau_study<F>(taus: &[f64], run: F) -> Result<TauStudyReport>
where
    F: Fn(f64) -> Result<EvolutionTrace> + Sync,
{
    if taus.len() < 3 {
        return Err(Error::config("a time-step study needs at least three values of tau"));
    }
    if !taus.windows(2).all(|w| w[1] < w[0]) || taus.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::config("time steps must be positive and strictly decreasing"));
    }
    let traces: Vec<EvolutionTrace> = taus.par_iter().map(|&t| run(t)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(traces.len());
    for (i, tr) in traces.iter().enumerate() {
        let sup_distance = if i == 0 {
            None
        } else {
            Some(affine_sup_distance(&traces[i - 1], tr)?)
        };
        rows.push(TauStudyRow {
            tau: tr.tau,
            steps: tr.snapshots.len() - 1,
            sup_distance,
            dissipation_sum: tr.dissipation_sum(),
            lipschitz_estimate: lipschitz_estimate(tr),
        });
    }
    Ok(TauStudyReport { rows })
}
