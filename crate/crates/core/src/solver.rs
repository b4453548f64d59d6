//! One incremental minimization: history-frozen energy plus a viscous
//! penalty against the previous configuration, over the free atoms.
//!
//! The energy is smooth except along the kinks `W(r) = W(M)` of damaged
//! bonds. Writing it as
//!
//! ```text
//! F(y) = F_flat(y) + sum_b phi_b max(W(r_b) - W(M_b), 0)
//! ```
//!
//! turns each step into an exact-penalty problem, which is solved by an
//! active-set Newton method: bonds sitting on their kink are held there by an
//! equality constraint whose multiplier must stay in `[0, phi_b]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::damage::{
    closest_subgradient, eval_bonds, eval_triples, total_energy, BondEval, DamageState, Deformation, EnergyModel,
    InclusionFit, TripleEval,
};
use crate::error::{Error, Result};
use crate::lattice::{BondKind, LatticeSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DissipationKind {
    /// `(nu / 2 tau) |y - y_prev|^2`.
    L2,
    /// `(nu / 2 tau eps^2) sum over nearest pairs |(y - y_prev)(a) - (y - y_prev)(b)|^2`;
    /// on a chain this is the squared discrete gradient of the increment.
    KelvinVoigt,
}

impl DissipationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DissipationKind::L2 => "l2",
            DissipationKind::KelvinVoigt => "kelvin_voigt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dissipation {
    pub kind: DissipationKind,
    pub nu: f64,
}

impl Dissipation {
    pub fn new(kind: DissipationKind, nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::config(format!("viscosity must be positive, got {nu}")));
        }
        Ok(Dissipation { kind, nu })
    }

    pub fn l2(nu: f64) -> Result<Self> {
        Self::new(DissipationKind::L2, nu)
    }

    pub fn kelvin_voigt(nu: f64) -> Result<Self> {
        Self::new(DissipationKind::KelvinVoigt, nu)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("time step must be positive, got {tau}")))
    }
}

/// Dissipation penalty over the full vector (Dirichlet slots included).
pub fn dissipation_value(d: &Dissipation, sys: &LatticeSystem, y: &[f64], y_prev: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if y.len() != sys.full_len() || y_prev.len() != sys.full_len() {
        return Err(Error::config("deformation length does not match the lattice"));
    }
    let n = sys.ambient_dim();
    Ok(match d.kind {
        DissipationKind::L2 => {
            let s: f64 = y.iter().zip(y_prev).map(|(a, b)| (a - b) * (a - b)).sum();
            d.nu / (2.0 * tau) * s
        }
        DissipationKind::KelvinVoigt => {
            let eps = sys.spacing();
            let mut s = 0.0;
            for bond in sys.bonds().iter().filter(|b| b.kind == BondKind::Nearest) {
                for k in 0..n {
                    let da = y[bond.a * n + k] - y_prev[bond.a * n + k];
                    let db = y[bond.b * n + k] - y_prev[bond.b * n + k];
                    s += (da - db) * (da - db);
                }
            }
            d.nu / (2.0 * tau * eps * eps) * s
        }
    })
}

/// Gradient of [`dissipation_value`] with respect to the free slots.
pub fn dissipation_gradient(d: &Dissipation, sys: &LatticeSystem, y: &[f64], y_prev: &[f64], tau: f64) -> Vec<f64> {
    let n = sys.ambient_dim();
    match d.kind {
        DissipationKind::L2 => {
            let c = d.nu / tau;
            let mut out = sys.restrict_to_free(y);
            for (o, p) in out.iter_mut().zip(sys.restrict_to_free(y_prev)) {
                *o = c * (*o - p);
            }
            out
        }
        DissipationKind::KelvinVoigt => {
            let eps = sys.spacing();
            let c = d.nu / (tau * eps * eps);
            let mut out = vec![0.0; sys.free_len()];
            for bond in sys.bonds().iter().filter(|b| b.kind == BondKind::Nearest) {
                for k in 0..n {
                    let da = y[bond.a * n + k] - y_prev[bond.a * n + k];
                    let db = y[bond.b * n + k] - y_prev[bond.b * n + k];
                    if let Some(f) = sys.free_index(bond.a) {
                        out[f * n + k] += c * (da - db);
                    }
                    if let Some(f) = sys.free_index(bond.b) {
                        out[f * n + k] -= c * (da - db);
                    }
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrientationGuard {
    Off,
    /// `-weight * sum log det` over reference cells (triangles in 2D,
    /// nearest pairs on a chain).
    Barrier(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub ls_shrink: f64,
    pub ls_c1: f64,
    pub orientation_guard: OrientationGuard,
    /// Energy gap below which a damaged bond counts as sitting on its kink.
    pub tie_tol: f64,
    /// Look for negative curvature at stationary points and move off saddles.
    pub escape_saddles: bool,
}

impl SolverSettings {
    /// Defaults with `grad_tol = 1e-8 sqrt(free_len)`.
    pub fn for_system(sys: &LatticeSystem) -> Self {
        SolverSettings {
            grad_tol: 1e-8 * (sys.free_len().max(1) as f64).sqrt(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::config("grad_tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return Err(Error::config("ls_shrink must lie in (0, 1)"));
        }
        if !(self.ls_c1 > 0.0 && self.ls_c1 < 1.0) {
            return Err(Error::config("ls_c1 must lie in (0, 1)"));
        }
        if !(self.tie_tol > 0.0) {
            return Err(Error::config("tie_tol must be positive"));
        }
        if let OrientationGuard::Barrier(w) = self.orientation_guard {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::config("barrier weight must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            grad_tol: 1e-8,
            max_iters: 10_000,
            ls_shrink: 0.5,
            ls_c1: 1e-4,
            orientation_guard: OrientationGuard::Off,
            tie_tol: 1e-10,
            escape_saddles: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub y_next: Deformation,
    /// Energy plus dissipation (plus barrier, if enabled) at `y_next`.
    pub objective: f64,
    /// Same objective at the warm start.
    pub warm_start_objective: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub tie_bonds_at_solution: Vec<usize>,
}

/// Warm start: `y_prev` with its Dirichlet slots replaced by `g_now`.
pub fn warm_start(sys: &LatticeSystem, y_prev: &[f64], g_now: &[f64]) -> Vec<f64> {
    let n = sys.ambient_dim();
    let mut y = y_prev.to_vec();
    for &atom in sys.dirichlet() {
        y[atom * n..(atom + 1) * n].copy_from_slice(&g_now[atom * n..(atom + 1) * n]);
    }
    y
}

/// Energy plus dissipation, the quantity minimized by one step.
pub fn step_objective(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    y_prev: &[f64],
    tau: f64,
    d: &Dissipation,
) -> Result<f64> {
    Ok(total_energy(sys, model, state, y)? + dissipation_value(d, sys, y, y_prev, tau)?)
}

/// Closest fit of the discrete inclusion at `y`: the smallest free-slot norm
/// of `dissipation gradient + p` over subgradients `p` of the energy.
pub fn inclusion_residual(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    y_prev: &[f64],
    tau: f64,
    d: &Dissipation,
    tie_tol: f64,
) -> Result<InclusionFit> {
    let target = dissipation_gradient(d, sys, y, y_prev, tau);
    closest_subgradient(sys, model, state, y, &target, tie_tol)
}

/// [`step_objective`] plus the orientation barrier, when one is enabled:
/// exactly what [`solve_step`] minimizes.
pub(crate) fn guarded_objective(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    y_prev: &[f64],
    tau: f64,
    d: &Dissipation,
    guard: OrientationGuard,
) -> Result<f64> {
    Problem::new(sys, model, state, y_prev, tau, d, guard).objective(y)
}

/// [`inclusion_residual`] with the barrier gradient added to the target.
pub(crate) fn guarded_residual(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    y_prev: &[f64],
    tau: f64,
    d: &Dissipation,
    guard: OrientationGuard,
    tie_tol: f64,
) -> Result<InclusionFit> {
    Problem::new(sys, model, state, y_prev, tau, d, guard).residual(y, tie_tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    /// Undamaged, or no free endpoint.
    Smooth,
    Upper,
    Lower,
    Active,
}

struct Problem<'a> {
    sys: &'a LatticeSystem,
    model: &'a EnergyModel,
    state: &'a DamageState,
    y_prev: &'a [f64],
    tau: f64,
    diss: Dissipation,
    barrier: Option<f64>,
    cells: Vec<Vec<usize>>,
    n: usize,
    m: usize,
    phi: Vec<f64>,
    movable: Vec<bool>,
}

impl<'a> Problem<'a> {
    fn new(
        sys: &'a LatticeSystem,
        model: &'a EnergyModel,
        state: &'a DamageState,
        y_prev: &'a [f64],
        tau: f64,
        d: &Dissipation,
        guard: OrientationGuard,
    ) -> Self {
        let barrier = match guard {
            OrientationGuard::Off => None,
            OrientationGuard::Barrier(w) => Some(w),
        };
        Problem {
            sys,
            model,
            state,
            y_prev,
            tau,
            diss: *d,
            barrier,
            cells: if barrier.is_some() { orientation_cells(sys) } else { Vec::new() },
            n: sys.ambient_dim(),
            m: sys.free_len(),
            phi: state.phi_values(sys, model),
            movable: sys
                .bonds()
                .iter()
                .map(|b| !(sys.is_dirichlet(b.a) && sys.is_dirichlet(b.b)))
                .collect(),
        }
    }

    fn slot(&self, atom: usize, k: usize) -> Option<usize> {
        self.sys.free_index(atom).map(|f| f * self.n + k)
    }

    fn objective(&self, y: &[f64]) -> Result<f64> {
        let mut f = step_objective(self.sys, self.model, self.state, y, self.y_prev, self.tau, &self.diss)?;
        if let Some(w) = self.barrier {
            for cell in &self.cells {
                let det = cell_det(y, self.n, cell);
                if !(det > 0.0) {
                    return Err(Error::numerical("cell orientation flipped"));
                }
                f -= w * det.ln();
            }
        }
        Ok(f)
    }

    /// Free-slot gradient of everything that is smooth: dissipation and barrier.
    fn smooth_gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut g = dissipation_gradient(&self.diss, self.sys, y, self.y_prev, self.tau);
        if let Some(w) = self.barrier {
            for cell in &self.cells {
                let det = cell_det(y, self.n, cell);
                for (atom, k, v) in cell_det_gradient(y, self.n, cell) {
                    if let Some(s) = self.slot(atom, k) {
                        g[s] -= w * v / det;
                    }
                }
            }
        }
        g
    }

    fn residual(&self, y: &[f64], tie_tol: f64) -> Result<InclusionFit> {
        let target = self.smooth_gradient(y);
        closest_subgradient(self.sys, self.model, self.state, y, &target, tie_tol)
    }

    fn bond_factor(&self, b: usize, side: Side, mu: f64) -> (f64, f64) {
        // (gradient factor, Hessian factor)
        let phi = self.phi[b];
        match side {
            Side::Smooth | Side::Upper => {
                if phi == 0.0 || side == Side::Upper {
                    (1.0, 1.0)
                } else {
                    (1.0 - phi, 1.0 - phi)
                }
            }
            Side::Lower => (1.0 - phi, 1.0 - phi),
            Side::Active => (1.0 - phi, 1.0 - phi + mu),
        }
    }

    /// Gradient of the working-set model and Hessian of its Lagrangian.
    fn assemble(
        &self,
        y: &[f64],
        evals: &[BondEval],
        triples: &[TripleEval],
        sides: &[Side],
        mu: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let m = self.m;
        let mut g = DVector::from_vec(self.smooth_gradient(y));
        let mut h = DMatrix::<f64>::zeros(m, m);
        for (b, (bond, e)) in self.sys.bonds().iter().zip(evals).enumerate() {
            if !self.movable[b] {
                continue;
            }
            let (gf, hf) = self.bond_factor(b, sides[b], mu[b]);
            let sa = self.sys.free_index(bond.a);
            let sb = self.sys.free_index(bond.b);
            for k in 0..n {
                let v = gf * e.dw * e.unit[k];
                if let Some(f) = sa {
                    g[f * n + k] += v;
                }
                if let Some(f) = sb {
                    g[f * n + k] -= v;
                }
            }
            if hf == 0.0 {
                continue;
            }
            let mut block = [[0.0; 2]; 2];
            for i in 0..n {
                for j in 0..n {
                    let zz = e.unit[i] * e.unit[j];
                    let id = if i == j { 1.0 } else { 0.0 };
                    block[i][j] = hf * (e.d2w * zz + e.dw / e.r * (id - zz));
                }
            }
            for (x, sx) in [(sa, 1.0), (sb, -1.0)] {
                for (z, sz) in [(sa, 1.0), (sb, -1.0)] {
                    if let (Some(fx), Some(fz)) = (x, z) {
                        for i in 0..n {
                            for j in 0..n {
                                h[(fx * n + i, fz * n + j)] += sx * sz * block[i][j];
                            }
                        }
                    }
                }
            }
        }
        if let Some(pot) = self.model.triple.as_ref() {
            for (t, e) in self.sys.triples().iter().zip(triples) {
                if e.factor == 0.0 {
                    continue;
                }
                let (gu, gv) = e.cos_gradients(n);
                let d1 = e.factor * 2.0 * pot.stiffness * (e.cos - e.rest_cos);
                let d2 = e.factor * 2.0 * pot.stiffness;
                // Hessian blocks of cos with respect to (u, v).
                let mut huu = [[0.0; 2]; 2];
                let mut hvv = [[0.0; 2]; 2];
                let mut huv = [[0.0; 2]; 2];
                let wu: Vec<f64> = (0..n).map(|k| e.v_hat[k] - e.cos * e.u_hat[k]).collect();
                let wv: Vec<f64> = (0..n).map(|k| e.u_hat[k] - e.cos * e.v_hat[k]).collect();
                for i in 0..n {
                    for j in 0..n {
                        let id = if i == j { 1.0 } else { 0.0 };
                        huu[i][j] = (-e.u_hat[i] * wu[j] - wu[i] * e.u_hat[j] - e.cos * (id - e.u_hat[i] * e.u_hat[j]))
                            / (e.u_len * e.u_len);
                        hvv[i][j] = (-e.v_hat[i] * wv[j] - wv[i] * e.v_hat[j] - e.cos * (id - e.v_hat[i] * e.v_hat[j]))
                            / (e.v_len * e.v_len);
                        huv[i][j] = ((id - e.v_hat[i] * e.v_hat[j]) - e.u_hat[i] * wv[j]) / (e.u_len * e.v_len);
                    }
                }
                // Energy Hessian in (u, v): d2 grad grad^T + d1 Hess(cos).
                let grad = |c: usize, i: usize| if c == 0 { gu[i] } else { gv[i] };
                let hc = |c1: usize, c2: usize, i: usize, j: usize| match (c1, c2) {
                    (0, 0) => huu[i][j],
                    (1, 1) => hvv[i][j],
                    (0, 1) => huv[i][j],
                    _ => huv[j][i],
                };
                // Atom maps: outer1 = +u, outer2 = +v, center = -u - v.
                let atoms: [(usize, [f64; 2]); 3] =
                    [(t.outer1, [1.0, 0.0]), (t.outer2, [0.0, 1.0]), (t.center, [-1.0, -1.0])];
                for &(ax, cx) in &atoms {
                    let Some(fx) = self.sys.free_index(ax) else { continue };
                    for &(az, cz) in &atoms {
                        let Some(fz) = self.sys.free_index(az) else { continue };
                        for i in 0..n {
                            for j in 0..n {
                                let mut v = 0.0;
                                for c1 in 0..2 {
                                    if cx[c1] == 0.0 {
                                        continue;
                                    }
                                    for c2 in 0..2 {
                                        if cz[c2] == 0.0 {
                                            continue;
                                        }
                                        v += cx[c1]
                                            * cz[c2]
                                            * (d2 * grad(c1, i) * grad(c2, j) + d1 * hc(c1, c2, i, j));
                                    }
                                }
                                h[(fx * n + i, fz * n + j)] += v;
                            }
                        }
                    }
                    for i in 0..n {
                        let v: f64 = (0..2).map(|c| cx[c] * grad(c, i)).sum();
                        g[fx * n + i] += d1 * v;
                    }
                }
            }
        }
        match self.diss.kind {
            DissipationKind::L2 => {
                let c = self.diss.nu / self.tau;
                for i in 0..m {
                    h[(i, i)] += c;
                }
            }
            DissipationKind::KelvinVoigt => {
                let eps = self.sys.spacing();
                let c = self.diss.nu / (self.tau * eps * eps);
                for bond in self.sys.bonds().iter().filter(|b| b.kind == BondKind::Nearest) {
                    let sa = self.sys.free_index(bond.a);
                    let sb = self.sys.free_index(bond.b);
                    for k in 0..n {
                        if let Some(fa) = sa {
                            h[(fa * n + k, fa * n + k)] += c;
                        }
                        if let Some(fb) = sb {
                            h[(fb * n + k, fb * n + k)] += c;
                        }
                        if let (Some(fa), Some(fb)) = (sa, sb) {
                            h[(fa * n + k, fb * n + k)] -= c;
                            h[(fb * n + k, fa * n + k)] -= c;
                        }
                    }
                }
            }
        }
        if let Some(w) = self.barrier {
            for cell in &self.cells {
                let det = cell_det(y, n, cell);
                let grad = cell_det_gradient(y, n, cell);
                for &(a1, k1, v1) in &grad {
                    let Some(s1) = self.slot(a1, k1) else { continue };
                    for &(a2, k2, v2) in &grad {
                        let Some(s2) = self.slot(a2, k2) else { continue };
                        h[(s1, s2)] += w * v1 * v2 / (det * det);
                    }
                }
                for (a1, k1, a2, k2, v) in cell_det_hessian(cell) {
                    if let (Some(s1), Some(s2)) = (self.slot(a1, k1), self.slot(a2, k2)) {
                        h[(s1, s2)] -= w * v / det;
                    }
                }
            }
        }
        (g, h)
    }

    /// Constraint gradients `W'(r) z` of the active bonds as rows.
    fn jacobian(&self, evals: &[BondEval], active: &[usize]) -> DMatrix<f64> {
        let n = self.n;
        let mut j = DMatrix::<f64>::zeros(active.len(), self.m);
        for (row, &b) in active.iter().enumerate() {
            let bond = &self.sys.bonds()[b];
            let e = &evals[b];
            for k in 0..n {
                if let Some(f) = self.sys.free_index(bond.a) {
                    j[(row, f * n + k)] += e.dw * e.unit[k];
                }
                if let Some(f) = self.sys.free_index(bond.b) {
                    j[(row, f * n + k)] -= e.dw * e.unit[k];
                }
            }
        }
        j
    }

    fn with_free(&self, y: &[f64], free_step: &DVector<f64>, alpha: f64) -> Vec<f64> {
        let mut out = y.to_vec();
        for (slot, &atom) in self.sys.free_atoms().iter().enumerate() {
            for k in 0..self.n {
                out[atom * self.n + k] += alpha * free_step[slot * self.n + k];
            }
        }
        out
    }
}

fn cell_det(y: &[f64], n: usize, cell: &[usize]) -> f64 {
    if cell.len() == 2 {
        y[cell[1]] - y[cell[0]]
    } else {
        let p = |a: usize, k: usize| y[cell[a] * n + k];
        (p(1, 0) - p(0, 0)) * (p(2, 1) - p(0, 1)) - (p(1, 1) - p(0, 1)) * (p(2, 0) - p(0, 0))
    }
}

fn cell_det_gradient(y: &[f64], n: usize, cell: &[usize]) -> Vec<(usize, usize, f64)> {
    if cell.len() == 2 {
        return vec![(cell[0], 0, -1.0), (cell[1], 0, 1.0)];
    }
    let p = |a: usize, k: usize| y[cell[a] * n + k];
    let (x0, y0, x1, y1, x2, y2) = (p(0, 0), p(0, 1), p(1, 0), p(1, 1), p(2, 0), p(2, 1));
    vec![
        (cell[0], 0, y1 - y2),
        (cell[0], 1, x2 - x1),
        (cell[1], 0, y2 - y0),
        (cell[1], 1, x0 - x2),
        (cell[2], 0, y0 - y1),
        (cell[2], 1, x1 - x0),
    ]
}

fn cell_det_hessian(cell: &[usize]) -> Vec<(usize, usize, usize, usize, f64)> {
    if cell.len() == 2 {
        return Vec::new();
    }
    let pairs = [
        ((1, 0), (2, 1), 1.0),
        ((1, 0), (0, 1), -1.0),
        ((0, 0), (2, 1), -1.0),
        ((1, 1), (2, 0), -1.0),
        ((1, 1), (0, 0), 1.0),
        ((0, 1), (2, 0), 1.0),
    ];
    let mut out = Vec::with_capacity(12);
    for ((a1, k1), (a2, k2), v) in pairs {
        out.push((cell[a1], k1, cell[a2], k2, v));
        out.push((cell[a2], k2, cell[a1], k1, v));
    }
    out
}

fn orientation_cells(sys: &LatticeSystem) -> Vec<Vec<usize>> {
    let touches_free = |c: &[usize]| c.iter().any(|&a| !sys.is_dirichlet(a));
    if sys.dimension() == 1 {
        sys.bonds()
            .iter()
            .filter(|b| b.kind == BondKind::Nearest)
            .map(|b| vec![b.a, b.b])
            .filter(|c| touches_free(c))
            .collect()
    } else {
        sys.triangles().iter().map(|t| t.to_vec()).filter(|c| touches_free(c)).collect()
    }
}

/// Cholesky of `h + sigma I` with the smallest tried shift that works.
fn shifted_cholesky(h: &DMatrix<f64>) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    let m = h.nrows();
    let scale = (0..m).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let mut sigma = 0.0;
    loop {
        let mut k = h.clone();
        for i in 0..m {
            k[(i, i)] += sigma;
        }
        if let Some(c) = k.cholesky() {
            return c;
        }
        sigma = if sigma == 0.0 { 1e-6 * scale } else { sigma * 4.0 };
    }
}

struct Newton {
    d: DVector<f64>,
}

fn kkt_step(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, g: &DVector<f64>, j: &DMatrix<f64>, c: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let z = chol.solve(g);
    if j.nrows() == 0 {
        return (-z, DVector::zeros(0));
    }
    let y = chol.solve(&j.transpose());
    let mut s = j * &y;
    let a = s.nrows();
    let tr = (0..a).map(|i| s[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..a {
        s[(i, i)] += 1e-13 * tr + 1e-300;
    }
    let rhs = DVector::from_column_slice(c) - j * &z;
    let mu = s
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| s.lu().solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(a));
    let d = -(z + y * &mu);
    (d, mu)
}

/// Minimizes energy plus dissipation over the free atoms, Dirichlet slots
/// set from `g_now` (a full-length vector; only Dirichlet slots are read).
/// The search starts from `y_prev` with its Dirichlet slots replaced.
#[allow(clippy::too_many_arguments)]
pub fn solve_step(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y_prev: &[f64],
    g_now: &[f64],
    tau: f64,
    d: &Dissipation,
    settings: &SolverSettings,
) -> Result<StepResult> {
    settings.validate()?;
    check_tau(tau)?;
    if y_prev.len() != sys.full_len() || g_now.len() != sys.full_len() {
        return Err(Error::config("deformation length does not match the lattice"));
    }
    if g_now.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("boundary values must be finite"));
    }
    let nbonds = sys.bonds().len();
    let prob = Problem::new(sys, model, state, y_prev, tau, d, settings.orientation_guard);
    let tie_tol = settings.tie_tol;

    let mut y = warm_start(sys, y_prev, g_now);
    let f_warm = prob.objective(&y)?;
    let mut f = f_warm;
    let mut best = (f, y.clone());

    let mut sides = vec![Side::Smooth; nbonds];
    let mut mu = vec![0.0; nbonds];
    let mut preferred: Vec<Option<Side>> = vec![None; nbonds];
    let mut flips = vec![0u8; nbonds];
    let mut escapes = 0usize;
    let mut last_residual = f64::INFINITY;
    let mut stagnant = 0usize;
    let mut stalls = 0usize;
    let mut smoothings = 0usize;

    for iter in 0..=settings.max_iters {
        let fit = prob.residual(&y, tie_tol)?;
        last_residual = fit.norm;
        let evals = eval_bonds(sys, model, state, &y)?;
        let triples = eval_triples(sys, model, state, &y)?;

        // Classify damaged bonds relative to their kink.
        for b in 0..nbonds {
            if !prob.movable[b] || prob.phi[b] == 0.0 {
                sides[b] = Side::Smooth;
                continue;
            }
            if sides[b] == Side::Active {
                continue;
            }
            let gap = evals[b].gap();
            let by_sign = if gap > 0.0 { Side::Upper } else { Side::Lower };
            // A released bond keeps its branch while it is still on the kink.
            let band = tie_tol.max(1e-8 * (1.0 + evals[b].w_mem.abs()));
            let new = match preferred[b] {
                Some(p) if gap.abs() <= band => p,
                _ if gap.abs() <= tie_tol => Side::Active,
                _ => {
                    preferred[b] = None;
                    by_sign
                }
            };
            if matches!(sides[b], Side::Upper | Side::Lower) && new != sides[b] && new != Side::Active {
                flips[b] += 1;
                if flips[b] >= 2 {
                    sides[b] = Side::Active;
                    mu[b] = 0.5 * prob.phi[b];
                    flips[b] = 0;
                    continue;
                }
            } else if new == sides[b] {
                flips[b] = 0;
            }
            if new == Side::Active && sides[b] != Side::Active {
                mu[b] = 0.5 * prob.phi[b];
            }
            sides[b] = new;
        }

        if fit.norm <= settings.grad_tol {
            if settings.escape_saddles && escapes < 50 && prob.m > 0 {
                let active: Vec<usize> = (0..nbonds).filter(|&b| sides[b] == Side::Active).collect();
                if let Some(y_new) = escape_saddle(&prob, &y, f, &evals, &triples, &sides, &mu, &active)? {
                    escapes += 1;
                    y = y_new;
                    f = prob.objective(&y)?;
                    if f < best.0 {
                        best = (f, y.clone());
                    }
                    for b in 0..nbonds {
                        if sides[b] == Side::Active {
                            sides[b] = Side::Smooth;
                        }
                        preferred[b] = None;
                    }
                    continue;
                }
            }
            return Ok(StepResult {
                y_next: Deformation::new(y),
                objective: f,
                warm_start_objective: f_warm,
                residual_norm: fit.norm,
                iterations: iter,
                tie_bonds_at_solution: fit.tie_bonds,
            });
        }
        if iter == settings.max_iters {
            break;
        }

        // Newton step on the working set, releasing multipliers that leave [0, phi].
        let mut step: Option<Newton> = None;
        for _ in 0..=nbonds {
            let active: Vec<usize> = (0..nbonds).filter(|&b| sides[b] == Side::Active).collect();
            let (g, h) = prob.assemble(&y, &evals, &triples, &sides, &mu);
            let chol = shifted_cholesky(&h);
            let jac = prob.jacobian(&evals, &active);
            let c: Vec<f64> = active.iter().map(|&b| evals[b].gap()).collect();
            let (dir, mu_new) = kkt_step(&chol, &g, &jac, &c);
            // Slope of the working-set model along the step.
            let mut slope = g.dot(&dir);
            for &b in &active {
                let gap = evals[b].gap();
                if gap > 0.0 {
                    slope -= prob.phi[b] * gap;
                }
            }
            // Multipliers are trusted once their kink is reached, or when the
            // step fails to descend because one exceeds its penalty weight.
            let mut worst: Option<(usize, f64, Side)> = None;
            for (row, &b) in active.iter().enumerate() {
                let phi = prob.phi[b];
                let cscale = 1e-8 * (1.0 + evals[b].w_mem.abs());
                if evals[b].gap().abs() > cscale && slope < 0.0 {
                    continue;
                }
                let (viol, side) = if mu_new[row] > phi {
                    (mu_new[row] - phi, Side::Upper)
                } else if mu_new[row] < 0.0 {
                    (-mu_new[row], Side::Lower)
                } else {
                    continue;
                };
                if viol > 1e-12 && worst.map_or(true, |w| viol > w.1) {
                    worst = Some((b, viol, side));
                }
            }
            if let Some((b, viol, side)) = worst {
                log::trace!("bond {b} released to {side:?} (violation {viol:.3e}, gap {:.3e})", evals[b].gap());
                sides[b] = side;
                preferred[b] = Some(side);
                continue;
            }
            for (row, &b) in active.iter().enumerate() {
                mu[b] = mu_new[row].clamp(0.0, prob.phi[b]);
            }
            if slope >= 0.0 {
                // Not a descent direction: fall back to the negative residual.
                let r = DVector::from_vec(fit.residual.clone());
                step = Some(Newton { d: -r });
            } else {
                step = Some(Newton { d: dir });
            }
            break;
        }
        let Some(Newton { d: mut dir }) = step else {
            break;
        };
        // The model is stationary but the true residual is not: a remembered
        // branch is wrong, so forget the preferences and reclassify.
        if dir.dot(&dir) <= 1e-16 * fit.norm * fit.norm && preferred.iter().any(|p| p.is_some()) {
            log::trace!("model stationary on remembered branches, resetting them");
            preferred.iter_mut().for_each(|p| *p = None);
            continue;
        }

        // Cap the largest displacement at a fraction of the spacing.
        let cap = 0.25 * sys.spacing();
        let dmax = dir.amax();
        if dmax > cap {
            dir *= cap / dmax;
        }
        let fr = DVector::from_vec(fit.residual.clone());
        let mut slope = fr.dot(&dir);
        if !(slope < 0.0) {
            slope = -dir.norm_squared() * 1e-12;
        }
        let noise = 1e-13 * (1.0 + evals.iter().map(|e| e.energy().abs()).sum::<f64>() + f.abs());
        let f_iter = f;
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut added = false;
        while alpha > 1e-14 {
            let cand = prob.with_free(&y, &dir, alpha);
            let fc = prob.objective(&cand).unwrap_or(f64::INFINITY);
            if fc <= f + settings.ls_c1 * alpha * slope.min(0.0) && fc < f {
                y = cand;
                f = fc;
                accepted = true;
                break;
            }
            if alpha == 1.0 {
                // Bonds crossing their kink make the model wrong; hold them on it.
                if let Ok(ce) = eval_bonds(sys, model, state, &cand) {
                    for b in 0..nbonds {
                        // Only crossings away from the modelled branch count.
                        if matches!(sides[b], Side::Upper | Side::Lower)
                            && preferred[b].is_none()
                            && (ce[b].gap() > 0.0) != (sides[b] == Side::Upper)
                        {
                            log::trace!(
                                "bond {b} crosses its kink: gap {:.3e} -> {:.3e}, side {:?}",
                                evals[b].gap(),
                                ce[b].gap(),
                                sides[b]
                            );
                            sides[b] = Side::Active;
                            preferred[b] = None;
                            mu[b] = 0.5 * prob.phi[b];
                            added = true;
                        }
                    }
                }
                if added {
                    break;
                }
                if fc.is_finite() && fc <= f + noise {
                    if let Ok(cf) = prob.residual(&cand, tie_tol) {
                        if cf.norm < fit.norm {
                            y = cand;
                            f = fc;
                            accepted = true;
                            break;
                        }
                    }
                }
            }
            alpha *= settings.ls_shrink;
        }
        log::trace!(
            "iter {iter}: f {f:.15e} residual {:.3e} active {} alpha {alpha:.2e} accepted {accepted} added {added}",
            fit.norm,
            sides.iter().filter(|s| **s == Side::Active).count()
        );
        if accepted {
            if f < best.0 {
                best = (f, y.clone());
            }
            // Steps that change neither objective nor residual mean the working
            // set is wrong; after a few of them start over from plain branches.
            let progressed = f < f_iter - noise || prob.residual(&y, tie_tol)?.norm < 0.999 * fit.norm;
            stagnant = if progressed { 0 } else { stagnant + 1 };
            if stagnant < 5 {
                continue;
            }
            log::debug!("no progress at residual {:.3e}", fit.norm);
            stagnant = 0;
        } else if added {
            continue;
        } else {
            log::debug!("line search stalled at residual {:.3e}", fit.norm);
        }
        // Stuck: first drop the working set, then fall back to a smoothed
        // solve that lands close enough to identify the kinks.
        stalls += 1;
        let any_active = sides.iter().any(|s| *s == Side::Active);
        if stalls > 1 || !any_active {
            if smoothings >= 3 {
                break;
            }
            smoothings += 1;
            stalls = 0;
            y = smoothed_solve(&prob, y, settings)?;
            f = prob.objective(&y)?;
            if f < best.0 {
                best = (f, y.clone());
            }
        }
        for b in 0..nbonds {
            if sides[b] == Side::Active {
                sides[b] = Side::Smooth;
            }
            preferred[b] = None;
            flips[b] = 0;
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iters,
        residual: last_residual,
        best: best.1,
    })
}

/// Softplus-type smoothing `(c + sqrt(c^2 + w^2)) / 2` of `max(c, 0)` and its
/// first two derivatives.
fn smooth_max(c: f64, w: f64) -> (f64, f64, f64) {
    let q = (c * c + w * w).sqrt();
    (0.5 * (c + q), 0.5 * (1.0 + c / q), 0.5 * w * w / (q * q * q))
}

/// Objective with every kink smoothed at width `w`.
fn smoothed_objective(prob: &Problem, y: &[f64], w: f64) -> Result<f64> {
    let mut f = prob.objective(y)?;
    let evals = eval_bonds(prob.sys, prob.model, prob.state, y)?;
    for (b, e) in evals.iter().enumerate() {
        if prob.phi[b] > 0.0 && prob.movable[b] {
            let c = e.gap();
            f += prob.phi[b] * (smooth_max(c, w).0 - c.max(0.0));
        }
    }
    Ok(f)
}

/// Damped Newton on a sequence of smoothed objectives with shrinking width.
/// Used when the active-set iteration cannot identify the kinks.
fn smoothed_solve(prob: &Problem, mut y: Vec<f64>, settings: &SolverSettings) -> Result<Vec<f64>> {
    let nbonds = prob.sys.bonds().len();
    let damaged: Vec<usize> = (0..nbonds).filter(|&b| prob.phi[b] > 0.0 && prob.movable[b]).collect();
    let mut sides = vec![Side::Smooth; nbonds];
    for &b in &damaged {
        sides[b] = Side::Active;
    }
    let mut width = 1e-2;
    while width >= 1e-11 {
        let mut f = smoothed_objective(prob, &y, width)?;
        for _ in 0..200 {
            let evals = eval_bonds(prob.sys, prob.model, prob.state, &y)?;
            let triples = eval_triples(prob.sys, prob.model, prob.state, &y)?;
            let mut mu = vec![0.0; nbonds];
            let mut curv = Vec::with_capacity(damaged.len());
            let mut slope = Vec::with_capacity(damaged.len());
            for &b in &damaged {
                let (_, d1, d2) = smooth_max(evals[b].gap(), width);
                mu[b] = prob.phi[b] * d1;
                slope.push(mu[b]);
                curv.push(prob.phi[b] * d2);
            }
            let (mut g, mut h) = prob.assemble(&y, &evals, &triples, &sides, &mu);
            let jac = prob.jacobian(&evals, &damaged);
            g += jac.transpose() * DVector::from_vec(slope);
            h += jac.transpose() * DMatrix::from_diagonal(&DVector::from_vec(curv)) * &jac;
            if g.norm() <= settings.grad_tol.max(0.1 * width) {
                break;
            }
            let mut dir = -shifted_cholesky(&h).solve(&g);
            if g.dot(&dir) >= 0.0 {
                dir = -g.clone();
            }
            let cap = 0.25 * prob.sys.spacing();
            let dmax = dir.amax();
            if dmax > cap {
                dir *= cap / dmax;
            }
            let slope = g.dot(&dir);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-12 {
                let cand = prob.with_free(&y, &dir, alpha);
                if let Ok(fc) = smoothed_objective(prob, &cand, width) {
                    if fc <= f + settings.ls_c1 * alpha * slope {
                        y = cand;
                        f = fc;
                        moved = true;
                        break;
                    }
                }
                alpha *= settings.ls_shrink;
            }
            if !moved {
                break;
            }
        }
        log::trace!("smoothed solve at width {width:.1e}: objective {f:.15e}");
        width *= 0.1;
    }
    Ok(y)
}

/// Looks for a direction of negative curvature tangent to the active kinks
/// and returns a point of lower objective along it, if any.
#[allow(clippy::too_many_arguments)]
fn escape_saddle(
    prob: &Problem,
    y: &[f64],
    f: f64,
    evals: &[BondEval],
    triples: &[TripleEval],
    sides: &[Side],
    mu: &[f64],
    active: &[usize],
) -> Result<Option<Vec<f64>>> {
    let (_, h) = prob.assemble(y, evals, triples, sides, mu);
    let m = prob.m;
    let h = if active.is_empty() {
        h
    } else {
        let j = prob.jacobian(evals, active);
        let mut jjt = &j * j.transpose();
        let tr = (0..jjt.nrows()).map(|i| jjt[(i, i)]).fold(0.0, f64::max);
        for i in 0..jjt.nrows() {
            jjt[(i, i)] += 1e-12 * tr + 1e-300;
        }
        let Some(ch) = jjt.cholesky() else {
            return Ok(None);
        };
        let p = DMatrix::<f64>::identity(m, m) - j.transpose() * ch.solve(&j);
        &p * h * &p
    };
    let scale = (0..m).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let eig = SymmetricEigen::new(h);
    let (idx, lambda) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if !(lambda < -1e-8 * scale) {
        return Ok(None);
    }
    let v = eig.eigenvectors.column(idx).into_owned();
    let mut t = 0.1 * prob.sys.spacing() / v.amax();
    let noise = 1e-12 * (1.0 + f.abs());
    for _ in 0..40 {
        let mut bestc: Option<(f64, Vec<f64>)> = None;
        for sign in [1.0, -1.0] {
            let cand = prob.with_free(y, &v, sign * t);
            if let Ok(fc) = prob.objective(&cand) {
                if fc < f - noise && fc < f - 1e-3 * lambda.abs() * t * t && bestc.as_ref().map_or(true, |b| fc < b.0) {
                    bestc = Some((fc, cand));
                }
            }
        }
        if let Some((_, cand)) = bestc {
            log::debug!("left a saddle with curvature {lambda:.3e}");
            return Ok(Some(cand));
        }
        t *= 0.5;
    }
    Ok(None)
}
