//! History-dependent bond energy.
//!
//! Every bond carries a memory variable `M`, the largest separation it has
//! ever reached (floored at its rest length). A transition function `phi`
//! maps `M` to a damage fraction in `[0, 1]`, and the bond energy is
//!
//! ```text
//! E(r; M) = (1 - phi(M)) W(r) + phi(M) max(W(r), W(M))
//! ```
//!
//! A fully damaged bond therefore no longer pulls back below its maximal
//! opening but still repels at short range. Three-body terms are switched
//! off by the damage of either arm.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{BondKind, LatticeSystem};
use crate::potentials::{PairPotential, TriplePotential};

/// Bond lists longer than this are evaluated on the rayon pool.
const PARALLEL_BONDS: usize = 4096;

/// Piecewise-linear ramp: 0 up to `r1`, 1 from `r2` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionFunction {
    r1: f64,
    r2: f64,
}

impl TransitionFunction {
    pub fn new(r1: f64, r2: f64) -> Result<Self> {
        if !(r1.is_finite() && r2.is_finite() && r1 > 0.0) {
            return Err(Error::config(format!("thresholds must be positive and finite ({r1}, {r2})")));
        }
        if r2 <= r1 {
            return Err(Error::config(format!("need r2 > r1, got r1 = {r1}, r2 = {r2}")));
        }
        Ok(TransitionFunction { r1, r2 })
    }

    /// Like [`TransitionFunction::new`], but `r2 == r1` is widened to
    /// `r1 + delta` so the ramp stays continuous.
    pub fn with_min_width(r1: f64, r2: f64, delta: f64) -> Result<Self> {
        if r2 < r1 {
            return Err(Error::config(format!("need r2 >= r1, got r1 = {r1}, r2 = {r2}")));
        }
        if !(delta > 0.0) {
            return Err(Error::config(format!("ramp width must be positive, got {delta}")));
        }
        Self::new(r1, r2.max(r1 + delta))
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    /// Thresholds multiplied by `factor`, for bonds with a longer rest length.
    pub fn scaled(&self, factor: f64) -> Self {
        TransitionFunction {
            r1: self.r1 * factor,
            r2: self.r2 * factor,
        }
    }

    #[inline]
    pub fn evaluate(&self, m: f64) -> f64 {
        if m <= self.r1 {
            0.0
        } else if m >= self.r2 {
            1.0
        } else {
            (m - self.r1) / (self.r2 - self.r1)
        }
    }
}

pub fn evaluate_phi(phi: &TransitionFunction, m: f64) -> f64 {
    phi.evaluate(m)
}

/// Potentials and transition functions for every bond kind.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub nearest: PairPotential,
    pub next_nearest: Option<PairPotential>,
    pub transition: TransitionFunction,
    pub triple: Option<TriplePotential>,
}

impl EnergyModel {
    /// Standard model for spacing `eps`: nearest pairs use `W`, next-nearest
    /// pairs `eta * W(r / sqrt(3))`. The thresholds in `transition` refer to
    /// nearest pairs; next-nearest pairs use them scaled by `sqrt(3)`.
    pub fn lennard_jones(
        eps: f64,
        eta: Option<f64>,
        transition: TransitionFunction,
        triple: Option<TriplePotential>,
    ) -> Result<Self> {
        let next_nearest = eta.map(|e| PairPotential::next_nearest(eps, e)).transpose()?;
        Ok(EnergyModel {
            nearest: PairPotential::nearest(eps)?,
            next_nearest,
            transition,
            triple,
        })
    }

    pub fn pair(&self, kind: BondKind) -> &PairPotential {
        match kind {
            BondKind::Nearest => &self.nearest,
            BondKind::NextNearest => self
                .next_nearest
                .as_ref()
                .expect("next-nearest bonds require a next-nearest potential"),
        }
    }

    pub fn transition_for(&self, kind: BondKind) -> TransitionFunction {
        match kind {
            BondKind::Nearest => self.transition,
            BondKind::NextNearest => {
                let ratio = self.pair(kind).rest_length() / self.nearest.rest_length();
                self.transition.scaled(ratio)
            }
        }
    }

    /// Checks that the model covers every bond of `sys` and that every
    /// elastic threshold lies beyond the bond's rest length.
    pub fn check(&self, sys: &LatticeSystem) -> Result<()> {
        for kind in [BondKind::Nearest, BondKind::NextNearest] {
            let Some(bond) = sys.bonds().iter().find(|b| b.kind == kind) else {
                continue;
            };
            if kind == BondKind::NextNearest && self.next_nearest.is_none() {
                return Err(Error::config("lattice has next-nearest bonds but no next-nearest potential"));
            }
            let pot = self.pair(kind);
            if (pot.rest_length() - bond.rest_length).abs() > 1e-12 * bond.rest_length {
                return Err(Error::config(format!(
                    "{} potential rest length {} does not match lattice {}",
                    kind.as_str(),
                    pot.rest_length(),
                    bond.rest_length
                )));
            }
            if self.transition_for(kind).r1() <= bond.rest_length {
                return Err(Error::config(format!(
                    "elastic threshold must exceed the {} rest length",
                    kind.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Flat deformation vector, `n` coordinates per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation(Vec<f64>);

impl Deformation {
    pub fn new(coords: Vec<f64>) -> Self {
        Deformation(coords)
    }

    /// The identity deformation `y(x) = x`.
    pub fn reference(sys: &LatticeSystem) -> Self {
        Deformation(sys.positions().to_vec())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Deformation {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Deformation {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Per-bond maximal opening.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageState {
    memory: Vec<f64>,
}

impl DamageState {
    /// Undamaged history: every memory equals its rest length.
    pub fn fresh(sys: &LatticeSystem) -> Self {
        DamageState {
            memory: sys.bonds().iter().map(|b| b.rest_length).collect(),
        }
    }

    /// History consisting of the single configuration `y`.
    pub fn from_deformation(sys: &LatticeSystem, y: &[f64]) -> Result<Self> {
        Self::fresh(sys).update_memory(sys, y)
    }

    pub fn from_memory(sys: &LatticeSystem, memory: Vec<f64>) -> Result<Self> {
        if memory.len() != sys.bonds().len() {
            return Err(Error::config("memory length does not match bond count"));
        }
        for (m, bond) in memory.iter().zip(sys.bonds()) {
            if !(m.is_finite() && *m >= bond.rest_length) {
                return Err(Error::config(format!("memory {m} below rest length {}", bond.rest_length)));
            }
        }
        Ok(DamageState { memory })
    }

    pub fn memory(&self) -> &[f64] {
        &self.memory
    }

    /// `M <- max(M, |y(a) - y(b)|)` for every bond.
    pub fn update_memory(&self, sys: &LatticeSystem, y: &[f64]) -> Result<Self> {
        let n = sys.ambient_dim();
        let mut memory = self.memory.clone();
        for (m, bond) in memory.iter_mut().zip(sys.bonds()) {
            let r = separation(y, n, bond.a, bond.b);
            if !r.is_finite() {
                return Err(Error::numerical(format!("non-finite separation on bond {}-{}", bond.a, bond.b)));
            }
            *m = m.max(r);
        }
        Ok(DamageState { memory })
    }

    /// Damage fraction `phi(M)` of every bond.
    pub fn phi_values(&self, sys: &LatticeSystem, model: &EnergyModel) -> Vec<f64> {
        sys.bonds()
            .iter()
            .zip(&self.memory)
            .map(|(b, &m)| model.transition_for(b.kind).evaluate(m))
            .collect()
    }

    /// Indices of bonds with `phi(M) = 1`.
    pub fn broken_bonds(&self, sys: &LatticeSystem, model: &EnergyModel) -> Vec<usize> {
        self.phi_values(sys, model)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[inline]
pub(crate) fn separation(y: &[f64], n: usize, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..n {
        let d = y[a * n + k] - y[b * n + k];
        s += d * d;
    }
    s.sqrt()
}

/// Which branch of the max is active for a bond.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `phi(M) = 0`: plain pair interaction.
    Elastic,
    /// `W(r) > W(M)`.
    Upper,
    /// `W(r) < W(M)`.
    Lower,
    /// `|W(r) - W(M)| <= tie_tol`, subdifferential is an interval.
    Tie,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Elastic => "elastic",
            Branch::Upper => "upper",
            Branch::Lower => "lower",
            Branch::Tie => "tie",
        }
    }
}

/// Everything a bond contributes at one configuration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BondEval {
    pub r: f64,
    /// `(y(a) - y(b)) / r`; only the first `n` entries are used.
    pub unit: [f64; 2],
    pub w: f64,
    pub dw: f64,
    pub d2w: f64,
    pub phi: f64,
    pub w_mem: f64,
}

impl BondEval {
    #[inline]
    pub fn energy(&self) -> f64 {
        if self.phi == 0.0 {
            self.w
        } else {
            (1.0 - self.phi) * self.w + self.phi * self.w.max(self.w_mem)
        }
    }

    /// `W(r) - W(M)`; the kink sits at zero.
    #[inline]
    pub fn gap(&self) -> f64 {
        self.w - self.w_mem
    }

    pub fn branch(&self, tie_tol: f64) -> Branch {
        let gap = self.gap();
        if self.phi == 0.0 {
            Branch::Elastic
        } else if gap.abs() <= tie_tol {
            Branch::Tie
        } else if gap > 0.0 {
            Branch::Upper
        } else {
            Branch::Lower
        }
    }

    /// Factor multiplying `W'(r) z` in the minimal-norm subgradient.
    #[inline]
    pub fn min_norm_factor(&self, tie_tol: f64) -> f64 {
        match self.branch(tie_tol) {
            Branch::Elastic | Branch::Upper => 1.0,
            Branch::Lower | Branch::Tie => 1.0 - self.phi,
        }
    }
}

pub(crate) fn eval_bond(
    model: &EnergyModel,
    kind: BondKind,
    memory: f64,
    y: &[f64],
    n: usize,
    a: usize,
    b: usize,
) -> Result<BondEval> {
    let mut unit = [0.0; 2];
    let mut r2 = 0.0;
    for k in 0..n {
        unit[k] = y[a * n + k] - y[b * n + k];
        r2 += unit[k] * unit[k];
    }
    let r = r2.sqrt();
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::numerical(format!("atoms {a} and {b} coincide or diverged (r = {r})")));
    }
    for u in unit.iter_mut().take(n) {
        *u /= r;
    }
    let pot = model.pair(kind);
    let phi = model.transition_for(kind).evaluate(memory);
    Ok(BondEval {
        r,
        unit,
        w: pot.w(r),
        dw: pot.dw(r),
        d2w: pot.d2w(r),
        phi,
        w_mem: pot.w(memory),
    })
}

pub(crate) fn eval_bonds(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
) -> Result<Vec<BondEval>> {
    let n = sys.ambient_dim();
    let one = |(bond, &m): (&crate::lattice::Bond, &f64)| eval_bond(model, bond.kind, m, y, n, bond.a, bond.b);
    if sys.bonds().len() >= PARALLEL_BONDS {
        sys.bonds()
            .par_iter()
            .zip(state.memory.par_iter())
            .map(one)
            .collect()
    } else {
        sys.bonds().iter().zip(&state.memory).map(one).collect()
    }
}

/// Angle term data: `u = y(outer1) - y(center)`, `v = y(outer2) - y(center)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TripleEval {
    pub cos: f64,
    pub u_hat: [f64; 2],
    pub v_hat: [f64; 2],
    pub u_len: f64,
    pub v_len: f64,
    pub rest_cos: f64,
    /// `1 - max(phi(arm1), phi(arm2))`.
    pub factor: f64,
}

impl TripleEval {
    pub fn energy(&self, pot: &TriplePotential) -> f64 {
        self.factor * pot.of_cos(self.cos, self.rest_cos)
    }

    /// Gradients of `cos(theta)` with respect to `u` and `v`.
    pub fn cos_gradients(&self, n: usize) -> ([f64; 2], [f64; 2]) {
        let mut gu = [0.0; 2];
        let mut gv = [0.0; 2];
        for k in 0..n {
            gu[k] = (self.v_hat[k] - self.cos * self.u_hat[k]) / self.u_len;
            gv[k] = (self.u_hat[k] - self.cos * self.v_hat[k]) / self.v_len;
        }
        (gu, gv)
    }
}

pub(crate) fn eval_triples(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
) -> Result<Vec<TripleEval>> {
    let Some(pot) = model.triple.as_ref() else {
        return Ok(Vec::new());
    };
    let n = sys.ambient_dim();
    let bonds = sys.bonds();
    sys.triples()
        .iter()
        .map(|t| {
            let mut u = [0.0; 2];
            let mut v = [0.0; 2];
            for k in 0..n {
                u[k] = y[t.outer1 * n + k] - y[t.center * n + k];
                v[k] = y[t.outer2 * n + k] - y[t.center * n + k];
            }
            let u_len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v_len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(u_len > 0.0 && v_len > 0.0) {
                return Err(Error::numerical(format!("degenerate angle at atom {}", t.center)));
            }
            let mut u_hat = [0.0; 2];
            let mut v_hat = [0.0; 2];
            for k in 0..n {
                u_hat[k] = u[k] / u_len;
                v_hat[k] = v[k] / v_len;
            }
            let cos = (0..n).map(|k| u_hat[k] * v_hat[k]).sum::<f64>().clamp(-1.0, 1.0);
            let phi1 = model.transition_for(bonds[t.arm1].kind).evaluate(state.memory[t.arm1]);
            let phi2 = model.transition_for(bonds[t.arm2].kind).evaluate(state.memory[t.arm2]);
            Ok(TripleEval {
                cos,
                u_hat,
                v_hat,
                u_len,
                v_len,
                rest_cos: pot.rest_cos(t.rest_angle),
                factor: 1.0 - phi1.max(phi2),
            })
        })
        .collect()
}

/// Energy of one bond with memory `m` at separation `r`.
pub fn bond_energy(p: &PairPotential, phi: &TransitionFunction, m: f64, r: f64) -> Result<f64> {
    let w = p.value(r)?;
    if m < p.rest_length() {
        return Err(Error::domain(format!("memory {m} below rest length {}", p.rest_length())));
    }
    let f = phi.evaluate(m);
    if f == 0.0 {
        Ok(w)
    } else {
        Ok((1.0 - f) * w + f * w.max(p.w(m)))
    }
}

/// Pairwise part of the energy, summed in bond order.
pub fn pair_energy(sys: &LatticeSystem, model: &EnergyModel, state: &DamageState, y: &[f64]) -> Result<f64> {
    Ok(eval_bonds(sys, model, state, y)?.iter().map(BondEval::energy).sum())
}

/// Sum of the absolute pair energies, the natural scale for roundoff in
/// [`pair_energy`].
pub fn pair_energy_scale(sys: &LatticeSystem, model: &EnergyModel, state: &DamageState, y: &[f64]) -> Result<f64> {
    Ok(eval_bonds(sys, model, state, y)?.iter().map(|e| e.energy().abs()).sum())
}

/// Total energy: all pair terms plus the damage-gated three-body terms.
pub fn total_energy(sys: &LatticeSystem, model: &EnergyModel, state: &DamageState, y: &[f64]) -> Result<f64> {
    let mut total = pair_energy(sys, model, state, y)?;
    if let Some(pot) = model.triple.as_ref() {
        total += eval_triples(sys, model, state, y)?
            .iter()
            .map(|t| t.energy(pot))
            .sum::<f64>();
    }
    Ok(total)
}

/// Minimal-norm element of the subdifferential, restricted to free atoms.
#[derive(Debug, Clone)]
pub struct Subgradient {
    pub min_norm: Vec<f64>,
    /// Bonds with `|W(M) - W(r)| <= tie_tol`.
    pub tie_bonds: Vec<usize>,
}

/// Adds `coef * W'(r) z` of one bond into a full-length vector.
#[inline]
fn scatter_bond(out: &mut [f64], n: usize, a: usize, b: usize, unit: &[f64; 2], scale: f64) {
    for k in 0..n {
        out[a * n + k] += scale * unit[k];
        out[b * n + k] -= scale * unit[k];
    }
}

pub(crate) fn scatter_triples(
    sys: &LatticeSystem,
    pot: &TriplePotential,
    evals: &[TripleEval],
    out: &mut [f64],
) {
    let n = sys.ambient_dim();
    for (t, e) in sys.triples().iter().zip(evals) {
        if e.factor == 0.0 {
            continue;
        }
        let coef = e.factor * pot.d_of_cos(e.cos, e.rest_cos);
        let (gu, gv) = e.cos_gradients(n);
        for k in 0..n {
            out[t.outer1 * n + k] += coef * gu[k];
            out[t.outer2 * n + k] += coef * gv[k];
            out[t.center * n + k] -= coef * (gu[k] + gv[k]);
        }
    }
}

/// Minimal-norm subgradient over every slot, Dirichlet atoms included.
pub fn min_norm_gradient_full(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    tie_tol: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = sys.ambient_dim();
    let evals = eval_bonds(sys, model, state, y)?;
    let mut out = vec![0.0; sys.full_len()];
    let mut ties = Vec::new();
    for (idx, (bond, e)) in sys.bonds().iter().zip(&evals).enumerate() {
        if e.gap().abs() <= tie_tol {
            ties.push(idx);
        }
        let coef = e.min_norm_factor(tie_tol) * e.dw;
        scatter_bond(&mut out, n, bond.a, bond.b, &e.unit, coef);
    }
    if let Some(pot) = model.triple.as_ref() {
        let tri = eval_triples(sys, model, state, y)?;
        scatter_triples(sys, pot, &tri, &mut out);
    }
    Ok((out, ties))
}

pub fn min_norm_subgradient(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    tie_tol: f64,
) -> Result<Subgradient> {
    let (full, tie_bonds) = min_norm_gradient_full(sys, model, state, y, tie_tol)?;
    Ok(Subgradient {
        min_norm: sys.restrict_to_free(&full),
        tie_bonds,
    })
}

/// Best fit of `-target` by an element of the subdifferential.
#[derive(Debug, Clone)]
pub struct InclusionFit {
    /// `target + p` on free slots for the best `p`.
    pub residual: Vec<f64>,
    pub norm: f64,
    pub tie_bonds: Vec<usize>,
    /// Chosen factor in `[1 - phi, 1]` for each tie bond.
    pub tie_factors: Vec<f64>,
}

/// Minimizes `|target + p|` over `p` in the subdifferential of the energy
/// with respect to the free atoms. `target` lives on free slots. Tie bonds
/// contribute `s W'(r) z` with `s` in `[1 - phi, 1]`; the factors are found by
/// projected coordinate descent.
/// Minimizes `|r + A x|^2` over `0 <= x <= width` given `G = A^T A` and
/// `b = A^T r`, by an active-set iteration on the bounds.
fn bounded_least_squares(gram: &DMatrix<f64>, b: &DVector<f64>, width: &[f64]) -> Vec<f64> {
    #[derive(Clone, Copy, PartialEq)]
    enum Bound {
        Free,
        Lo,
        Hi,
    }
    let t = b.len();
    let mut x = vec![0.0; t];
    let mut bound = vec![Bound::Lo; t];
    let scale = (0..t).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let tol = 1e-14 * (1.0 + b.amax());
    for i in 0..t {
        if width[i] <= 0.0 || gram[(i, i)] == 0.0 {
            bound[i] = Bound::Lo;
        }
    }
    let gradient = |x: &[f64]| -> Vec<f64> {
        (0..t).map(|i| b[i] + (0..t).map(|j| gram[(i, j)] * x[j]).sum::<f64>()).collect()
    };
    for _ in 0..(20 * t + 50) {
        let free: Vec<usize> = (0..t).filter(|&i| bound[i] == Bound::Free).collect();
        if !free.is_empty() {
            let k = free.len();
            let mut gff = DMatrix::<f64>::zeros(k, k);
            let mut r = DVector::<f64>::zeros(k);
            for (a, &i) in free.iter().enumerate() {
                r[a] = -b[i];
                for j in 0..t {
                    if bound[j] != Bound::Free {
                        r[a] -= gram[(i, j)] * x[j];
                    }
                }
                for (c, &j) in free.iter().enumerate() {
                    gff[(a, c)] = gram[(i, j)];
                }
                gff[(a, a)] += 1e-14 * scale;
            }
            let target = gff.clone().cholesky().map(|c| c.solve(&r)).or_else(|| gff.lu().solve(&r));
            let Some(target) = target else { break };
            // Move towards the free minimizer, stopping at the first bound.
            let mut alpha = 1.0;
            let mut blocking = None;
            for (a, &i) in free.iter().enumerate() {
                let step = target[a] - x[i];
                let limit = if step < 0.0 {
                    -x[i] / step
                } else if step > 0.0 {
                    (width[i] - x[i]) / step
                } else {
                    continue;
                };
                if limit < alpha {
                    alpha = limit.max(0.0);
                    blocking = Some((i, if step < 0.0 { Bound::Lo } else { Bound::Hi }));
                }
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] = (x[i] + alpha * (target[a] - x[i])).clamp(0.0, width[i]);
            }
            if let Some((i, side)) = blocking {
                x[i] = if side == Bound::Lo { 0.0 } else { width[i] };
                bound[i] = side;
                continue;
            }
        }
        // Free block optimal: release the bound whose gradient points inward most.
        let g = gradient(&x);
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..t {
            if width[i] <= 0.0 || gram[(i, i)] == 0.0 {
                continue;
            }
            let v = match bound[i] {
                Bound::Lo if g[i] < -tol => -g[i],
                Bound::Hi if g[i] > tol => g[i],
                _ => continue,
            };
            if worst.map_or(true, |w| v > w.1) {
                worst = Some((i, v));
            }
        }
        match worst {
            Some((i, _)) => bound[i] = Bound::Free,
            None => break,
        }
    }
    x
}

pub fn closest_subgradient(
    sys: &LatticeSystem,
    model: &EnergyModel,
    state: &DamageState,
    y: &[f64],
    target: &[f64],
    tie_tol: f64,
) -> Result<InclusionFit> {
    let n = sys.ambient_dim();
    let evals = eval_bonds(sys, model, state, y)?;
    let mut full = vec![0.0; sys.full_len()];
    let mut ties = Vec::new();
    for (idx, (bond, e)) in sys.bonds().iter().zip(&evals).enumerate() {
        let branch = e.branch(tie_tol);
        if branch == Branch::Tie {
            ties.push(idx);
        }
        scatter_bond(&mut full, n, bond.a, bond.b, &e.unit, e.min_norm_factor(tie_tol) * e.dw);
    }
    if let Some(pot) = model.triple.as_ref() {
        let tri = eval_triples(sys, model, state, y)?;
        scatter_triples(sys, pot, &tri, &mut full);
    }
    let mut residual = sys.restrict_to_free(&full);
    for (r, t) in residual.iter_mut().zip(target) {
        *r += t;
    }

    // Free-slot footprint of each tie direction W'(r) z.
    struct TieDir {
        slots: Vec<(usize, f64)>,
        lo: f64,
        hi: f64,
    }
    let mut dirs = Vec::with_capacity(ties.len());
    let mut factors = Vec::with_capacity(ties.len());
    for &idx in &ties {
        let bond = &sys.bonds()[idx];
        let e = &evals[idx];
        let mut slots = Vec::with_capacity(2 * n);
        for (atom, sign) in [(bond.a, 1.0), (bond.b, -1.0)] {
            if let Some(f) = sys.free_index(atom) {
                for k in 0..n {
                    slots.push((f * n + k, sign * e.dw * e.unit[k]));
                }
            }
        }
        dirs.push(TieDir {
            slots,
            lo: 1.0 - e.phi,
            hi: 1.0,
        });
        factors.push(1.0 - e.phi);
    }
    if !dirs.is_empty() {
        // Bounded least squares over the tie factors, residual measured from
        // the all-lower-bound start.
        let t = dirs.len();
        let mut gram = DMatrix::<f64>::zeros(t, t);
        let mut rhs = DVector::<f64>::zeros(t);
        let mut owner: std::collections::HashMap<usize, Vec<(usize, f64)>> = std::collections::HashMap::new();
        for (c, d) in dirs.iter().enumerate() {
            rhs[c] = d.slots.iter().map(|&(i, v)| v * residual[i]).sum();
            for &(i, v) in &d.slots {
                owner.entry(i).or_default().push((c, v));
            }
        }
        for list in owner.values() {
            for &(c1, v1) in list {
                for &(c2, v2) in list {
                    gram[(c1, c2)] += v1 * v2;
                }
            }
        }
        let width: Vec<f64> = dirs.iter().map(|d| d.hi - d.lo).collect();
        let delta = bounded_least_squares(&gram, &rhs, &width);
        for ((d, s), dv) in dirs.iter().zip(factors.iter_mut()).zip(delta.iter()) {
            if *dv != 0.0 {
                for &(i, v) in &d.slots {
                    residual[i] += dv * v;
                }
                *s += dv;
            }
        }
    }
    let norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(InclusionFit {
        residual,
        norm,
        tie_bonds: ties,
        tie_factors: factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_chain, build_triangular, DirichletSpec};
    use crate::potentials::RestAngle;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn chain_model(r1: f64, r2: f64) -> EnergyModel {
        EnergyModel::lennard_jones(1.0, None, TransitionFunction::new(r1, r2).unwrap(), None).unwrap()
    }

    #[test]
    fn phi_ramp() {
        let phi = TransitionFunction::new(1.2, 1.6).unwrap();
        assert_eq!(evaluate_phi(&phi, 1.2), 0.0);
        assert_eq!(evaluate_phi(&phi, 1.6), 1.0);
        assert_relative_eq!(evaluate_phi(&phi, 1.4), 0.5, max_relative = 1e-12);
        assert_eq!(evaluate_phi(&phi, 0.0), 0.0);
        assert_eq!(evaluate_phi(&phi, 9.0), 1.0);
        assert!(TransitionFunction::new(1.2, 1.1).is_err());
        assert!(TransitionFunction::with_min_width(1.2, 1.1, 1e-6).is_err());
        let collapsed = TransitionFunction::with_min_width(1.2, 1.2, 1e-6).unwrap();
        assert_eq!(collapsed.r2(), 1.2 + 1e-6);
    }

    #[test]
    fn memory_is_a_running_max() {
        let sys = build_chain(2, 1.0, DirichletSpec::BothEnds).unwrap();
        let state = DamageState::from_memory(&sys, vec![1.0]).unwrap();
        let s = state.update_memory(&sys, &[0.0, 1.5]).unwrap();
        assert_eq!(s.memory(), &[1.5]);
        let state = DamageState::from_memory(&sys, vec![2.0]).unwrap();
        let s = state.update_memory(&sys, &[0.0, 1.1]).unwrap();
        assert_eq!(s.memory(), &[2.0]);
        let s = DamageState::from_deformation(&sys, &[0.0, 0.9]).unwrap();
        assert_eq!(s.memory(), &[1.0]);
        assert!(DamageState::fresh(&sys).update_memory(&sys, &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn bond_energy_branches() {
        let w = PairPotential::nearest(1.0).unwrap();
        let sharp = TransitionFunction::with_min_width(1.2, 1.2, 1e-6).unwrap();
        assert_eq!(bond_energy(&w, &sharp, 1.0, 1.3).unwrap(), w.w(1.3));
        let e = bond_energy(&w, &sharp, 2.0, 1.0).unwrap();
        assert_relative_eq!(e, w.w(2.0), max_relative = 1e-15);
        assert_relative_eq!(e, -0.031006, epsilon = 1e-5);
        let ramp = TransitionFunction::new(1.2, 1.6).unwrap();
        assert_relative_eq!(bond_energy(&w, &ramp, 1.4, 1.4).unwrap(), w.w(1.4), max_relative = 1e-15);
        assert!(bond_energy(&w, &ramp, 1.0, 0.0).is_err());
    }

    #[test]
    fn branch_consistency() {
        let w = PairPotential::nearest(1.0).unwrap();
        let ramp = TransitionFunction::new(1.2, 1.6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let r = rng.gen_range(0.7..3.0);
            let m_elastic = rng.gen_range(1.0..=1.2);
            assert_eq!(bond_energy(&w, &ramp, m_elastic, r).unwrap(), w.w(r));
            let m_broken = rng.gen_range(1.6..4.0);
            assert_eq!(bond_energy(&w, &ramp, m_broken, r).unwrap(), w.w(r).max(w.w(m_broken)));
        }
    }

    #[test]
    fn lambda_convexity_proxy() {
        // Smooth pieces bound the curvature from below; the max only adds
        // convex kinks, so e(r) - lambda/2 r^2 stays convex on the grid.
        let w = PairPotential::nearest(1.0).unwrap();
        let ramp = TransitionFunction::new(1.2, 1.6).unwrap();
        let h = 1e-3;
        let grid: Vec<f64> = (0..4500).map(|i| 0.5 + i as f64 * h).collect();
        for m in [1.0, 1.3, 1.45, 2.0, 3.0] {
            let phi = ramp.evaluate(m);
            let lambda = grid
                .iter()
                .map(|&r| {
                    let upper = w.d2w(r);
                    upper.min((1.0 - phi) * upper)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(lambda < 0.0);
            let f: Vec<f64> = grid
                .iter()
                .map(|&r| bond_energy(&w, &ramp, m, r).unwrap() - 0.5 * lambda * r * r)
                .collect();
            for win in f.windows(3) {
                let second = (win[0] - 2.0 * win[1] + win[2]) / (h * h);
                assert!(second > -1e-3, "m = {m}: second difference {second}");
            }
        }
    }

    #[test]
    fn total_energy_of_rest_chain() {
        let sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::fresh(&sys);
        let e = total_energy(&sys, &model, &state, &Deformation::reference(&sys)).unwrap();
        assert_eq!(e, -2.0);
    }

    #[test]
    fn single_bond_reduces_to_pair_value() {
        let sys = build_chain(2, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::from_memory(&sys, vec![1.1]).unwrap();
        let e = total_energy(&sys, &model, &state, &[1.0, 2.3]).unwrap();
        assert_relative_eq!(e, model.nearest.w(1.3), max_relative = 1e-13);
    }

    #[test]
    fn broken_arms_switch_off_triples() {
        let mut sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        sys.enumerate_triples();
        assert_eq!(sys.triples().len(), 1);
        let tri = TriplePotential::new(1.0, RestAngle::Fixed(std::f64::consts::FRAC_PI_3)).unwrap();
        let base = chain_model(1.2, 1.6);
        let model = EnergyModel {
            triple: Some(tri),
            ..base.clone()
        };
        let y = [1.0, 2.0, 3.0];
        // Straight chain: theta = pi, W3 = (cos pi - cos pi/3)^2 = 2.25.
        let fresh = DamageState::fresh(&sys);
        let with = total_energy(&sys, &model, &fresh, &y).unwrap();
        let without = total_energy(&sys, &base, &fresh, &y).unwrap();
        assert_relative_eq!(with - without, 2.25, max_relative = 1e-14);
        let broken = DamageState::from_memory(&sys, vec![2.0, 2.0]).unwrap();
        let with = total_energy(&sys, &model, &broken, &y).unwrap();
        let without = total_energy(&sys, &base, &broken, &y).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn coincident_atoms_are_an_error() {
        let sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::fresh(&sys);
        assert!(total_energy(&sys, &model, &state, &[1.0, 1.0, 3.0]).is_err());
        assert!(min_norm_subgradient(&sys, &model, &state, &[1.0, 1.0, 3.0], 1e-10).is_err());
    }

    #[test]
    fn fully_damaged_lower_branch_contributes_nothing() {
        let sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::from_memory(&sys, vec![2.0, 1.0]).unwrap();
        // Bond 0 at r = 1.5 < M = 2: W(M) > W(r), factor 1 - phi = 0.
        let y = [1.0, 2.5, 3.5];
        let g = min_norm_subgradient(&sys, &model, &state, &y, 1e-10).unwrap();
        // Only bond 1 (elastic, at rest) acts on atom 1, and W'(1) = 0.
        assert_eq!(g.min_norm, vec![0.0]);
        let y = [1.0, 2.5, 3.6];
        let g = min_norm_subgradient(&sys, &model, &state, &y, 1e-10).unwrap();
        assert_relative_eq!(g.min_norm[0], -model.nearest.dw(1.1), max_relative = 1e-14);
    }

    #[test]
    fn tie_uses_smallest_factor() {
        let sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::from_memory(&sys, vec![1.4, 1.0]).unwrap();
        let y = [1.0, 2.4, 3.4];
        let g = min_norm_subgradient(&sys, &model, &state, &y, 1e-10).unwrap();
        assert!(g.tie_bonds.contains(&0));
        // Atom 1 sees bond 0 (tie, factor 1 - phi = 0.5) and bond 1 (rest).
        let expect = 0.5 * model.nearest.dw(1.4);
        assert_relative_eq!(g.min_norm[0], expect, max_relative = 1e-12);
    }

    fn fd_gradient(sys: &LatticeSystem, model: &EnergyModel, state: &DamageState, y: &[f64]) -> Vec<f64> {
        let n = sys.ambient_dim();
        let mut out = Vec::new();
        let mut probe = y.to_vec();
        for &atom in sys.free_atoms() {
            for k in 0..n {
                let i = atom * n + k;
                let h = 1e-6;
                probe[i] = y[i] + h;
                let up = total_energy(sys, model, state, &probe).unwrap();
                probe[i] = y[i] - h;
                let down = total_energy(sys, model, state, &probe).unwrap();
                probe[i] = y[i];
                out.push((up - down) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let sys = build_triangular(3, 3, 1.0, true, DirichletSpec::LeftRightColumns).unwrap();
        let tri = TriplePotential::new(0.7, RestAngle::Reference).unwrap();
        let model = EnergyModel::lennard_jones(
            1.0,
            Some(0.25),
            TransitionFunction::new(1.1, 1.3).unwrap(),
            Some(tri),
        )
        .unwrap();
        let mut checked = 0;
        while checked < 20 {
            let y: Vec<f64> = sys.positions().iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
            let memory: Vec<f64> = sys
                .bonds()
                .iter()
                .map(|b| b.rest_length * rng.gen_range(1.0..1.4))
                .collect();
            let state = DamageState::from_memory(&sys, memory).unwrap();
            let evals = eval_bonds(&sys, &model, &state, &y).unwrap();
            if evals.iter().any(|e| e.phi > 0.0 && e.gap().abs() < 1e-4) {
                continue;
            }
            let g = min_norm_subgradient(&sys, &model, &state, &y, 1e-10).unwrap();
            let fd = fd_gradient(&sys, &model, &state, &y);
            let diff = g.min_norm.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.min_norm.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff <= 1e-5 * scale, "diff {diff} scale {scale}");
            checked += 1;
        }
    }

    #[test]
    fn closest_subgradient_absorbs_target_in_tie_interval() {
        let sys = build_chain(3, 1.0, DirichletSpec::BothEnds).unwrap();
        let model = chain_model(1.2, 1.6);
        let state = DamageState::from_memory(&sys, vec![1.4, 1.0]).unwrap();
        let y = [1.0, 2.4, 3.4];
        let dw = model.nearest.dw(1.4);
        // Subgradient on atom 1 is s * W'(1.4) with s in [0.5, 1].
        for s in [0.5, 0.7, 1.0] {
            let fit = closest_subgradient(&sys, &model, &state, &y, &[-s * dw], 1e-10).unwrap();
            assert!(fit.norm < 1e-12, "s = {s}: {}", fit.norm);
        }
        let fit = closest_subgradient(&sys, &model, &state, &y, &[-1.2 * dw], 1e-10).unwrap();
        assert_relative_eq!(fit.norm, 0.2 * dw, max_relative = 1e-9);
    }
}
