//! Reference configurations: atom positions, interacting pairs and triples,
//! and the Dirichlet (clamped or driven) atom set.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Index of an atom, stable over a run.
pub type AtomId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondKind {
    Nearest,
    NextNearest,
}

impl BondKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BondKind::Nearest => "nn",
            BondKind::NextNearest => "nnn",
        }
    }
}

/// An interacting pair, stored once per unordered pair with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub a: AtomId,
    pub b: AtomId,
    pub rest_length: f64,
    pub kind: BondKind,
}

/// Angle `outer1 - center - outer2`. Both arms are nearest-neighbour bonds,
/// referenced by index into [`LatticeSystem::bonds`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub outer1: AtomId,
    pub center: AtomId,
    pub outer2: AtomId,
    pub arm1: usize,
    pub arm2: usize,
    /// Angle in the reference configuration.
    pub rest_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirichletSpec {
    /// Both chain ends clamped; the right end is the driven one.
    BothEnds,
    /// Only the left chain end clamped, nothing driven.
    LeftEnd,
    /// Left-most and right-most atom columns; the right column is driven.
    LeftRightColumns,
}

#[derive(Debug, Clone)]
pub struct LatticeSystem {
    dimension: usize,
    ambient_dim: usize,
    spacing: f64,
    positions: Vec<f64>,
    bonds: Vec<Bond>,
    triples: Vec<Triple>,
    triangles: Vec<[AtomId; 3]>,
    dirichlet: Vec<AtomId>,
    driven: Vec<AtomId>,
    free_index: Vec<Option<usize>>,
    free_atoms: Vec<AtomId>,
}

/// Chain of `count` atoms at `x_i = i * spacing`, `i = 1..=count`.
pub fn build_chain(count: usize, spacing: f64, dirichlet: DirichletSpec) -> Result<LatticeSystem> {
    if count < 2 {
        return Err(Error::config(format!("chain needs at least 2 atoms, got {count}")));
    }
    check_spacing(spacing)?;
    let positions: Vec<f64> = (1..=count).map(|i| i as f64 * spacing).collect();
    let bonds = (0..count - 1)
        .map(|i| Bond {
            a: i,
            b: i + 1,
            rest_length: spacing,
            kind: BondKind::Nearest,
        })
        .collect();
    let (clamped, driven) = match dirichlet {
        DirichletSpec::BothEnds => (vec![0, count - 1], vec![count - 1]),
        DirichletSpec::LeftEnd => (vec![0], vec![]),
        DirichletSpec::LeftRightColumns => {
            return Err(Error::config("left_right_columns applies to 2D lattices only"))
        }
    };
    LatticeSystem::assemble(1, 1, spacing, positions, bonds, Vec::new(), clamped, driven)
}

/// Parallelogram patch of the triangular lattice `spacing * A Z^2`,
/// `A = [[1, 1/2], [0, sqrt(3)/2]]`, with `cols` atoms along `e1` and `rows`
/// along `e2`. Atom `(i, j)` has id `j * cols + i`.
pub fn build_triangular(
    rows: usize,
    cols: usize,
    spacing: f64,
    include_nnn: bool,
    dirichlet: DirichletSpec,
) -> Result<LatticeSystem> {
    if rows < 2 || cols < 2 {
        return Err(Error::config(format!(
            "triangular patch needs rows, cols >= 2, got {rows}x{cols}"
        )));
    }
    check_spacing(spacing)?;
    if dirichlet != DirichletSpec::LeftRightColumns {
        return Err(Error::config("triangular lattices use left_right_columns"));
    }
    let h = 3f64.sqrt() / 2.0;
    let id = |i: usize, j: usize| j * cols + i;
    let mut positions = Vec::with_capacity(2 * rows * cols);
    for j in 0..rows {
        for i in 0..cols {
            positions.push(spacing * (i as f64 + 0.5 * j as f64));
            positions.push(spacing * h * j as f64);
        }
    }

    let mut bonds = Vec::new();
    let mut neighbours: Vec<BTreeSet<AtomId>> = vec![BTreeSet::new(); rows * cols];
    for j in 0..rows {
        for i in 0..cols {
            let here = id(i, j);
            let mut candidates = Vec::with_capacity(3);
            if i + 1 < cols {
                candidates.push(id(i + 1, j));
            }
            if j + 1 < rows {
                candidates.push(id(i, j + 1));
                if i >= 1 {
                    candidates.push(id(i - 1, j + 1));
                }
            }
            for other in candidates {
                neighbours[here].insert(other);
                neighbours[other].insert(here);
                bonds.push(Bond {
                    a: here.min(other),
                    b: here.max(other),
                    rest_length: spacing,
                    kind: BondKind::Nearest,
                });
            }
        }
    }

    if include_nnn {
        // Opposite vertices of two triangles sharing an edge: distance sqrt(3)
        // and exactly two common nearest neighbours.
        let target = 3f64.sqrt() * spacing;
        let mut seen = BTreeSet::new();
        for u in 0..rows * cols {
            for &m in &neighbours[u] {
                for &v in &neighbours[m] {
                    if v <= u || seen.contains(&(u, v)) {
                        continue;
                    }
                    let d = distance(&positions, 2, u, v);
                    if (d - target).abs() > 1e-9 * spacing {
                        continue;
                    }
                    let common = neighbours[u].intersection(&neighbours[v]).count();
                    if common == 2 {
                        seen.insert((u, v));
                    }
                }
            }
        }
        bonds.extend(seen.into_iter().map(|(a, b)| Bond {
            a,
            b,
            rest_length: target,
            kind: BondKind::NextNearest,
        }));
    }

    let mut triangles = Vec::new();
    for j in 0..rows - 1 {
        for i in 0..cols - 1 {
            triangles.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
            triangles.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }

    let mut clamped = Vec::new();
    let mut driven = Vec::new();
    for j in 0..rows {
        clamped.push(id(0, j));
        driven.push(id(cols - 1, j));
    }
    clamped.extend(driven.iter().copied());
    let mut sys = LatticeSystem::assemble(2, 2, spacing, positions, bonds, triangles, clamped, driven)?;
    sys.enumerate_triples();
    Ok(sys)
}

fn check_spacing(spacing: f64) -> Result<()> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::config(format!("spacing must be positive, got {spacing}")));
    }
    Ok(())
}

fn distance(positions: &[f64], n: usize, a: AtomId, b: AtomId) -> f64 {
    (0..n)
        .map(|k| (positions[a * n + k] - positions[b * n + k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl LatticeSystem {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        dimension: usize,
        ambient_dim: usize,
        spacing: f64,
        positions: Vec<f64>,
        mut bonds: Vec<Bond>,
        triangles: Vec<[AtomId; 3]>,
        mut dirichlet: Vec<AtomId>,
        mut driven: Vec<AtomId>,
    ) -> Result<Self> {
        let count = positions.len() / ambient_dim;
        dirichlet.sort_unstable();
        dirichlet.dedup();
        driven.sort_unstable();
        driven.dedup();
        if dirichlet.is_empty() {
            return Err(Error::config("dirichlet set must be nonempty"));
        }
        bonds.sort_by(|x, y| (x.kind, x.a, x.b).cmp(&(y.kind, y.a, y.b)));
        for bond in &bonds {
            if bond.a == bond.b || bond.a >= count || bond.b >= count {
                return Err(Error::config(format!("bad bond {:?}", bond)));
            }
        }
        let mut free_index = vec![None; count];
        let mut free_atoms = Vec::new();
        for (atom, slot) in free_index.iter_mut().enumerate() {
            if dirichlet.binary_search(&atom).is_err() {
                *slot = Some(free_atoms.len());
                free_atoms.push(atom);
            }
        }
        Ok(LatticeSystem {
            dimension,
            ambient_dim,
            spacing,
            positions,
            bonds,
            triples: Vec::new(),
            triangles,
            dirichlet,
            driven,
            free_index,
            free_atoms,
        })
    }

    /// Adds every angle whose two arms are nearest-neighbour bonds sharing a
    /// center atom. Replaces any existing triples.
    pub fn enumerate_triples(&mut self) {
        let count = self.num_atoms();
        let mut arms: Vec<Vec<(AtomId, usize)>> = vec![Vec::new(); count];
        for (idx, bond) in self.bonds.iter().enumerate() {
            if bond.kind == BondKind::Nearest {
                arms[bond.a].push((bond.b, idx));
                arms[bond.b].push((bond.a, idx));
            }
        }
        let n = self.ambient_dim;
        let mut triples = Vec::new();
        for (center, list) in arms.iter().enumerate() {
            for p in 0..list.len() {
                for q in p + 1..list.len() {
                    let (o1, arm1) = list[p];
                    let (o2, arm2) = list[q];
                    let u = self.reference_difference(o1, center);
                    let v = self.reference_difference(o2, center);
                    let dot: f64 = (0..n).map(|k| u[k] * v[k]).sum();
                    let cos = dot / (self.spacing * self.spacing);
                    triples.push(Triple {
                        outer1: o1,
                        center,
                        outer2: o2,
                        arm1,
                        arm2,
                        rest_angle: cos.clamp(-1.0, 1.0).acos(),
                    });
                }
            }
        }
        self.triples = triples;
    }

    fn reference_difference(&self, a: AtomId, b: AtomId) -> [f64; 2] {
        let n = self.ambient_dim;
        let mut out = [0.0; 2];
        for k in 0..n {
            out[k] = self.positions[a * n + k] - self.positions[b * n + k];
        }
        out
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Dimension `n` of the deformed positions.
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn num_atoms(&self) -> usize {
        self.positions.len() / self.ambient_dim
    }

    pub fn num_free(&self) -> usize {
        self.free_atoms.len()
    }

    /// Reference coordinates, `n` entries per atom.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, atom: AtomId) -> &[f64] {
        let n = self.ambient_dim;
        &self.positions[atom * n..(atom + 1) * n]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Counter-clockwise reference triangles (2D lattices only).
    pub fn triangles(&self) -> &[[AtomId; 3]] {
        &self.triangles
    }

    pub fn dirichlet(&self) -> &[AtomId] {
        &self.dirichlet
    }

    /// Default moving subset of the Dirichlet set.
    pub fn driven(&self) -> &[AtomId] {
        &self.driven
    }

    pub fn free_atoms(&self) -> &[AtomId] {
        &self.free_atoms
    }

    pub fn is_dirichlet(&self, atom: AtomId) -> bool {
        self.free_index[atom].is_none()
    }

    /// Position of `atom` in the free-variable vector, `None` for Dirichlet atoms.
    pub fn free_index(&self, atom: AtomId) -> Option<usize> {
        self.free_index[atom]
    }

    /// Length of the full deformation vector `N * n`.
    pub fn full_len(&self) -> usize {
        self.positions.len()
    }

    /// Length of the free-variable vector `N_free * n`.
    pub fn free_len(&self) -> usize {
        self.free_atoms.len() * self.ambient_dim
    }

    /// Copies the free slots of a full vector into a new free-variable vector.
    pub fn restrict_to_free(&self, full: &[f64]) -> Vec<f64> {
        let n = self.ambient_dim;
        let mut out = Vec::with_capacity(self.free_len());
        for &atom in &self.free_atoms {
            out.extend_from_slice(&full[atom * n..(atom + 1) * n]);
        }
        out
    }

    /// Writes a free-variable vector into the free slots of `full`.
    pub fn scatter_free(&self, free: &[f64], full: &mut [f64]) {
        let n = self.ambient_dim;
        for (slot, &atom) in self.free_atoms.iter().enumerate() {
            full[atom * n..(atom + 1) * n].copy_from_slice(&free[slot * n..(slot + 1) * n]);
        }
    }

    /// Atoms adjacent to `atom` through nearest-neighbour bonds.
    pub fn nearest_neighbours(&self, atom: AtomId) -> Vec<AtomId> {
        self.bonds
            .iter()
            .filter(|b| b.kind == BondKind::Nearest && (b.a == atom || b.b == atom))
            .map(|b| if b.a == atom { b.b } else { b.a })
            .collect()
    }

    /// Reference midpoint of a bond.
    pub fn bond_midpoint(&self, bond: &Bond) -> [f64; 2] {
        let pa = self.position(bond.a);
        let pb = self.position(bond.b);
        let mut out = [0.0; 2];
        for k in 0..self.ambient_dim {
            out[k] = 0.5 * (pa[k] + pb[k]);
        }
        out
    }
}
