//! Internal coordinates: spanning-tree Z-matrix definition, Cartesian ↔
//! (centroid, orientation, internals) conversion, and the Jacobians that
//! relate internal and Cartesian velocities.
//!
//! A conformer `X` is written as `X = c + R(q) (P(z) - mean P(z))`, where
//! `P(z)` places the atoms in the canonical frame: first Z-matrix atom at the
//! origin, second on `+x`, third in the `xy` half-plane with `y > 0`.

mod graph;
mod jacobian;
mod nerf;
pub(crate) mod scalar;

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use graph::{Atom, Bond, BondOrder, Chirality, Hybridization, MolecularGraph};
pub use jacobian::{jacobian, jacobian_at, measurement_gradient};
pub use nerf::{canonical_positions, compose};

use crate::error::{Error, Result};
use crate::so3::UnitQuat;

/// Cartesian coordinates in Å, one row per atom.
pub type Conformer = Vec<Vector3<f64>>;

/// Lower/upper clamp band applied to measured bond angles.
pub const ANGLE_CLAMP: f64 = 1e-6;

/// Principal value of an angle in `(-π, π]`.
pub fn wrap_angle(d: f64) -> f64 {
    if d > -PI && d <= PI {
        return d;
    }
    let w = (d + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// One Z-matrix row. `atom` is placed from `parent` (bond), `grandparent`
/// (angle) and `great_grandparent` (dihedral); absent references mean the row
/// carries fewer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZEntry {
    pub atom: usize,
    pub parent: Option<usize>,
    pub grandparent: Option<usize>,
    pub great_grandparent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    Bond,
    Angle,
    Dihedral,
}

/// One internal coordinate with the atoms defining it, listed from the
/// placed atom outwards: `[atom, parent, grandparent, great_grandparent]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub kind: CoordKind,
    pub atoms: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZMatrixSpec {
    pub root: usize,
    pub entries: Vec<ZEntry>,
}

impl ZMatrixSpec {
    pub fn num_atoms(&self) -> usize {
        self.entries.len()
    }

    pub fn n_r(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn n_theta(&self) -> usize {
        self.entries.len().saturating_sub(2)
    }

    pub fn n_phi(&self) -> usize {
        self.entries.len().saturating_sub(3)
    }

    /// Total number of internal coordinates `m`.
    pub fn dim(&self) -> usize {
        self.n_r() + self.n_theta() + self.n_phi()
    }

    /// Coordinates in flat order: all bonds, then angles, then dihedrals.
    pub fn coordinates(&self) -> Vec<Coordinate> {
        let mut out = Vec::with_capacity(self.dim());
        for e in self.entries.iter().skip(1) {
            out.push(Coordinate {
                kind: CoordKind::Bond,
                atoms: [e.atom, e.parent.unwrap(), usize::MAX, usize::MAX],
            });
        }
        for e in self.entries.iter().skip(2) {
            out.push(Coordinate {
                kind: CoordKind::Angle,
                atoms: [e.atom, e.parent.unwrap(), e.grandparent.unwrap(), usize::MAX],
            });
        }
        for e in self.entries.iter().skip(3) {
            out.push(Coordinate {
                kind: CoordKind::Dihedral,
                atoms: [
                    e.atom,
                    e.parent.unwrap(),
                    e.grandparent.unwrap(),
                    e.great_grandparent.unwrap(),
                ],
            });
        }
        out
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`, keeping the row
    /// order (and therefore the coordinate order) unchanged.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let map = |a: Option<usize>| a.map(|i| perm[i]);
        ZMatrixSpec {
            root: perm[self.root],
            entries: self
                .entries
                .iter()
                .map(|e| ZEntry {
                    atom: perm[e.atom],
                    parent: map(e.parent),
                    grandparent: map(e.grandparent),
                    great_grandparent: map(e.great_grandparent),
                })
                .collect(),
        }
    }

    /// Checks that rows reference only earlier atoms and cover every atom once.
    pub fn validate(&self) -> Result<()> {
        let n = self.entries.len();
        let mut placed = vec![false; n];
        for (k, e) in self.entries.iter().enumerate() {
            if e.atom >= n || placed[e.atom] {
                return Err(Error::structural(format!("z-matrix row {k} has invalid atom {}", e.atom)));
            }
            let refs = [e.parent, e.grandparent, e.great_grandparent];
            let needed = k.min(3);
            for (level, r) in refs.iter().enumerate() {
                match (level < needed, r) {
                    (true, Some(a)) if *a < n && placed[*a] => {}
                    (false, None) => {}
                    _ => {
                        return Err(Error::structural(format!(
                            "z-matrix row {k} has an invalid reference at level {level}"
                        )))
                    }
                }
            }
            placed[e.atom] = true;
        }
        Ok(())
    }
}

/// Builds the deterministic BFS spanning-tree Z-matrix of a connected graph.
///
/// The root is the lowest-index heavy atom (lowest index overall when there
/// are no heavy atoms). Neighbours are visited in order of descending atomic
/// number, then ascending index. Ring-closure bonds are not coordinates.
pub fn build_zmatrix(graph: &MolecularGraph) -> Result<ZMatrixSpec> {
    graph.validate()?;
    let n = graph.num_atoms();
    let adj = graph.adjacency();
    let root = (0..n).find(|&i| graph.atoms[i].is_heavy()).unwrap_or(0);

    let mut order = Vec::with_capacity(n);
    let mut bfs_parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(a) = queue.pop_front() {
        order.push(a);
        let mut nbrs = adj[a].clone();
        nbrs.sort_by(|&x, &y| {
            graph.atoms[y]
                .element
                .cmp(&graph.atoms[x].element)
                .then(x.cmp(&y))
        });
        for b in nbrs {
            if !seen[b] {
                seen[b] = true;
                bfs_parent[b] = Some(a);
                queue.push_back(b);
            }
        }
    }

    let mut rank = vec![usize::MAX; n];
    let mut entries: Vec<ZEntry> = Vec::with_capacity(n);
    for (k, &atom) in order.iter().enumerate() {
        let placed = &order[..k];
        // earliest-placed atom satisfying `pred`, preferring neighbours of `hub`
        let earliest = |hub: Option<usize>, exclude: &[usize]| -> Option<usize> {
            let ok = |c: &usize| !exclude.contains(c) && *c != atom;
            if let Some(h) = hub {
                let mut cands: Vec<usize> =
                    adj[h].iter().copied().filter(|c| rank[*c] < k && ok(c)).collect();
                cands.sort_by_key(|c| rank[*c]);
                if let Some(&c) = cands.first() {
                    return Some(c);
                }
            }
            placed.iter().copied().find(|c| ok(c))
        };

        let parent = if k >= 1 { bfs_parent[atom] } else { None };
        let grandparent = if k >= 2 {
            let p = parent.unwrap();
            bfs_parent[p]
                .filter(|g| *g != atom)
                .or_else(|| earliest(Some(p), &[p]))
        } else {
            None
        };
        let great_grandparent = if k >= 3 {
            let (p, g) = (parent.unwrap(), grandparent.unwrap());
            bfs_parent[g]
                .filter(|a| *a != p && *a != atom)
                .or_else(|| earliest(Some(g), &[p, g]))
                .or_else(|| earliest(Some(p), &[p, g]))
        } else {
            None
        };
        entries.push(ZEntry {
            atom,
            parent,
            grandparent,
            great_grandparent,
        });
        rank[atom] = k;
    }
    let spec = ZMatrixSpec { root, entries };
    spec.validate()?;
    Ok(spec)
}

/// Internal coordinates `z = (r, θ, φ)`: bond lengths in Å, bond angles in
/// `(0, π)`, torsions in `(-π, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalCoords {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl InternalCoords {
    pub fn len(&self) -> usize {
        self.r.len() + self.theta.len() + self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.r);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.phi);
        v
    }

    pub fn from_flat(spec: &ZMatrixSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.dim() {
            return Err(Error::structural(format!(
                "expected {} internal coordinates, got {}",
                spec.dim(),
                flat.len()
            )));
        }
        let (nr, nt) = (spec.n_r(), spec.n_theta());
        Ok(InternalCoords {
            r: flat[..nr].to_vec(),
            theta: flat[nr..nr + nt].to_vec(),
            phi: flat[nr + nt..].to_vec(),
        })
    }

    pub fn matches(&self, spec: &ZMatrixSpec) -> bool {
        self.r.len() == spec.n_r() && self.theta.len() == spec.n_theta() && self.phi.len() == spec.n_phi()
    }

    /// Shape and domain checks.
    pub fn validate(&self, spec: &ZMatrixSpec) -> Result<()> {
        if !self.matches(spec) {
            return Err(Error::structural(format!(
                "internal coordinates have shape ({}, {}, {}), spec needs ({}, {}, {})",
                self.r.len(),
                self.theta.len(),
                self.phi.len(),
                spec.n_r(),
                spec.n_theta(),
                spec.n_phi()
            )));
        }
        for (k, &r) in self.r.iter().enumerate() {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::validation(format!("bond length r[{k}] = {r} must be positive")));
            }
        }
        for (k, &t) in self.theta.iter().enumerate() {
            if !(t.is_finite() && t > 0.0 && t < PI) {
                return Err(Error::validation(format!("bond angle theta[{k}] = {t} outside (0, pi)")));
            }
        }
        for (k, &p) in self.phi.iter().enumerate() {
            if !(p.is_finite() && p > -PI - 1e-12 && p <= PI + 1e-12) {
                return Err(Error::validation(format!("torsion phi[{k}] = {p} outside (-pi, pi]")));
            }
        }
        Ok(())
    }
}

/// Centroid, orientation and internal coordinates of one conformer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedState {
    pub c: Vector3<f64>,
    pub q: UnitQuat,
    pub z: InternalCoords,
}

/// Result of [`decompose`]; `clamped_angles` lists angle indices that were
/// pushed into the allowed band, in which case reconstruction is approximate.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub state: DecomposedState,
    pub clamped_angles: Vec<usize>,
}

pub fn centroid(x: &[Vector3<f64>]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in x {
        c += p;
    }
    c / x.len() as f64
}

pub fn bond_length(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

/// Angle at `vertex` between `a` and `b`.
pub fn bond_angle(a: &Vector3<f64>, vertex: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let u = a - vertex;
    let v = b - vertex;
    u.cross(&v).norm().atan2(u.dot(&v))
}

/// IUPAC dihedral of the chain `a-b-c-d`, in `(-π, π]`.
pub fn dihedral(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    let b1 = b - a;
    let b2 = c - b;
    let b3 = d - c;
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    let y = b2.norm() * b1.dot(&n2);
    let x = n1.dot(&n2);
    wrap_angle(y.atan2(x))
}

/// Measures the internal coordinates of `x` along `spec` without clamping.
pub fn measure(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> InternalCoords {
    let mut z = InternalCoords {
        r: Vec::with_capacity(spec.n_r()),
        theta: Vec::with_capacity(spec.n_theta()),
        phi: Vec::with_capacity(spec.n_phi()),
    };
    for c in spec.coordinates() {
        let [a, p, g, gg] = c.atoms;
        match c.kind {
            CoordKind::Bond => z.r.push(bond_length(&x[a], &x[p])),
            CoordKind::Angle => z.theta.push(bond_angle(&x[a], &x[p], &x[g])),
            CoordKind::Dihedral => z.phi.push(dihedral(&x[gg], &x[g], &x[p], &x[a])),
        }
    }
    z
}

fn check_conformer(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<()> {
    if x.len() != spec.num_atoms() {
        return Err(Error::structural(format!(
            "conformer has {} atoms, z-matrix expects {}",
            x.len(),
            spec.num_atoms()
        )));
    }
    if let Some(i) = x.iter().position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(Error::validation(format!("atom {i} has a non-finite coordinate")));
    }
    Ok(())
}

/// Orientation of the canonical frame of the first three Z-matrix atoms in `x`.
fn frame_orientation(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<UnitQuat> {
    let n = spec.num_atoms();
    if n < 2 {
        return Ok(UnitQuat::IDENTITY);
    }
    let a0 = x[spec.entries[0].atom];
    let e1 = (x[spec.entries[1].atom] - a0).normalize();
    if n == 2 {
        // minimal rotation taking +x onto e1
        let ex = Vector3::x();
        let axis = ex.cross(&e1);
        let angle = axis.norm().atan2(ex.dot(&e1));
        if axis.norm() < 1e-15 {
            return Ok(if e1.x > 0.0 {
                UnitQuat::IDENTITY
            } else {
                UnitQuat::from_axis_angle(Vector3::z(), PI)
            });
        }
        return Ok(UnitQuat::from_axis_angle(axis, angle));
    }
    let e2 = &spec.entries[2];
    let theta = bond_angle(&x[e2.atom], &x[e2.parent.unwrap()], &x[e2.grandparent.unwrap()]);
    if theta < ANGLE_CLAMP || theta > PI - ANGLE_CLAMP {
        return Err(Error::DegenerateGeometry(format!(
            "first three z-matrix atoms ({}, {}, {}) are collinear (angle {theta})",
            spec.entries[0].atom, spec.entries[1].atom, e2.atom
        )));
    }
    let e3 = e1.cross(&(x[e2.atom] - a0)).normalize();
    let e2v = e3.cross(&e1);
    let m = Matrix3::from_columns(&[e1, e2v, e3]);
    Ok(UnitQuat::from_rotation_matrix(&m))
}

/// Splits a conformer into centroid, orientation and internal coordinates.
pub fn decompose(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<Decomposition> {
    check_conformer(x, spec)?;
    let c = centroid(x);
    let q = frame_orientation(x, spec)?;
    let mut z = measure(x, spec);
    let mut clamped_angles = Vec::new();
    for (k, t) in z.theta.iter_mut().enumerate() {
        if *t < ANGLE_CLAMP || *t > PI - ANGLE_CLAMP {
            *t = t.clamp(ANGLE_CLAMP, PI - ANGLE_CLAMP);
            clamped_angles.push(k);
        }
    }
    if !clamped_angles.is_empty() {
        log::warn!("decompose clamped {} near-linear bond angle(s)", clamped_angles.len());
    }
    Ok(Decomposition {
        state: DecomposedState { c, q, z },
        clamped_angles,
    })
}

/// Root-mean-square deviation under index correspondence, no alignment.
pub fn raw_rmsd(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::quat_exp;
    use crate::so3::RotVec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_internal(spec: &ZMatrixSpec, rng: &mut impl Rng) -> InternalCoords {
        InternalCoords {
            r: (0..spec.n_r()).map(|_| rng.random_range(1.0..1.8)).collect(),
            theta: (0..spec.n_theta()).map(|_| rng.random_range(1.6..2.3)).collect(),
            phi: (0..spec.n_phi()).map(|_| rng.random_range(-PI..PI)).collect(),
        }
    }

    fn random_rotation(rng: &mut impl Rng) -> UnitQuat {
        quat_exp(&RotVec::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ))
    }

    fn branched() -> MolecularGraph {
        // isobutane-like skeleton with a tail: 0-1, 1-2, 1-3, 3-4, 4-5, 1-6
        let mut g = MolecularGraph::chain(6, 2);
        g.atoms = (0..7).map(|_| Atom::simple(6, 1)).collect();
        g.bonds = vec![
            Bond(0, 1, BondOrder::Single),
            Bond(1, 2, BondOrder::Single),
            Bond(1, 3, BondOrder::Single),
            Bond(3, 4, BondOrder::Single),
            Bond(4, 5, BondOrder::Single),
            Bond(1, 6, BondOrder::Single),
        ];
        for (i, d) in [1, 4, 1, 2, 2, 1, 1].iter().enumerate() {
            g.atoms[i].degree = *d;
        }
        g
    }

    #[test]
    fn wrap_angle_cases() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(1.5 * PI) + 0.5 * PI).abs() < 1e-15);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-50.0..50.0);
            let w = wrap_angle(x);
            assert!(w > -PI && w <= PI);
            assert!((w.sin() - x.sin()).abs() < 1e-12);
            assert!((w.cos() - x.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn path_graph_zmatrix() {
        let g = MolecularGraph::chain(6, 4);
        let spec = build_zmatrix(&g).unwrap();
        assert_eq!(spec.root, 0);
        assert_eq!((spec.n_r(), spec.n_theta(), spec.n_phi()), (3, 2, 1));
        let coords = spec.coordinates();
        let bonds: Vec<_> = coords.iter().filter(|c| c.kind == CoordKind::Bond).map(|c| (c.atoms[1], c.atoms[0])).collect();
        assert_eq!(bonds, vec![(0, 1), (1, 2), (2, 3)]);
        let angles: Vec<_> = coords
            .iter()
            .filter(|c| c.kind == CoordKind::Angle)
            .map(|c| (c.atoms[2], c.atoms[1], c.atoms[0]))
            .collect();
        assert_eq!(angles, vec![(0, 1, 2), (1, 2, 3)]);
        let dih: Vec<_> = coords.iter().filter(|c| c.kind == CoordKind::Dihedral).map(|c| c.atoms).collect();
        assert_eq!(dih, vec![[3, 2, 1, 0]]);
    }

    #[test]
    fn diatomic_zmatrix_is_degenerate() {
        let spec = build_zmatrix(&MolecularGraph::chain(8, 2)).unwrap();
        assert_eq!((spec.n_r(), spec.n_theta(), spec.n_phi()), (1, 0, 0));
    }

    #[test]
    fn cyclohexane_tree_excludes_one_ring_bond() {
        let g = MolecularGraph::ring(6, 6);
        let spec = build_zmatrix(&g).unwrap();
        // BFS from 0: 0, 1, 5, 2, 4, 3 with 3 reached through 2
        let order: Vec<usize> = spec.entries.iter().map(|e| e.atom).collect();
        assert_eq!(order, vec![0, 1, 5, 2, 4, 3]);
        let tree: Vec<(usize, usize)> = spec
            .coordinates()
            .iter()
            .filter(|c| c.kind == CoordKind::Bond)
            .map(|c| (c.atoms[1].min(c.atoms[0]), c.atoms[1].max(c.atoms[0])))
            .collect();
        assert_eq!(tree.len(), 5);
        assert!(!tree.contains(&(3, 4)), "ring closure 3-4 must not be a coordinate");
        assert_eq!((spec.n_theta(), spec.n_phi()), (4, 3));
    }

    #[test]
    fn heavy_root_skips_leading_hydrogen() {
        let mut g = MolecularGraph::chain(6, 3);
        g.atoms[0].element = 1;
        let spec = build_zmatrix(&g).unwrap();
        assert_eq!(spec.root, 1);
    }

    #[test]
    fn neighbour_order_prefers_heavier_elements() {
        // center 0 bonded to H(1), O(2), C(3)
        let atoms = vec![Atom::simple(6, 3), Atom::simple(1, 1), Atom::simple(8, 1), Atom::simple(6, 1)];
        let bonds = vec![
            Bond(0, 1, BondOrder::Single),
            Bond(0, 2, BondOrder::Single),
            Bond(0, 3, BondOrder::Single),
        ];
        let spec = build_zmatrix(&MolecularGraph::new(atoms, bonds).unwrap()).unwrap();
        let order: Vec<usize> = spec.entries.iter().map(|e| e.atom).collect();
        assert_eq!(order, vec![0, 2, 3, 1]);
    }

    #[test]
    fn roundtrip_on_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [MolecularGraph::chain(6, 5), branched(), MolecularGraph::chain(6, 3), MolecularGraph::chain(6, 2)] {
            let spec = build_zmatrix(&g).unwrap();
            for _ in 0..50 {
                let z = random_internal(&spec, &mut rng);
                let c = Vector3::new(rng.random_range(-5.0..5.0), 1.0, -2.0);
                let q = random_rotation(&mut rng);
                let x = compose(&c, &q, &z, &spec).unwrap();
                let d = decompose(&x, &spec).unwrap();
                assert!(d.clamped_angles.is_empty());
                let back = compose(&d.state.c, &d.state.q, &d.state.z, &spec).unwrap();
                assert!(raw_rmsd(&x, &back) < 1e-9);
                // measured internals equal z
                for (a, b) in d.state.z.to_flat().iter().zip(z.to_flat()) {
                    assert!(wrap_angle(a - b).abs() < 1e-9);
                }
                // a diatomic frame leaves the spin about the bond free
                if spec.num_atoms() >= 3 {
                    assert!(d.state.q.same_rotation(&q, 1e-12));
                }
                assert!((d.state.c - c).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_and_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = build_zmatrix(&branched()).unwrap();
        let z = random_internal(&spec, &mut rng);
        let x = compose(&Vector3::zeros(), &random_rotation(&mut rng), &z, &spec).unwrap();
        let base = decompose(&x, &spec).unwrap().state;

        let shift = Vector3::new(1.0, 2.0, 3.0);
        let moved: Vec<_> = x.iter().map(|p| p + shift).collect();
        let d = decompose(&moved, &spec).unwrap().state;
        for (a, b) in d.z.to_flat().iter().zip(base.z.to_flat()) {
            assert!(wrap_angle(a - b).abs() < 1e-12);
        }
        assert!(d.q.same_rotation(&base.q, 1e-14));
        assert!((d.c - base.c - shift).norm() < 1e-12);

        let rot = random_rotation(&mut rng);
        let rotated = crate::so3::apply_rotation(&rot, &x);
        let d = decompose(&rotated, &spec).unwrap().state;
        for (a, b) in d.z.to_flat().iter().zip(base.z.to_flat()) {
            assert!(wrap_angle(a - b).abs() < 1e-9);
        }
        assert!(d.q.same_rotation(&(rot * base.q), 1e-12));
    }

    #[test]
    fn collinear_start_is_degenerate() {
        let spec = build_zmatrix(&MolecularGraph::chain(6, 3)).unwrap();
        let x = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.5, 0.0, 0.0)];
        assert!(matches!(decompose(&x, &spec), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn near_linear_later_angle_is_clamped_with_flag() {
        let spec = build_zmatrix(&MolecularGraph::chain(6, 4)).unwrap();
        let x = vec![
            Vector3::zeros(),
            Vector3::new(1.5, 0.0, 0.0),
            Vector3::new(2.0, 1.4, 0.0),
            Vector3::new(2.5, 2.8, 0.0),
        ];
        let d = decompose(&x, &spec).unwrap();
        assert_eq!(d.clamped_angles, vec![1]);
        assert!(d.state.z.theta[1] <= PI - ANGLE_CLAMP);
    }

    #[test]
    fn decompose_rejects_wrong_size_and_nan() {
        let spec = build_zmatrix(&MolecularGraph::chain(6, 3)).unwrap();
        assert!(matches!(decompose(&[Vector3::zeros()], &spec), Err(Error::Structural(_))));
        let x = vec![Vector3::zeros(), Vector3::new(f64::NAN, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        assert!(matches!(decompose(&x, &spec), Err(Error::Validation(_))));
    }
}
