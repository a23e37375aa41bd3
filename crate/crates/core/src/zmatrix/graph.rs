use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Chirality {
    #[default]
    Unspecified,
    Cw,
    Ccw,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Hybridization {
    Sp,
    Sp2,
    #[default]
    Sp3,
    Sp3d,
    Sp3d2,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

/// One atom with its graph-level features. `element` is the atomic number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: u8,
    #[serde(default)]
    pub chirality: Chirality,
    pub degree: i32,
    #[serde(default)]
    pub charge: i32,
    #[serde(default)]
    pub num_h: i32,
    #[serde(default)]
    pub radicals: i32,
    #[serde(default)]
    pub hybridization: Hybridization,
    #[serde(default)]
    pub aromatic: bool,
    #[serde(default)]
    pub in_ring: bool,
}

impl Atom {
    /// A neutral, non-aromatic, acyclic atom with the given element and degree.
    pub fn simple(element: u8, degree: i32) -> Self {
        Atom {
            element,
            chirality: Chirality::Unspecified,
            degree,
            charge: 0,
            num_h: 0,
            radicals: 0,
            hybridization: Hybridization::Sp3,
            aromatic: false,
            in_ring: false,
        }
    }

    pub fn is_heavy(&self) -> bool {
        self.element > 1
    }

    /// Checks every feature against its allowed range.
    pub fn validate(&self, index: usize) -> Result<()> {
        let check = |field: &str, value: i32, lo: i32, hi: i32| {
            if value < lo || value > hi {
                Err(Error::validation(format!(
                    "atom {index}: field `{field}` = {value} outside [{lo}, {hi}]"
                )))
            } else {
                Ok(())
            }
        };
        if self.element == 0 {
            return Err(Error::validation(format!(
                "atom {index}: field `element` must be a positive atomic number"
            )));
        }
        check("degree", self.degree, 0, 10)?;
        check("charge", self.charge, -5, 5)?;
        check("num_h", self.num_h, 0, 8)?;
        check("radicals", self.radicals, 0, 4)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond(pub usize, pub usize, pub BondOrder);

impl Bond {
    pub fn i(&self) -> usize {
        self.0
    }
    pub fn j(&self) -> usize {
        self.1
    }
    pub fn order(&self) -> BondOrder {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self> {
        let g = MolecularGraph { atoms, bonds };
        g.validate()?;
        Ok(g)
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Unbranched chain of `n` atoms of one element joined by single bonds.
    pub fn chain(element: u8, n: usize) -> Self {
        let atoms = (0..n)
            .map(|i| {
                let degree = if n == 1 {
                    0
                } else if i == 0 || i + 1 == n {
                    1
                } else {
                    2
                };
                Atom::simple(element, degree)
            })
            .collect();
        let bonds = (1..n).map(|i| Bond(i - 1, i, BondOrder::Single)).collect();
        MolecularGraph { atoms, bonds }
    }

    /// Ring of `n` atoms; every atom flagged `in_ring`.
    pub fn ring(element: u8, n: usize) -> Self {
        let atoms = (0..n)
            .map(|_| Atom {
                in_ring: true,
                ..Atom::simple(element, 2)
            })
            .collect();
        let bonds = (0..n).map(|i| Bond(i, (i + 1) % n, BondOrder::Single)).collect();
        MolecularGraph { atoms, bonds }
    }

    /// Sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.0].push(b.1);
            adj[b.1].push(b.0);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Connected components as sorted atom-index lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut out = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(a) = queue.pop_front() {
                for &b in &adj[a] {
                    if !seen[b] {
                        seen[b] = true;
                        comp.push(b);
                        queue.push_back(b);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Index bounds, self-loops, duplicates, feature ranges and connectivity.
    pub fn validate(&self) -> Result<()> {
        let n = self.atoms.len();
        if n == 0 {
            return Err(Error::validation("molecule has no atoms"));
        }
        for (k, atom) in self.atoms.iter().enumerate() {
            atom.validate(k)?;
        }
        let mut seen = std::collections::HashSet::new();
        for (k, b) in self.bonds.iter().enumerate() {
            if b.0 >= n || b.1 >= n {
                return Err(Error::validation(format!(
                    "bond {k} ({}, {}) references an atom index >= {n}",
                    b.0, b.1
                )));
            }
            if b.0 == b.1 {
                return Err(Error::validation(format!("bond {k} is a self-loop on atom {}", b.0)));
            }
            let key = (b.0.min(b.1), b.0.max(b.1));
            if !seen.insert(key) {
                return Err(Error::validation(format!(
                    "bond {k} duplicates bond ({}, {})",
                    key.0, key.1
                )));
            }
        }
        let comps = self.components();
        if comps.len() > 1 {
            return Err(Error::structural(format!(
                "molecular graph is disconnected: components {:?}",
                comps
            )));
        }
        Ok(())
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut atoms = self.atoms.clone();
        for (old, atom) in self.atoms.iter().enumerate() {
            atoms[perm[old]] = atom.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond(perm[b.0], perm[b.1], b.2))
            .collect();
        MolecularGraph { atoms, bonds }
    }
}
