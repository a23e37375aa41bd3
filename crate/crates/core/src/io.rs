//! Molecule files, synthetic toy datasets and coordinate-list import.
//!
//! Datasets are line-oriented JSON: one molecule object per line with its
//! atom features, bonds and conformers (Å).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::UnitQuat;
use crate::zmatrix::{
    build_zmatrix, compose, wrap_angle, Atom, Bond, BondOrder, Conformer, Hybridization, InternalCoords, MolecularGraph,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeRecord {
    pub name: Option<String>,
    pub split: Split,
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformer>,
    /// How each conformer was generated; empty for reference data.
    pub provenance: Vec<Provenance>,
}

/// Sampler settings behind one generated conformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub steps: usize,
    pub method: String,
    /// Index of the prior draw.
    pub draw: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub molecules: Vec<MoleculeRecord>,
}

/// Bond orders may be written by name or as 1, 2, 3 and 1.5.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum OrderRepr {
    Named(BondOrder),
    Numeric(f64),
}

impl OrderRepr {
    fn resolve(self) -> std::result::Result<BondOrder, String> {
        match self {
            OrderRepr::Named(o) => Ok(o),
            OrderRepr::Numeric(x) if x == 1.0 => Ok(BondOrder::Single),
            OrderRepr::Numeric(x) if x == 2.0 => Ok(BondOrder::Double),
            OrderRepr::Numeric(x) if x == 3.0 => Ok(BondOrder::Triple),
            OrderRepr::Numeric(x) if x == 1.5 => Ok(BondOrder::Aromatic),
            OrderRepr::Numeric(x) => Err(format!("unknown bond order {x}")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default)]
    split: Split,
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize, OrderRepr)>,
    conformers: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<Provenance>,
}

fn located(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

impl MoleculeRecord {
    /// Graph validity, conformer shapes and finiteness, and at least one
    /// conformer for training molecules.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let n = self.graph.num_atoms();
        if self.split == Split::Train && self.conformers.is_empty() {
            return Err(Error::validation("training molecule has no conformers"));
        }
        for (k, x) in self.conformers.iter().enumerate() {
            if x.len() != n {
                return Err(Error::validation(format!("conformer {k} has {} atoms, graph has {n}", x.len())));
            }
            if let Some(a) = x.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(Error::validation(format!("conformer {k}: atom {a} has a non-finite coordinate")));
            }
        }
        if !self.provenance.is_empty() && self.provenance.len() != self.conformers.len() {
            return Err(Error::validation(format!(
                "{} provenance entries for {} conformers",
                self.provenance.len(),
                self.conformers.len()
            )));
        }
        Ok(())
    }
}

fn parse_record(line: &str, location: &str) -> Result<MoleculeRecord> {
    let rec: Record = serde_json::from_str(line).map_err(|e| located(location.into(), e.to_string()))?;
    let bonds = rec
        .bonds
        .iter()
        .enumerate()
        .map(|(k, (i, j, o))| {
            o.resolve()
                .map(|o| Bond(*i, *j, o))
                .map_err(|m| located(location.into(), format!("bond {k}: {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mol = MoleculeRecord {
        name: rec.name,
        split: rec.split,
        graph: MolecularGraph { atoms: rec.atoms, bonds },
        conformers: rec
            .conformers
            .into_iter()
            .map(|c| c.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
            .collect(),
        provenance: rec.provenance,
    };
    mol.validate().map_err(|e| located(location.into(), e.to_string()))?;
    Ok(mol)
}

/// Parses a dataset stream; errors carry `source:line`.
pub fn read_dataset(input: impl BufRead, source: &str) -> Result<Dataset> {
    let mut molecules = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        molecules.push(parse_record(&line, &format!("{source}:{}", k + 1))?);
    }
    Ok(Dataset { molecules })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| located(path.display().to_string(), e.to_string()))?;
    read_dataset(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    for m in &dataset.molecules {
        let rec = Record {
            name: m.name.clone(),
            split: m.split,
            atoms: m.graph.atoms.clone(),
            bonds: m.graph.bonds.iter().map(|b| (b.0, b.1, OrderRepr::Named(b.2))).collect(),
            conformers: m.conformers.iter().map(|c| c.iter().map(|p| [p.x, p.y, p.z]).collect()).collect(),
            provenance: m.provenance.clone(),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(dataset, &mut f)?;
    f.flush()?;
    Ok(())
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MoleculeRecord> {
        self.molecules.iter().filter(move |m| m.split == split)
    }

    pub fn num_conformers(&self) -> usize {
        self.molecules.iter().map(|m| m.conformers.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyFamily {
    /// Carbon chain; every torsion is drawn from the mode mixture.
    ChainAlkaneLike,
    /// Rigid puckered carbon ring of even size ≥ 6; only rigid motion varies.
    FixedRing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorsionMode {
    pub mean: f64,
    pub weight: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub family: ToyFamily,
    pub chain_length: usize,
    pub torsion_modes: Vec<TorsionMode>,
    pub n_molecules: usize,
    pub conformers_per_molecule: usize,
    pub seed: u64,
    /// Apply a uniformly random rotation and unit-Gaussian offset to every
    /// conformer instead of keeping the canonical z-matrix frame.
    #[serde(default)]
    pub random_rigid_motion: bool,
}

pub const TOY_BOND_LENGTH: f64 = 1.54;
pub const TOY_BOND_ANGLE_DEG: f64 = 111.0;

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            family: ToyFamily::ChainAlkaneLike,
            chain_length: 4,
            torsion_modes: vec![
                TorsionMode {
                    mean: PI / 3.0,
                    weight: 0.5,
                    std: 0.2,
                },
                TorsionMode {
                    mean: -PI / 3.0,
                    weight: 0.5,
                    std: 0.2,
                },
            ],
            n_molecules: 1,
            conformers_per_molecule: 1000,
            seed: 0,
            random_rigid_motion: false,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self.family {
            ToyFamily::ChainAlkaneLike if self.chain_length < 2 => {
                return Err(Error::validation("chain_length must be at least 2"));
            }
            ToyFamily::FixedRing if self.chain_length < 6 || self.chain_length % 2 == 1 => {
                return Err(Error::validation("fixed rings need an even size of at least 6"));
            }
            _ => {}
        }
        if self.torsion_modes.is_empty() {
            return Err(Error::validation("at least one torsion mode is required"));
        }
        for (k, m) in self.torsion_modes.iter().enumerate() {
            if !(m.std > 0.0 && m.std.is_finite()) {
                return Err(Error::validation(format!("torsion mode {k}: std must be positive")));
            }
            if !(m.weight >= 0.0 && m.mean.is_finite()) {
                return Err(Error::validation(format!("torsion mode {k}: weight must be non-negative and mean finite")));
            }
        }
        let total: f64 = self.torsion_modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("torsion mode weights sum to {total}, not 1")));
        }
        if self.n_molecules == 0 || self.conformers_per_molecule == 0 {
            return Err(Error::validation("n_molecules and conformers_per_molecule must be at least 1"));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a toy dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetadata {
    pub config: ToyDatasetConfig,
    pub bond_length: f64,
    pub bond_angle: f64,
    /// Human-readable statement of the sampling law.
    pub law: String,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One draw from the wrapped Gaussian mixture.
pub fn sample_torsion(modes: &[TorsionMode], rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = &modes[modes.len() - 1];
    for m in modes {
        acc += m.weight;
        if u < acc {
            pick = m;
            break;
        }
    }
    wrap_angle(pick.mean + pick.std * normal(rng))
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuat {
    UnitQuat::new(normal(rng), normal(rng), normal(rng), normal(rng))
}

/// Puckered ring with all bonds `b` and all angles `theta`: atoms alternate
/// between heights ±h on a circle.
fn crown_ring(n: usize, b: f64, theta: f64) -> Result<Conformer> {
    let d13 = b * (2.0 * (1.0 - theta.cos())).sqrt();
    let radius = d13 / (2.0 * (2.0 * PI / n as f64).sin());
    let chord = 2.0 * radius * (PI / n as f64).sin();
    if chord > b {
        return Err(Error::validation(format!("a {n}-ring cannot have bond angle {theta} rad")));
    }
    let h = 0.5 * (b * b - chord * chord).sqrt();
    Ok((0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), if k % 2 == 0 { h } else { -h })
        })
        .collect())
}

fn toy_graph(config: &ToyDatasetConfig) -> MolecularGraph {
    match config.family {
        ToyFamily::ChainAlkaneLike => {
            let mut g = MolecularGraph::chain(6, config.chain_length);
            for a in &mut g.atoms {
                a.num_h = 4 - a.degree;
            }
            g
        }
        ToyFamily::FixedRing => {
            let mut g = MolecularGraph::ring(6, config.chain_length);
            for a in &mut g.atoms {
                a.num_h = 2;
            }
            g
        }
    }
}

/// Synthetic dataset with a known generative law. Chain conformers have
/// bonds of 1.54 Å, angles of 111° and every torsion drawn independently
/// from the configured wrapped Gaussian mixture.
pub fn generate_toy_dataset(config: &ToyDatasetConfig) -> Result<(Dataset, ToyMetadata)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let graph = toy_graph(config);
    let spec = build_zmatrix(&graph)?;
    let theta = TOY_BOND_ANGLE_DEG.to_radians();
    let ring = match config.family {
        ToyFamily::FixedRing => Some(crown_ring(config.chain_length, TOY_BOND_LENGTH, theta)?),
        ToyFamily::ChainAlkaneLike => None,
    };
    let mut molecules = Vec::with_capacity(config.n_molecules);
    for k in 0..config.n_molecules {
        let mut conformers = Vec::with_capacity(config.conformers_per_molecule);
        for _ in 0..config.conformers_per_molecule {
            let (c, q) = if config.random_rigid_motion {
                (Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)), random_rotation(&mut rng))
            } else {
                (Vector3::zeros(), UnitQuat::IDENTITY)
            };
            let x = match &ring {
                Some(r) => {
                    let mean = crate::zmatrix::centroid(r);
                    r.iter().map(|p| c + q.rotate(&(p - mean))).collect()
                }
                None => {
                    let z = InternalCoords {
                        r: vec![TOY_BOND_LENGTH; spec.n_r()],
                        theta: vec![theta; spec.n_theta()],
                        phi: (0..spec.n_phi()).map(|_| sample_torsion(&config.torsion_modes, &mut rng)).collect(),
                    };
                    compose(&c, &q, &z, &spec)?
                }
            };
            conformers.push(x);
        }
        molecules.push(MoleculeRecord {
            name: Some(format!("toy-{k}")),
            split: Split::Train,
            graph: graph.clone(),
            conformers,
            provenance: Vec::new(),
        });
    }
    let law = match config.family {
        ToyFamily::ChainAlkaneLike => "chain of carbons; bonds fixed, angles fixed, each torsion iid from the wrapped Gaussian mixture `torsion_modes`; ChaCha8 stream from `seed`",
        ToyFamily::FixedRing => "rigid puckered carbon ring with fixed bonds and angles; only rigid motion varies",
    };
    Ok((
        Dataset { molecules },
        ToyMetadata {
            config: config.clone(),
            bond_length: TOY_BOND_LENGTH,
            bond_angle: theta,
            law: law.into(),
        },
    ))
}

/// Regenerates the dataset described by `meta`.
pub fn replay_toy(meta: &ToyMetadata) -> Result<Dataset> {
    Ok(generate_toy_dataset(&meta.config)?.0)
}

/// Per-molecule coordinate lists as found in conformer collections:
/// elements, bonds and conformers, without precomputed features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinateListRecord {
    #[serde(default)]
    pub name: Option<String>,
    pub elements: Vec<u8>,
    pub bonds: Vec<(usize, usize, f64)>,
    pub conformers: Vec<Vec<[f64; 3]>>,
    #[serde(default)]
    pub charges: Option<Vec<i32>>,
}

/// Ring membership of every atom from the bond graph: a bond lies on a ring
/// exactly when it is not a bridge.
fn ring_atoms(n: usize, bonds: &[Bond]) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for (k, b) in bonds.iter().enumerate() {
        adj[b.0].push((b.1, k));
        adj[b.1].push((b.0, k));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut bridges = HashSet::new();
    let mut time = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // iterative DFS: (vertex, parent edge, next neighbour index)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(&mut (v, pe, ref mut i)) = stack.last_mut() {
            if *i < adj[v].len() {
                let (w, e) = adj[v][*i];
                *i += 1;
                if e == pe {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = time;
                    low[w] = time;
                    time += 1;
                    stack.push((w, e, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(u, _, _)) = stack.last() {
                    low[u] = low[u].min(low[v]);
                    if low[v] > disc[u] {
                        bridges.insert(pe);
                    }
                }
            }
        }
    }
    let mut on_ring = vec![false; n];
    for (k, b) in bonds.iter().enumerate() {
        if !bridges.contains(&k) {
            on_ring[b.0] = true;
            on_ring[b.1] = true;
        }
    }
    on_ring
}

/// Converts coordinate lists into a dataset, deriving degree, hydrogen
/// count, ring membership, aromaticity and a hybridization guess from the
/// bond graph.
pub fn import_coordinate_lists(input: impl BufRead, source: &str) -> Result<Dataset> {
    let mut molecules = Vec::new();
    for (line_no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", line_no + 1);
        let rec: CoordinateListRecord = serde_json::from_str(&line).map_err(|e| located(loc.clone(), e.to_string()))?;
        let n = rec.elements.len();
        let bonds = rec
            .bonds
            .iter()
            .enumerate()
            .map(|(k, (i, j, o))| {
                OrderRepr::Numeric(*o)
                    .resolve()
                    .map(|o| Bond(*i, *j, o))
                    .map_err(|m| located(loc.clone(), format!("bond {k}: {m}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some((k, b)) = bonds.iter().enumerate().find(|(_, b)| b.0 >= n || b.1 >= n) {
            return Err(located(loc, format!("bond {k} ({}, {}) references an atom index >= {n}", b.0, b.1)));
        }
        let in_ring = ring_atoms(n, &bonds);
        let mut atoms = Vec::with_capacity(n);
        for a in 0..n {
            let mine: Vec<&Bond> = bonds.iter().filter(|b| b.0 == a || b.1 == a).collect();
            let other = |b: &Bond| if b.0 == a { b.1 } else { b.0 };
            let num_h = mine.iter().filter(|b| rec.elements[other(b)] == 1).count() as i32;
            let aromatic = mine.iter().any(|b| b.2 == BondOrder::Aromatic);
            let hybridization = if rec.elements[a] == 1 {
                Hybridization::Other
            } else if mine.iter().any(|b| b.2 == BondOrder::Triple) || mine.iter().filter(|b| b.2 == BondOrder::Double).count() >= 2 {
                Hybridization::Sp
            } else if aromatic || mine.iter().any(|b| b.2 == BondOrder::Double) {
                Hybridization::Sp2
            } else {
                Hybridization::Sp3
            };
            atoms.push(Atom {
                degree: mine.len() as i32,
                charge: rec.charges.as_ref().and_then(|c| c.get(a).copied()).unwrap_or(0),
                num_h,
                hybridization,
                aromatic,
                in_ring: in_ring[a],
                ..Atom::simple(rec.elements[a], 0)
            });
        }
        let mol = MoleculeRecord {
            name: rec.name,
            split: Split::Train,
            graph: MolecularGraph { atoms, bonds },
            conformers: rec
                .conformers
                .into_iter()
                .map(|c| c.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
                .collect(),
            provenance: Vec::new(),
        };
        mol.validate().map_err(|e| located(loc, e.to_string()))?;
        molecules.push(mol);
    }
    Ok(Dataset { molecules })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::kabsch_rmsd;
    use crate::zmatrix::{decompose, dihedral};

    const MINIMAL: &str = r#"{"atoms":[{"element":6,"degree":1},{"element":8,"degree":1}],"bonds":[[0,1,"double"]],"conformers":[[[0,0,0],[1.2,0,0]]]}"#;

    #[test]
    fn minimal_file_loads() {
        let d = read_dataset(MINIMAL.as_bytes(), "mem").unwrap();
        assert_eq!((d.molecules.len(), d.num_conformers()), (1, 1));
        assert_eq!(d.molecules[0].graph.bonds[0].2, BondOrder::Double);
        let numeric = MINIMAL.replace("\"double\"", "2");
        assert_eq!(read_dataset(numeric.as_bytes(), "mem").unwrap(), d);
    }

    #[test]
    fn errors_name_line_and_field() {
        let bad_bond = format!("{MINIMAL}\n{}", MINIMAL.replace("[[0,1,", "[[0,2,"));
        let err = read_dataset(bad_bond.as_bytes(), "f.jsonl").unwrap_err().to_string();
        assert!(err.contains("f.jsonl:2") && err.contains("bond 0"), "{err}");
        let nan = MINIMAL.replace("1.2", "NaN");
        assert!(read_dataset(nan.as_bytes(), "f").unwrap_err().to_string().contains("f:1"));
        let short = MINIMAL.replace(",[1.2,0,0]", "");
        assert!(read_dataset(short.as_bytes(), "f").unwrap_err().to_string().contains("conformer 0"));
        let unknown = MINIMAL.replace("\"atoms\"", "\"extra\":1,\"atoms\"");
        assert!(read_dataset(unknown.as_bytes(), "f").is_err());
        let empty = MINIMAL.replace("[[[0,0,0],[1.2,0,0]]]", "[]");
        assert!(read_dataset(empty.as_bytes(), "f").is_err());
        let val = empty.replace("\"atoms\"", "\"split\":\"val\",\"atoms\"");
        assert!(read_dataset(val.as_bytes(), "f").is_ok());
    }

    #[test]
    fn roundtrip_is_bit_stable() {
        let (d, _) = generate_toy_dataset(&ToyDatasetConfig {
            conformers_per_molecule: 20,
            n_molecules: 2,
            random_rigid_motion: true,
            ..ToyDatasetConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), "mem").unwrap();
        for (a, b) in d.molecules.iter().zip(&back.molecules) {
            for (x, y) in a.conformers.iter().zip(&b.conformers) {
                for (p, q) in x.iter().zip(y) {
                    for k in 0..3 {
                        assert_eq!(p[k].to_bits(), q[k].to_bits());
                    }
                }
            }
        }
        assert_eq!(back, d);
    }

    #[test]
    fn narrow_mode_gives_rigid_copies() {
        let (d, _) = generate_toy_dataset(&ToyDatasetConfig {
            torsion_modes: vec![TorsionMode {
                mean: 1.0,
                weight: 1.0,
                std: 1e-300,
            }],
            conformers_per_molecule: 10,
            random_rigid_motion: true,
            ..ToyDatasetConfig::default()
        })
        .unwrap();
        let c = &d.molecules[0].conformers;
        for x in c {
            assert!(kabsch_rmsd(&c[0], x).unwrap() < 1e-9);
        }
    }

    #[test]
    fn bimodal_weights() {
        let cfg = ToyDatasetConfig {
            conformers_per_molecule: 10_000,
            seed: 3,
            ..ToyDatasetConfig::default()
        };
        let (d, meta) = generate_toy_dataset(&cfg).unwrap();
        let x = &d.molecules[0].conformers;
        let pos = x.iter().filter(|c| dihedral(&c[0], &c[1], &c[2], &c[3]) > 0.0).count();
        let frac = pos as f64 / x.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        // geometry follows the law
        let spec = build_zmatrix(&d.molecules[0].graph).unwrap();
        let z = decompose(&x[7], &spec).unwrap().state.z;
        assert!(z.r.iter().all(|r| (r - 1.54).abs() < 1e-9));
        assert!(z.theta.iter().all(|t| (t - meta.bond_angle).abs() < 1e-9));
        assert_eq!(replay_toy(&meta).unwrap(), d);
        let other = generate_toy_dataset(&ToyDatasetConfig { seed: 4, ..cfg }).unwrap().0;
        assert_ne!(other, d);
    }

    #[test]
    fn toy_config_validation() {
        let bad = |f: &dyn Fn(&mut ToyDatasetConfig)| {
            let mut c = ToyDatasetConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.torsion_modes[0].weight = 0.7));
        assert!(bad(&|c| c.torsion_modes[1].std = 0.0));
        assert!(bad(&|c| c.chain_length = 1));
        assert!(bad(&|c| {
            c.family = ToyFamily::FixedRing;
            c.chain_length = 5;
        }));
    }

    #[test]
    fn fixed_ring_geometry() {
        let (d, meta) = generate_toy_dataset(&ToyDatasetConfig {
            family: ToyFamily::FixedRing,
            chain_length: 6,
            conformers_per_molecule: 3,
            random_rigid_motion: true,
            ..ToyDatasetConfig::default()
        })
        .unwrap();
        let x = &d.molecules[0].conformers[0];
        for k in 0..6 {
            let (a, b, c) = (x[k], x[(k + 1) % 6], x[(k + 2) % 6]);
            assert!(((b - a).norm() - 1.54).abs() < 1e-9);
            let ang = (a - b).angle(&(c - b));
            assert!((ang - meta.bond_angle).abs() < 1e-9);
        }
    }

    #[test]
    fn coordinate_list_import() {
        // ethanol-like fragment with a three-ring attached
        let line = r#"{"name":"m","elements":[6,6,8,6,1],"bonds":[[0,1,1],[1,2,1],[2,3,1],[3,1,1],[0,4,1]],"conformers":[[[0,0,0],[1.5,0,0],[2.2,1.2,0],[2.3,-1.1,0.2],[-0.5,0.9,0]]]}"#;
        let d = import_coordinate_lists(line.as_bytes(), "geom").unwrap();
        let g = &d.molecules[0].graph;
        assert_eq!(g.atoms.iter().map(|a| a.in_ring).collect::<Vec<_>>(), [false, true, true, true, false]);
        assert_eq!(g.atoms[0].num_h, 1);
        assert_eq!(g.atoms[1].degree, 3);
        let bad = line.replace("[0,4,1]", "[0,9,1]");
        assert!(import_coordinate_lists(bad.as_bytes(), "geom").unwrap_err().to_string().contains("bond 4"));
    }
}
