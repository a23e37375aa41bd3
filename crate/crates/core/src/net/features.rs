//! One-hot atom features.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::zmatrix::{Atom, Chirality, Hybridization, MolecularGraph};

/// Element vocabulary; anything else falls into the trailing "other" slot.
pub const ELEMENTS: [u8; 8] = [1, 6, 7, 8, 9, 16, 17, 35];

const CHIRALITY: usize = 4;
const DEGREE: usize = 11;
const CHARGE: usize = 11;
const NUM_H: usize = 9;
const RADICALS: usize = 5;
const HYBRID: usize = 6;
const ELEMENT: usize = ELEMENTS.len() + 1;

pub const NUM_FEATURES: usize = CHIRALITY + DEGREE + CHARGE + NUM_H + RADICALS + HYBRID + 2 + ELEMENT;

fn slot(atom_index: usize, field: &str, value: i32, lo: i32, width: usize) -> Result<usize> {
    let k = value - lo;
    if k < 0 || k as usize >= width {
        return Err(Error::validation(format!(
            "atom {atom_index}: field `{field}` = {value} outside [{lo}, {}]",
            lo + width as i32 - 1
        )));
    }
    Ok(k as usize)
}

fn atom_row(i: usize, a: &Atom) -> Result<[f64; NUM_FEATURES]> {
    let mut row = [0.0; NUM_FEATURES];
    let mut off = 0;
    let chir = match a.chirality {
        Chirality::Unspecified => 0,
        Chirality::Cw => 1,
        Chirality::Ccw => 2,
        Chirality::Other => 3,
    };
    row[off + chir] = 1.0;
    off += CHIRALITY;
    row[off + slot(i, "degree", a.degree, 0, DEGREE)?] = 1.0;
    off += DEGREE;
    row[off + slot(i, "charge", a.charge, -5, CHARGE)?] = 1.0;
    off += CHARGE;
    row[off + slot(i, "num_h", a.num_h, 0, NUM_H)?] = 1.0;
    off += NUM_H;
    row[off + slot(i, "radicals", a.radicals, 0, RADICALS)?] = 1.0;
    off += RADICALS;
    let hyb = match a.hybridization {
        Hybridization::Sp => 0,
        Hybridization::Sp2 => 1,
        Hybridization::Sp3 => 2,
        Hybridization::Sp3d => 3,
        Hybridization::Sp3d2 => 4,
        Hybridization::Other => 5,
    };
    row[off + hyb] = 1.0;
    off += HYBRID;
    row[off] = a.aromatic as u8 as f64;
    row[off + 1] = a.in_ring as u8 as f64;
    off += 2;
    let e = ELEMENTS.iter().position(|&z| z == a.element).unwrap_or(ELEMENTS.len());
    row[off + e] = 1.0;
    Ok(row)
}

/// `N × 57` feature matrix, one row per atom.
pub fn featurize(graph: &MolecularGraph) -> Result<DMatrix<f64>> {
    let n = graph.atoms.len();
    let mut m = DMatrix::zeros(n, NUM_FEATURES);
    for (i, a) in graph.atoms.iter().enumerate() {
        let row = atom_row(i, a)?;
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}
