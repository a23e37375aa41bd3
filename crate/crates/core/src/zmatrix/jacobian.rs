//! Jacobians between internal and Cartesian coordinates.
//!
//! Two maps are involved. The measurement map `X ↦ z` has the gradient
//! `B = ∂z/∂X` (m × 3N), built from closed-form bond, angle and dihedral
//! derivatives. The composition map `z ↦ X` at fixed centroid and orientation
//! has `J = ∂X/∂z` (3N × m), obtained by forward-mode differentiation of the
//! atom placement. They satisfy `B J = I_m`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};

use super::nerf::canonical_generic;
use super::scalar::Dual;
use super::{bond_angle, decompose, CoordKind, DecomposedState, ZMatrixSpec, ANGLE_CLAMP};
use crate::error::{Error, Result};

fn check_angles(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<()> {
    for (k, c) in spec.coordinates().iter().enumerate() {
        let [a, p, g, gg] = c.atoms;
        let check = |theta: f64, what: String| {
            if theta < ANGLE_CLAMP || theta > PI - ANGLE_CLAMP {
                Err(Error::DegenerateGeometry(format!(
                    "coordinate {k}: angle {what} = {theta} is within {ANGLE_CLAMP} of 0 or pi"
                )))
            } else {
                Ok(())
            }
        };
        match c.kind {
            CoordKind::Bond => {}
            CoordKind::Angle => check(bond_angle(&x[a], &x[p], &x[g]), format!("{g}-{p}-{a}"))?,
            CoordKind::Dihedral => {
                check(bond_angle(&x[a], &x[p], &x[g]), format!("{g}-{p}-{a}"))?;
                check(bond_angle(&x[p], &x[g], &x[gg]), format!("{gg}-{g}-{p}"))?;
            }
        }
    }
    Ok(())
}

fn put(b: &mut DMatrix<f64>, row: usize, atom: usize, v: Vector3<f64>) {
    for d in 0..3 {
        b[(row, 3 * atom + d)] += v[d];
    }
}

/// Gradient of the measurement map, `∂z_k/∂X` as row `k` (m × 3N).
///
/// Bond rows are unit vectors along the bond. Angle rows are the
/// perpendicular projections scaled by `1/(|u| sin θ)` with the vertex as the
/// negative sum. Dihedral rows use the normal-vector form, with the two
/// middle atoms fixed by zero net force and zero net torque.
pub fn measurement_gradient(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<DMatrix<f64>> {
    if x.len() != spec.num_atoms() {
        return Err(Error::structural(format!(
            "conformer has {} atoms, z-matrix expects {}",
            x.len(),
            spec.num_atoms()
        )));
    }
    check_angles(x, spec)?;
    let m = spec.dim();
    let mut b = DMatrix::zeros(m, 3 * x.len());
    for (row, c) in spec.coordinates().iter().enumerate() {
        let [a, p, g, gg] = c.atoms;
        match c.kind {
            CoordKind::Bond => {
                let u = (x[a] - x[p]).normalize();
                put(&mut b, row, a, u);
                put(&mut b, row, p, -u);
            }
            CoordKind::Angle => {
                // vertex p, arms a and g
                let da = x[a] - x[p];
                let dg = x[g] - x[p];
                let (la, lg) = (da.norm(), dg.norm());
                let u = da / la;
                let v = dg / lg;
                let cos_t = u.dot(&v);
                let sin_t = u.cross(&v).norm();
                let ga = -(v - u * cos_t) / (la * sin_t);
                let gg_ = -(u - v * cos_t) / (lg * sin_t);
                put(&mut b, row, a, ga);
                put(&mut b, row, g, gg_);
                put(&mut b, row, p, -(ga + gg_));
            }
            CoordKind::Dihedral => {
                // chain i-j-k-l = gg-g-p-a
                let (i, j, k, l) = (gg, g, p, a);
                let f = x[i] - x[j];
                let gv = x[j] - x[k];
                let h = x[l] - x[k];
                let na = f.cross(&gv);
                let nb = h.cross(&gv);
                let gn = gv.norm();
                let (a2, b2) = (na.norm_squared(), nb.norm_squared());
                let di = na * (-gn / a2);
                let dl = nb * (gn / b2);
                let fg = f.dot(&gv) / (a2 * gn);
                let hg = h.dot(&gv) / (b2 * gn);
                let dj = na * (gn / a2) + na * fg - nb * hg;
                let dk = -(di + dj + dl);
                put(&mut b, row, i, di);
                put(&mut b, row, j, dj);
                put(&mut b, row, k, dk);
                put(&mut b, row, l, dl);
            }
        }
    }
    Ok(b)
}

/// `∂X/∂z` (3N × m) of [`super::compose`] at fixed centroid and orientation.
pub fn jacobian_at(state: &DecomposedState, spec: &ZMatrixSpec) -> Result<DMatrix<f64>> {
    state.z.validate(spec)?;
    let n = spec.num_atoms();
    let m = spec.dim();
    let (nr, nt) = (spec.n_r(), spec.n_theta());
    let flat = state.z.to_flat();
    let rot = state.q.to_rotation_matrix();
    let mut jac = DMatrix::zeros(3 * n, m);
    let mut seeded: Vec<Dual> = flat.iter().map(|&v| Dual { v, d: 0.0 }).collect();
    for col in 0..m {
        seeded[col].d = 1.0;
        let pos = canonical_generic(spec, &seeded[..nr], &seeded[nr..nr + nt], &seeded[nr + nt..]);
        seeded[col].d = 0.0;
        let dp: Vec<Vector3<f64>> = pos.iter().map(|p| Vector3::new(p[0].d, p[1].d, p[2].d)).collect();
        let mean = super::centroid(&dp);
        for (atom, d) in dp.iter().enumerate() {
            let world = rot * (d - mean);
            for k in 0..3 {
                jac[(3 * atom + k, col)] = world[k];
            }
        }
    }
    Ok(jac)
}

/// `∂X/∂z` at the conformer `x`; fails on near-linear spec angles.
pub fn jacobian(x: &[Vector3<f64>], spec: &ZMatrixSpec) -> Result<DMatrix<f64>> {
    let d = decompose(x, spec)?;
    check_angles(x, spec)?;
    jacobian_at(&d.state, spec)
}
