//! Sequential atom placement (natural extension reference frame).

use nalgebra::Vector3;

use super::scalar::{add, cross, normalize, scale, sub, Scalar, V3};
use super::{InternalCoords, ZMatrixSpec};
use crate::error::Result;
use crate::so3::UnitQuat;

/// Places `d` so that `|cd| = r`, `∠bcd = theta` and the dihedral `a-b-c-d`
/// equals `phi`.
pub(crate) fn place<T: Scalar>(a: V3<T>, b: V3<T>, c: V3<T>, r: T, theta: T, phi: T) -> V3<T> {
    let bc = normalize(sub(c, b));
    let n = normalize(cross(sub(b, a), bc));
    let m = cross(n, bc);
    let d0 = -(r * theta.cos());
    let d1 = r * theta.sin() * phi.cos();
    let d2 = r * theta.sin() * phi.sin();
    add(c, add(scale(bc, d0), add(scale(m, d1), scale(n, d2))))
}

/// Atom positions in the canonical frame, indexed by atom. `r`, `theta` and
/// `phi` are the flat coordinate blocks of `z`.
pub(crate) fn canonical_generic<T: Scalar>(spec: &ZMatrixSpec, r: &[T], theta: &[T], phi: &[T]) -> Vec<V3<T>> {
    let zero = T::constant(0.0);
    let mut pos = vec![[zero; 3]; spec.num_atoms()];
    for (k, e) in spec.entries.iter().enumerate() {
        pos[e.atom] = match k {
            0 => [zero; 3],
            1 => [r[0], zero, zero],
            2 => {
                let c = pos[e.parent.unwrap()];
                let b = pos[e.grandparent.unwrap()];
                // b and c lie on the x axis; the third atom goes to y > 0
                let bc = normalize(sub(c, b));
                let up = [zero, T::constant(1.0), zero];
                let rr = r[1];
                let t = theta[0];
                add(c, add(scale(bc, -(rr * t.cos())), scale(up, rr * t.sin())))
            }
            _ => place(
                pos[e.great_grandparent.unwrap()],
                pos[e.grandparent.unwrap()],
                pos[e.parent.unwrap()],
                r[k - 1],
                theta[k - 2],
                phi[k - 3],
            ),
        };
    }
    pos
}

/// Atom positions of `z` in the canonical frame (not centered).
pub fn canonical_positions(z: &InternalCoords, spec: &ZMatrixSpec) -> Vec<Vector3<f64>> {
    canonical_generic(spec, &z.r, &z.theta, &z.phi)
        .into_iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect()
}

/// `X = c + R(q) (P(z) - mean P(z))`.
pub fn compose(c: &Vector3<f64>, q: &UnitQuat, z: &InternalCoords, spec: &ZMatrixSpec) -> Result<Vec<Vector3<f64>>> {
    z.validate(spec)?;
    let p = canonical_positions(z, spec);
    let mean = super::centroid(&p);
    let rot = q.to_rotation_matrix();
    Ok(p.iter().map(|x| c + rot * (x - mean)).collect())
}
