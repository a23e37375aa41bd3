//! Interpolants, target velocities and priors on the decomposed manifold.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{quat_exp, quat_log, relative_angular_velocity, slerp, RotVec, UnitQuat};
use crate::zmatrix::{compose, decompose, jacobian_at, wrap_angle, Conformer, DecomposedState, InternalCoords, ZMatrixSpec};

pub const R_FLOOR: f64 = 0.3;
pub const THETA_MARGIN: f64 = 1e-3;
pub const DEFAULT_R_MEAN: f64 = 1.5;
pub const DEFAULT_THETA_MEAN: f64 = 109.5 * PI / 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub sigma_trans: f64,
    pub sigma_rot: f64,
    pub sigma_conf: f64,
    pub reference_internals: Option<InternalCoords>,
    /// Scale of the torsion channel when it should differ from `sigma_conf`.
    #[serde(default)]
    pub sigma_torsion: Option<f64>,
    /// Draw an isotropic Cartesian Gaussian cloud (unit variance) and
    /// decompose it instead of sampling each manifold separately.
    #[serde(default)]
    pub cartesian: bool,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            sigma_trans: 0.5,
            sigma_rot: 0.3,
            sigma_conf: 0.1,
            reference_internals: None,
            sigma_torsion: None,
            cartesian: false,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_trans", self.sigma_trans), ("sigma_rot", self.sigma_rot), ("sigma_conf", self.sigma_conf)] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {s}")));
            }
        }
        if let Some(s) = self.sigma_torsion {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(format!("sigma_torsion must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn torsion_scale(&self) -> f64 {
        self.sigma_torsion.unwrap_or(self.sigma_conf)
    }

    /// Prior centre of the internal coordinates.
    pub fn means(&self, zspec: &ZMatrixSpec) -> InternalCoords {
        match &self.reference_internals {
            Some(z) => z.clone(),
            None => InternalCoords {
                r: vec![DEFAULT_R_MEAN; zspec.n_r()],
                theta: vec![DEFAULT_THETA_MEAN; zspec.n_theta()],
                phi: vec![0.0; zspec.n_phi()],
            },
        }
    }
}

/// Interpolated state with the three constant-speed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub state_t: DecomposedState,
    pub target_v_trans: Vector3<f64>,
    pub target_omega: RotVec,
    pub target_v_conf: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_rotvec(sigma: f64, rng: &mut impl Rng) -> RotVec {
    loop {
        let v = RotVec::new(sigma * normal(rng), sigma * normal(rng), sigma * normal(rng));
        if v.norm() < PI {
            return v;
        }
    }
}

/// Draws `(c₀, q₀, z₀)` from the decomposed prior.
pub fn sample_prior(spec: &PriorSpec, zspec: &ZMatrixSpec, rng: &mut impl Rng) -> DecomposedState {
    if spec.cartesian {
        return sample_cartesian_prior(zspec, rng);
    }
    let c = Vector3::new(normal(rng), normal(rng), normal(rng)) * spec.sigma_trans;
    let q = quat_exp(&sample_rotvec(spec.sigma_rot, rng));
    let mean = spec.means(zspec);
    let s = spec.sigma_conf;
    let z = InternalCoords {
        r: mean.r.iter().map(|m| (m + s * normal(rng)).max(R_FLOOR)).collect(),
        theta: mean
            .theta
            .iter()
            .map(|m| (m + s * normal(rng)).clamp(THETA_MARGIN, PI - THETA_MARGIN))
            .collect(),
        phi: mean
            .phi
            .iter()
            .map(|m| wrap_angle(m + spec.torsion_scale() * normal(rng)))
            .collect(),
    };
    DecomposedState { c, q, z }
}

fn sample_cartesian_prior(zspec: &ZMatrixSpec, rng: &mut impl Rng) -> DecomposedState {
    loop {
        let x: Conformer = (0..zspec.num_atoms())
            .map(|_| Vector3::new(normal(rng), normal(rng), normal(rng)))
            .collect();
        if let Ok(d) = decompose(&x, zspec) {
            if d.clamped_angles.is_empty() {
                return d.state;
            }
        }
    }
}

fn log_normal(x: f64, mean: f64, sigma: f64) -> f64 {
    let u = (x - mean) / sigma;
    -0.5 * u * u - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

fn log_wrapped_normal(x: f64, mean: f64, sigma: f64) -> f64 {
    let d = wrap_angle(x - mean);
    let terms: Vec<f64> = (-3..=3).map(|k| log_normal(d + 2.0 * PI * k as f64, 0.0, sigma)).collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `P(|v| < π)` for `v ~ N(0, σ²I₃)`.
fn truncation_mass(sigma: f64) -> f64 {
    let x = PI / sigma;
    statrs::function::erf::erf(x / 2f64.sqrt()) - (2.0 / PI).sqrt() * x * (-0.5 * x * x).exp()
}

/// Log-density of the decomposed prior at `state`.
///
/// The orientation part is taken with respect to the Haar measure scaled to
/// agree with Lebesgue measure on rotation vectors at the identity, so the
/// exponential-coordinate volume factor `(sin(a/2)/(a/2))²` is divided out.
/// Torsions use a wrapped normal; the floor and clamps on `r` and `θ` are
/// ignored.
pub fn prior_log_density(spec: &PriorSpec, zspec: &ZMatrixSpec, state: &DecomposedState) -> Result<f64> {
    if spec.cartesian {
        return Err(Error::validation("the Cartesian prior has no density on the decomposed chart"));
    }
    state.z.validate(zspec)?;
    let mut lp: f64 = state.c.iter().map(|x| log_normal(*x, 0.0, spec.sigma_trans)).sum();

    let v = quat_log(&state.q);
    let a = v.norm();
    lp += v.0.iter().map(|x| log_normal(*x, 0.0, spec.sigma_rot)).sum::<f64>();
    lp -= truncation_mass(spec.sigma_rot).ln();
    let half = 0.5 * a;
    let sinc = if half < 1e-4 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    lp -= 2.0 * sinc.ln();

    let mean = spec.means(zspec);
    let s = spec.sigma_conf;
    lp += state.z.r.iter().zip(&mean.r).map(|(x, m)| log_normal(*x, *m, s)).sum::<f64>();
    lp += state.z.theta.iter().zip(&mean.theta).map(|(x, m)| log_normal(*x, *m, s)).sum::<f64>();
    lp += state.z.phi.iter().zip(&mean.phi).map(|(x, m)| log_wrapped_normal(*x, *m, spec.torsion_scale())).sum::<f64>();
    Ok(lp)
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("path time t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `c_t = (1 − t)c₀ + t c₁` with velocity `c₁ − c₀`.
pub fn path_translation(c0: &Vector3<f64>, c1: &Vector3<f64>, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    (c0 * (1.0 - t) + c1 * t, c1 - c0)
}

/// SLERP with the world-frame angular velocity of the geodesic.
pub fn path_rotation(q0: &UnitQuat, q1: &UnitQuat, t: f64) -> (UnitQuat, RotVec) {
    (slerp(q0, q1, t), relative_angular_velocity(q0, q1))
}

fn check_domain(z: &InternalCoords) -> Result<()> {
    if let Some(r) = z.r.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::validation(format!("bond length {r} must be positive")));
    }
    if let Some(t) = z.theta.iter().find(|t| !(t.is_finite() && **t > 0.0 && **t < PI)) {
        return Err(Error::validation(format!("bond angle {t} outside (0, pi)")));
    }
    if let Some(p) = z.phi.iter().find(|p| !p.is_finite()) {
        return Err(Error::validation(format!("torsion {p} is not finite")));
    }
    Ok(())
}

/// Log-linear bonds, linear angles and short-arc torsions. The returned
/// velocity is in flat `[r, θ, φ]` order.
pub fn path_conformation(z0: &InternalCoords, z1: &InternalCoords, t: f64) -> Result<(InternalCoords, Vec<f64>)> {
    check_domain(z0)?;
    check_domain(z1)?;
    if z0.r.len() != z1.r.len() || z0.theta.len() != z1.theta.len() || z0.phi.len() != z1.phi.len() {
        return Err(Error::structural("endpoint internal coordinates differ in shape"));
    }
    let mut v = Vec::with_capacity(z0.len());
    let mut r = Vec::with_capacity(z0.r.len());
    for (a, b) in z0.r.iter().zip(&z1.r) {
        let rate = b.ln() - a.ln();
        let rt = (a.ln() + t * rate).exp();
        r.push(rt);
        v.push(rt * rate);
    }
    let mut theta = Vec::with_capacity(z0.theta.len());
    for (a, b) in z0.theta.iter().zip(&z1.theta) {
        theta.push(a + t * (b - a));
        v.push(b - a);
    }
    let mut phi = Vec::with_capacity(z0.phi.len());
    for (a, b) in z0.phi.iter().zip(&z1.phi) {
        let d = wrap_angle(b - a);
        phi.push(wrap_angle(a + t * d));
        v.push(d);
    }
    Ok((InternalCoords { r, theta, phi }, v))
}

/// Builds the interpolated state and targets between paired endpoints.
pub fn sample_path(s0: &DecomposedState, s1: &DecomposedState, t: f64) -> Result<PathSample> {
    check_t(t)?;
    let (c, v_trans) = path_translation(&s0.c, &s1.c, t);
    let (q, omega) = path_rotation(&s0.q, &s1.q, t);
    let (z, v_conf) = path_conformation(&s0.z, &s1.z, t)?;
    Ok(PathSample {
        t,
        state_t: DecomposedState { c, q, z },
        target_v_trans: v_trans,
        target_omega: omega,
        target_v_conf: v_conf,
    })
}

/// Per-atom velocity `v_trans + ω × (x_i − c) + (J v_conf)_i`.
pub fn compose_cartesian_velocity(
    v_trans: &Vector3<f64>,
    omega: &RotVec,
    v_conf: &[f64],
    x: &[Vector3<f64>],
    c: &Vector3<f64>,
    j: &DMatrix<f64>,
) -> Result<Vec<Vector3<f64>>> {
    if j.nrows() != 3 * x.len() || j.ncols() != v_conf.len() {
        return Err(Error::structural(format!(
            "jacobian is {}x{}, expected {}x{}",
            j.nrows(),
            j.ncols(),
            3 * x.len(),
            v_conf.len()
        )));
    }
    let jv = j * nalgebra::DVector::from_column_slice(v_conf);
    Ok(x
        .iter()
        .enumerate()
        .map(|(i, xi)| v_trans + omega.0.cross(&(xi - c)) + Vector3::new(jv[3 * i], jv[3 * i + 1], jv[3 * i + 2]))
        .collect())
}

/// Cartesian velocity of the composed path at `sample.t`.
pub fn cartesian_target_velocity(sample: &PathSample, zspec: &ZMatrixSpec) -> Result<Vec<Vector3<f64>>> {
    let s = &sample.state_t;
    let x = compose(&s.c, &s.q, &s.z, zspec)?;
    let j = jacobian_at(s, zspec)?;
    compose_cartesian_velocity(&sample.target_v_trans, &sample.target_omega, &sample.target_v_conf, &x, &s.c, &j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::geodesic_distance;
    use crate::zmatrix::{build_zmatrix, MolecularGraph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_spec() -> ZMatrixSpec {
        build_zmatrix(&MolecularGraph::ring(6, 6)).unwrap()
    }

    fn random_state(zspec: &ZMatrixSpec, rng: &mut impl Rng) -> DecomposedState {
        DecomposedState {
            c: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            q: quat_exp(&RotVec::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))),
            z: InternalCoords {
                r: (0..zspec.n_r()).map(|_| rng.random_range(1.1..1.7)).collect(),
                theta: (0..zspec.n_theta()).map(|_| rng.random_range(1.7..2.2)).collect(),
                phi: (0..zspec.n_phi()).map(|_| rng.random_range(-PI..PI)).collect(),
            },
        }
    }

    #[test]
    fn prior_limits_and_statistics() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tiny = PriorSpec { sigma_trans: 1e-300, sigma_rot: 1e-300, ..Default::default() };
        let s = sample_prior(&tiny, &zspec, &mut rng);
        assert!(s.c.norm() < 1e-290);
        assert!(s.q.same_rotation(&UnitQuat::IDENTITY, 1e-15));

        let spec = PriorSpec::default();
        let n = 10_000;
        let draws: Vec<DecomposedState> = (0..n).map(|_| sample_prior(&spec, &zspec, &mut rng)).collect();
        for k in 0..3 {
            let mean = draws.iter().map(|d| d.c[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d.c[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var.sqrt() - 0.5).abs() < 0.025, "{}", var.sqrt());
        }
        for d in &draws {
            d.z.validate(&zspec).unwrap();
            assert!(quat_log(&d.q).norm() < PI);
        }
    }

    #[test]
    fn cartesian_prior_is_decomposable() {
        let zspec = ring_spec();
        let spec = PriorSpec { cartesian: true, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_prior(&spec, &zspec, &mut rng);
        s.z.validate(&zspec).unwrap();
        assert!(prior_log_density(&spec, &zspec, &s).is_err());
    }

    #[test]
    fn prior_density_integrates_to_one_in_one_dimension() {
        // rotation part: integrate the density over the ball with the Haar
        // volume factor in exponential coordinates (radial quadrature)
        let zspec = build_zmatrix(&MolecularGraph::chain(6, 1)).unwrap();
        let spec = PriorSpec { sigma_rot: 1.2, sigma_trans: 1.0, ..Default::default() };
        let n = 20_000;
        let h = PI / n as f64;
        let mut total = 0.0;
        for k in 0..n {
            let a = (k as f64 + 0.5) * h;
            let state = DecomposedState {
                c: Vector3::zeros(),
                q: quat_exp(&RotVec::new(0.0, 0.0, a)),
                z: InternalCoords { r: vec![], theta: vec![], phi: vec![] },
            };
            let lp = prior_log_density(&spec, &zspec, &state).unwrap() - 3.0 * log_normal(0.0, 0.0, 1.0);
            let haar = 2.0 * (1.0 - a.cos()) / (a * a);
            total += lp.exp() * haar * 4.0 * PI * a * a * h;
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn wrapped_normal_normalizes() {
        let n = 20_000;
        let h = 2.0 * PI / n as f64;
        let total: f64 = (0..n)
            .map(|k| log_wrapped_normal(-PI + (k as f64 + 0.5) * h, 2.5, 1.3).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn translation_path_cases() {
        let (c, v) = path_translation(&Vector3::zeros(), &Vector3::new(2.0, 0.0, 0.0), 0.25);
        assert_eq!(c, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(v, Vector3::new(2.0, 0.0, 0.0));
        let c0 = Vector3::new(1.0, -2.0, 0.5);
        assert_eq!(path_translation(&c0, &c0, 0.7), (c0, Vector3::zeros()));
    }

    #[test]
    fn rotation_path_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zspec = ring_spec();
        for _ in 0..20 {
            let q0 = random_state(&zspec, &mut rng).q;
            let q1 = random_state(&zspec, &mut rng).q;
            let (q, w) = path_rotation(&q0, &q0, 0.3);
            assert!(q.same_rotation(&q0, 1e-15));
            assert!(w.norm() < 1e-12);
            assert!(path_rotation(&q0, &q1, 1.0).0.same_rotation(&q1, 1e-12));

            let t: f64 = rng.random_range(0.05..0.95);
            let h = 1e-6;
            let (qt, w) = path_rotation(&q0, &q1, t);
            let qp = path_rotation(&q0, &q1, t + h).0;
            let qm = path_rotation(&q0, &q1, t - h).0;
            let sign = |q: UnitQuat| if q.dot(&qt) < 0.0 { -q } else { q };
            let (qp, qm) = (sign(qp).as_array(), sign(qm).as_array());
            let fd: Vec<f64> = (0..4).map(|k| (qp[k] - qm[k]) / (2.0 * h)).collect();
            let expected = UnitQuat::from_raw(0.0, w.0.x, w.0.y, w.0.z);
            // ½ ω ⊗ q as a raw quaternion product
            let a = expected.as_array();
            let b = qt.as_array();
            let prod = [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ];
            let scale = w.norm();
            for k in 0..4 {
                let exact = 0.5 * prod[k] * scale;
                assert!((fd[k] - exact).abs() <= 1e-5 * scale.max(1e-3), "{} vs {}", fd[k], exact);
            }
        }
    }

    #[test]
    fn conformation_path_cases() {
        let z0 = InternalCoords { r: vec![1.0], theta: vec![], phi: vec![3.0] };
        let z1 = InternalCoords { r: vec![4.0], theta: vec![], phi: vec![-3.0] };
        let (zt, v) = path_conformation(&z0, &z1, 0.5).unwrap();
        assert!((zt.r[0] - 2.0).abs() < 1e-15);
        let expected_phi = wrap_angle(3.0 + 0.5 * (2.0 * PI - 6.0));
        assert!((zt.phi[0] - expected_phi).abs() < 1e-15);
        assert!((zt.phi[0].abs() - PI).abs() < 1e-9);
        assert!((v[1] - 0.2832).abs() < 1e-4);
        assert!((v[0] - 2.0 * 4f64.ln()).abs() < 1e-14);

        let (same, v0) = path_conformation(&z0, &z0, 0.3).unwrap();
        assert_eq!(same, z0);
        assert!(v0.iter().all(|x| *x == 0.0));

        let bad = InternalCoords { r: vec![-1.0], theta: vec![], phi: vec![0.0] };
        assert!(matches!(path_conformation(&bad, &z1, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn conformation_path_stays_in_domain() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = random_state(&zspec, &mut rng).z;
            let mut b = random_state(&zspec, &mut rng).z;
            b.r.iter_mut().for_each(|r| *r *= rng.random_range(0.01..100.0));
            let t = rng.random_range(0.0..=1.0);
            let (zt, v) = path_conformation(&a, &b, t).unwrap();
            zt.validate(&zspec).unwrap();
            for p in &v[zspec.n_r() + zspec.n_theta()..] {
                assert!(p.abs() <= PI);
            }
        }
    }

    #[test]
    fn cartesian_velocity_cases() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_state(&zspec, &mut rng);
        let x = compose(&s.c, &s.q, &s.z, &zspec).unwrap();
        let j = jacobian_at(&s, &zspec).unwrap();
        let vt = Vector3::new(0.3, -1.0, 2.0);
        let zero_conf = vec![0.0; zspec.dim()];
        let v = compose_cartesian_velocity(&vt, &RotVec::zeros(), &zero_conf, &x, &s.c, &j).unwrap();
        assert!(v.iter().all(|vi| *vi == vt));

        let atom = vec![Vector3::new(2.0, 1.0, 1.0)];
        let j1 = DMatrix::zeros(3, 0);
        let v = compose_cartesian_velocity(&Vector3::zeros(), &RotVec::new(0.0, 0.0, 1.0), &[], &atom, &Vector3::new(1.0, 1.0, 1.0), &j1).unwrap();
        assert_eq!(v[0], Vector3::new(0.0, 1.0, 0.0));

        assert!(matches!(
            compose_cartesian_velocity(&vt, &RotVec::zeros(), &[0.0], &x, &s.c, &j),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn composed_velocity_matches_finite_difference() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let s = random_state(&zspec, &mut rng);
            let vt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let w = RotVec::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let vc: Vec<f64> = (0..zspec.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let x = compose(&s.c, &s.q, &s.z, &zspec).unwrap();
            let j = jacobian_at(&s, &zspec).unwrap();
            let v = compose_cartesian_velocity(&vt, &w, &vc, &x, &s.c, &j).unwrap();
            let step = |h: f64| {
                let flat: Vec<f64> = s.z.to_flat().iter().zip(&vc).map(|(z, d)| z + h * d).collect();
                let z = InternalCoords::from_flat(&zspec, &flat).unwrap();
                compose(&(s.c + vt * h), &(quat_exp(&w.scale(h)) * s.q), &z, &zspec).unwrap()
            };
            let h = 1e-5;
            let (xp, xm) = (step(h), step(-h));
            for i in 0..x.len() {
                let fd = (xp[i] - xm[i]) / (2.0 * h);
                assert!((fd - v[i]).norm() <= 1e-4 * v[i].norm().max(1e-2), "{fd} vs {}", v[i]);
            }
        }
    }

    #[test]
    fn target_velocity_matches_path_derivative() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let s0 = random_state(&zspec, &mut rng);
            let s1 = random_state(&zspec, &mut rng);
            let t = rng.random_range(0.1..0.9);
            let sample = sample_path(&s0, &s1, t).unwrap();
            let v = cartesian_target_velocity(&sample, &zspec).unwrap();
            let at = |t: f64| {
                let p = sample_path(&s0, &s1, t).unwrap().state_t;
                compose(&p.c, &p.q, &p.z, &zspec).unwrap()
            };
            let h = 1e-5;
            let (xp, xm) = (at(t + h), at(t - h));
            let norm: f64 = v.iter().map(|vi| vi.norm_squared()).sum::<f64>().sqrt();
            let err: f64 = v
                .iter()
                .zip(xp.iter().zip(&xm))
                .map(|(vi, (p, m))| ((p - m) / (2.0 * h) - vi).norm_squared())
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-4 * norm, "{err} vs {norm}");
        }
    }

    #[test]
    fn target_velocity_trivial_cases() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s0 = random_state(&zspec, &mut rng);
        let sample = sample_path(&s0, &s0, 0.4).unwrap();
        assert!(cartesian_target_velocity(&sample, &zspec).unwrap().iter().all(|v| v.norm() < 1e-12));
        let mut s1 = s0.clone();
        s1.c += Vector3::new(1.0, 2.0, -0.5);
        let sample = sample_path(&s0, &s1, 0.4).unwrap();
        for v in cartesian_target_velocity(&sample, &zspec).unwrap() {
            assert!((v - Vector3::new(1.0, 2.0, -0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn endpoint_reproduces_data() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = PriorSpec::default();
        for _ in 0..20 {
            let s1 = random_state(&zspec, &mut rng);
            let x1 = compose(&s1.c, &s1.q, &s1.z, &zspec).unwrap();
            let s0 = sample_prior(&prior, &zspec, &mut rng);
            let p = sample_path(&s0, &s1, 1.0).unwrap().state_t;
            let x = compose(&p.c, &p.q, &p.z, &zspec).unwrap();
            assert!(crate::zmatrix::raw_rmsd(&x, &x1) < 1e-6);
            assert!(geodesic_distance(&p.q, &s1.q) < 1e-6);
        }
    }

    #[test]
    fn z_path_is_rotation_invariant() {
        let zspec = ring_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s1 = random_state(&zspec, &mut rng);
        let x1 = compose(&s1.c, &s1.q, &s1.z, &zspec).unwrap();
        let rot = quat_exp(&RotVec::new(0.4, -2.0, 1.0));
        let x2: Conformer = x1.iter().map(|p| rot.rotate(p) + Vector3::new(3.0, 1.0, -1.0)).collect();
        let d1 = decompose(&x1, &zspec).unwrap().state;
        let d2 = decompose(&x2, &zspec).unwrap().state;
        let s0 = sample_prior(&PriorSpec::default(), &zspec, &mut rng);
        let (za, va) = path_conformation(&s0.z, &d1.z, 0.37).unwrap();
        let (zb, vb) = path_conformation(&s0.z, &d2.z, 0.37).unwrap();
        let (fa, fb) = (za.to_flat(), zb.to_flat());
        for k in 0..fa.len() {
            assert!(wrap_angle(fa[k] - fb[k]).abs() < 1e-9);
            assert!((va[k] - vb[k]).abs() < 1e-9);
        }
    }
}
