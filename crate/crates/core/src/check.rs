//! Self-checks run by `confflow check`: geometry identities, the Jacobian
//! against finite differences, Sinkhorn against exhaustive search, and
//! decompose/compose round trips.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{generate_toy_dataset, ToyDatasetConfig, ToyFamily};
use crate::ot::{log_linear_fit, sinkhorn, transport_cost, uniform, SinkhornConfig};
use crate::so3::{geodesic_distance, quat_exp, quat_log, relative_angular_velocity, slerp, RotVec, UnitQuat};
use crate::zmatrix::{
    build_zmatrix, compose, decompose, jacobian_at, raw_rmsd, Atom, Bond, BondOrder, DecomposedState, InternalCoords,
    MolecularGraph, ZMatrixSpec,
};

/// One line of the check table. `value` is the worst observed error and
/// passes when it does not exceed `tolerance`; for lower-bounded quantities
/// `at_least` is set and the comparison flips.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub suite: &'static str,
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub at_least: bool,
    pub seconds: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        if self.at_least {
            self.value >= self.tolerance
        } else {
            self.value <= self.tolerance
        }
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<34} {:>11.3e} {} {:>9.1e}  {:>7.3}s  {}",
            self.suite,
            self.name,
            self.value,
            if self.at_least { ">=" } else { "<=" },
            self.tolerance,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn row(suite: &'static str, name: &'static str, value: f64, tolerance: f64, start: Instant) -> CheckRow {
    CheckRow {
        suite,
        name,
        value,
        tolerance,
        at_least: false,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_quat(rng: &mut impl Rng) -> UnitQuat {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>();
        if n > 1e-2 && n < 1.0 {
            return UnitQuat::new(v[0], v[1], v[2], v[3]);
        }
    }
}

/// SO(3) identities.
pub fn geometry_suite(rng: &mut impl Rng) -> Vec<CheckRow> {
    let mut out = Vec::new();

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (q0, q1) = (random_quat(rng), random_quat(rng));
        let total = geodesic_distance(&q0, &q1);
        let n = 16;
        for k in 0..n {
            let a = slerp(&q0, &q1, k as f64 / n as f64);
            let b = slerp(&q0, &q1, (k + 1) as f64 / n as f64);
            worst = worst.max((geodesic_distance(&a, &b) - total / n as f64).abs());
        }
    }
    out.push(row("geometry", "slerp constant speed", worst, 1e-9, start));

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (q0, q1) = (random_quat(rng), random_quat(rng));
        let t = rng.random::<f64>();
        let a = slerp(&q0, &q1, t).to_rotation_matrix();
        let b = slerp(&q0, &(-q1), t).to_rotation_matrix();
        let c = slerp(&(-q0), &q1, t).to_rotation_matrix();
        worst = worst.max((a - b).amax()).max((a - c).amax());
    }
    out.push(row("geometry", "double cover (sign of q)", worst, 1e-12, start));

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..200 {
        let (q0, q1) = (random_quat(rng), random_quat(rng));
        if geodesic_distance(&q0, &q1) > PI - 0.1 {
            continue;
        }
        let omega = relative_angular_velocity(&q0, &q1).0;
        let t = rng.random_range(0.1..0.9);
        let fd = quat_log(&(slerp(&q0, &q1, t + h) * slerp(&q0, &q1, t - h).conj())).0 / (2.0 * h);
        worst = worst.max((fd - omega).norm() / omega.norm().max(1e-12));
    }
    out.push(row("geometry", "angular velocity vs finite diff", worst, 1e-5, start));

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if dir.norm() < 1e-3 {
            continue;
        }
        let v = RotVec(dir.normalize() * rng.random_range(0.0..PI - 1e-6));
        worst = worst.max((quat_log(&quat_exp(&v)).0 - v.0).norm());
        let q = random_quat(rng);
        let back = quat_exp(&quat_log(&q)).as_array();
        let a = q.as_array();
        let same = (0..4).map(|i| (back[i] - a[i]).abs()).fold(0.0, f64::max);
        let flipped = (0..4).map(|i| (back[i] + a[i]).abs()).fold(0.0, f64::max);
        worst = worst.max(same.min(flipped));
    }
    out.push(row("geometry", "quat log/exp roundtrip", worst, 1e-10, start));
    out
}

/// Random tree of `n` carbons, at most four bonds per atom.
pub fn random_tree(n: usize, rng: &mut impl Rng) -> MolecularGraph {
    let mut degree = vec![0i32; n];
    let mut bonds = Vec::with_capacity(n.saturating_sub(1));
    for k in 1..n {
        let parent = loop {
            let p = rng.random_range(0..k);
            if degree[p] < 4 {
                break p;
            }
        };
        degree[parent] += 1;
        degree[k] += 1;
        bonds.push(Bond(parent, k, BondOrder::Single));
    }
    let atoms = degree.iter().map(|&d| Atom::simple(6, d)).collect();
    MolecularGraph { atoms, bonds }
}

/// Internal coordinates with bonds in [1.0, 2.0] Å, angles away from 0 and
/// π, and arbitrary torsions.
pub fn random_internals(spec: &ZMatrixSpec, rng: &mut impl Rng) -> InternalCoords {
    InternalCoords {
        r: (0..spec.n_r()).map(|_| rng.random_range(1.0..2.0)).collect(),
        theta: (0..spec.n_theta()).map(|_| rng.random_range(0.6..PI - 0.6)).collect(),
        phi: (0..spec.n_phi()).map(|_| rng.random_range(-PI..PI)).collect(),
    }
}

/// Worst column error of `∂X/∂z` against central differences of `compose`,
/// relative to the column's largest entry.
fn jacobian_error(state: &DecomposedState, spec: &ZMatrixSpec) -> Result<f64> {
    let jac = jacobian_at(state, spec)?;
    let flat = state.z.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for col in 0..flat.len() {
        let shifted = |s: f64| -> Result<Vec<Vector3<f64>>> {
            let mut f = flat.clone();
            f[col] += s;
            compose(&state.c, &state.q, &InternalCoords::from_flat(spec, &f)?, spec)
        };
        let (plus, minus) = (shifted(h)?, shifted(-h)?);
        let fd = DMatrix::from_fn(3 * spec.num_atoms(), 1, |i, _| (plus[i / 3][i % 3] - minus[i / 3][i % 3]) / (2.0 * h));
        let analytic = jac.column(col);
        let scale = fd.amax().max(1e-8);
        worst = worst.max((analytic - fd.column(0)).amax() / scale);
    }
    Ok(worst)
}

/// Jacobian columns over random trees of up to 12 atoms and puckered rings.
pub fn jacobian_suite(rng: &mut impl Rng, geometries: usize) -> Result<Vec<CheckRow>> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for g in 0..geometries {
        let (spec, z) = if g % 10 == 0 {
            let size = [6, 8, 10, 12][(g / 10) % 4];
            let (d, _) = generate_toy_dataset(&ToyDatasetConfig {
                family: ToyFamily::FixedRing,
                chain_length: size,
                n_molecules: 1,
                conformers_per_molecule: 1,
                seed: rng.random(),
                ..ToyDatasetConfig::default()
            })?;
            let m = &d.molecules[0];
            let spec = build_zmatrix(&m.graph)?;
            let z = decompose(&m.conformers[0], &spec)?.state.z;
            (spec, z)
        } else {
            let n = rng.random_range(4..=12);
            let spec = build_zmatrix(&random_tree(n, rng))?;
            let z = random_internals(&spec, rng);
            (spec, z)
        };
        let state = DecomposedState {
            c: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            q: random_quat(rng),
            z,
        };
        worst = worst.max(jacobian_error(&state, &spec)?);
    }
    Ok(vec![row("jacobian", "columns vs central differences", worst, 1e-5, start)])
}

/// Brute-force minimum of `⟨C, P_σ⟩` over permutation couplings with
/// uniform weights.
pub fn permutation_optimum(c: &DMatrix<f64>) -> f64 {
    fn rec(c: &DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                rec(c, row + 1, used, acc + c[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
    best / c.nrows() as f64
}

/// Marginal accuracy, agreement with exhaustive search, and the
/// exponential convergence rate.
pub fn sinkhorn_suite(rng: &mut impl Rng) -> Result<Vec<CheckRow>> {
    let mut out = Vec::new();

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_r2: f64 = 1.0;
    let cfg = SinkhornConfig {
        epsilon: 0.1,
        max_iters: 100,
        tol: 1e-6,
    };
    for _ in 0..20 {
        let c = DMatrix::from_fn(32, 32, |_, _| rng.random::<f64>());
        let p = sinkhorn(&c, &uniform(32), &uniform(32), &cfg)?;
        worst = worst.max(p.marginal_error);
        let tight = sinkhorn(&c, &uniform(32), &uniform(32), &SinkhornConfig { tol: 1e-13, ..cfg })?;
        let fitted: Vec<f64> = tight.error_history.iter().copied().take_while(|e| *e > 1e-12).collect();
        if fitted.len() >= 3 {
            worst_r2 = worst_r2.min(log_linear_fit(&fitted).1);
        }
    }
    out.push(row("sinkhorn", "32x32 marginal L1 in 100 iters", worst, 1e-6, start));
    out.push(CheckRow {
        at_least: true,
        ..row("sinkhorn", "exponential convergence R^2", worst_r2, 0.95, start)
    });

    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..30 {
        let n = 2 + k % 5;
        let c = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        let exact = permutation_optimum(&c);
        let p = sinkhorn(
            &c,
            &uniform(n),
            &uniform(n),
            &SinkhornConfig {
                epsilon: 1e-3,
                max_iters: 20_000,
                tol: 1e-9,
            },
        )?;
        let got = transport_cost(&c, &p.plan);
        worst = worst.max((got - exact) / exact.max(1e-12));
    }
    out.push(row("sinkhorn", "eps=1e-3 cost vs permutation opt", worst, 0.05, start));
    Ok(out)
}

/// `compose(decompose(X))` on rigidly moved toy chains and rings.
pub fn roundtrip_suite(seed: u64, conformers: usize) -> Result<Vec<CheckRow>> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let per = conformers.div_ceil(4).max(1);
    for (k, (family, len)) in [
        (ToyFamily::ChainAlkaneLike, 4),
        (ToyFamily::ChainAlkaneLike, 9),
        (ToyFamily::FixedRing, 6),
        (ToyFamily::FixedRing, 10),
    ]
    .into_iter()
    .enumerate()
    {
        let (d, _) = generate_toy_dataset(&ToyDatasetConfig {
            family,
            chain_length: len,
            n_molecules: 1,
            conformers_per_molecule: per,
            seed: seed.wrapping_add(k as u64),
            random_rigid_motion: true,
            ..ToyDatasetConfig::default()
        })?;
        let m = &d.molecules[0];
        let spec = build_zmatrix(&m.graph)?;
        for x in &m.conformers {
            let s = decompose(x, &spec)?.state;
            worst = worst.max(raw_rmsd(&compose(&s.c, &s.q, &s.z, &spec)?, x));
        }
    }
    Ok(vec![row("roundtrip", "compose(decompose(X)) RMSD (A)", worst, 1e-6, start)])
}

/// Every suite at its acceptance size.
pub fn run_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = geometry_suite(&mut rng);
    rows.extend(jacobian_suite(&mut rng, 100)?);
    rows.extend(sinkhorn_suite(&mut rng)?);
    rows.extend(roundtrip_suite(seed, 1000)?);
    Ok(rows)
}
