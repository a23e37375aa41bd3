//! Entropic optimal transport between minibatches of internal coordinates.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zmatrix::{wrap_angle, InternalCoords};

/// Per-channel weights of the transport cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub alpha_r: f64,
    pub alpha_theta: f64,
    pub alpha_phi: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            alpha_r: 1.0,
            alpha_theta: 1.0,
            alpha_phi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: DMatrix<f64>,
    pub weights: CostWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Entropic coupling `diag(u) K diag(v)` with solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: DMatrix<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// `‖rowsums − a‖₁ + ‖colsums − b‖₁` at exit.
    pub marginal_error: f64,
    pub converged: bool,
    /// Marginal error after every iteration.
    pub error_history: Vec<f64>,
}

/// Per-channel difference `z1 − z0`, with torsions along the short arc.
pub fn internal_delta(z0: &InternalCoords, z1: &InternalCoords) -> Vec<f64> {
    let mut d = Vec::with_capacity(z0.len());
    d.extend(z0.r.iter().zip(&z1.r).map(|(a, b)| b - a));
    d.extend(z0.theta.iter().zip(&z1.theta).map(|(a, b)| b - a));
    d.extend(z0.phi.iter().zip(&z1.phi).map(|(a, b)| wrap_angle(b - a)));
    d
}

fn same_shape(a: &InternalCoords, b: &InternalCoords) -> bool {
    a.r.len() == b.r.len() && a.theta.len() == b.theta.len() && a.phi.len() == b.phi.len()
}

/// `C_ij = α_r‖r_i − r_j‖² + α_θ‖θ_i − θ_j‖² + α_φ‖wrap(φ_i − φ_j)‖²`.
pub fn cost_matrix(z0: &[InternalCoords], z1: &[InternalCoords], weights: CostWeights) -> Result<CostMatrix> {
    let Some(first) = z0.first().or(z1.first()) else {
        return Ok(CostMatrix {
            values: DMatrix::zeros(0, 0),
            weights,
        });
    };
    if let Some((k, _)) = z0.iter().chain(z1).enumerate().find(|(_, z)| !same_shape(first, z)) {
        return Err(Error::structural(format!(
            "internal coordinates in the batch do not share one z-matrix (item {k})"
        )));
    }
    let values = DMatrix::from_fn(z0.len(), z1.len(), |i, j| {
        let (a, b) = (&z0[i], &z1[j]);
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let tors: f64 = a.phi.iter().zip(&b.phi).map(|(p, q)| wrap_angle(p - q).powi(2)).sum();
        weights.alpha_r * sq(&a.r, &b.r) + weights.alpha_theta * sq(&a.theta, &b.theta) + weights.alpha_phi * tors
    });
    Ok(CostMatrix { values, weights })
}

fn check_simplex(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::structural(format!("marginal {name} has length {}, expected {n}", v.len())));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::validation(format!("marginal {name} must be strictly positive")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("marginal {name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterations.
///
/// Potentials `f, g` replace the scalings `u = exp(f/ε)`, `v = exp(g/ε)`.
/// Stops once the L1 marginal error drops to `tol`; on hitting `max_iters`
/// the plan is returned with `converged = false`.
pub fn sinkhorn(cost: &DMatrix<f64>, a: &[f64], b: &[f64], config: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    let eps = config.epsilon;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::validation(format!("epsilon must be positive, got {eps}")));
    }
    check_simplex("a", a, n)?;
    check_simplex("b", b, m)?;
    if cost.iter().any(|c| !c.is_finite()) {
        let scaled = cost.map(|c| c / eps);
        let lo = scaled.iter().copied().filter(|v| !v.is_nan()).fold(f64::INFINITY, f64::min);
        let hi = scaled.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::numerical(format!(
            "non-finite transport kernel: C/epsilon spans [{lo}, {hi}]"
        )));
    }

    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut history = Vec::new();
    let mut converged = false;
    let mut plan = DMatrix::zeros(n, m);

    for _ in 0..config.max_iters {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        plan = DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp());
        let err = marginal_error(&plan, a, b);
        if !err.is_finite() {
            return Err(Error::numerical("sinkhorn produced a non-finite plan"));
        }
        history.push(err);
        if err <= config.tol {
            converged = true;
            break;
        }
    }
    let marginal_error = history.last().copied().unwrap_or(f64::INFINITY);
    if !converged {
        log::debug!("sinkhorn stopped after {} iterations, error {marginal_error}", history.len());
    }
    Ok(TransportPlan {
        plan,
        epsilon: eps,
        iterations_used: history.len(),
        marginal_error,
        converged,
        error_history: history,
    })
}

/// `‖P·1 − a‖₁ + ‖Pᵀ·1 − b‖₁`.
pub fn marginal_error(plan: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = (0..plan.nrows()).map(|i| (plan.row(i).sum() - a[i]).abs()).sum();
    let cols: f64 = (0..plan.ncols()).map(|j| (plan.column(j).sum() - b[j]).abs()).sum();
    rows + cols
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Samples one partner `j` per row `i` from the normalized row, by inverse
/// CDF over the row in index order.
pub fn ot_pairing(plan: &TransportPlan, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let p = &plan.plan;
    let mut pairs = Vec::with_capacity(p.nrows());
    for i in 0..p.nrows() {
        let total = p.row(i).sum();
        if !(total > 0.0) {
            return Err(Error::numerical(format!("transport plan row {i} has no mass")));
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = p.ncols() - 1;
        for j in 0..p.ncols() {
            acc += p[(i, j)];
            if u < acc {
                pick = j;
                break;
            }
        }
        pairs.push((i, pick));
    }
    Ok(pairs)
}

/// Conditional mean displacement of row `i` under the plan.
pub fn barycentric_velocity(
    plan: &TransportPlan,
    z0: &[InternalCoords],
    z1: &[InternalCoords],
    i: usize,
) -> Result<Vec<f64>> {
    let p = &plan.plan;
    let total = p.row(i).sum();
    if !(total > 0.0) {
        return Err(Error::numerical(format!("transport plan row {i} has no mass")));
    }
    let mut v = vec![0.0; z0[i].len()];
    for (j, zj) in z1.iter().enumerate() {
        let w = p[(i, j)];
        if w == 0.0 {
            continue;
        }
        for (acc, d) in v.iter_mut().zip(internal_delta(&z0[i], zj)) {
            *acc += w * d;
        }
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

/// `⟨C, π⟩`.
pub fn transport_cost(cost: &DMatrix<f64>, plan: &DMatrix<f64>) -> f64 {
    cost.component_mul(plan).sum()
}

/// Least-squares fit of `ln(error)` against iteration index; returns
/// `(slope, r²)`.
pub fn log_linear_fit(errors: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0)
        .map(|(k, e)| (k as f64, e.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn torsion_only(phi: f64) -> InternalCoords {
        InternalCoords {
            r: vec![],
            theta: vec![],
            phi: vec![phi],
        }
    }

    fn scalar_r(r: f64) -> InternalCoords {
        InternalCoords {
            r: vec![r],
            theta: vec![],
            phi: vec![],
        }
    }

    /// Brute-force minimum of ⟨C, P_σ⟩ over permutation couplings.
    fn permutation_optimum(c: &DMatrix<f64>) -> f64 {
        fn rec(c: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = c.nrows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.nrows()], 0.0, &mut best);
        best / c.nrows() as f64
    }

    #[test]
    fn cost_matrix_cases() {
        let z = vec![
            InternalCoords { r: vec![1.5, 1.4], theta: vec![1.9], phi: vec![0.3] },
            InternalCoords { r: vec![1.2, 1.6], theta: vec![2.0], phi: vec![-2.0] },
        ];
        let c = cost_matrix(&z, &z, CostWeights::default()).unwrap();
        assert_eq!(c.values[(0, 0)], 0.0);
        assert_eq!(c.values[(1, 1)], 0.0);

        let shifted = cost_matrix(&[torsion_only(0.5)], &[torsion_only(0.5 + 2.0 * std::f64::consts::PI)], CostWeights::default()).unwrap();
        assert!(shifted.values[(0, 0)] < 1e-24);

        let seam = cost_matrix(&[torsion_only(3.0)], &[torsion_only(-3.0)], CostWeights::default()).unwrap();
        let expected = (6.0 - 2.0 * std::f64::consts::PI).powi(2);
        assert!((seam.values[(0, 0)] - expected).abs() < 1e-12);
        assert!((seam.values[(0, 0)] - 0.0801).abs() < 1e-4);
    }

    #[test]
    fn cost_matrix_rejects_mixed_charts() {
        let a = vec![torsion_only(0.1)];
        let b = vec![scalar_r(1.0)];
        assert!(matches!(cost_matrix(&a, &b, CostWeights::default()), Err(Error::Structural(_))));
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let n = 5;
        let c = DMatrix::zeros(n, n);
        for eps in [0.01, 0.1, 10.0] {
            let p = sinkhorn(&c, &uniform(n), &uniform(n), &SinkhornConfig { epsilon: eps, ..Default::default() }).unwrap();
            for v in p.plan.iter() {
                assert!((v - 1.0 / 25.0).abs() < 1e-15);
            }
            assert!(p.converged);
        }
    }

    #[test]
    fn identity_favouring_cost_concentrates_on_diagonal() {
        let c = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(permutation_optimum(&c), 0.0);
        let p = sinkhorn(&c, &uniform(3), &uniform(3), &SinkhornConfig { epsilon: 0.01, ..Default::default() }).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((p.plan[(i, j)] - target).abs() < 1e-3);
            }
        }
        assert!(transport_cost(&c, &p.plan) < 1e-3);
    }

    #[test]
    fn small_random_problem_near_permutation_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>());
            let exact = permutation_optimum(&c);
            let cfg = SinkhornConfig { epsilon: 0.01, max_iters: 5000, tol: 1e-9 };
            let p = sinkhorn(&c, &uniform(4), &uniform(4), &cfg).unwrap();
            let got = transport_cost(&c, &p.plan);
            assert!(got <= exact * 1.05 + 1e-9, "{got} vs {exact}");
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_inputs() {
        let c = DMatrix::zeros(2, 2);
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &SinkhornConfig { epsilon: 0.0, ..cfg }).is_err());
        assert!(sinkhorn(&c, &[1.0, 0.0], &[0.5, 0.5], &cfg).is_err());
        assert!(sinkhorn(&c, &[0.6, 0.6], &[0.5, 0.5], &cfg).is_err());
        let mut bad = DMatrix::zeros(2, 2);
        bad[(0, 1)] = f64::INFINITY;
        let err = sinkhorn(&bad, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("C/epsilon"));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>());
        let p = sinkhorn(&c, &uniform(8), &uniform(8), &SinkhornConfig { epsilon: 1e-3, max_iters: 2, tol: 1e-12 }).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations_used, 2);
        assert!(p.marginal_error > 1e-12);
    }

    #[test]
    fn large_epsilon_approaches_product_measure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        let a = uniform(6);
        let p = sinkhorn(&c, &a, &a, &SinkhornConfig { epsilon: 1e3, ..Default::default() }).unwrap();
        for v in p.plan.iter() {
            assert!((v - 1.0 / 36.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn pairing_cases() {
        let n = 4;
        let ident = TransportPlan {
            plan: DMatrix::from_fn(n, n, |i, j| if i == j { 0.25 } else { 0.0 }),
            epsilon: 0.1,
            iterations_used: 0,
            marginal_error: 0.0,
            converged: true,
            error_history: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = ot_pairing(&ident, &mut rng).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);

        let uniform_plan = TransportPlan { plan: DMatrix::from_element(n, n, 1.0 / 16.0), ..ident.clone() };
        let a = ot_pairing(&uniform_plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ot_pairing(&uniform_plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        // empirical marginal of j over 10^4 draws: binomial 3σ band
        let mut counts = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 2500;
        for _ in 0..draws {
            for (_, j) in ot_pairing(&uniform_plan, &mut rng).unwrap() {
                counts[j] += 1;
            }
        }
        let total = (draws * n) as f64;
        let sigma = (total * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - total * 0.25).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn barycentric_velocity_cases() {
        let z0 = vec![scalar_r(0.3), scalar_r(1.7)];
        let z1 = vec![scalar_r(0.0), scalar_r(2.0)];
        let ident = TransportPlan {
            plan: DMatrix::from_fn(2, 2, |i, j| if i == j { 0.5 } else { 0.0 }),
            epsilon: 0.1,
            iterations_used: 0,
            marginal_error: 0.0,
            converged: true,
            error_history: vec![],
        };
        assert_eq!(barycentric_velocity(&ident, &z0, &z1, 1).unwrap(), vec![2.0 - 1.7]);
        let flat = TransportPlan { plan: DMatrix::from_element(2, 2, 0.25), ..ident.clone() };
        for i in 0..2 {
            let v = barycentric_velocity(&flat, &z0, &z1, i).unwrap();
            assert!((v[0] - (1.0 - z0[i].r[0])).abs() < 1e-15);
        }

        let t0 = vec![torsion_only(3.0)];
        let t1 = vec![torsion_only(-3.0)];
        let one = TransportPlan { plan: DMatrix::from_element(1, 1, 1.0), ..ident };
        let v = barycentric_velocity(&one, &t0, &t1, 0).unwrap();
        assert!((v[0] - (2.0 * std::f64::consts::PI - 6.0)).abs() < 1e-12);
        assert!(v[0].abs() <= std::f64::consts::PI);
    }

    #[test]
    fn transport_cost_cases() {
        let c = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(transport_cost(&DMatrix::zeros(3, 3), &DMatrix::from_element(3, 3, 1.0 / 9.0)), 0.0);
        let ident = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 / 3.0 } else { 0.0 });
        assert_eq!(transport_cost(&c, &ident), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
        let mut last = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01] {
            let p = sinkhorn(&c, &uniform(5), &uniform(5), &SinkhornConfig { epsilon: eps, max_iters: 10_000, tol: 1e-10 }).unwrap();
            let cost = transport_cost(&c, &p.plan);
            assert!(cost <= last + 1e-12);
            last = cost;
        }
    }

    #[test]
    fn log_linear_fit_recovers_slope() {
        let errs: Vec<f64> = (0..20).map(|k| 3.0 * (-0.4 * k as f64).exp()).collect();
        let (slope, r2) = log_linear_fit(&errs);
        assert!((slope + 0.4).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
