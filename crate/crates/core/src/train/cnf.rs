//! Divergence estimates and continuous-normalizing-flow log-likelihoods.
//!
//! Divergences are taken in the local chart of the decomposed state
//! (centroid, world-frame rotation increment, internal coordinates), the
//! same coordinates in which the prior density is written.

#[cfg(test)]
use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{forward_batch, FieldOutput, MolContext, Model, NetParams};
use crate::paths::{prior_log_density, PriorSpec};
use crate::sampler::{decomposed_field, BatchField, FlowState, NetField, BLOWUP};
use crate::zmatrix::{decompose, Conformer, DecomposedState};

/// Forward-difference step of the Jacobian-vector products.
pub const DIV_STEP: f64 = 1e-5;
/// Central-difference step for state derivatives in the adjoint.
const STATE_STEP: f64 = 1e-4;

pub fn rademacher(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Hutchinson estimate `(1/P) Σ εᵀ (∂v/∂x) ε` with Rademacher probes and
/// forward-difference Jacobian-vector products.
pub fn hutchinson_divergence(
    field: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    num_probes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if num_probes == 0 {
        return Err(Error::validation("num_probes must be at least 1"));
    }
    let f0 = field(x)?;
    if f0.len() != x.len() {
        return Err(Error::structural(format!("field returned {} values for a {}-vector", f0.len(), x.len())));
    }
    let mut acc = 0.0;
    for _ in 0..num_probes {
        let e = rademacher(x.len(), rng);
        let xp: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + DIV_STEP * b).collect();
        let fp = field(&xp)?;
        acc += e.iter().zip(fp.iter().zip(&f0)).map(|(ei, (a, b))| ei * (a - b)).sum::<f64>() / DIV_STEP;
    }
    Ok(acc / num_probes as f64)
}

/// Velocity at `s` and its chart divergence estimated with the given probes,
/// all from one batched field call.
fn chart_divergence<S: FlowState>(field: &BatchField<'_, S>, s: &S, t: f64, probes: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let mut states = Vec::with_capacity(1 + probes.len());
    states.push(s.clone());
    states.extend(probes.iter().map(|e| s.retract(&scaled(e, DIV_STEP))));
    let out = field(&states, t)?;
    Ok((out[0].clone(), probe_divergence(&out, probes)))
}

fn probe_divergence(out: &[Vec<f64>], probes: &[Vec<f64>]) -> f64 {
    let f0 = &out[0];
    let mut acc = 0.0;
    for (e, fp) in probes.iter().zip(&out[1..]) {
        acc += e.iter().zip(fp.iter().zip(f0)).map(|(ei, (a, b))| ei * (a - b)).sum::<f64>();
    }
    acc / (probes.len() as f64 * DIV_STEP)
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn check_state<S: FlowState>(s: &S, step: usize) -> Result<()> {
    let m = s.max_abs();
    if !m.is_finite() || m > BLOWUP {
        return Err(Error::numerical(format!(
            "likelihood integration blew up at step {step} (|state| = {m:e})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogLikelihood {
    pub log_likelihood: f64,
    /// Prior log-density at the t = 0 endpoint.
    pub prior_log_density: f64,
    /// `∫₀¹ div v dt` along the trajectory.
    pub divergence_integral: f64,
}

/// Integrates `s1` from t = 1 back to 0 with explicit Euler steps while
/// accumulating the divergence, then adds the prior log-density.
pub fn cnf_log_likelihood<S: FlowState>(
    field: &BatchField<'_, S>,
    s1: &S,
    steps: usize,
    num_probes: usize,
    rng: &mut impl Rng,
    prior: &dyn Fn(&S) -> Result<f64>,
) -> Result<LogLikelihood> {
    if steps == 0 || num_probes == 0 {
        return Err(Error::validation("steps and num_probes must be at least 1"));
    }
    let h = 1.0 / steps as f64;
    let mut s = s1.clone();
    let mut acc = 0.0;
    for k in (1..=steps).rev() {
        let probes: Vec<Vec<f64>> = (0..num_probes).map(|_| rademacher(s.tangent_dim(), rng)).collect();
        let (f, div) = chart_divergence(field, &s, k as f64 * h, &probes)?;
        acc += h * div;
        s = s.retract(&scaled(&f, -h));
        check_state(&s, steps - k + 1)?;
    }
    let lp = prior(&s)?;
    Ok(LogLikelihood {
        log_likelihood: lp - acc,
        prior_log_density: lp,
        divergence_integral: acc,
    })
}

/// Log-likelihood of a conformer under the learned flow.
pub fn log_likelihood(
    model: &Model,
    ctx: &MolContext,
    conformer: &Conformer,
    steps: usize,
    num_probes: usize,
    prior: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<LogLikelihood> {
    let state = decompose(conformer, &ctx.zspec)?.state;
    let net = NetField { model, ctx };
    let field = decomposed_field(&net);
    cnf_log_likelihood(&field, &state, steps, num_probes, rng, &|s| prior_log_density(prior, &ctx.zspec, s))
}

fn net_eval(model: &Model, ctx: &MolContext, states: &[DecomposedState], t: f64) -> Result<Vec<Vec<f64>>> {
    let pass = forward_batch(&model.config, &model.params, ctx, states, &vec![t; states.len()])?;
    Ok(pass.outputs().iter().map(|o| o.to_flat()).collect())
}

/// Trajectory and log-likelihood for fixed probes (`probes[i]` is used on
/// the i-th step, counted from t = 1).
fn fixed_probe_trajectory(
    model: &Model,
    ctx: &MolContext,
    s1: &DecomposedState,
    probes: &[Vec<Vec<f64>>],
    prior: &PriorSpec,
) -> Result<(Vec<DecomposedState>, f64)> {
    let steps = probes.len();
    let h = 1.0 / steps as f64;
    let field = |s: &[DecomposedState], t: f64| net_eval(model, ctx, s, t);
    let mut states = vec![s1.clone()];
    let mut acc = 0.0;
    for (i, p) in probes.iter().enumerate() {
        let s = &states[i];
        let (f, div) = chart_divergence(&field, s, (steps - i) as f64 * h, p)?;
        acc += h * div;
        let next = s.retract(&scaled(&f, -h));
        check_state(&next, i + 1)?;
        states.push(next);
    }
    let lp = prior_log_density(prior, &ctx.zspec, states.last().expect("non-empty"))?;
    Ok((states, lp - acc))
}

/// Log-likelihood with fixed probes, without gradients.
pub fn fixed_probe_log_likelihood(
    model: &Model,
    ctx: &MolContext,
    s1: &DecomposedState,
    probes: &[Vec<Vec<f64>>],
    prior: &PriorSpec,
) -> Result<f64> {
    Ok(fixed_probe_trajectory(model, ctx, s1, probes, prior)?.1)
}

fn unit(d: usize, j: usize, s: f64) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[j] = s;
    e
}

/// Log-likelihood with fixed probes and its gradient in the network
/// parameters, by the discrete adjoint of the backward Euler scheme.
///
/// State derivatives of the step map and of the divergence estimate are
/// taken by central differences in the chart; parameter derivatives come
/// from the network's reverse pass.
pub fn log_likelihood_gradient(
    model: &Model,
    ctx: &MolContext,
    s1: &DecomposedState,
    probes: &[Vec<Vec<f64>>],
    prior: &PriorSpec,
) -> Result<(f64, NetParams)> {
    if probes.is_empty() || probes.iter().any(|p| p.is_empty()) {
        return Err(Error::validation("need at least one step and one probe per step"));
    }
    let (states, ll) = fixed_probe_trajectory(model, ctx, s1, probes, prior)?;
    let steps = probes.len();
    let h = 1.0 / steps as f64;
    let d = s1.tangent_dim();
    let zspec = &ctx.zspec;

    let s0 = states.last().expect("non-empty");
    let mut adj: Vec<f64> = (0..d)
        .map(|j| {
            let up = prior_log_density(prior, zspec, &s0.retract(&unit(d, j, STATE_STEP)))?;
            let dn = prior_log_density(prior, zspec, &s0.retract(&unit(d, j, -STATE_STEP)))?;
            Ok((up - dn) / (2.0 * STATE_STEP))
        })
        .collect::<Result<_>>()?;

    let mut grads = model.params.zeros_like();
    for i in (0..steps).rev() {
        let s = &states[i];
        let next = &states[i + 1];
        let t = (steps - i) as f64 * h;
        let p = &probes[i];
        let np = p.len() as f64;

        let mut batch = vec![s.clone()];
        batch.extend(p.iter().map(|e| s.retract(&scaled(e, DIV_STEP))));
        let pass = forward_batch(&model.config, &model.params, ctx, &batch, &vec![t; batch.len()])?;
        let f = pass.output(0).to_flat();

        // cotangent of the velocity through the step map
        let mut c_f = vec![0.0; d];
        for j in 0..d {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[j] += STATE_STEP;
            fm[j] -= STATE_STEP;
            let up = next.local(&s.retract(&scaled(&fp, -h)));
            let dn = next.local(&s.retract(&scaled(&fm, -h)));
            c_f[j] = (0..d).map(|k| (up[k] - dn[k]) / (2.0 * STATE_STEP) * adj[k]).sum();
        }
        let w = h / (np * DIV_STEP);
        for e in p {
            for (c, ei) in c_f.iter_mut().zip(e) {
                *c += w * ei;
            }
        }
        let mut cot = vec![FieldOutput::from_flat(&c_f)];
        cot.extend(p.iter().map(|e| FieldOutput::from_flat(&scaled(e, -w))));
        grads.axpy(1.0, &pass.backward(&cot));

        // state adjoint
        let mut pert = Vec::with_capacity(2 * d * (1 + p.len()));
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let sj = s.retract(&unit(d, j, sign * STATE_STEP));
                let probed: Vec<DecomposedState> = p.iter().map(|e| sj.retract(&scaled(e, DIV_STEP))).collect();
                pert.push(sj);
                pert.extend(probed);
            }
        }
        let out = net_eval(model, ctx, &pert, t)?;
        let block = 1 + p.len();
        let mut new_adj = vec![0.0; d];
        for (j, a) in new_adj.iter_mut().enumerate() {
            let (bp, bm) = (2 * j * block, (2 * j + 1) * block);
            let up = next.local(&pert[bp].retract(&scaled(&out[bp], -h)));
            let dn = next.local(&pert[bm].retract(&scaled(&out[bm], -h)));
            let jt: f64 = (0..d).map(|k| (up[k] - dn[k]) / (2.0 * STATE_STEP) * adj[k]).sum();
            let ddiv = (probe_divergence(&out[bp..bp + block], p) - probe_divergence(&out[bm..bm + block], p)) / (2.0 * STATE_STEP);
            *a = jt - h * ddiv;
        }
        adj = new_adj;
    }
    Ok((ll, grads))
}

/// Dense `d × d` Jacobian of a flat map by central differences; used by the
/// tests as an independent reference.
#[cfg(test)]
pub(crate) fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> DMatrix<f64> {
    let fx = f(x);
    let mut j = DMatrix::zeros(fx.len(), x.len());
    for c in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += step;
        xm[c] -= step;
        let (a, b) = (f(&xp), f(&xm));
        for r in 0..fx.len() {
            j[(r, c)] = (a[r] - b[r]) / (2.0 * step);
        }
    }
    j
}
