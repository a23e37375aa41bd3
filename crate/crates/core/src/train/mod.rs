//! Flow-matching losses, uncertainty weighting and the staged training loop.
//!
//! Stage 1 regresses the three sub-velocities on their own targets. The
//! trunk is driven by the conformation loss alone; the translation and
//! rotation heads learn on top of it without pushing gradients back. Stage 2
//! trains everything on the uncertainty-weighted sum plus the Cartesian flow
//! consistency loss. Stage 3 maximises the CNF log-likelihood of the data.

mod cnf;

use std::io::Write;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cnf::{
    cnf_log_likelihood, fixed_probe_log_likelihood, hutchinson_divergence, log_likelihood, log_likelihood_gradient, rademacher,
    LogLikelihood, DIV_STEP,
};

use crate::error::{Error, Result};
use crate::net::{forward_batch, FieldOutput, MolContext, Model, NetParams, ParamGroup};
use crate::ot::{cost_matrix, ot_pairing, sinkhorn, uniform, CostWeights, SinkhornConfig};
use crate::paths::{compose_cartesian_velocity, sample_path, sample_prior, PathSample, PriorSpec};
use crate::so3::RotVec;
use crate::zmatrix::{compose, decompose, jacobian_at, Conformer, DecomposedState, MolecularGraph};

fn sq(v: &Vector3<f64>) -> f64 {
    v.norm_squared()
}

fn batch_mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Batch mean of `|pred − target|²`.
pub fn loss_translation(pred: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    batch_mean(pred.iter().zip(target).map(|(a, b)| sq(&(a - b))), pred.len())
}

pub fn loss_rotation(pred: &[RotVec], target: &[RotVec]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    batch_mean(pred.iter().zip(target).map(|(a, b)| sq(&(a.0 - b.0))), pred.len())
}

/// Batch mean of the squared error over all internal-coordinate channels.
/// Torsion targets are already short-arc, so channels compare directly.
pub fn loss_conformation(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    batch_mean(
        pred.iter()
            .zip(target)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()),
        pred.len(),
    )
}

/// Batch mean of the per-atom mean squared Cartesian velocity error.
pub fn loss_flow(pred: &[Vec<Vector3<f64>>], target: &[Vec<Vector3<f64>>]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    batch_mean(
        pred.iter().zip(target).map(|(a, b)| {
            let n = a.len().max(1) as f64;
            a.iter().zip(b).map(|(x, y)| sq(&(x - y))).sum::<f64>() / n
        }),
        pred.len(),
    )
}

/// `Σ_k ½ e^{−s_k} l_k + λ_F l_flow + Σ_k s_k` with `s_k = log σ_k²`.
pub fn adaptive_total(losses: [f64; 3], l_flow: f64, log_sigma_sq: [f64; 3], lambda_flow: f64) -> f64 {
    (0..3)
        .map(|k| 0.5 * (-log_sigma_sq[k]).exp() * losses[k] + log_sigma_sq[k])
        .sum::<f64>()
        + lambda_flow * l_flow
}

/// Derivative of [`adaptive_total`] in each `log σ_k²`.
pub fn adaptive_gradient(losses: [f64; 3], log_sigma_sq: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|k| 1.0 - 0.5 * (-log_sigma_sq[k]).exp() * losses[k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_trans: f64,
    pub l_rot: f64,
    pub l_conf: f64,
    pub l_flow: f64,
    pub weighted_total: f64,
    pub log_sigma_sq: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_flow: f64,
    pub momentum: f64,
    /// Per-group gradient norm cap (trunk and each head separately).
    pub grad_clip: Option<f64>,
    /// Hutchinson probes per ODE step in stage 3.
    pub probes: usize,
    /// Euler steps of the stage-3 likelihood integration.
    pub ode_steps: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn new(stage: u8) -> Self {
        StageConfig {
            stage,
            epochs: 1,
            learning_rate: match stage {
                1 => 1e-3,
                2 => 1e-4,
                _ => 1e-5,
            },
            batch_size: 64,
            lambda_flow: 1.0,
            momentum: 0.9,
            grad_clip: None,
            probes: 64,
            ode_steps: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        self.check_runnable()
    }

    /// Everything in [`StageConfig::validate`] except the epoch count; a
    /// zero-epoch stage is a no-op.
    fn check_runnable(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::validation(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.probes == 0 || self.ode_steps == 0 {
            return Err(Error::validation("batch_size, probes and ode_steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda_flow.is_finite() && self.lambda_flow >= 0.0) {
            return Err(Error::validation("lambda_flow must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Settings shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub prior: PriorSpec,
    pub sinkhorn: SinkhornConfig,
    pub cost_weights: CostWeights,
    /// Halt when the running-mean loss exceeds this multiple of its minimum.
    pub divergence_factor: f64,
    /// Steps in the running mean.
    pub guard_window: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            prior: PriorSpec::default(),
            sinkhorn: SinkhornConfig::default(),
            cost_weights: CostWeights::default(),
            divergence_factor: 10.0,
            guard_window: 50,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.prior.cartesian {
            return Err(Error::validation("training needs the decomposed prior"));
        }
        if !(self.divergence_factor > 1.0) || self.guard_window == 0 {
            return Err(Error::validation("divergence_factor must exceed 1 and guard_window be positive"));
        }
        Ok(())
    }
}

/// Decomposed training conformers of one molecule.
#[derive(Debug, Clone)]
pub struct TrainMolecule {
    pub ctx: MolContext,
    pub data: Vec<DecomposedState>,
}

impl TrainMolecule {
    pub fn from_conformers(graph: &MolecularGraph, conformers: &[Conformer]) -> Result<Self> {
        let ctx = MolContext::new(graph)?;
        let data = conformers
            .iter()
            .map(|x| Ok(decompose(x, &ctx.zspec)?.state))
            .collect::<Result<_>>()?;
        Ok(TrainMolecule { ctx, data })
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub step: usize,
    pub l_trans: Option<f64>,
    pub l_rot: Option<f64>,
    pub l_conf: Option<f64>,
    pub l_flow: Option<f64>,
    /// Objective that was minimised (the negative log-likelihood in stage 3).
    pub total: f64,
}

pub fn write_loss_csv(records: &[LossRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "stage,step,l_trans,l_rot,l_conf,l_flow,total")?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e}",
            r.stage,
            r.step,
            f(r.l_trans),
            f(r.l_rot),
            f(r.l_conf),
            f(r.l_flow),
            r.total
        )?;
    }
    Ok(())
}

/// Interpolated states with targets for one minibatch: prior draws are
/// paired with data draws through the entropic OT plan on internal
/// coordinates, then a time is drawn per pair.
pub fn prepare_batch(opts: &TrainOptions, mol: &TrainMolecule, batch: usize, rng: &mut impl Rng) -> Result<Vec<PathSample>> {
    if mol.data.is_empty() {
        return Err(Error::validation("molecule has no training conformers"));
    }
    let s1: Vec<&DecomposedState> = (0..batch).map(|_| &mol.data[rng.random_range(0..mol.data.len())]).collect();
    let s0: Vec<DecomposedState> = (0..batch).map(|_| sample_prior(&opts.prior, &mol.ctx.zspec, rng)).collect();
    let z0: Vec<_> = s0.iter().map(|s| s.z.clone()).collect();
    let z1: Vec<_> = s1.iter().map(|s| s.z.clone()).collect();
    let cost = cost_matrix(&z0, &z1, opts.cost_weights)?;
    let plan = sinkhorn(&cost.values, &uniform(batch), &uniform(batch), &opts.sinkhorn)?;
    if !plan.converged {
        log::debug!("sinkhorn stopped with marginal error {:e}", plan.marginal_error);
    }
    ot_pairing(&plan, rng)?
        .into_iter()
        .map(|(i, j)| sample_path(&s0[i], s1[j], rng.random::<f64>()))
        .collect()
}

/// Loss and gradients of one stage-1 or stage-2 minibatch.
#[derive(Debug, Clone)]
pub struct FlowMatchingStep {
    pub losses: LossBreakdown,
    pub grads: NetParams,
    pub grad_log_sigma_sq: [f64; 3],
}

/// Evaluates the stage objective on prepared samples. Stage 1 minimises
/// `l_trans + l_rot + l_conf`; stage 2 the adaptive total with the flow term.
pub fn flow_matching_step(
    model: &Model,
    ctx: &MolContext,
    samples: &[PathSample],
    stage: u8,
    lambda_flow: f64,
) -> Result<FlowMatchingStep> {
    let states: Vec<DecomposedState> = samples.iter().map(|s| s.state_t.clone()).collect();
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let pass = forward_batch(&model.config, &model.params, ctx, &states, &ts)?;
    let out = pass.outputs();
    let b = samples.len() as f64;

    let pv: Vec<Vector3<f64>> = out.iter().map(|o| o.v_trans).collect();
    let tv: Vec<Vector3<f64>> = samples.iter().map(|s| s.target_v_trans).collect();
    let pw: Vec<RotVec> = out.iter().map(|o| o.omega_hat).collect();
    let tw: Vec<RotVec> = samples.iter().map(|s| s.target_omega).collect();
    let pc: Vec<Vec<f64>> = out.iter().map(|o| o.v_conf.clone()).collect();
    let tc: Vec<Vec<f64>> = samples.iter().map(|s| s.target_v_conf.clone()).collect();
    let l = [loss_translation(&pv, &tv), loss_rotation(&pw, &tw), loss_conformation(&pc, &tc)];

    let s = model.log_sigma_sq;
    let w: [f64; 3] = if stage == 1 {
        [1.0; 3]
    } else {
        std::array::from_fn(|k| 0.5 * (-s[k]).exp())
    };
    let mut cot: Vec<FieldOutput> = out
        .iter()
        .zip(samples)
        .map(|(o, smp)| FieldOutput {
            v_trans: (o.v_trans - smp.target_v_trans) * (2.0 * w[0] / b),
            omega_hat: RotVec((o.omega_hat.0 - smp.target_omega.0) * (2.0 * w[1] / b)),
            v_conf: o.v_conf.iter().zip(&smp.target_v_conf).map(|(p, t)| (p - t) * 2.0 * w[2] / b).collect(),
        })
        .collect();

    let (l_flow, weighted_total, grad_log_sigma_sq, grads);
    if stage == 1 {
        l_flow = 0.0;
        weighted_total = l[0] + l[1] + l[2];
        grad_log_sigma_sq = [0.0; 3];
        grads = pass.backward_conf_trunk(&cot);
    } else {
        // the composed field is linear in the sub-velocities, so the flow
        // residual is the composition of the sub-velocity residuals
        let mut acc = 0.0;
        for ((o, smp), c) in out.iter().zip(samples).zip(cot.iter_mut()) {
            let st = &smp.state_t;
            let x = compose(&st.c, &st.q, &st.z, &ctx.zspec)?;
            let j = jacobian_at(st, &ctx.zspec)?;
            let dc: Vec<f64> = o.v_conf.iter().zip(&smp.target_v_conf).map(|(p, t)| p - t).collect();
            let e = compose_cartesian_velocity(&(o.v_trans - smp.target_v_trans), &RotVec(o.omega_hat.0 - smp.target_omega.0), &dc, &x, &st.c, &j)?;
            let n = x.len() as f64;
            acc += e.iter().map(sq).sum::<f64>() / n;
            let a = lambda_flow * 2.0 / (n * b);
            let sum_e: Vector3<f64> = e.iter().sum();
            let torque: Vector3<f64> = x.iter().zip(&e).map(|(xi, ei)| (xi - st.c).cross(ei)).sum();
            let flat_e = DVector::from_iterator(3 * e.len(), e.iter().flat_map(|v| v.iter().copied()));
            let jt_e: DVector<f64> = j.transpose() * flat_e;
            c.v_trans += sum_e * a;
            c.omega_hat.0 += torque * a;
            for (ck, g) in c.v_conf.iter_mut().zip(jt_e.iter()) {
                *ck += a * g;
            }
        }
        l_flow = acc / b;
        weighted_total = adaptive_total(l, l_flow, s, lambda_flow);
        grad_log_sigma_sq = adaptive_gradient(l, s);
        grads = pass.backward(&cot);
    }
    Ok(FlowMatchingStep {
        losses: LossBreakdown {
            l_trans: l[0],
            l_rot: l[1],
            l_conf: l[2],
            l_flow,
            weighted_total,
            log_sigma_sq: s,
        },
        grads,
        grad_log_sigma_sq,
    })
}

/// Result of [`train_stage`].
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
}

fn gate(stage: u8, completed: u8) -> Result<()> {
    if stage >= 2 && completed < stage - 1 {
        return Err(Error::Contract(format!(
            "stage {stage} needs parameters from stage {}, but the model has completed stage {completed}",
            stage - 1
        )));
    }
    Ok(())
}

/// Windowed running mean with a halting rule on growth over its minimum.
struct DivergenceGuard {
    window: Vec<f64>,
    size: usize,
    factor: f64,
    min_mean: f64,
}

impl DivergenceGuard {
    fn new(size: usize, factor: f64) -> Self {
        DivergenceGuard {
            window: Vec::with_capacity(size),
            size,
            factor,
            min_mean: f64::INFINITY,
        }
    }

    /// Stage 3 tracks a log-likelihood that may be negative, so its rule is
    /// on the excess over the minimum relative to `max(|min|, 1)`.
    fn push(&mut self, value: f64, signed: bool, step: usize) -> Result<()> {
        if self.window.len() == self.size {
            self.window.remove(0);
        }
        self.window.push(value);
        if self.window.len() < self.size {
            return Ok(());
        }
        let mean = self.window.iter().sum::<f64>() / self.size as f64;
        self.min_mean = self.min_mean.min(mean);
        let tripped = if signed {
            mean - self.min_mean > self.factor * self.min_mean.abs().max(1.0)
        } else {
            mean > self.factor * self.min_mean
        };
        if tripped {
            return Err(Error::NonConvergence(format!(
                "training diverged at step {step}: running-mean loss {mean:e} against a minimum of {:e} over a {}-step window",
                self.min_mean, self.size
            )));
        }
        Ok(())
    }
}

fn clip_by_group(grads: &mut NetParams, cap: f64) {
    let mut norms = std::collections::HashMap::<ParamGroup, f64>::new();
    for (name, g) in grads.entries() {
        *norms.entry(NetParams::group_of(name)).or_default() += g.norm_squared();
    }
    let scales: std::collections::HashMap<ParamGroup, f64> = norms
        .into_iter()
        .map(|(k, n)| (k, if n.sqrt() > cap { cap / n.sqrt() } else { 1.0 }))
        .collect();
    let names: Vec<String> = grads.entries().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let s = scales[&NetParams::group_of(&name)];
        if s != 1.0 {
            if let Some(g) = grads.get_mut(&name) {
                *g *= s;
            }
        }
    }
}

fn check_finite(record: &LossRecord, step: usize) -> Result<()> {
    let parts = [
        ("l_trans", record.l_trans),
        ("l_rot", record.l_rot),
        ("l_conf", record.l_conf),
        ("l_flow", record.l_flow),
        ("total", Some(record.total)),
    ];
    for (name, v) in parts {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::numerical(format!("stage {} step {step}: non-finite {name} ({v})", record.stage)));
            }
        }
    }
    Ok(())
}

/// Number of optimizer steps in one epoch: one pass over all conformers.
pub fn steps_per_epoch(data: &[TrainMolecule], batch_size: usize) -> usize {
    data.iter().map(|m| m.data.len()).sum::<usize>().div_ceil(batch_size.max(1))
}

/// Runs one training stage with momentum SGD. Each step draws a molecule
/// uniformly and a minibatch of its conformers.
pub fn train_stage(config: &StageConfig, opts: &TrainOptions, data: &[TrainMolecule], model: &Model) -> Result<StageOutcome> {
    config.check_runnable()?;
    opts.validate()?;
    gate(config.stage, model.stage)?;
    if data.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if let Some(k) = data.iter().position(|m| m.data.is_empty()) {
        return Err(Error::validation(format!("molecule {k} has no training conformers")));
    }

    let mut model = model.clone();
    let steps = config.epochs * steps_per_epoch(data, config.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stage as u64);
    let mut velocity = model.params.zeros_like();
    let mut velocity_s = [0.0; 3];
    let mut guard = DivergenceGuard::new(opts.guard_window, opts.divergence_factor);
    let mut history = Vec::with_capacity(steps);

    for step in 0..steps {
        let mol = &data[rng.random_range(0..data.len())];
        let (record, mut grads, grad_s) = match config.stage {
            1 | 2 => {
                let samples = prepare_batch(opts, mol, config.batch_size, &mut rng)?;
                let r = flow_matching_step(&model, &mol.ctx, &samples, config.stage, config.lambda_flow)?;
                let l = &r.losses;
                let record = LossRecord {
                    stage: config.stage,
                    step,
                    l_trans: Some(l.l_trans),
                    l_rot: Some(l.l_rot),
                    l_conf: Some(l.l_conf),
                    l_flow: (config.stage == 2).then_some(l.l_flow),
                    total: l.weighted_total,
                };
                (record, r.grads, r.grad_log_sigma_sq)
            }
            _ => {
                let (nll, grads) = likelihood_step(&model, mol, config, &opts.prior, &mut rng)?;
                let record = LossRecord {
                    stage: 3,
                    step,
                    l_trans: None,
                    l_rot: None,
                    l_conf: None,
                    l_flow: None,
                    total: nll,
                };
                (record, grads, [0.0; 3])
            }
        };
        check_finite(&record, step)?;
        if !grads.is_finite() {
            return Err(Error::numerical(format!("stage {} step {step}: non-finite gradient", config.stage)));
        }
        let guarded = match config.stage {
            1 => record.total,
            2 => record.l_trans.unwrap_or(0.0) + record.l_rot.unwrap_or(0.0) + record.l_conf.unwrap_or(0.0) + record.l_flow.unwrap_or(0.0),
            _ => record.total,
        };
        guard.push(guarded, config.stage == 3, step)?;

        if let Some(cap) = config.grad_clip {
            clip_by_group(&mut grads, cap);
        }
        velocity.scale(config.momentum);
        velocity.axpy(1.0, &grads);
        model.params.axpy(-config.learning_rate, &velocity);
        if config.stage == 2 {
            for k in 0..3 {
                velocity_s[k] = config.momentum * velocity_s[k] + grad_s[k];
                model.log_sigma_sq[k] -= config.learning_rate * velocity_s[k];
            }
        }
        history.push(record);
    }
    model.stage = model.stage.max(config.stage);
    model.prior = Some(opts.prior.clone());
    Ok(StageOutcome { model, history })
}

/// Mean negative log-likelihood over a minibatch and its gradient.
fn likelihood_step(
    model: &Model,
    mol: &TrainMolecule,
    config: &StageConfig,
    prior: &PriorSpec,
    rng: &mut impl Rng,
) -> Result<(f64, NetParams)> {
    let mut grads = model.params.zeros_like();
    let mut nll = 0.0;
    let b = config.batch_size as f64;
    for _ in 0..config.batch_size {
        let s1 = &mol.data[rng.random_range(0..mol.data.len())];
        let d = 6 + s1.z.len();
        let probes: Vec<Vec<Vec<f64>>> = (0..config.ode_steps)
            .map(|_| (0..config.probes).map(|_| rademacher(d, rng)).collect())
            .collect();
        let (ll, g) = log_likelihood_gradient(model, &mol.ctx, s1, &probes, prior)?;
        nll -= ll / b;
        grads.axpy(-1.0 / b, &g);
    }
    Ok((nll, grads))
}

/// Gradient of `objective` by central differences at the flat parameter
/// index `k`; used for spot checks of analytic gradients.
pub fn finite_difference(objective: &dyn Fn(&NetParams) -> Result<f64>, params: &NetParams, k: usize, h: f64) -> Result<f64> {
    let mut plus = params.clone();
    plus.flat_set(k, params.flat_get(k) + h);
    let mut minus = params.clone();
    minus.flat_set(k, params.flat_get(k) - h);
    Ok((objective(&plus)? - objective(&minus)?) / (2.0 * h))
}

#[cfg(test)]
mod tests;
