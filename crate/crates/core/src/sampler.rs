//! ODE integration of the decomposed velocity field.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use statrs::distribution::{ContinuousCDF, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward_batch, FieldOutput, MolContext, Model};
use crate::paths::{compose_cartesian_velocity, sample_prior, PriorSpec};
use crate::so3::{quat_exp, quat_log, RotVec};
use crate::zmatrix::{compose, decompose, jacobian_at, wrap_angle, Conformer, DecomposedState, ANGLE_CLAMP};

/// Smallest bond length kept during integration.
pub const R_MIN: f64 = 1e-3;
/// Smallest step the adaptive integrator may take.
pub const MIN_STEP: f64 = 1e-6;
/// State magnitude treated as a blow-up.
pub const BLOWUP: f64 = 1e6;

/// A point that can be moved along a tangent vector given in flat form.
pub trait FlowState: Clone {
    fn tangent_dim(&self) -> usize;
    /// Moves along `d`.
    fn retract(&self, d: &[f64]) -> Self;
    /// Tangent vector `d` with `self.retract(d) ≈ other`.
    fn local(&self, other: &Self) -> Vec<f64>;
    /// Per-component magnitudes used to scale adaptive error estimates.
    fn magnitudes(&self) -> Vec<f64>;
    fn max_abs(&self) -> f64;
    /// Maps a velocity `k` evaluated at `self.retract(u)` back to the
    /// coordinates of `self` (identity on flat spaces).
    fn pull_back(&self, _u: &[f64], k: Vec<f64>) -> Vec<f64> {
        k
    }
}

impl FlowState for Vec<f64> {
    fn tangent_dim(&self) -> usize {
        self.len()
    }
    fn retract(&self, d: &[f64]) -> Self {
        self.iter().zip(d).map(|(x, v)| x + v).collect()
    }
    fn local(&self, other: &Self) -> Vec<f64> {
        other.iter().zip(self).map(|(a, b)| a - b).collect()
    }
    fn magnitudes(&self) -> Vec<f64> {
        self.iter().map(|x| x.abs()).collect()
    }
    fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Tangent layout `[c (3), world-frame rotation (3), z (m)]`. Rotations move
/// by `q ← exp(δ) ⊗ q`; bonds are floored at [`R_MIN`], angles kept inside
/// the open interval and torsions wrapped.
impl FlowState for DecomposedState {
    fn tangent_dim(&self) -> usize {
        6 + self.z.len()
    }

    fn retract(&self, d: &[f64]) -> Self {
        let c = self.c + Vector3::new(d[0], d[1], d[2]);
        let q = if d[3] == 0.0 && d[4] == 0.0 && d[5] == 0.0 {
            self.q
        } else {
            quat_exp(&RotVec::new(d[3], d[4], d[5])) * self.q
        };
        let nr = self.z.r.len();
        let nt = self.z.theta.len();
        let mut z = self.z.clone();
        for (k, r) in z.r.iter_mut().enumerate() {
            *r = (*r + d[6 + k]).max(R_MIN);
        }
        for (k, t) in z.theta.iter_mut().enumerate() {
            *t = (*t + d[6 + nr + k]).clamp(ANGLE_CLAMP, PI - ANGLE_CLAMP);
        }
        for (k, p) in z.phi.iter_mut().enumerate() {
            *p = wrap_angle(*p + d[6 + nr + nt + k]);
        }
        DecomposedState { c, q, z }
    }

    fn local(&self, other: &Self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.tangent_dim());
        d.extend((other.c - self.c).iter());
        d.extend(quat_log(&(other.q * self.q.conj())).0.iter());
        d.extend(other.z.r.iter().zip(&self.z.r).map(|(a, b)| a - b));
        d.extend(other.z.theta.iter().zip(&self.z.theta).map(|(a, b)| a - b));
        d.extend(other.z.phi.iter().zip(&self.z.phi).map(|(a, b)| wrap_angle(a - b)));
        d
    }

    fn magnitudes(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.c.iter().map(|x| x.abs()).collect();
        m.extend([1.0; 3]);
        m.extend(self.z.to_flat().iter().map(|x| x.abs()));
        m
    }

    fn max_abs(&self) -> f64 {
        self.c.iter().chain(self.z.to_flat().iter()).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Applies `dexp⁻¹_u` to the rotational block, which makes Runge–Kutta
    /// stages combine consistently on SO(3).
    fn pull_back(&self, u: &[f64], mut k: Vec<f64>) -> Vec<f64> {
        let u = Vector3::new(u[3], u[4], u[5]);
        let w = Vector3::new(k[3], k[4], k[5]);
        let a = u.norm();
        let coef = if a < 1e-4 {
            1.0 / 12.0 + a * a / 720.0
        } else {
            (1.0 - 0.5 * a / (0.5 * a).tan()) / (a * a)
        };
        let ux = u.cross(&w);
        let out = w - ux * 0.5 + u.cross(&ux) * coef;
        k[3] = out.x;
        k[4] = out.y;
        k[5] = out.z;
        k
    }
}

impl FieldOutput {
    /// `[v_trans, ω̂, v_conf]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 + self.v_conf.len());
        v.extend(self.v_trans.iter());
        v.extend(self.omega_hat.0.iter());
        v.extend_from_slice(&self.v_conf);
        v
    }

    pub fn from_flat(v: &[f64]) -> Self {
        FieldOutput {
            v_trans: Vector3::new(v[0], v[1], v[2]),
            omega_hat: RotVec::new(v[3], v[4], v[5]),
            v_conf: v[6..].to_vec(),
        }
    }
}

/// Anything that maps decomposed states and times to velocities.
pub trait VelocityField {
    fn eval_batch(&self, states: &[DecomposedState], ts: &[f64]) -> Result<Vec<FieldOutput>>;

    fn eval(&self, state: &DecomposedState, t: f64) -> Result<FieldOutput> {
        Ok(self.eval_batch(std::slice::from_ref(state), &[t])?.remove(0))
    }
}

/// The learned field of `model` on molecule `ctx`.
pub struct NetField<'a> {
    pub model: &'a Model,
    pub ctx: &'a MolContext,
}

impl VelocityField for NetField<'_> {
    fn eval_batch(&self, states: &[DecomposedState], ts: &[f64]) -> Result<Vec<FieldOutput>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        Ok(forward_batch(&self.model.config, &self.model.params, self.ctx, states, ts)?.outputs())
    }
}

/// A field given by a closure, for synthetic experiments.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&DecomposedState, f64) -> FieldOutput,
{
    fn eval_batch(&self, states: &[DecomposedState], ts: &[f64]) -> Result<Vec<FieldOutput>> {
        Ok(states.iter().zip(ts).map(|(s, t)| (self.0)(s, *t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri" => Ok(Method::Dopri),
            other => Err(Error::validation(format!("unknown integration method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri => "dopri",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub seed: u64,
    /// Integrate Cartesian coordinates with the composed field, decomposing
    /// again at every field evaluation.
    #[serde(default)]
    pub cartesian: bool,
    /// Latin-hypercube torsion draws across the batch: every draw keeps the
    /// prior marginal, but mode counts no longer fluctuate binomially.
    #[serde(default)]
    pub stratified: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: Method::Euler,
            steps: 50,
            rtol: 1e-5,
            atol: 1e-7,
            seed: 0,
            cartesian: false,
            stratified: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps must be at least 1"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::validation("tolerances must be positive"));
        }
        Ok(())
    }
}

/// States visited by one integration, with their times.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

impl<S> Trajectory<S> {
    pub fn last(&self) -> &S {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_state<S: FlowState>(s: &S, step: usize) -> Result<()> {
    let m = s.max_abs();
    if !m.is_finite() || m > BLOWUP {
        return Err(Error::numerical(format!("state became non-finite or exploded at step {step}")));
    }
    Ok(())
}

fn axpy(acc: &mut [f64], s: f64, v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

fn combo(h: f64, terms: &[(f64, &Vec<f64>)], dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; dim];
    for (w, k) in terms {
        if *w != 0.0 {
            axpy(&mut d, h * w, k);
        }
    }
    d
}

/// Evaluates a flat field on many states at one time.
pub type BatchField<'a, S> = dyn Fn(&[S], f64) -> Result<Vec<Vec<f64>>> + 'a;

/// Fixed-step Euler or RK4 over a batch of states sharing one time grid.
/// Returns one trajectory per input state, each with `steps + 1` entries.
pub fn integrate_fixed<S: FlowState>(
    field: &BatchField<'_, S>,
    states0: &[S],
    method: Method,
    steps: usize,
) -> Result<Vec<Trajectory<S>>> {
    let h = 1.0 / steps as f64;
    let mut trajs: Vec<Trajectory<S>> = states0
        .iter()
        .map(|s| Trajectory {
            times: vec![0.0],
            states: vec![s.clone()],
        })
        .collect();
    if states0.is_empty() {
        return Ok(trajs);
    }
    let dim = states0[0].tangent_dim();
    let mut cur: Vec<S> = states0.to_vec();
    for step in 0..steps {
        let t = step as f64 * h;
        let next: Vec<S> = match method {
            Method::Euler => {
                let k1 = field(&cur, t)?;
                cur.iter().zip(&k1).map(|(s, k)| s.retract(&combo(h, &[(1.0, k)], dim))).collect()
            }
            Method::Rk4 => {
                let k1 = field(&cur, t)?;
                let stage = |prev: &[Vec<f64>], w: f64, tt: f64| -> Result<Vec<Vec<f64>>> {
                    let us: Vec<Vec<f64>> = prev.iter().map(|k| combo(h, &[(w, k)], dim)).collect();
                    let st: Vec<S> = cur.iter().zip(&us).map(|(s, u)| s.retract(u)).collect();
                    let ks = field(&st, tt)?;
                    Ok(cur.iter().zip(us.iter().zip(ks)).map(|(s, (u, k))| s.pull_back(u, k)).collect())
                };
                let k2 = stage(&k1, 0.5, t + 0.5 * h)?;
                let k3 = stage(&k2, 0.5, t + 0.5 * h)?;
                let k4 = stage(&k3, 1.0, t + h)?;
                (0..cur.len())
                    .map(|i| {
                        let d = combo(h, &[(1.0 / 6.0, &k1[i]), (1.0 / 3.0, &k2[i]), (1.0 / 3.0, &k3[i]), (1.0 / 6.0, &k4[i])], dim);
                        cur[i].retract(&d)
                    })
                    .collect()
            }
            Method::Dopri => return Err(Error::validation("dopri is adaptive; use integrate_adaptive")),
        };
        for (traj, s) in trajs.iter_mut().zip(&next) {
            check_state(s, step + 1)?;
            traj.times.push(if step + 1 == steps { 1.0 } else { (step + 1) as f64 * h });
            traj.states.push(s.clone());
        }
        cur = next;
    }
    Ok(trajs)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of one state from t = 0 to 1.
pub fn integrate_adaptive<S: FlowState>(field: &BatchField<'_, S>, state0: &S, rtol: f64, atol: f64) -> Result<Trajectory<S>> {
    let dim = state0.tangent_dim();
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![state0.clone()],
    };
    let mut s = state0.clone();
    let mut t: f64 = 0.0;
    let mut h: f64 = 0.05;
    let mut k1 = field(std::slice::from_ref(&s), t)?.remove(0);
    let mut accepted = 0usize;
    while t < 1.0 {
        h = h.min(1.0 - t);
        let mut k: Vec<Vec<f64>> = vec![k1.clone()];
        let mut last_raw = Vec::new();
        for i in 1..7 {
            let terms: Vec<(f64, &Vec<f64>)> = (0..i).map(|j| (A[i][j], &k[j])).collect();
            let u = combo(h, &terms, dim);
            let si = s.retract(&u);
            let ki = field(std::slice::from_ref(&si), t + C[i] * h)?.remove(0);
            if i == 6 {
                last_raw = ki.clone();
            }
            k.push(s.pull_back(&u, ki));
        }
        let d5 = combo(h, &B5.iter().zip(&k).map(|(b, kk)| (*b, kk)).collect::<Vec<_>>(), dim);
        let d4 = combo(h, &B4.iter().zip(&k).map(|(b, kk)| (*b, kk)).collect::<Vec<_>>(), dim);
        let candidate = s.retract(&d5);
        let (m0, m1) = (s.magnitudes(), candidate.magnitudes());
        let err = (d5
            .iter()
            .zip(&d4)
            .enumerate()
            .map(|(i, (a, b))| {
                let sc = atol + rtol * m0[i].max(m1[i]);
                ((a - b) / sc).powi(2)
            })
            .sum::<f64>()
            / dim.max(1) as f64)
            .sqrt();
        if !err.is_finite() {
            return Err(Error::numerical(format!("non-finite error estimate at t = {t}")));
        }
        if err <= 1.0 {
            t = if 1.0 - (t + h) < 1e-14 { 1.0 } else { t + h };
            s = candidate;
            accepted += 1;
            check_state(&s, accepted)?;
            traj.times.push(t);
            traj.states.push(s.clone());
            k1 = std::mem::take(&mut last_raw);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        let next = h * factor;
        if err > 1.0 && next < MIN_STEP {
            return Err(Error::NonConvergence(format!(
                "adaptive step fell below {MIN_STEP} at t = {t} (error ratio {err})"
            )));
        }
        h = next.max(MIN_STEP);
    }
    Ok(traj)
}

/// Flat field over decomposed states.
pub fn decomposed_field<'a>(field: &'a dyn VelocityField) -> impl Fn(&[DecomposedState], f64) -> Result<Vec<Vec<f64>>> + 'a {
    move |states: &[DecomposedState], t: f64| {
        let ts = vec![t; states.len()];
        let out = field.eval_batch(states, &ts)?;
        for o in &out {
            if !o.is_finite() {
                return Err(Error::numerical(format!("non-finite velocity at t = {t}")));
            }
        }
        Ok(out.iter().map(|o| o.to_flat()).collect())
    }
}

/// Integrates decomposed states from t = 0 to 1.
pub fn integrate(field: &dyn VelocityField, state0: &DecomposedState, config: &SamplerConfig) -> Result<Trajectory<DecomposedState>> {
    Ok(integrate_many(field, std::slice::from_ref(state0), config)?.remove(0))
}

/// Like [`integrate`] for several initial states; fixed-step methods share
/// field evaluations across the batch.
pub fn integrate_many(
    field: &dyn VelocityField,
    states0: &[DecomposedState],
    config: &SamplerConfig,
) -> Result<Vec<Trajectory<DecomposedState>>> {
    config.validate()?;
    let f = decomposed_field(field);
    match config.method {
        Method::Dopri => states0
            .iter()
            .map(|s| integrate_adaptive(&f, s, config.rtol, config.atol))
            .collect(),
        m => integrate_fixed(&f, states0, m, config.steps),
    }
}

/// Cartesian velocity of `field` at a conformer, via its decomposition.
pub fn cartesian_field(
    field: &dyn VelocityField,
    ctx: &MolContext,
    x: &[Vector3<f64>],
    t: f64,
) -> Result<Vec<Vector3<f64>>> {
    let state = decompose(x, &ctx.zspec)?.state;
    let out = field.eval(&state, t)?;
    let j = jacobian_at(&state, &ctx.zspec)?;
    compose_cartesian_velocity(&out.v_trans, &out.omega_hat, &out.v_conf, x, &state.c, &j)
}

fn flatten(x: &[Vector3<f64>]) -> Vec<f64> {
    x.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten(v: &[f64]) -> Conformer {
    v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Integrates Cartesian coordinates with the composed field.
pub fn integrate_cartesian(
    field: &dyn VelocityField,
    ctx: &MolContext,
    x0: &[Vector3<f64>],
    config: &SamplerConfig,
) -> Result<Trajectory<Vec<f64>>> {
    config.validate()?;
    let f = |xs: &[Vec<f64>], t: f64| -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| Ok(flatten(&cartesian_field(field, ctx, &unflatten(x), t)?)))
            .collect()
    };
    let start = flatten(x0);
    match config.method {
        Method::Dopri => integrate_adaptive(&f, &start, config.rtol, config.atol),
        m => Ok(integrate_fixed(&f, std::slice::from_ref(&start), m, config.steps)?.remove(0)),
    }
}

/// Draws `k` prior states and integrates each to t = 1. Draw `i` uses its
/// own random stream, so results do not depend on `k`.
pub fn sample_states(
    field: &dyn VelocityField,
    ctx: &MolContext,
    k: usize,
    config: &SamplerConfig,
    prior: &PriorSpec,
) -> Result<Vec<DecomposedState>> {
    prior.validate()?;
    let mut starts: Vec<DecomposedState> = (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            sample_prior(prior, &ctx.zspec, &mut rng)
        })
        .collect();
    if config.stratified && !prior.cartesian {
        // a stream past every per-draw one
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mean = prior.means(&ctx.zspec);
        for (j, m) in mean.phi.iter().enumerate() {
            for (s, d) in starts.iter_mut().zip(stratified_normals(k, &mut rng)) {
                s.z.phi[j] = wrap_angle(m + prior.torsion_scale() * d);
            }
        }
    }
    if config.cartesian {
        return starts
            .iter()
            .map(|s| {
                let x0 = compose(&s.c, &s.q, &s.z, &ctx.zspec)?;
                let traj = integrate_cartesian(field, ctx, &x0, config)?;
                Ok(decompose(&unflatten(traj.last()), &ctx.zspec)?.state)
            })
            .collect();
    }
    Ok(integrate_many(field, &starts, config)?
        .into_iter()
        .map(|t| t.states.into_iter().last().expect("non-empty trajectory"))
        .collect())
}

/// `k` standard normals, one from each of `k` equal-probability bins, in
/// random order.
pub fn stratified_normals(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut bins: Vec<usize> = (0..k).collect();
    bins.shuffle(rng);
    bins.into_iter()
        .map(|b| {
            // open interval keeps the quantile finite
            let u = (b as f64 + rng.random_range(1e-12..1.0 - 1e-12)) / k as f64;
            unit.inverse_cdf(u)
        })
        .collect()
}

/// `k` conformers of molecule `ctx` generated by `field`.
pub fn sample_conformers(
    field: &dyn VelocityField,
    ctx: &MolContext,
    k: usize,
    config: &SamplerConfig,
    prior: &PriorSpec,
) -> Result<Vec<Conformer>> {
    sample_states(field, ctx, k, config, prior)?
        .iter()
        .map(|s| compose(&s.c, &s.q, &s.z, &ctx.zspec))
        .collect()
}
