//! Message-passing velocity field over the decomposed state.
//!
//! Atom features, per-atom internal-coordinate features and a sinusoidal
//! time embedding feed a residual message-passing trunk. The pooled graph
//! embedding drives the translation and rotation heads, which also see the
//! current centroid and rotation matrix. The conformation head scores each
//! internal coordinate from the embeddings of the atoms that define it, so
//! its inputs are invariant to rigid motion.

mod checkpoint;
mod features;
pub mod tape;

use std::collections::HashMap;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Model, CHECKPOINT_VERSION};
pub use features::{featurize, ELEMENTS, NUM_FEATURES};

use crate::error::{Error, Result};
use crate::so3::RotVec;
use crate::zmatrix::{build_zmatrix, CoordKind, DecomposedState, MolecularGraph, ZMatrixSpec};
use tape::{Tape, Var};

/// Width of the per-atom geometry block.
pub const GEOM_FEATURES: usize = 8;
/// Width of the per-coordinate descriptor (kind one-hot plus two values).
pub const COORD_FEATURES: usize = 5;
/// Largest frequency of the time embedding.
const MAX_TIME_FREQ: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub time_embed_dim: usize,
    pub message_passing: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_dim: 128,
            num_layers: 8,
            time_embed_dim: 32,
            message_passing: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::validation("hidden_dim and num_layers must be at least 1"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::validation(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Trunk,
    Trans,
    Rot,
    Conf,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    entries: Vec<(String, DMatrix<f64>)>,
    index: HashMap<String, usize>,
}

impl NetParams {
    pub fn from_entries(entries: Vec<(String, DMatrix<f64>)>) -> Self {
        let index = entries.iter().enumerate().map(|(k, (n, _))| (n.clone(), k)).collect();
        NetParams { entries, index }
    }

    pub fn entries(&self) -> &[(String, DMatrix<f64>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.index.get(name).map(|k| &self.entries[*k].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.index.get(name).map(|k| &mut self.entries[*k].1)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        NetParams::from_entries(
            self.entries
                .iter()
                .map(|(n, m)| (n.clone(), DMatrix::zeros(m.nrows(), m.ncols())))
                .collect(),
        )
    }

    pub fn same_layout(&self, other: &NetParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn group_of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("trans") => ParamGroup::Trans,
            Some("rot") => ParamGroup::Rot,
            Some("conf") => ParamGroup::Conf,
            _ => ParamGroup::Trunk,
        }
    }

    /// `self += s · other`, entrywise.
    pub fn axpy(&mut self, s: f64, other: &NetParams) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            *a += b * s;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.entries.iter_mut() {
            *a *= s;
        }
    }

    pub fn dot(&self, other: &NetParams) -> f64 {
        self.entries.iter().zip(&other.entries).map(|((_, a), (_, b))| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }

    /// Scalar at flat position `k` (entries in order, each column-major).
    pub fn flat_get(&self, mut k: usize) -> f64 {
        for (_, m) in &self.entries {
            if k < m.len() {
                return m[k];
            }
            k -= m.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn flat_set(&mut self, mut k: usize, v: f64) {
        for (_, m) in self.entries.iter_mut() {
            if k < m.len() {
                m[k] = v;
                return;
            }
            k -= m.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Name and in-tensor index of flat position `k`.
    pub fn flat_name(&self, mut k: usize) -> (&str, usize) {
        for (n, m) in &self.entries {
            if k < m.len() {
                return (n, k);
            }
            k -= m.len();
        }
        panic!("flat parameter index out of range")
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

fn input_width(config: &NetConfig) -> usize {
    NUM_FEATURES + GEOM_FEATURES + config.time_embed_dim
}

fn rigid_head_width(config: &NetConfig) -> usize {
    config.hidden_dim + config.time_embed_dim + 12
}

fn conf_head_width(config: &NetConfig) -> usize {
    5 * config.hidden_dim + config.time_embed_dim + COORD_FEATURES
}

/// Glorot-uniform weights (gain 1), zero biases, zero output layers.
pub fn init_params(config: &NetConfig) -> Result<NetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_dim;
    let mut e: Vec<(String, DMatrix<f64>)> = Vec::new();
    e.push(("trunk.in.w".into(), glorot(&mut rng, input_width(config), h)));
    e.push(("trunk.in.b".into(), DMatrix::zeros(1, h)));
    for l in 0..config.num_layers {
        e.push((format!("trunk.l{l}.self.w"), glorot(&mut rng, h, h)));
        e.push((format!("trunk.l{l}.msg.w"), glorot(&mut rng, h, h)));
        e.push((format!("trunk.l{l}.b"), DMatrix::zeros(1, h)));
    }
    for head in ["trans", "rot"] {
        e.push((format!("{head}.h.w"), glorot(&mut rng, rigid_head_width(config), h)));
        e.push((format!("{head}.h.b"), DMatrix::zeros(1, h)));
        e.push((format!("{head}.out.w"), DMatrix::zeros(h, 3)));
        e.push((format!("{head}.out.b"), DMatrix::zeros(1, 3)));
    }
    e.push(("conf.h.w".into(), glorot(&mut rng, conf_head_width(config), h)));
    e.push(("conf.h.b".into(), DMatrix::zeros(1, h)));
    e.push(("conf.out.w".into(), DMatrix::zeros(h, 1)));
    e.push(("conf.out.b".into(), DMatrix::zeros(1, 1)));
    Ok(NetParams::from_entries(e))
}

/// Expected parameter layout for `config`, used to validate checkpoints.
pub fn param_layout(config: &NetConfig) -> Result<Vec<(String, (usize, usize))>> {
    let p = init_params(&NetConfig { seed: 0, ..config.clone() })?;
    Ok(p.entries.iter().map(|(n, m)| (n.clone(), m.shape())).collect())
}

/// Sinusoidal embedding of `t`, `[sin(f_k t), cos(f_k t)]` with frequencies
/// spaced geometrically between 1 and 100.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let f = if half > 1 { MAX_TIME_FREQ.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out[k] = (f * t).sin();
        out[half + k] = (f * t).cos();
    }
    out
}

/// Velocity field evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub v_trans: Vector3<f64>,
    pub omega_hat: RotVec,
    pub v_conf: Vec<f64>,
}

impl FieldOutput {
    pub fn zeros(m: usize) -> Self {
        FieldOutput {
            v_trans: Vector3::zeros(),
            omega_hat: RotVec::zeros(),
            v_conf: vec![0.0; m],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v_trans.iter().chain(self.omega_hat.0.iter()).chain(&self.v_conf).all(|v| v.is_finite())
    }
}

/// Graph-derived inputs that do not change during training or sampling.
#[derive(Debug, Clone)]
pub struct MolContext {
    pub graph: MolecularGraph,
    pub zspec: ZMatrixSpec,
    pub features: DMatrix<f64>,
    /// Directed edges, both orientations of every bond.
    edges: Vec<(usize, usize)>,
    /// Atom indices `[atom, parent, grandparent, great-grandparent]` of each
    /// coordinate, missing references replaced by the atom itself.
    coord_atoms: Vec<[usize; 4]>,
    coord_kinds: Vec<CoordKind>,
    /// Position of each atom's entry in the z-matrix.
    entry_of: Vec<usize>,
}

impl MolContext {
    pub fn new(graph: &MolecularGraph) -> Result<Self> {
        let zspec = build_zmatrix(graph)?;
        Self::with_spec(graph, zspec)
    }

    pub fn with_spec(graph: &MolecularGraph, zspec: ZMatrixSpec) -> Result<Self> {
        graph.validate()?;
        zspec.validate()?;
        if zspec.num_atoms() != graph.num_atoms() {
            return Err(Error::structural("z-matrix and graph disagree on the atom count"));
        }
        let features = featurize(graph)?;
        let mut edges = Vec::with_capacity(2 * graph.bonds.len());
        for b in &graph.bonds {
            edges.push((b.0, b.1));
            edges.push((b.1, b.0));
        }
        let coords = zspec.coordinates();
        let coord_atoms = coords
            .iter()
            .map(|c| {
                let a = c.atoms[0];
                c.atoms.map(|x| if x == usize::MAX { a } else { x })
            })
            .collect();
        let coord_kinds = coords.iter().map(|c| c.kind).collect();
        let mut entry_of = vec![0; zspec.num_atoms()];
        for (k, e) in zspec.entries.iter().enumerate() {
            entry_of[e.atom] = k;
        }
        Ok(MolContext {
            graph: graph.clone(),
            zspec,
            features,
            edges,
            coord_atoms,
            coord_kinds,
            entry_of,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.zspec.num_atoms()
    }

    pub fn dim(&self) -> usize {
        self.zspec.dim()
    }

    /// Per-atom `[has_r, r − 1.5, has_θ, cos θ, sin θ, has_φ, cos φ, sin φ]`
    /// from the coordinates that place the atom.
    fn geometry_features(&self, state: &DecomposedState) -> DMatrix<f64> {
        let n = self.num_atoms();
        let mut g = DMatrix::zeros(n, GEOM_FEATURES);
        for atom in 0..n {
            let k = self.entry_of[atom];
            if k >= 1 {
                g[(atom, 0)] = 1.0;
                g[(atom, 1)] = state.z.r[k - 1] - 1.5;
            }
            if k >= 2 {
                let t = state.z.theta[k - 2];
                g[(atom, 2)] = 1.0;
                g[(atom, 3)] = t.cos();
                g[(atom, 4)] = t.sin();
            }
            if k >= 3 {
                let p = state.z.phi[k - 3];
                g[(atom, 5)] = 1.0;
                g[(atom, 6)] = p.cos();
                g[(atom, 7)] = p.sin();
            }
        }
        g
    }

    fn coordinate_features(&self, state: &DecomposedState) -> DMatrix<f64> {
        let flat = state.z.to_flat();
        DMatrix::from_fn(self.dim(), COORD_FEATURES, |k, j| {
            let kind = self.coord_kinds[k];
            let x = flat[k];
            match (j, kind) {
                (0, CoordKind::Bond) | (1, CoordKind::Angle) | (2, CoordKind::Dihedral) => 1.0,
                (3, CoordKind::Bond) => x - 1.5,
                (3, _) => x.cos(),
                (4, CoordKind::Bond) => 0.0,
                (4, _) => x.sin(),
                _ => 0.0,
            }
        })
    }
}

/// Forward pass over a batch of states of one molecule, kept on a tape so
/// that parameter gradients can be pulled back from the outputs.
pub struct ForwardPass {
    tape: Tape,
    params: Vec<Var>,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    out_trans: Var,
    out_rot: Var,
    out_conf: Var,
    pooled: Var,
    batch: usize,
    m: usize,
}

impl ForwardPass {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn output(&self, b: usize) -> FieldOutput {
        let tr = self.tape.value(self.out_trans);
        let ro = self.tape.value(self.out_rot);
        let co = self.tape.value(self.out_conf);
        FieldOutput {
            v_trans: Vector3::new(tr[(b, 0)], tr[(b, 1)], tr[(b, 2)]),
            omega_hat: RotVec::new(ro[(b, 0)], ro[(b, 1)], ro[(b, 2)]),
            v_conf: (0..self.m).map(|k| co[(b * self.m + k, 0)]).collect(),
        }
    }

    pub fn outputs(&self) -> Vec<FieldOutput> {
        (0..self.batch).map(|b| self.output(b)).collect()
    }

    /// Pulls back cotangents of the outputs (one [`FieldOutput`] per batch
    /// element) to parameter gradients.
    pub fn backward(&self, cotangents: &[FieldOutput]) -> NetParams {
        let (gt, gr, gc) = self.seeds(cotangents);
        let grads = self
            .tape
            .backward(&[(self.out_trans, gt), (self.out_rot, gr), (self.out_conf, gc)], &self.params);
        self.collect(grads)
    }

    /// Like [`ForwardPass::backward`], but the translation and rotation
    /// cotangents stop at the pooled embedding, so the trunk only sees the
    /// conformation cotangent.
    pub fn backward_conf_trunk(&self, cotangents: &[FieldOutput]) -> NetParams {
        let (gt, gr, gc) = self.seeds(cotangents);
        let conf = self.tape.backward(&[(self.out_conf, gc)], &self.params);
        let rigid = self
            .tape
            .backward_blocked(&[(self.out_trans, gt), (self.out_rot, gr)], &self.params, &[self.pooled]);
        self.collect(conf.into_iter().zip(rigid).map(|(a, b)| a + b).collect())
    }

    fn seeds(&self, cotangents: &[FieldOutput]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let m = self.m;
        (
            DMatrix::from_fn(self.batch, 3, |b, j| cotangents[b].v_trans[j]),
            DMatrix::from_fn(self.batch, 3, |b, j| cotangents[b].omega_hat.0[j]),
            DMatrix::from_fn(self.batch * m, 1, |r, _| cotangents[r / m].v_conf[r % m]),
        )
    }

    fn collect(&self, grads: Vec<DMatrix<f64>>) -> NetParams {
        NetParams::from_entries(
            self.names
                .iter()
                .zip(grads)
                .zip(&self.shapes)
                .map(|((n, g), s)| {
                    debug_assert_eq!(g.shape(), *s);
                    (n.clone(), g)
                })
                .collect(),
        )
    }
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite activation in {what}")))
    }
}

/// Evaluates the field on `states` (all of molecule `ctx`) at times `ts`.
pub fn forward_batch(
    config: &NetConfig,
    params: &NetParams,
    ctx: &MolContext,
    states: &[DecomposedState],
    ts: &[f64],
) -> Result<ForwardPass> {
    if states.len() != ts.len() {
        return Err(Error::structural("states and times differ in length"));
    }
    for s in states {
        s.z.validate(&ctx.zspec)?;
    }
    let bsz = states.len();
    let n = ctx.num_atoms();
    let m = ctx.dim();
    let td = config.time_embed_dim;

    let mut tape = Tape::new();
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut vars = Vec::new();
    let mut pv: HashMap<&str, Var> = HashMap::new();
    for (name, mat) in params.entries() {
        let v = tape.leaf(mat.clone());
        names.push(name.clone());
        shapes.push(mat.shape());
        vars.push(v);
        pv.insert(name.as_str(), v);
    }
    let p = |name: &str| -> Result<Var> {
        pv.get(name)
            .copied()
            .ok_or_else(|| Error::structural(format!("parameter `{name}` missing")))
    };

    let temb: Vec<Vec<f64>> = ts.iter().map(|t| time_embedding(*t, td)).collect();

    // node inputs: [features | geometry | time]
    let geom: Vec<DMatrix<f64>> = states.iter().map(|s| ctx.geometry_features(s)).collect();
    let x0 = DMatrix::from_fn(bsz * n, input_width(config), |row, j| {
        let (b, atom) = (row / n, row % n);
        if j < NUM_FEATURES {
            ctx.features[(atom, j)]
        } else if j < NUM_FEATURES + GEOM_FEATURES {
            geom[b][(atom, j - NUM_FEATURES)]
        } else {
            temb[b][j - NUM_FEATURES - GEOM_FEATURES]
        }
    });
    let x0 = tape.leaf(x0);
    let pre = tape.matmul(x0, p("trunk.in.w")?);
    let pre = tape.add_row(pre, p("trunk.in.b")?);
    let mut hv = tape.silu(pre);
    check_finite(&tape, hv, "the input layer")?;

    let (src, dst): (Vec<usize>, Vec<usize>) = (0..bsz)
        .flat_map(|b| ctx.edges.iter().map(move |(i, j)| (b * n + i, b * n + j)))
        .unzip();
    for l in 0..config.num_layers {
        let mut pre = tape.matmul(hv, p(&format!("trunk.l{l}.self.w"))?);
        if config.message_passing && !src.is_empty() {
            let hw = tape.matmul(hv, p(&format!("trunk.l{l}.msg.w"))?);
            let msgs = tape.gather(hw, src.clone());
            let agg = tape.scatter_add(msgs, dst.clone(), bsz * n);
            pre = tape.add(pre, agg);
        }
        let pre = tape.add_row(pre, p(&format!("trunk.l{l}.b"))?);
        let act = tape.silu(pre);
        hv = tape.add(hv, act);
        check_finite(&tape, hv, &format!("layer {l}"))?;
    }

    let graph_of: Vec<usize> = (0..bsz * n).map(|r| r / n).collect();
    let pooled = tape.segment_mean(hv, graph_of, bsz);

    // rigid heads: [pooled | time | c | R(q) row-major]
    let rigid_in = DMatrix::from_fn(bsz, td + 12, |b, j| {
        if j < td {
            temb[b][j]
        } else if j < td + 3 {
            states[b].c[j - td]
        } else {
            let r = states[b].q.to_rotation_matrix();
            let k = j - td - 3;
            r[(k / 3, k % 3)]
        }
    });
    let rigid_in = tape.leaf(rigid_in);
    let rigid = tape.concat(&[pooled, rigid_in]);
    let mut heads = Vec::new();
    for head in ["trans", "rot"] {
        let z = tape.matmul(rigid, p(&format!("{head}.h.w"))?);
        let z = tape.add_row(z, p(&format!("{head}.h.b"))?);
        let z = tape.silu(z);
        let o = tape.matmul(z, p(&format!("{head}.out.w"))?);
        let o = tape.add_row(o, p(&format!("{head}.out.b"))?);
        check_finite(&tape, o, &format!("the {head} head"))?;
        heads.push(o);
    }

    // conformation head, one row per (batch element, coordinate)
    let mut parts = Vec::new();
    for slot in 0..4 {
        let idx: Vec<usize> = (0..bsz * m).map(|r| (r / m) * n + ctx.coord_atoms[r % m][slot]).collect();
        parts.push(tape.gather(hv, idx));
    }
    parts.push(tape.gather(pooled, (0..bsz * m).map(|r| r / m).collect()));
    let cfeat: Vec<DMatrix<f64>> = states.iter().map(|s| ctx.coordinate_features(s)).collect();
    let extra = DMatrix::from_fn(bsz * m, td + COORD_FEATURES, |r, j| {
        let b = r / m;
        if j < td {
            temb[b][j]
        } else {
            cfeat[b][(r % m, j - td)]
        }
    });
    parts.push(tape.leaf(extra));
    let cin = tape.concat(&parts);
    let z = tape.matmul(cin, p("conf.h.w")?);
    let z = tape.add_row(z, p("conf.h.b")?);
    let z = tape.silu(z);
    let o = tape.matmul(z, p("conf.out.w")?);
    let out_conf = tape.add_row(o, p("conf.out.b")?);
    check_finite(&tape, out_conf, "the conformation head")?;

    Ok(ForwardPass {
        tape,
        params: vars,
        names,
        shapes,
        out_trans: heads[0],
        out_rot: heads[1],
        out_conf,
        pooled,
        batch: bsz,
        m,
    })
}

/// Field at a single state.
pub fn forward(config: &NetConfig, params: &NetParams, ctx: &MolContext, state: &DecomposedState, t: f64) -> Result<FieldOutput> {
    let pass = forward_batch(config, params, ctx, std::slice::from_ref(state), &[t])?;
    Ok(pass.output(0))
}
