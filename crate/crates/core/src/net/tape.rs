//! Reverse-mode differentiation over a small set of matrix operations.
//!
//! Every node stores its forward value; `backward` walks the nodes in reverse
//! creation order and accumulates cotangents.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a + 1·bᵀ` with `b` a single row.
    AddRow(usize, usize),
    Add(usize, usize),
    Silu(usize),
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    Concat(Vec<usize>),
    /// Mean of the rows belonging to each segment.
    SegmentMean(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        for mut x in v.row_iter_mut() {
            x += r;
        }
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(v, Op::Silu(a.0))
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let v = DMatrix::from_fn(idx.len(), src.ncols(), |i, j| src[(idx[i], j)]);
        self.push(v, Op::Gather(a.0, idx))
    }

    /// Adds row `i` of `a` into row `idx[i]` of an `n`-row zero matrix.
    pub fn scatter_add(&mut self, a: Var, idx: Vec<usize>, n: usize) -> Var {
        let src = self.value(a);
        let mut v = DMatrix::zeros(n, src.ncols());
        for (i, &k) in idx.iter().enumerate() {
            let mut row = v.row_mut(k);
            row += src.row(i);
        }
        self.push(v, Op::ScatterAdd(a.0, idx))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            v.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    /// `segment[i]` names the output row that input row `i` averages into.
    pub fn segment_mean(&mut self, a: Var, segment: Vec<usize>, n: usize) -> Var {
        let src = self.value(a);
        let mut v = DMatrix::zeros(n, src.ncols());
        let mut counts = vec![0usize; n];
        for (i, &s) in segment.iter().enumerate() {
            let mut row = v.row_mut(s);
            row += src.row(i);
            counts[s] += 1;
        }
        for (s, c) in counts.iter().enumerate() {
            if *c > 0 {
                let mut row = v.row_mut(s);
                row /= *c as f64;
            }
        }
        self.push(v, Op::SegmentMean(a.0, segment))
    }

    /// Propagates the seeded cotangents and returns the cotangent of every
    /// node in `wanted`, zero when a node is unreachable.
    pub fn backward(&self, seeds: &[(Var, DMatrix<f64>)], wanted: &[Var]) -> Vec<DMatrix<f64>> {
        self.backward_blocked(seeds, wanted, &[])
    }

    /// Like [`Tape::backward`], but cotangents arriving at `blocked` nodes
    /// are dropped instead of propagated further.
    pub fn backward_blocked(&self, seeds: &[(Var, DMatrix<f64>)], wanted: &[Var], blocked: &[Var]) -> Vec<DMatrix<f64>> {
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        let accumulate = |grads: &mut Vec<Option<DMatrix<f64>>>, k: usize, g: DMatrix<f64>| match &mut grads[k] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g),
        };
        for (v, g) in seeds {
            accumulate(&mut grads, v.0, g.clone());
        }
        let lowest = wanted.iter().map(|v| v.0).min().unwrap_or(0);
        for k in (lowest..self.nodes.len()).rev() {
            let Some(g) = grads[k].take() else { continue };
            if blocked.iter().any(|b| b.0 == k) {
                continue;
            }
            match &self.nodes[k].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.nodes[*b].value.transpose();
                    let gb = self.nodes[*a].value.transpose() * &g;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = DMatrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_map(x, |gi, xi| gi * silu_grad(xi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = DMatrix::zeros(src.nrows(), src.ncols());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(r);
                        row += g.row(i);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let ga = DMatrix::from_fn(idx.len(), g.ncols(), |i, j| g[(idx[i], j)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        accumulate(&mut grads, *p, g.columns(off, w).into_owned());
                        off += w;
                    }
                }
                Op::SegmentMean(a, seg) => {
                    let mut counts = vec![0usize; g.nrows()];
                    for &s in seg {
                        counts[s] += 1;
                    }
                    let ga = DMatrix::from_fn(seg.len(), g.ncols(), |i, j| g[(seg[i], j)] / counts[seg[i]] as f64);
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[k] = Some(g);
        }
        wanted
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| DMatrix::zeros(self.nodes[v.0].value.nrows(), self.nodes[v.0].value.ncols()))
            })
            .collect()
    }
}
