//! Reverse-mode automatic differentiation over scalars and dense real
//! matrices, sufficient to differentiate the multi-step forecast loss with
//! respect to every trainable parameter.
//!
//! A [`Tape`] records primitive operations eagerly (values computed at
//! record time) in topological order; [`Tape::backward`] replays them in
//! reverse from a scalar root and returns the gradient of the root with
//! respect to every parameter leaf. Everything is real-valued
//! double-precision; complex conjugate-pair structure is realized elsewhere
//! as real 2x2 blocks, so no complex numbers ever appear on the tape.
//!
//! A tape is single-threaded; distinct tapes may run on distinct threads.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{lu_factor, LuFactors, Mat};

/// Stable identifier of a trainable (or frozen) parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    /// Frozen parameters are staged as constants and never updated.
    pub trainable: bool,
}

/// Owns the numeric values of all model parameters. Tapes borrow values from
/// here when staging leaves; optimizers write updates back through it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|id| self.entries[id.0].trainable)
            .collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }
}

/// Primitive operation kinds recordable on a tape.
///
/// `Mul` is elementwise for equal shapes and broadcasts when either operand
/// is a scalar. `Ln` backs the real-power needed by the discrete-time
/// propagator (`r^tau = exp(tau ln r)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    MatVec,
    Tanh,
    Exp,
    Ln,
    Sin,
    Cos,
    Sigmoid,
    Reciprocal,
    Sum,
    SquaredNorm,
    SolveLinear,
}

impl OpKind {
    fn arity(self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::MatVec
            | OpKind::SolveLinear => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { param: Option<ParamId> },
    Op { kind: OpKind, parents: [usize; 2] },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    value: Mat,
    /// LU factors kept by solve nodes so the backward pass can reuse them.
    solve: Option<Box<LuFactors>>,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient of a scalar root with respect to parameter leaves. Every
/// parameter staged on the tape has an entry; parameters the root does not
/// depend on map to zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().fold(0.0, |acc, g| acc.max(g.max_abs()))
    }
}

/// Reverse-mode differentiation tape with eager forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Node {
            kind: NodeKind::Leaf { param: None },
            value,
            solve: None,
        })
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::scalar(x))
    }

    /// Stage a parameter as a differentiable leaf. Each parameter may appear
    /// at most once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if self.param_leaves.contains_key(&id) {
            return Err(Error::Contract(format!(
                "parameter '{}' staged twice on one tape",
                store.entry(id).name
            )));
        }
        let var = self.push(Node {
            kind: NodeKind::Leaf { param: Some(id) },
            value: store.value(id).clone(),
            solve: None,
        });
        self.param_leaves.insert(id, var.0);
        Ok(var)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract("parent not on tape".into()));
        }
        Ok(())
    }

    /// Record one primitive. The node value is computed eagerly; the
    /// derivative rule is applied during [`Tape::backward`].
    pub fn record(&mut self, kind: OpKind, parents: &[Var]) -> Result<Var> {
        if parents.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{kind:?} takes {} parent(s), got {}",
                kind.arity(),
                parents.len()
            )));
        }
        for p in parents {
            self.check(*p)?;
        }
        let a = &self.nodes[parents[0].0].value;
        let b = parents.get(1).map(|p| &self.nodes[p.0].value);

        let mut solve = None;
        let value = match kind {
            OpKind::Add | OpKind::Sub => {
                let b = b.unwrap();
                if a.shape() != b.shape() {
                    return Err(self.shape_err(kind, a, b));
                }
                if kind == OpKind::Add {
                    a.add(b)
                } else {
                    a.sub(b)
                }
            }
            OpKind::Mul => {
                let b = b.unwrap();
                if a.shape() == b.shape() {
                    a.zip_map(b, |x, y| x * y)
                } else if a.is_scalar() {
                    b.scale(a.as_scalar())
                } else if b.is_scalar() {
                    a.scale(b.as_scalar())
                } else {
                    return Err(self.shape_err(kind, a, b));
                }
            }
            OpKind::MatMul => {
                let b = b.unwrap();
                if a.cols() != b.rows() {
                    return Err(self.shape_err(kind, a, b));
                }
                a.matmul(b)
            }
            OpKind::MatVec => {
                let b = b.unwrap();
                if !b.is_col_vec() || a.cols() != b.rows() {
                    return Err(self.shape_err(kind, a, b));
                }
                a.matmul(b)
            }
            OpKind::Tanh => a.map(f64::tanh),
            OpKind::Exp => a.map(f64::exp),
            OpKind::Ln => {
                if a.data().iter().any(|&x| x <= 0.0) {
                    return Err(Error::Domain("ln of non-positive value".into()));
                }
                a.map(f64::ln)
            }
            OpKind::Sin => a.map(f64::sin),
            OpKind::Cos => a.map(f64::cos),
            OpKind::Sigmoid => a.map(|x| 1.0 / (1.0 + (-x).exp())),
            OpKind::Reciprocal => a.map(|x| 1.0 / x),
            OpKind::Sum => Mat::scalar(a.sum()),
            OpKind::SquaredNorm => Mat::scalar(a.squared_norm()),
            OpKind::SolveLinear => {
                let b = b.unwrap();
                if a.rows() != a.cols() || !b.is_col_vec() || b.rows() != a.rows() {
                    return Err(self.shape_err(kind, a, b));
                }
                let factors = lu_factor(a)?;
                let x = factors.solve_vec(b.data());
                solve = Some(Box::new(factors));
                Mat::col(&x)
            }
        };

        Ok(self.push(Node {
            kind: NodeKind::Op {
                kind,
                parents: [parents[0].0, parents.get(1).map_or(usize::MAX, |p| p.0)],
            },
            value,
            solve,
        }))
    }

    fn shape_err(&self, kind: OpKind, a: &Mat, b: &Mat) -> Error {
        Error::ShapeMismatch {
            op: match kind {
                OpKind::Add => "add",
                OpKind::Sub => "sub",
                OpKind::Mul => "mul",
                OpKind::MatMul => "matmul",
                OpKind::MatVec => "matvec",
                OpKind::SolveLinear => "solve_linear",
                _ => "op",
            },
            lhs: a.shape_string(),
            rhs: b.shape_string(),
        }
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn matvec(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatVec, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Ln, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Cos, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Reciprocal, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::SquaredNorm, &[a])
    }

    /// Solve `A x = b` differentiably. The LU factorization runs at record
    /// time so ill-conditioning surfaces as an error immediately; the
    /// backward rule propagates adjoints through both `A` and `b` by solving
    /// against `A^T`.
    pub fn solve_linear(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::SolveLinear, &[a, b])
    }

    /// Reverse pass from a scalar root. Returns the gradient for every
    /// parameter staged on this tape (zero when the root does not depend on
    /// it).
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {}",
                self.nodes[root.0].value.shape_string()
            )));
        }

        let mut adjoints: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Mat::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(out_adj) = adjoints[i].take() else {
                continue;
            };
            let (kind, parents) = match self.nodes[i].kind {
                NodeKind::Leaf { param } => {
                    if param.is_some() {
                        adjoints[i] = Some(out_adj);
                    }
                    continue;
                }
                NodeKind::Op { kind, parents } => (kind, parents),
            };
            let [pa, pb] = parents;
            match kind {
                OpKind::Add => {
                    self.accumulate(&mut adjoints, pa, out_adj.clone());
                    self.accumulate(&mut adjoints, pb, out_adj);
                }
                OpKind::Sub => {
                    self.accumulate(&mut adjoints, pa, out_adj.clone());
                    self.accumulate(&mut adjoints, pb, out_adj.scale(-1.0));
                }
                OpKind::Mul => {
                    let va = &self.nodes[pa].value;
                    let vb = &self.nodes[pb].value;
                    if va.shape() == vb.shape() {
                        let da = out_adj.zip_map(vb, |o, y| o * y);
                        let db = out_adj.zip_map(va, |o, x| o * x);
                        self.accumulate(&mut adjoints, pa, da);
                        self.accumulate(&mut adjoints, pb, db);
                    } else if va.is_scalar() {
                        let da = Mat::scalar(out_adj.dot(vb));
                        let db = out_adj.scale(va.as_scalar());
                        self.accumulate(&mut adjoints, pa, da);
                        self.accumulate(&mut adjoints, pb, db);
                    } else {
                        // vb is scalar
                        let da = out_adj.scale(vb.as_scalar());
                        let db = Mat::scalar(out_adj.dot(va));
                        self.accumulate(&mut adjoints, pa, da);
                        self.accumulate(&mut adjoints, pb, db);
                    }
                }
                OpKind::MatMul | OpKind::MatVec => {
                    let va = &self.nodes[pa].value;
                    let vb = &self.nodes[pb].value;
                    let da = out_adj.matmul(&vb.transpose());
                    let db = va.transpose().matmul(&out_adj);
                    self.accumulate(&mut adjoints, pa, da);
                    self.accumulate(&mut adjoints, pb, db);
                }
                OpKind::Tanh => {
                    let out = &self.nodes[i].value;
                    let dx = out_adj.zip_map(out, |o, t| o * (1.0 - t * t));
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Exp => {
                    let out = &self.nodes[i].value;
                    let dx = out_adj.zip_map(out, |o, e| o * e);
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Ln => {
                    let x = &self.nodes[pa].value;
                    let dx = out_adj.zip_map(x, |o, v| o / v);
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Sin => {
                    let x = &self.nodes[pa].value;
                    let dx = out_adj.zip_map(x, |o, v| o * v.cos());
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Cos => {
                    let x = &self.nodes[pa].value;
                    let dx = out_adj.zip_map(x, |o, v| -o * v.sin());
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Sigmoid => {
                    let out = &self.nodes[i].value;
                    let dx = out_adj.zip_map(out, |o, s| o * s * (1.0 - s));
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Reciprocal => {
                    let out = &self.nodes[i].value;
                    let dx = out_adj.zip_map(out, |o, r| -o * r * r);
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::Sum => {
                    let s = out_adj.as_scalar();
                    let shape = self.nodes[pa].value.shape();
                    let dx = Mat::from_fn(shape.0, shape.1, |_, _| s);
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::SquaredNorm => {
                    let s = out_adj.as_scalar();
                    let x = &self.nodes[pa].value;
                    let dx = x.scale(2.0 * s);
                    self.accumulate(&mut adjoints, pa, dx);
                }
                OpKind::SolveLinear => {
                    // x = A^{-1} b:  db = A^{-T} dx,  dA = -db x^T.
                    let factors = self.nodes[i].solve.as_ref().expect("solve factors");
                    let db = Mat::col(&factors.solve_transposed_vec(out_adj.data()));
                    let x = &self.nodes[i].value;
                    let da = Mat::outer(&db, x).scale(-1.0);
                    self.accumulate(&mut adjoints, pa, da);
                    self.accumulate(&mut adjoints, pb, db);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (&id, &node_idx) in &self.param_leaves {
            let g = match adjoints[node_idx].take() {
                Some(g) => g,
                None => {
                    let shape = self.nodes[node_idx].value.shape();
                    Mat::zeros(shape.0, shape.1)
                }
            };
            grads.insert(id, g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adjoints: &mut [Option<Mat>], idx: usize, delta: Mat) {
        match &mut adjoints[idx] {
            Some(existing) => {
                let updated = existing.add(&delta);
                *existing = updated;
            }
            slot @ None => *slot = Some(delta),
        }
    }
}
