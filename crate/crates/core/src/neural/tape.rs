//! Reverse-mode differentiation over a recorded list of primitive ops.
//!
//! Every node stores the value computed when it was recorded; the reverse
//! sweep reads those snapshots and never recomputes a forward value.

use crate::error::{Error, Result};
use crate::numerics::{Mat, Vector};

use super::params::{Gradients, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf; receives no gradient.
    Input,
    /// `W x + b` with `W`, `b` parameters.
    Affine { w: ParamId, b: ParamId, x: NodeId },
    /// `W x` with `W` a parameter.
    MatVec { w: ParamId, x: NodeId },
    /// `A x` with `A` a constant.
    ConstMatVec { a: Mat, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise product with a constant vector.
    Scale { x: NodeId, s: Vector },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    /// `W v` where `W` is the row-major reshape of node `w` into `rows × len(v)`.
    ReshapeMatVec { w: NodeId, v: NodeId, rows: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vector,
}

/// Computation record bound to the parameter set it reads from.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    sealed: bool,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            sealed: false,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Vector {
        &self.nodes[id.0].value
    }

    /// Marks the record complete. Further ops may not be pushed.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn push(&mut self, op: Op, value: Vector) -> NodeId {
        assert!(!self.sealed, "cannot record onto a sealed tape");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vector) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let wm = self.params.get(w);
        let bm = self.params.get(b);
        let value = wm * self.value(x) + bm.column(0);
        self.push(Op::Affine { w, b, x }, value)
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> NodeId {
        let value = self.params.get(w) * self.value(x);
        self.push(Op::MatVec { w, x }, value)
    }

    pub fn const_matvec(&mut self, a: &Mat, x: NodeId) -> NodeId {
        let value = a * self.value(x);
        self.push(Op::ConstMatVec { a: a.clone(), x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).component_mul(self.value(b));
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, s: &Vector) -> NodeId {
        let value = self.value(x).component_mul(s);
        self.push(Op::Scale { x, s: s.clone() }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), Vector::from_vec(data))
    }

    pub fn reshape_matvec(&mut self, w: NodeId, v: NodeId, rows: usize) -> NodeId {
        let cols = self.value(v).len();
        assert_eq!(self.value(w).len(), rows * cols, "gain vector length");
        let wv = self.value(w);
        let vv = self.value(v);
        let value = Vector::from_fn(rows, |i, _| (0..cols).map(|j| wv[i * cols + j] * vv[j]).sum());
        self.push(Op::ReshapeMatVec { w, v, rows }, value)
    }

    /// Reverse sweep seeded with `dL/d(node)` for each listed node.
    pub fn backward(&self, seeds: &[(NodeId, Vector)]) -> Result<Gradients> {
        if !self.sealed {
            return Err(Error::TapeNotSealed);
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Vector>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.len() != self.nodes[id.0].value.len() {
                return Err(Error::DimensionMismatch(format!(
                    "seed of length {} for node of length {}",
                    g.len(),
                    self.nodes[id.0].value.len()
                )));
            }
            accumulate(&mut adj[id.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Affine { w, b, x } => {
                    let xv = self.value(*x);
                    let wm = self.params.get(*w);
                    *grads.get_mut(*w) += &g * xv.transpose();
                    grads.get_mut(*b).column_mut(0).axpy(1.0, &g, 1.0);
                    accumulate(&mut adj[x.0], wm.tr_mul(&g));
                }
                Op::MatVec { w, x } => {
                    let xv = self.value(*x);
                    let wm = self.params.get(*w);
                    *grads.get_mut(*w) += &g * xv.transpose();
                    accumulate(&mut adj[x.0], wm.tr_mul(&g));
                }
                Op::ConstMatVec { a, x } => accumulate(&mut adj[x.0], a.tr_mul(&g)),
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], -g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Scale { x, s } => accumulate(&mut adj[x.0], g.component_mul(s)),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = Vector::from_fn(y.len(), |i, _| g[i] * y[i] * (1.0 - y[i]));
                    accumulate(&mut adj[x.0], d);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let d = Vector::from_fn(y.len(), |i, _| g[i] * (1.0 - y[i] * y[i]));
                    accumulate(&mut adj[x.0], d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj[p.0], g.rows(off, n).into_owned());
                        off += n;
                    }
                }
                Op::ReshapeMatVec { w, v, rows } => {
                    let wv = self.value(*w);
                    let vv = self.value(*v);
                    let cols = vv.len();
                    let gw = Vector::from_fn(rows * cols, |k, _| g[k / cols] * vv[k % cols]);
                    let gv = Vector::from_fn(cols, |j, _| {
                        (0..*rows).map(|i| wv[i * cols + j] * g[i]).sum()
                    });
                    accumulate(&mut adj[w.0], gw);
                    accumulate(&mut adj[v.0], gv);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Vector>, g: Vector) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}
