//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a computation as a list of scalar nodes. Operands always
//! precede the node that uses them, so the node list is a topological order
//! by construction. The recorded program is a pure function of the registered
//! inputs: [`Tape::forward`] re-evaluates it for new input values,
//! [`Tape::gradient`] runs a numeric reverse sweep, and [`Tape::grad_nodes`]
//! records the reverse sweep itself as new nodes on the same tape. Running a
//! second reverse sweep over those nodes yields second derivatives
//! (reverse-over-reverse), which is what [`Tape::input_hessian_diag`] does.
//!
//! Everything is `f64`.

use crate::error::{Error, Result};


/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Constant(f64),
    /// Registered input; the payload is its slot in the input registry.
    Input(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    PowI(NodeId, i32),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: f64,
    adjoint: f64,
}

/// Marker returned by [`Tape::checkpoint`]; [`Tape::rewind`] drops every
/// node recorded after it.
#[derive(Debug, Clone, Copy)]
pub struct Checkpoint {
    nodes: usize,
    inputs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    input_values: Vec<f64>,
    /// Nodes `[0, evaluated)` hold valid primal values.
    evaluated: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: f64::NAN,
            adjoint: 0.0,
        });
        id
    }

    /// Registers a new input. Its value is supplied positionally to
    /// [`Tape::forward`].
    pub fn input(&mut self) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push(Op::Input(slot));
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        self.push(Op::PowI(a, n))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    /// `c * a` with `c` recorded as a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = self.constant(c);
        self.mul(c, a)
    }

    /// Left fold of `add`; an empty slice yields the constant 0.
    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nodes: self.nodes.len(),
            inputs: self.inputs.len(),
        }
    }

    pub fn rewind(&mut self, mark: Checkpoint) {
        self.nodes.truncate(mark.nodes);
        self.inputs.truncate(mark.inputs);
        self.input_values.truncate(mark.inputs);
        self.evaluated = self.evaluated.min(mark.nodes);
    }

    fn eval_node(&self, i: usize) -> f64 {
        let v = |id: NodeId| self.nodes[id.0].value;
        match self.nodes[i].op {
            Op::Constant(c) => c,
            Op::Input(slot) => self.input_values[slot],
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::Div(a, b) => v(a) / v(b),
            Op::Neg(a) => -v(a),
            Op::Tanh(a) => v(a).tanh(),
            Op::Sin(a) => v(a).sin(),
            Op::Cos(a) => v(a).cos(),
            Op::Exp(a) => v(a).exp(),
            Op::PowI(a, n) => v(a).powi(n),
        }
    }

    /// Binds `inputs` (in registration order), evaluates every node and
    /// returns the value of the last node.
    pub fn forward(&mut self, inputs: &[f64]) -> Result<f64> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::config(format!(
                "tape has {} registered inputs but {} values were bound",
                self.inputs.len(),
                inputs.len()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::usage("forward on an empty tape"));
        }
        self.input_values.clear();
        self.input_values.extend_from_slice(inputs);
        self.evaluated = 0;
        self.refresh();
        Ok(self.nodes[self.nodes.len() - 1].value)
    }

    /// Evaluates nodes recorded since the last evaluation, reusing the bound
    /// input values.
    pub fn refresh(&mut self) {
        if self.input_values.len() != self.inputs.len() {
            return;
        }
        for i in self.evaluated..self.nodes.len() {
            self.nodes[i].value = self.eval_node(i);
        }
        self.evaluated = self.nodes.len();
    }

    pub fn value(&self, id: NodeId) -> Result<f64> {
        self.check_evaluated(id)?;
        Ok(self.nodes[id.0].value)
    }

    fn check_evaluated(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::usage(format!("node {} does not exist", id.0)));
        }
        if id.0 >= self.evaluated {
            return Err(Error::usage(format!(
                "node {} has no primal value; run forward first",
                id.0
            )));
        }
        Ok(())
    }

    /// Numeric reverse sweep from `root`; returns d root / d wrt for each
    /// requested node.
    pub fn gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<f64>> {
        self.check_evaluated(root)?;
        for &w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(Error::usage(format!("node {} does not exist", w.0)));
            }
        }
        self.backward(root);
        Ok(wrt
            .iter()
            .map(|w| if w.0 <= root.0 { self.nodes[w.0].adjoint } else { 0.0 })
            .collect())
    }

    fn backward(&mut self, root: NodeId) {
        for node in &mut self.nodes[..=root.0] {
            node.adjoint = 0.0;
        }
        self.nodes[root.0].adjoint = 1.0;
        for i in (0..=root.0).rev() {
            let a = self.nodes[i].adjoint;
            if a == 0.0 {
                continue;
            }
            let out = self.nodes[i].value;
            let val = |id: NodeId| self.nodes[id.0].value;
            let mut contrib = [(usize::MAX, 0.0); 2];
            match self.nodes[i].op {
                Op::Constant(_) | Op::Input(_) => {}
                Op::Add(x, y) => contrib = [(x.0, a), (y.0, a)],
                Op::Sub(x, y) => contrib = [(x.0, a), (y.0, -a)],
                Op::Mul(x, y) => contrib = [(x.0, a * val(y)), (y.0, a * val(x))],
                Op::Div(x, y) => {
                    let q = a / val(y);
                    contrib = [(x.0, q), (y.0, -q * out)];
                }
                Op::Neg(x) => contrib[0] = (x.0, -a),
                Op::Tanh(x) => contrib[0] = (x.0, a * (1.0 - out * out)),
                Op::Sin(x) => contrib[0] = (x.0, a * val(x).cos()),
                Op::Cos(x) => contrib[0] = (x.0, -a * val(x).sin()),
                Op::Exp(x) => contrib[0] = (x.0, a * out),
                Op::PowI(x, n) => {
                    if n != 0 {
                        contrib[0] = (x.0, a * f64::from(n) * val(x).powi(n - 1));
                    }
                }
            }
            for (target, delta) in contrib {
                if target != usize::MAX {
                    self.nodes[target].adjoint += delta;
                }
            }
        }
    }

    /// Records the reverse sweep from `root` as new differentiable nodes and
    /// returns, for each entry of `wrt`, the node holding d root / d wrt.
    /// Entries that `root` does not depend on map to a constant 0 node.
    ///
    /// The new nodes are unevaluated; call [`Tape::refresh`] to compute them.
    pub fn grad_nodes(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::usage(format!("node {} does not exist", root.0)));
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        adj[root.0] = Some(self.constant(1.0));
        let mut one: Option<NodeId> = None;

        fn acc(tape: &mut Tape, adj: &mut [Option<NodeId>], target: NodeId, v: NodeId) {
            adj[target.0] = Some(match adj[target.0] {
                Some(e) => tape.add(e, v),
                None => v,
            });
        }
        fn acc_neg(tape: &mut Tape, adj: &mut [Option<NodeId>], target: NodeId, v: NodeId) {
            adj[target.0] = Some(match adj[target.0] {
                Some(e) => tape.sub(e, v),
                None => tape.neg(v),
            });
        }

        for i in (0..=root.0).rev() {
            let Some(a) = adj[i] else { continue };
            let out = NodeId(i);
            match self.nodes[i].op {
                Op::Constant(_) | Op::Input(_) => {}
                Op::Add(x, y) => {
                    acc(self, &mut adj, x, a);
                    acc(self, &mut adj, y, a);
                }
                Op::Sub(x, y) => {
                    acc(self, &mut adj, x, a);
                    acc_neg(self, &mut adj, y, a);
                }
                Op::Mul(x, y) => {
                    let dx = self.mul(a, y);
                    acc(self, &mut adj, x, dx);
                    let dy = self.mul(a, x);
                    acc(self, &mut adj, y, dy);
                }
                Op::Div(x, y) => {
                    let q = self.div(a, y);
                    acc(self, &mut adj, x, q);
                    let dy = self.mul(q, out);
                    acc_neg(self, &mut adj, y, dy);
                }
                Op::Neg(x) => acc_neg(self, &mut adj, x, a),
                Op::Tanh(x) => {
                    let one = *one.get_or_insert_with(|| self.constant(1.0));
                    let t2 = self.mul(out, out);
                    let d = self.sub(one, t2);
                    let dx = self.mul(a, d);
                    acc(self, &mut adj, x, dx);
                }
                Op::Sin(x) => {
                    let c = self.cos(x);
                    let dx = self.mul(a, c);
                    acc(self, &mut adj, x, dx);
                }
                Op::Cos(x) => {
                    let s = self.sin(x);
                    let dx = self.mul(a, s);
                    acc_neg(self, &mut adj, x, dx);
                }
                Op::Exp(x) => {
                    let dx = self.mul(a, out);
                    acc(self, &mut adj, x, dx);
                }
                Op::PowI(x, n) => match n {
                    0 => {}
                    1 => acc(self, &mut adj, x, a),
                    _ => {
                        let p = self.powi(x, n - 1);
                        let c = self.scale(p, f64::from(n));
                        let dx = self.mul(a, c);
                        acc(self, &mut adj, x, dx);
                    }
                },
            }
        }

        let mut zero: Option<NodeId> = None;
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(id) => id,
                None => *zero.get_or_insert_with(|| self.constant(0.0)),
            })
            .collect())
    }

    /// Second derivative of `root` with respect to the registered input
    /// `wrt`, by differentiating the recorded gradient graph. The tape is
    /// restored to its previous length afterwards.
    pub fn input_hessian_diag(&mut self, root: NodeId, wrt: NodeId) -> Result<f64> {
        if wrt.0 >= self.nodes.len() || !matches!(self.nodes[wrt.0].op, Op::Input(_)) {
            return Err(Error::usage(format!("node {} is not a registered input", wrt.0)));
        }
        self.check_evaluated(root)?;
        let mark = self.checkpoint();
        let result = (|| {
            let first = self.grad_nodes(root, &[wrt])?[0];
            self.refresh();
            Ok(self.gradient(first, &[wrt])?[0])
        })();
        self.rewind(mark);
        result
    }
}
