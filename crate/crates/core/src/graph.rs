//! Scalar computation graph with graph-to-graph reverse-mode differentiation.
//!
//! Differentiating a node appends its adjoint expressions to the same graph,
//! so the returned derivative nodes are ordinary nodes and can be
//! differentiated again to any depth. Batched evaluation re-binds the
//! variable leaves of a fixed graph; see [`Plan`].

use std::collections::HashMap;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Var,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Square,
    StopGradient,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Var,
        OpKind::Const,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Tanh,
        OpKind::Square,
        OpKind::StopGradient,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpKind::Var | OpKind::Const => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::Neg | OpKind::Tanh | OpKind::Square | OpKind::StopGradient => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Node {
    /// Variable leaf; payload is its ordinal among the graph's variables.
    Var(u32),
    Const(f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    StopGradient(NodeId),
}

impl Node {
    fn kind(&self) -> OpKind {
        match self {
            Node::Var(_) => OpKind::Var,
            Node::Const(_) => OpKind::Const,
            Node::Add(..) => OpKind::Add,
            Node::Sub(..) => OpKind::Sub,
            Node::Mul(..) => OpKind::Mul,
            Node::Div(..) => OpKind::Div,
            Node::Neg(_) => OpKind::Neg,
            Node::Tanh(_) => OpKind::Tanh,
            Node::Square(_) => OpKind::Square,
            Node::StopGradient(_) => OpKind::StopGradient,
        }
    }

    fn operands(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Node::Var(_) | Node::Const(_) => (None, None),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => (Some(a), Some(b)),
            Node::Neg(a) | Node::Tanh(a) | Node::Square(a) | Node::StopGradient(a) => (Some(a), None),
        }
    }

    fn key(&self) -> (u8, u32, u32, u64) {
        let (a, b) = self.operands();
        let payload = match self {
            Node::Const(v) => v.to_bits(),
            _ => 0,
        };
        (
            self.kind() as u8,
            a.map_or(u32::MAX, |n| n.0),
            b.map_or(u32::MAX, |n| n.0),
            payload,
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{kind:?} takes {expected} operand(s), got {got}")]
    Arity { kind: OpKind, expected: usize, got: usize },
    #[error("constant leaf requires a payload")]
    MissingPayload,
    #[error("operand {0:?} is not a node of this graph")]
    InvalidOperand(NodeId),
    #[error("node {0:?} is not a variable leaf")]
    NotAVariable(NodeId),
    #[error("variable {0:?} has no binding")]
    Unbound(NodeId),
    #[error("non-finite value at node {node:?} ({kind:?})")]
    NonFinite { node: NodeId, kind: OpKind },
    #[error("expected {expected} variable values, got {got}")]
    BindingCount { expected: usize, got: usize },
}

/// Append-only scalar expression graph. Operand ids are always smaller than
/// the id of the node using them.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    vars: Vec<NodeId>,
    dedup: Option<HashMap<(u8, u32, u32, u64), NodeId>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph with common-subexpression deduplication enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            vars: Vec::new(),
            dedup: Some(HashMap::new()),
        }
    }

    pub fn without_dedup() -> Self {
        Self {
            nodes: Vec::new(),
            vars: Vec::new(),
            dedup: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    /// Variable leaves in creation order; position is the variable ordinal.
    pub fn vars(&self) -> &[NodeId] {
        &self.vars
    }

    pub fn var_ordinal(&self, id: NodeId) -> Option<usize> {
        match self.nodes.get(id.index()) {
            Some(Node::Var(k)) => Some(*k as usize),
            _ => None,
        }
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.index()].kind()
    }

    pub fn operands(&self, id: NodeId) -> Vec<NodeId> {
        let (a, b) = self.nodes[id.index()].operands();
        a.into_iter().chain(b).collect()
    }

    pub fn const_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id.index()] {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    /// Generic checked constructor.
    pub fn build(&mut self, kind: OpKind, operands: &[NodeId], payload: Option<f64>) -> Result<NodeId, GraphError> {
        if operands.len() != kind.arity() {
            return Err(GraphError::Arity {
                kind,
                expected: kind.arity(),
                got: operands.len(),
            });
        }
        if let Some(&bad) = operands.iter().find(|o| o.index() >= self.nodes.len()) {
            return Err(GraphError::InvalidOperand(bad));
        }
        let o = |i: usize| operands[i];
        Ok(match kind {
            OpKind::Var => self.var(),
            OpKind::Const => self.constant(payload.ok_or(GraphError::MissingPayload)?),
            OpKind::Add => self.add(o(0), o(1)),
            OpKind::Sub => self.sub(o(0), o(1)),
            OpKind::Mul => self.mul(o(0), o(1)),
            OpKind::Div => self.div(o(0), o(1)),
            OpKind::Neg => self.neg(o(0)),
            OpKind::Tanh => self.tanh(o(0)),
            OpKind::Square => self.square(o(0)),
            OpKind::StopGradient => self.stop_gradient(o(0)),
        })
    }

    pub fn var(&mut self) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node::Var(self.vars.len() as u32));
        self.vars.push(id);
        id
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.intern(Node::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => return self.constant(x + y),
            (Some(0.0), None) => return b,
            (None, Some(0.0)) => return a,
            _ => {}
        }
        self.intern(Node::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => return self.constant(x - y),
            (None, Some(0.0)) => return a,
            _ => {}
        }
        self.intern(Node::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => return self.constant(x * y),
            (Some(1.0), None) => return b,
            (None, Some(1.0)) => return a,
            _ => {}
        }
        self.intern(Node::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) if y != 0.0 => return self.constant(x / y),
            (None, Some(1.0)) => return a,
            _ => {}
        }
        self.intern(Node::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        match self.nodes[a.index()] {
            Node::Const(x) => self.constant(-x),
            Node::Neg(inner) => inner,
            _ => self.intern(Node::Neg(a)),
        }
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        match self.const_value(a) {
            Some(x) => self.constant(x.tanh()),
            None => self.intern(Node::Tanh(a)),
        }
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        match self.const_value(a) {
            Some(x) => self.constant(x * x),
            None => self.intern(Node::Square(a)),
        }
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        match self.nodes[a.index()] {
            Node::Const(_) | Node::StopGradient(_) => a,
            _ => self.intern(Node::StopGradient(a)),
        }
    }

    /// Left-to-right sum; zero for an empty slice.
    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        let Some((&first, rest)) = terms.split_first() else {
            return self.constant(0.0);
        };
        rest.iter().fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn dot(&mut self, a: &[NodeId], b: &[NodeId]) -> NodeId {
        assert_eq!(a.len(), b.len(), "dot of unequal lengths");
        let terms: Vec<NodeId> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&terms)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = self.constant(c);
        self.mul(c, a)
    }

    fn intern(&mut self, node: Node) -> NodeId {
        let (a, b) = node.operands();
        debug_assert!(a.is_none_or(|a| a.index() < self.nodes.len()));
        debug_assert!(b.is_none_or(|b| b.index() < self.nodes.len()));
        if let Some(table) = &mut self.dedup {
            let key = node.key();
            if let Some(&id) = table.get(&key) {
                return id;
            }
            let id = NodeId(self.nodes.len() as u32);
            table.insert(key, id);
            self.nodes.push(node);
            return id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    fn check_var(&self, id: NodeId) -> Result<(), GraphError> {
        match self.nodes.get(id.index()) {
            Some(Node::Var(_)) => Ok(()),
            Some(_) => Err(GraphError::NotAVariable(id)),
            None => Err(GraphError::InvalidOperand(id)),
        }
    }

    fn reachable(&self, roots: &[NodeId]) -> Vec<bool> {
        let n = roots.iter().map(|r| r.index() + 1).max().unwrap_or(0);
        let mut live = vec![false; n];
        for r in roots {
            live[r.index()] = true;
        }
        for i in (0..n).rev() {
            if live[i] {
                let (a, b) = self.nodes[i].operands();
                if let Some(a) = a {
                    live[a.index()] = true;
                }
                if let Some(b) = b {
                    live[b.index()] = true;
                }
            }
        }
        live
    }

    /// Marks nodes below `limit` whose value depends on any of `vars`.
    fn depends_on(&self, vars: &[NodeId], limit: usize) -> Vec<bool> {
        let mut dep = vec![false; limit];
        for v in vars {
            if v.index() < limit {
                dep[v.index()] = true;
            }
        }
        for i in 0..limit {
            if dep[i] {
                continue;
            }
            let (a, b) = self.nodes[i].operands();
            dep[i] = a.is_some_and(|a| dep[a.index()]) || b.is_some_and(|b| dep[b.index()]);
        }
        dep
    }

    /// Appends the reverse-mode adjoint subgraph of `out` and returns the
    /// derivative node for each entry of `wrt`. Stop-gradient nodes pass no
    /// adjoint to their operand.
    pub fn grad(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        if out.index() >= self.nodes.len() {
            return Err(GraphError::InvalidOperand(out));
        }
        for &w in wrt {
            self.check_var(w)?;
        }
        let n = out.index() + 1;
        let live = self.reachable(&[out]);
        let dep = self.depends_on(wrt, n);
        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        if dep[out.index()] {
            adj[out.index()] = Some(self.constant(1.0));
        }
        for i in (0..n).rev() {
            if !live[i] || !dep[i] {
                continue;
            }
            let Some(a) = adj[i] else { continue };
            let this = NodeId(i as u32);
            let mut push = |g: &mut Graph, target: NodeId, contrib: NodeId| {
                let t = target.index();
                adj[t] = Some(match adj[t] {
                    Some(prev) => g.add(prev, contrib),
                    None => contrib,
                });
            };
            match self.nodes[i] {
                Node::Var(_) | Node::Const(_) | Node::StopGradient(_) => {}
                Node::Add(x, y) => {
                    if dep[x.index()] {
                        push(self, x, a);
                    }
                    if dep[y.index()] {
                        push(self, y, a);
                    }
                }
                Node::Sub(x, y) => {
                    if dep[x.index()] {
                        push(self, x, a);
                    }
                    if dep[y.index()] {
                        let c = self.neg(a);
                        push(self, y, c);
                    }
                }
                Node::Mul(x, y) => {
                    if dep[x.index()] {
                        let c = self.mul(a, y);
                        push(self, x, c);
                    }
                    if dep[y.index()] {
                        let c = self.mul(a, x);
                        push(self, y, c);
                    }
                }
                Node::Div(x, y) => {
                    if dep[x.index()] {
                        let c = self.div(a, y);
                        push(self, x, c);
                    }
                    if dep[y.index()] {
                        // d(x/y)/dy = -(x/y)/y
                        let q = self.div(this, y);
                        let c = self.mul(a, q);
                        let c = self.neg(c);
                        push(self, y, c);
                    }
                }
                Node::Neg(x) => {
                    let c = self.neg(a);
                    push(self, x, c);
                }
                Node::Tanh(x) => {
                    let one = self.constant(1.0);
                    let sq = self.square(this);
                    let d = self.sub(one, sq);
                    let c = self.mul(a, d);
                    push(self, x, c);
                }
                Node::Square(x) => {
                    let two_x = self.scale(x, 2.0);
                    let c = self.mul(a, two_x);
                    push(self, x, c);
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.index() < n { adj[w.index()] } else { None })
            .map(|d| d.unwrap_or_else(|| self.constant(0.0)))
            .collect::<Vec<_>>())
    }

    /// Copies the parts of the expressions `roots` that depend on the given
    /// variables, with each variable replaced by its paired node. Returns the
    /// rewritten roots.
    pub fn substitute(
        &mut self,
        roots: &[NodeId],
        replacements: &[(NodeId, NodeId)],
    ) -> Result<Vec<NodeId>, GraphError> {
        for &(var, with) in replacements {
            self.check_var(var)?;
            if with.index() >= self.nodes.len() {
                return Err(GraphError::InvalidOperand(with));
            }
        }
        let Some(n) = roots.iter().map(|r| r.index() + 1).max() else {
            return Ok(Vec::new());
        };
        let live = self.reachable(roots);
        let vars: Vec<NodeId> = replacements.iter().map(|r| r.0).collect();
        let dep = self.depends_on(&vars, n);
        let mut map: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
        for &(var, with) in replacements {
            if var.index() < n {
                map[var.index()] = with;
            }
        }
        for i in 0..n {
            if !live[i] || !dep[i] || matches!(self.nodes[i], Node::Var(_)) {
                continue;
            }
            let m = |x: NodeId| map[x.index()];
            map[i] = match self.nodes[i] {
                Node::Var(_) | Node::Const(_) => unreachable!(),
                Node::Add(x, y) => self.add(m(x), m(y)),
                Node::Sub(x, y) => self.sub(m(x), m(y)),
                Node::Mul(x, y) => self.mul(m(x), m(y)),
                Node::Div(x, y) => self.div(m(x), m(y)),
                Node::Neg(x) => self.neg(m(x)),
                Node::Tanh(x) => self.tanh(m(x)),
                Node::Square(x) => self.square(m(x)),
                Node::StopGradient(x) => self.stop_gradient(m(x)),
            };
        }
        Ok(roots.iter().map(|r| map[r.index()]).collect())
    }

    /// Forward value of `out` with variables bound by node id.
    pub fn evaluate(&self, out: NodeId, bindings: &HashMap<NodeId, f64>) -> Result<f64, GraphError> {
        Ok(self.evaluate_many(&[out], bindings)?[0])
    }

    pub fn evaluate_many(&self, outs: &[NodeId], bindings: &HashMap<NodeId, f64>) -> Result<Vec<f64>, GraphError> {
        if let Some(&bad) = outs.iter().find(|o| o.index() >= self.nodes.len()) {
            return Err(GraphError::InvalidOperand(bad));
        }
        let plan = self.plan(outs);
        let mut values = vec![f64::NAN; self.vars.len()];
        for &i in &plan.order {
            if let Node::Var(k) = self.nodes[i as usize] {
                let id = NodeId(i);
                values[k as usize] = *bindings.get(&id).ok_or(GraphError::Unbound(id))?;
            }
        }
        let mut scratch = Vec::new();
        plan.run(self, &values, &mut scratch)?;
        Ok(outs.iter().map(|o| scratch[o.index()]).collect())
    }

    /// Precomputes the evaluation order for `outs` so that the same graph can
    /// be evaluated repeatedly under different variable values.
    pub fn plan(&self, outs: &[NodeId]) -> Plan {
        let live = self.reachable(outs);
        Plan {
            order: (0..live.len() as u32).filter(|&i| live[i as usize]).collect(),
            len: live.len(),
        }
    }
}

/// Evaluation order for a fixed set of outputs.
#[derive(Clone, Debug)]
pub struct Plan {
    order: Vec<u32>,
    len: usize,
}

impl Plan {
    pub fn num_nodes(&self) -> usize {
        self.order.len()
    }

    /// Evaluates every planned node. `vars` holds one value per graph
    /// variable, indexed by ordinal; results land in `scratch` indexed by
    /// node id.
    pub fn run(&self, g: &Graph, vars: &[f64], scratch: &mut Vec<f64>) -> Result<(), GraphError> {
        if vars.len() != g.vars.len() {
            return Err(GraphError::BindingCount {
                expected: g.vars.len(),
                got: vars.len(),
            });
        }
        scratch.clear();
        scratch.resize(self.len, 0.0);
        for &i in &self.order {
            let i = i as usize;
            let v = |x: NodeId| scratch[x.index()];
            let value = match g.nodes[i] {
                Node::Var(k) => vars[k as usize],
                Node::Const(c) => c,
                Node::Add(a, b) => v(a) + v(b),
                Node::Sub(a, b) => v(a) - v(b),
                Node::Mul(a, b) => v(a) * v(b),
                Node::Div(a, b) => v(a) / v(b),
                Node::Neg(a) => -v(a),
                Node::Tanh(a) => v(a).tanh(),
                Node::Square(a) => {
                    let x = v(a);
                    x * x
                }
                Node::StopGradient(a) => v(a),
            };
            if !value.is_finite() {
                let node = NodeId(i as u32);
                return Err(GraphError::NonFinite {
                    node,
                    kind: g.kind(node),
                });
            }
            scratch[i] = value;
        }
        Ok(())
    }
}
