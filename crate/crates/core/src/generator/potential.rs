use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::{with_time, GeneratorError};
use crate::graph::{Graph, GraphError, NodeId, Plan};
use crate::nn::{NnError, ParamStore};
use crate::tape::{MlpTrace, NetId, TId, Tape};

/// Time-dependent scalar potential `phi(t, x)` on `R^d`. Every method takes
/// rows `(t, x_1, ..., x_d)`.
pub trait Potential {
    /// Spatial dimension `d`.
    fn dim(&self) -> usize;

    fn value(&self, tx: ArrayView2<'_, f64>) -> Array1<f64>;

    /// `(d phi / dt, grad_x phi)`.
    fn derivatives(&self, tx: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>);

    /// Trace of the spatial Hessian.
    fn laplacian(&self, tx: ArrayView2<'_, f64>) -> Array1<f64>;

    /// Velocity field `grad_x phi(t, .)` at the rows of `x`.
    fn velocity(&self, t: f64, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.derivatives(with_time(t, x).view()).1
    }
}

/// Potential represented by a tanh network with inputs `(t, x)` and a scalar
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPotential {
    pub params: ParamStore,
}

/// Forward pass of a [`NeuralPotential`] on a tape together with its input
/// gradient. Column 0 of `grad` is the time derivative, the remaining
/// columns the velocity.
pub struct PotentialTrace {
    pub input: TId,
    pub mlp: MlpTrace,
    pub grad: TId,
}

impl NeuralPotential {
    pub fn new(params: ParamStore) -> Result<Self, NnError> {
        let spec = params.spec();
        if spec.input_dim < 2 || spec.output_dim != 1 {
            return Err(NnError::InvalidSpec(format!(
                "potential needs inputs (t, x) with d >= 1 and one output, got {} -> {}",
                spec.input_dim, spec.output_dim
            )));
        }
        Ok(Self { params })
    }

    /// Records the potential at rows `tx` on `tape`, where `net` is the
    /// tape handle of `self.params`.
    pub fn trace(tape: &mut Tape<'_>, net: NetId, tx: Array2<f64>, requires_grad: bool) -> PotentialTrace {
        let input = tape.leaf(tx, requires_grad);
        let mlp = tape.mlp(net, input);
        let grad = tape.mlp_input_grad(&mlp);
        PotentialTrace { input, mlp, grad }
    }

    /// Reverse mode through the velocity and, optionally, the Laplacian at
    /// rows `tx`. Accumulates into `theta_grad` the parameter gradient of
    /// `sum(seed_v * grad_x phi) + sum(seed_lap * lap phi)` and returns its
    /// gradient with respect to the spatial coordinates.
    pub fn pullback(
        &self,
        tx: Array2<f64>,
        seed_v: Option<ArrayView2<'_, f64>>,
        seed_lap: Option<ArrayView1<'_, f64>>,
        theta_grad: &mut [f64],
    ) -> Array2<f64> {
        let d = self.dim();
        let rows = tx.nrows();
        let mut tape = Tape::new();
        let net = tape.add_net(&self.params, true);
        let tr = Self::trace(&mut tape, net, tx, true);
        let mut seeds = Vec::new();
        if let Some(sv) = seed_v {
            let v = tape.columns(tr.grad, 1, d);
            seeds.push((v, sv.to_owned()));
        }
        if let Some(sl) = seed_lap {
            let lap = tape.mlp_laplacian(&tr.mlp, 1..d + 1);
            seeds.push((lap, sl.to_owned().insert_axis(ndarray::Axis(1))));
        }
        if seeds.is_empty() {
            return Array2::zeros((rows, d));
        }
        let grads = tape.backward(&seeds);
        for (acc, g) in theta_grad.iter_mut().zip(grads.params(net)) {
            *acc += g;
        }
        match grads.node(tr.input) {
            Some(a) => a.slice(s![.., 1..]).to_owned(),
            None => Array2::zeros((rows, d)),
        }
    }
}

impl Potential for NeuralPotential {
    fn dim(&self) -> usize {
        self.params.spec().input_dim - 1
    }

    fn value(&self, tx: ArrayView2<'_, f64>) -> Array1<f64> {
        self.params
            .forward_batch(tx)
            .expect("input width checked by caller")
            .column(0)
            .to_owned()
    }

    fn derivatives(&self, tx: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
        let mut tape = Tape::new();
        let net = tape.add_net(&self.params, false);
        let tr = Self::trace(&mut tape, net, tx.to_owned(), false);
        let g = tape.value(tr.grad);
        (g.column(0).to_owned(), g.slice(s![.., 1..]).to_owned())
    }

    fn laplacian(&self, tx: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut tape = Tape::new();
        let net = tape.add_net(&self.params, false);
        let input = tape.constant(tx.to_owned());
        let tr = tape.mlp(net, input);
        let lap = tape.mlp_laplacian(&tr, 1..self.dim() + 1);
        tape.value(lap).column(0).to_owned()
    }
}

/// Potential given by a closed-form expression on the scalar graph, with
/// derivatives obtained by graph differentiation.
#[derive(Clone, Debug)]
pub struct GraphPotential {
    graph: Graph,
    dim: usize,
    phi: NodeId,
    dphi_dt: NodeId,
    grad: Vec<NodeId>,
    laplacian: NodeId,
    plan: Plan,
}

impl GraphPotential {
    /// `build` receives the time variable and the `d` spatial variables and
    /// returns the potential node. It must not create further variables.
    pub fn new(
        dim: usize,
        build: impl FnOnce(&mut Graph, NodeId, &[NodeId]) -> NodeId,
    ) -> Result<Self, GeneratorError> {
        let mut graph = Graph::new();
        let t = graph.var();
        let xs: Vec<NodeId> = (0..dim).map(|_| graph.var()).collect();
        let phi = build(&mut graph, t, &xs);
        if graph.num_vars() != dim + 1 {
            return Err(GraphError::BindingCount {
                expected: dim + 1,
                got: graph.num_vars(),
            }
            .into());
        }
        let mut wrt = vec![t];
        wrt.extend(&xs);
        let first = graph.grad(phi, &wrt)?;
        let mut diag = Vec::with_capacity(dim);
        for (k, &x) in xs.iter().enumerate() {
            diag.push(graph.grad(first[k + 1], &[x])?[0]);
        }
        let laplacian = graph.sum(&diag);
        let mut outs = vec![phi];
        outs.extend(&first);
        outs.push(laplacian);
        let plan = graph.plan(&outs);
        Ok(Self {
            graph,
            dim,
            phi,
            dphi_dt: first[0],
            grad: first[1..].to_vec(),
            laplacian,
            plan,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// `phi = 0`.
    pub fn zero(dim: usize) -> Self {
        Self::new(dim, |g, _, _| g.constant(0.0)).expect("valid expression")
    }

    /// `phi(t, x) = a . x`, a constant velocity field.
    pub fn linear(a: &[f64]) -> Self {
        Self::new(a.len(), |g, _, xs| {
            let terms: Vec<NodeId> = xs.iter().zip(a).map(|(&x, &c)| g.scale(x, c)).collect();
            g.sum(&terms)
        })
        .expect("valid expression")
    }

    /// `phi(t, x) = |x - b|^2 / (2 (t + c))`, an exact solution of the
    /// Hamilton-Jacobi equation for `c > 0`.
    pub fn hj_quadratic(b: &[f64], c: f64) -> Self {
        Self::new(b.len(), |g, t, xs| {
            let sq: Vec<NodeId> = xs
                .iter()
                .zip(b)
                .map(|(&x, &bk)| {
                    let off = g.constant(-bk);
                    let diff = g.add(x, off);
                    g.square(diff)
                })
                .collect();
            let num = g.sum(&sq);
            let cc = g.constant(c);
            let tc = g.add(t, cc);
            let den = g.scale(tc, 2.0);
            g.div(num, den)
        })
        .expect("valid expression")
    }

    /// `phi(t, z) = z1^2 / (2 (1 + t)) - z2^2 / (2 (2 - t))`. Solves the
    /// Hamilton-Jacobi equation exactly; over `[0, 1]` its characteristics
    /// carry `(x1, x2)` to `(2 x1, x2 / 2)`.
    pub fn hj_gaussian() -> Self {
        Self::new(2, |g, t, z| {
            let one = g.constant(1.0);
            let two = g.constant(2.0);
            let a_den = g.add(one, t);
            let a_den = g.scale(a_den, 2.0);
            let z1 = g.square(z[0]);
            let a = g.div(z1, a_den);
            let b_den = g.sub(two, t);
            let b_den = g.scale(b_den, 2.0);
            let z2 = g.square(z[1]);
            let b = g.div(z2, b_den);
            g.sub(a, b)
        })
        .expect("valid expression")
    }

    fn eval_rows(&self, tx: ArrayView2<'_, f64>, mut emit: impl FnMut(usize, &[f64])) {
        assert_eq!(tx.ncols(), self.dim + 1, "rows must be (t, x)");
        let mut scratch = Vec::new();
        let mut vars = vec![0.0; self.dim + 1];
        for (b, row) in tx.rows().into_iter().enumerate() {
            vars.iter_mut().zip(row.iter()).for_each(|(v, r)| *v = *r);
            match self.plan.run(&self.graph, &vars, &mut scratch) {
                Ok(()) => emit(b, &scratch),
                Err(_) => {
                    scratch.iter_mut().for_each(|v| *v = f64::NAN);
                    scratch.resize(self.graph.len(), f64::NAN);
                    emit(b, &scratch)
                }
            }
        }
    }
}

impl Potential for GraphPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, tx: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(tx.nrows());
        self.eval_rows(tx, |b, v| out[b] = v[self.phi.index()]);
        out
    }

    fn derivatives(&self, tx: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
        let mut dt = Array1::zeros(tx.nrows());
        let mut grad = Array2::zeros((tx.nrows(), self.dim));
        self.eval_rows(tx, |b, v| {
            dt[b] = v[self.dphi_dt.index()];
            for (k, n) in self.grad.iter().enumerate() {
                grad[[b, k]] = v[n.index()];
            }
        });
        (dt, grad)
    }

    fn laplacian(&self, tx: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(tx.nrows());
        self.eval_rows(tx, |b, v| out[b] = v[self.laplacian.index()]);
        out
    }
}
