use ndarray::{Array2, ArrayView2};

use super::{check_dim, BatchTrajectory, GeneratorError, TimeGrid, Trajectory};
use crate::graph::{Graph, GraphError, NodeId, Plan};
use crate::nn::{MlpSpec, NnError, ParamStore};

/// Discrete potential-flow generator: `phi_0` is a network, later
/// potentials follow `phi_{i+1} = phi_i - dt/2 |grad phi_i|^2`, and samples
/// move by `f_{i+1} = f_i + dt grad phi_i(f_i)`.
#[derive(Clone, Debug)]
pub struct DiscretePfg {
    pub params: ParamStore,
    pub grid: TimeGrid,
}

impl DiscretePfg {
    pub fn new(params: ParamStore, grid: TimeGrid) -> Result<Self, NnError> {
        if params.spec().output_dim != 1 {
            return Err(NnError::InvalidSpec("initial potential must be scalar".into()));
        }
        Ok(Self { params, grid })
    }

    pub fn dim(&self) -> usize {
        self.params.spec().input_dim
    }

    /// Builds the unrolled generator. Reuse the program across calls: its
    /// construction dominates the cost of a small batch.
    pub fn program(&self) -> Result<DiscreteProgram, GeneratorError> {
        DiscreteProgram::for_mlp(self.params.spec(), self.grid)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<BatchTrajectory, GeneratorError> {
        self.program()?.forward(self.params.as_slice(), x)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, Trajectory), GeneratorError> {
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let traj = self.forward(xb.view())?;
        Ok((traj.last().row(0).to_vec(), traj.sample(0)))
    }
}

/// The discrete generator unrolled on the scalar graph with the parameters
/// and the input coordinates as variables.
///
/// Variable ordinals: parameters, then the dummy coordinates the potentials
/// are written in, then the inputs, then (once enabled) the output seeds of
/// the parameter pullback.
#[derive(Clone, Debug)]
pub struct DiscreteProgram {
    graph: Graph,
    dim: usize,
    num_params: usize,
    grid: TimeGrid,
    /// `positions[i][k]`: coordinate `k` after `i` steps
    positions: Vec<Vec<NodeId>>,
    /// graph length once step `i` is complete
    step_end: Vec<usize>,
    forward_plan: Plan,
    pullback: Option<(Vec<NodeId>, Plan)>,
}

impl DiscreteProgram {
    /// `phi0` builds the initial potential from the parameter variables and
    /// the coordinate variables.
    pub fn build(
        dim: usize,
        num_params: usize,
        grid: TimeGrid,
        phi0: impl FnOnce(&mut Graph, &[NodeId], &[NodeId]) -> Result<NodeId, GeneratorError>,
    ) -> Result<Self, GeneratorError> {
        let mut graph = Graph::new();
        let theta: Vec<NodeId> = (0..num_params).map(|_| graph.var()).collect();
        let z: Vec<NodeId> = (0..dim).map(|_| graph.var()).collect();
        let x: Vec<NodeId> = (0..dim).map(|_| graph.var()).collect();
        let mut phi = phi0(&mut graph, &theta, &z)?;
        if graph.num_vars() != num_params + 2 * dim {
            return Err(GraphError::BindingCount {
                expected: num_params + 2 * dim,
                got: graph.num_vars(),
            }
            .into());
        }
        let mut positions = vec![x.clone()];
        let mut step_end = Vec::with_capacity(grid.n);
        for i in 0..grid.n {
            let v = graph.grad(phi, &z)?;
            let pairs: Vec<(NodeId, NodeId)> = z.iter().copied().zip(positions[i].iter().copied()).collect();
            let v_at = graph.substitute(&v, &pairs)?;
            let next: Vec<NodeId> = positions[i]
                .iter()
                .zip(&v_at)
                .map(|(&f, &vk)| {
                    let step = graph.scale(vk, grid.dt);
                    graph.add(f, step)
                })
                .collect();
            positions.push(next);
            step_end.push(graph.len());
            if i + 1 < grid.n {
                let speed = graph.dot(&v, &v);
                let drop = graph.scale(speed, grid.dt / 2.0);
                phi = graph.sub(phi, drop);
            }
        }
        let flat: Vec<NodeId> = positions.iter().flatten().copied().collect();
        let forward_plan = graph.plan(&flat);
        Ok(Self {
            graph,
            dim,
            num_params,
            grid,
            positions,
            step_end,
            forward_plan,
            pullback: None,
        })
    }

    pub fn for_mlp(spec: &MlpSpec, grid: TimeGrid) -> Result<Self, GeneratorError> {
        spec.validate()?;
        if spec.output_dim != 1 {
            return Err(NnError::InvalidSpec("initial potential must be scalar".into()).into());
        }
        let probe = ParamStore::zeros(*spec)?;
        Self::build(spec.input_dim, spec.num_params(), grid, |g, theta, z| {
            Ok(probe.forward_graph(g, theta, z)?[0])
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Adds the graph of `theta -> sum_k s_k y_k` and its parameter gradient,
    /// with the seeds `s` as new variables.
    pub fn enable_param_grad(&mut self) -> Result<(), GeneratorError> {
        if self.pullback.is_some() {
            return Ok(());
        }
        let seeds: Vec<NodeId> = (0..self.dim).map(|_| self.graph.var()).collect();
        let last = self.positions[self.grid.n].clone();
        let j = self.graph.dot(&seeds, &last);
        let theta: Vec<NodeId> = self.graph.vars()[..self.num_params].to_vec();
        let grads = self.graph.grad(j, &theta)?;
        let plan = self.graph.plan(&grads);
        self.pullback = Some((grads, plan));
        Ok(())
    }

    fn bindings(&self, theta: &[f64]) -> Result<Vec<f64>, GeneratorError> {
        if theta.len() != self.num_params {
            return Err(NnError::ParamCount {
                expected: self.num_params,
                got: theta.len(),
            }
            .into());
        }
        let mut vars = vec![0.0; self.graph.num_vars()];
        vars[..self.num_params].copy_from_slice(theta);
        Ok(vars)
    }

    fn step_of(&self, node: NodeId) -> usize {
        self.step_end
            .iter()
            .position(|&end| node.index() < end)
            .map_or(self.grid.n, |i| i + 1)
    }

    pub fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<BatchTrajectory, GeneratorError> {
        check_dim(x, self.dim)?;
        let mut vars = self.bindings(theta)?;
        let x_off = self.num_params + self.dim;
        let mut positions = vec![Array2::zeros((x.nrows(), self.dim)); self.grid.n + 1];
        let mut scratch = Vec::new();
        for (b, row) in x.rows().into_iter().enumerate() {
            vars[x_off..x_off + self.dim]
                .iter_mut()
                .zip(row)
                .for_each(|(v, r)| *v = *r);
            match self.forward_plan.run(&self.graph, &vars, &mut scratch) {
                Ok(()) => {}
                Err(GraphError::NonFinite { node, .. }) => {
                    return Err(GeneratorError::Divergence {
                        stage: "discrete forward",
                        step: self.step_of(node),
                        sample: b,
                    })
                }
                Err(e) => return Err(e.into()),
            }
            for (i, pos) in self.positions.iter().enumerate() {
                for (k, n) in pos.iter().enumerate() {
                    positions[i][[b, k]] = scratch[n.index()];
                }
            }
        }
        Ok(BatchTrajectory {
            times: (0..=self.grid.n).map(|i| self.grid.time(i)).collect(),
            positions,
        })
    }

    /// Parameter gradient of `sum_b seed_b . y_b`.
    pub fn pullback(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        seed: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, GeneratorError> {
        check_dim(x, self.dim)?;
        check_dim(seed, self.dim)?;
        let (grads, plan) = self.pullback.as_ref().expect("enable_param_grad must be called first");
        let mut vars = self.bindings(theta)?;
        let x_off = self.num_params + self.dim;
        let s_off = x_off + self.dim;
        let mut out = vec![0.0; self.num_params];
        let mut scratch = Vec::new();
        for (b, (row, s)) in x.rows().into_iter().zip(seed.rows()).enumerate() {
            vars[x_off..x_off + self.dim]
                .iter_mut()
                .zip(row)
                .for_each(|(v, r)| *v = *r);
            vars[s_off..s_off + self.dim]
                .iter_mut()
                .zip(s)
                .for_each(|(v, r)| *v = *r);
            match plan.run(&self.graph, &vars, &mut scratch) {
                Ok(()) => {}
                Err(GraphError::NonFinite { node, .. }) => {
                    return Err(GeneratorError::Divergence {
                        stage: "discrete parameter gradient",
                        step: self.step_of(node),
                        sample: b,
                    })
                }
                Err(e) => return Err(e.into()),
            }
            for (o, n) in out.iter_mut().zip(grads) {
                *o += scratch[n.index()];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{ContinuousPfg, GraphPotential};
    use ndarray::array;

    #[test]
    fn zero_network_is_identity() {
        let p = ParamStore::zeros(MlpSpec::new(2, 1, 4, 1)).unwrap();
        let g = DiscretePfg::new(p, TimeGrid::new(4, 1.0).unwrap()).unwrap();
        let x = array![[0.3, -1.2], [2.0, 0.0]];
        let traj = g.forward(x.view()).unwrap();
        assert_eq!(traj.last(), &x);
        assert_eq!(traj.len(), 5);
    }

    #[test]
    fn quadratic_one_step_doubles() {
        let prog = DiscreteProgram::build(1, 0, TimeGrid::new(1, 1.0).unwrap(), |g, _, z| {
            let sq = g.square(z[0]);
            Ok(g.scale(sq, 0.5))
        })
        .unwrap();
        let traj = prog.forward(&[], array![[1.5], [-0.25]].view()).unwrap();
        assert_eq!(traj.last(), &array![[3.0], [-0.5]]);
    }

    #[test]
    fn linear_potential_matches_continuous_flow() {
        let a = [0.7, -0.4];
        let grid = TimeGrid::new(4, 1.0).unwrap();
        // a single affine layer: phi_0(x) = a . x + 0.1
        let spec = MlpSpec::new(2, 0, 1, 1);
        let p = ParamStore::from_vec(spec, vec![a[0], a[1], 0.1]).unwrap();
        let g = DiscretePfg::new(p, grid).unwrap();
        let x = array![[1.0, 2.0], [-0.5, 0.25]];
        let yd = g.forward(x.view()).unwrap();
        let c = ContinuousPfg::new(GraphPotential::linear(&a), grid);
        let yc = c.forward(x.view()).unwrap();
        for (p, q) in yd.positions.iter().zip(&yc.positions) {
            assert!((p - q).iter().all(|d| d.abs() < 1e-15));
        }
        assert!((yd.last()[[0, 0]] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn nested_recursion_matches_hand_unrolled_quadratic() {
        // phi_0 = c x^2 / 2 gives grad phi_i = c_i x with c_{i+1} = c_i - dt c_i^2
        let (c0, n) = (0.8, 4);
        let grid = TimeGrid::new(n, 1.0).unwrap();
        let prog = DiscreteProgram::build(1, 0, grid, |g, _, z| {
            let sq = g.square(z[0]);
            Ok(g.scale(sq, c0 / 2.0))
        })
        .unwrap();
        let x0 = 1.3;
        let traj = prog.forward(&[], array![[x0]].view()).unwrap();
        let (mut c, mut f) = (c0, x0);
        for i in 0..n {
            f += grid.dt * c * f;
            c -= grid.dt * c * c;
            assert!((traj.positions[i + 1][[0, 0]] - f).abs() < 1e-14);
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let spec = MlpSpec::new(2, 1, 3, 1);
        let p = ParamStore::init(spec, 21).unwrap();
        let grid = TimeGrid::new(3, 1.0).unwrap();
        let mut prog = DiscreteProgram::for_mlp(&spec, grid).unwrap();
        prog.enable_param_grad().unwrap();
        let x = array![[0.5, -0.3], [-1.0, 0.8]];
        let seed = array![[1.0, 0.5], [-0.2, 0.3]];
        let obj = |th: &[f64]| (prog.forward(th, x.view()).unwrap().last() * &seed).sum();
        let g = prog.pullback(p.as_slice(), x.view(), seed.view()).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut a = p.as_slice().to_vec();
            a[k] += h;
            let mut b = p.as_slice().to_vec();
            b[k] -= h;
            let fd = (obj(&a) - obj(&b)) / (2.0 * h);
            assert!((g[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let prog = DiscreteProgram::build(1, 0, TimeGrid::new(4, 1.0).unwrap(), |g, _, z| {
            let sq = g.square(z[0]);
            Ok(g.scale(sq, 1e300))
        })
        .unwrap();
        let err = prog.forward(&[], array![[0.0], [1.0]].view()).unwrap_err();
        assert!(matches!(err, GeneratorError::Divergence { sample: 1, .. }), "{err:?}");
    }
}
