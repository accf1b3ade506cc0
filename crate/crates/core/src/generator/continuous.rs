use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{
    check_dim, first_bad_row, with_time, BatchTrajectory, GeneratorError, NeuralPotential, Potential, TimeGrid,
    Trajectory,
};

/// Generator obtained by integrating the velocity `grad_x phi(t, x)` with
/// forward Euler over the time grid.
#[derive(Clone, Debug)]
pub struct ContinuousPfg<P = NeuralPotential> {
    pub potential: P,
    pub grid: TimeGrid,
}

fn diverged(stage: &'static str, step: usize, x: &Array2<f64>) -> Result<(), GeneratorError> {
    match first_bad_row(x) {
        Some(sample) => Err(GeneratorError::Divergence { stage, step, sample }),
        None => Ok(()),
    }
}

impl<P: Potential> ContinuousPfg<P> {
    pub fn new(potential: P, grid: TimeGrid) -> Self {
        Self { potential, grid }
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    /// Pushes a batch through the flow and records every intermediate
    /// position; the output is `traj.last()`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<BatchTrajectory, GeneratorError> {
        check_dim(x, self.dim())?;
        diverged("continuous forward", 0, &x.to_owned())?;
        let mut positions = Vec::with_capacity(self.grid.n + 1);
        positions.push(x.to_owned());
        for i in 0..self.grid.n {
            let cur = &positions[i];
            let v = self.potential.velocity(self.grid.time(i), cur.view());
            let next = cur + &(v * self.grid.dt);
            diverged("continuous forward", i + 1, &next)?;
            positions.push(next);
        }
        Ok(BatchTrajectory {
            times: (0..=self.grid.n).map(|i| self.grid.time(i)).collect(),
            positions,
        })
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, Trajectory), GeneratorError> {
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let traj = self.forward(xb.view())?;
        Ok((traj.last().row(0).to_vec(), traj.sample(0)))
    }

    /// Path of the reversed flow `dU/dt = -v(T - t, U)` from `U(0) = y`;
    /// `times` holds the forward time `T - t_k` at which each step samples
    /// the velocity, and the last position estimates the preimage of `y`.
    pub fn inverse_path(&self, y: ArrayView2<'_, f64>) -> Result<BatchTrajectory, GeneratorError> {
        check_dim(y, self.dim())?;
        let total = self.grid.total();
        let mut positions = Vec::with_capacity(self.grid.n + 1);
        positions.push(y.to_owned());
        diverged("inverse flow", 0, &positions[0])?;
        for k in 0..self.grid.n {
            let cur = &positions[k];
            let v = self.potential.velocity(total - self.grid.time(k), cur.view());
            let next = cur - &(v * self.grid.dt);
            diverged("inverse flow", k + 1, &next)?;
            positions.push(next);
        }
        Ok(BatchTrajectory {
            times: (0..=self.grid.n).map(|k| total - self.grid.time(k)).collect(),
            positions,
        })
    }

    pub fn inverse(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>, GeneratorError> {
        Ok(self.inverse_path(y)?.positions.pop().expect("nonempty"))
    }

    pub fn inverse_one(&self, y: &[f64]) -> Result<Vec<f64>, GeneratorError> {
        let yb = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row");
        Ok(self.inverse(yb.view())?.row(0).to_vec())
    }

    /// Transports samples together with their log-densities:
    /// `log p_{i+1} = log p_i - dt * lap phi(t_i, x_i)`.
    pub fn log_density_forward(
        &self,
        x: ArrayView2<'_, f64>,
        log_p: ArrayView1<'_, f64>,
    ) -> Result<(BatchTrajectory, Array1<f64>), GeneratorError> {
        let traj = self.forward(x)?;
        let log_p = self.log_density_along(&traj, log_p)?;
        Ok((traj, log_p))
    }

    /// Log-density integration along an already computed trajectory.
    pub fn log_density_along(
        &self,
        traj: &BatchTrajectory,
        log_p: ArrayView1<'_, f64>,
    ) -> Result<Array1<f64>, GeneratorError> {
        let mut lp = log_p.to_owned();
        for i in 0..self.grid.n {
            let tx = with_time(traj.times[i], traj.positions[i].view());
            let lap = self.potential.laplacian(tx.view());
            lp.scaled_add(-self.grid.dt, &lap);
            if let Some(sample) = lp.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(GeneratorError::Divergence {
                    stage: "log-density transport",
                    step: i + 1,
                    sample,
                });
            }
        }
        Ok(lp)
    }
}

impl ContinuousPfg<NeuralPotential> {
    /// Reverse sweep through the forward flow. Given the adjoint `seed_y` of
    /// the final positions, and an optional per-sample weight `lap_weight`
    /// on the accumulated log-density decrement `sum_i dt * lap phi(t_i, x_i)`,
    /// accumulates the parameter gradient into `theta_grad` and returns the
    /// adjoint of the initial positions.
    pub fn pullback_forward(
        &self,
        traj: &BatchTrajectory,
        seed_y: ArrayView2<'_, f64>,
        lap_weight: Option<ArrayView1<'_, f64>>,
        theta_grad: &mut [f64],
    ) -> Array2<f64> {
        let dt = self.grid.dt;
        let lap_seed = lap_weight.map(|w| w.to_owned() * dt);
        let mut adj = seed_y.to_owned();
        for i in (0..self.grid.n).rev() {
            let tx = with_time(traj.times[i], traj.positions[i].view());
            let sv = &adj * dt;
            let ax = self
                .potential
                .pullback(tx, Some(sv.view()), lap_seed.as_ref().map(|s| s.view()), theta_grad);
            adj += &ax;
        }
        adj
    }

    /// Reverse sweep through the inverse flow recorded by
    /// [`inverse_path`](Self::inverse_path), given the adjoint of its final
    /// positions. Returns the adjoint of its starting points.
    pub fn pullback_inverse(
        &self,
        path: &BatchTrajectory,
        seed_x: ArrayView2<'_, f64>,
        theta_grad: &mut [f64],
    ) -> Array2<f64> {
        let dt = self.grid.dt;
        let mut adj = seed_x.to_owned();
        for k in (0..self.grid.n).rev() {
            let tx = with_time(path.times[k], path.positions[k].view());
            let sv = &adj * -dt;
            let ax = self.potential.pullback(tx, Some(sv.view()), None, theta_grad);
            adj += &ax;
        }
        adj
    }
}
