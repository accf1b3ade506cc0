//! Potential-flow generators (discrete and continuous), the direct-map
//! baseline, trajectories, the inverse flow and log-density transport.

mod continuous;
mod discrete;
mod potential;
mod vanilla;

pub use continuous::ContinuousPfg;
pub use discrete::{DiscretePfg, DiscreteProgram};
pub use potential::{GraphPotential, NeuralPotential, Potential, PotentialTrace};
pub use vanilla::VanillaGenerator;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphError;
use crate::nn::NnError;

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("non-finite value during {stage} at step {step} (sample {sample})")]
    Divergence {
        stage: &'static str,
        step: usize,
        sample: usize,
    },
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Uniform time discretization `t_i = i * dt`, `i = 0..=n`, total `T = n * dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n: usize,
    pub dt: f64,
}

impl TimeGrid {
    /// `n` steps covering `[0, total]`.
    pub fn new(n: usize, total: f64) -> Result<Self, GeneratorError> {
        if n == 0 {
            return Err(GeneratorError::Grid("step count must be positive".into()));
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(GeneratorError::Grid(format!("total time {total} must be positive")));
        }
        Ok(Self {
            n,
            dt: total / n as f64,
        })
    }

    pub fn total(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

/// Time-stamped path `(t_i, f(t_i, x))` of one sample, `i = 0..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<(f64, Vec<f64>)>,
}

/// Trajectories of a whole batch: `positions[i]` holds every sample at `times[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Array2<f64>>,
}

impl BatchTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.positions.first().map_or(0, |p| p.nrows())
    }

    pub fn last(&self) -> &Array2<f64> {
        self.positions.last().expect("empty trajectory")
    }

    pub fn sample(&self, b: usize) -> Trajectory {
        Trajectory {
            points: self
                .times
                .iter()
                .zip(&self.positions)
                .map(|(&t, p)| (t, p.row(b).to_vec()))
                .collect(),
        }
    }
}

pub(crate) fn check_dim(x: ArrayView2<'_, f64>, d: usize) -> Result<(), GeneratorError> {
    if x.ncols() != d {
        return Err(GeneratorError::Dimension {
            expected: d,
            got: x.ncols(),
        });
    }
    Ok(())
}

/// Index of the first row containing a non-finite entry.
pub(crate) fn first_bad_row(x: &Array2<f64>) -> Option<usize> {
    x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Prepends a constant time column: rows become `(t, x)`.
pub(crate) fn with_time(t: f64, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut tx = Array2::from_elem((x.nrows(), x.ncols() + 1), t);
    tx.slice_mut(ndarray::s![.., 1..]).assign(&x);
    tx
}
