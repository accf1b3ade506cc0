//! Tanh feed-forward networks: parameter layout, initialization, forward
//! passes on the scalar graph and on plain arrays, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{MlpSpec, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} inputs, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite gradient entry {index} at optimizer step {step}")]
    NonFiniteGradient { step: u64, index: usize },
}
