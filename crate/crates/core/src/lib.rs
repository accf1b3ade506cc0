//! Potential-flow generators: transport maps obtained by integrating the
//! gradient of a learned potential, trained with sliced Wasserstein,
//! WGAN-GP or likelihood losses plus a Hamilton-Jacobi residual penalty.

pub mod generator;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod problems;
pub mod tape;
pub mod trainer;
