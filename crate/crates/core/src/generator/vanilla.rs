use ndarray::{Array2, ArrayView2};

use super::{check_dim, GeneratorError};
use crate::nn::{NnError, ParamStore};
use crate::tape::Tape;

/// Baseline generator: a network mapping inputs directly to outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaGenerator {
    pub params: ParamStore,
}

impl VanillaGenerator {
    pub fn new(params: ParamStore) -> Result<Self, NnError> {
        let spec = params.spec();
        if spec.input_dim != spec.output_dim {
            return Err(NnError::InvalidSpec(format!(
                "direct map needs equal input and output dims, got {} -> {}",
                spec.input_dim, spec.output_dim
            )));
        }
        Ok(Self { params })
    }

    pub fn dim(&self) -> usize {
        self.params.spec().input_dim
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, GeneratorError> {
        check_dim(x, self.dim())?;
        Ok(self.params.forward_batch(x)?)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, GeneratorError> {
        Ok(self.params.forward(x)?)
    }

    /// Accumulates the parameter gradient of `sum(seed * G(x))`.
    pub fn pullback(
        &self,
        x: ArrayView2<'_, f64>,
        seed: ArrayView2<'_, f64>,
        theta_grad: &mut [f64],
    ) -> Result<(), GeneratorError> {
        check_dim(x, self.dim())?;
        check_dim(seed, self.dim())?;
        let mut tape = Tape::new();
        let net = tape.add_net(&self.params, true);
        let input = tape.constant(x.to_owned());
        let tr = tape.mlp(net, input);
        let grads = tape.backward(&[(tr.output, seed.to_owned())]);
        for (acc, g) in theta_grad.iter_mut().zip(grads.params(net)) {
            *acc += g;
        }
        Ok(())
    }
}
