use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::graph::{Graph, NodeId};

/// Shape of a fully connected tanh network. Every hidden layer has the same
/// width; the output layer is affine. Zero hidden layers gives a single
/// affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_width: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_width,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_width", self.hidden_width),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(NnError::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    /// `(fan_in, fan_out)` of affine layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.input_dim } else { self.hidden_width };
        let fan_out = if l == self.hidden_layers {
            self.output_dim
        } else {
            self.hidden_width
        };
        (fan_in, fan_out)
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                (i + 1) * o
            })
            .sum()
    }

    /// Flat offset of layer `l`'s weight block.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (i, o) = self.layer_shape(k);
                (i + 1) * o
            })
            .sum()
    }
}

/// Flat parameter vector. Layer `l` stores its `fan_out x fan_in` weight
/// matrix row-major, followed by its `fan_out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    spec: MlpSpec,
    theta: Vec<f64>,
    offsets: Vec<usize>,
}

impl ParamStore {
    pub fn zeros(spec: MlpSpec) -> Result<Self, NnError> {
        Self::from_vec(spec, vec![0.0; spec.num_params()])
    }

    pub fn from_vec(spec: MlpSpec, theta: Vec<f64>) -> Result<Self, NnError> {
        spec.validate()?;
        if theta.len() != spec.num_params() {
            return Err(NnError::ParamCount {
                expected: spec.num_params(),
                got: theta.len(),
            });
        }
        let offsets = (0..spec.num_layers()).map(|l| spec.layer_offset(l)).collect();
        Ok(Self { spec, theta, offsets })
    }

    /// Glorot-uniform weights and zero biases, deterministic under `seed`.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NnError> {
        let mut store = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = spec.layer_shape(l);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let off = store.offsets[l];
            for w in &mut store.theta[off..off + fan_in * fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(store)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }

    /// Flat index of weight `(row, col)` in layer `l`; `col == fan_in`
    /// addresses the row's bias.
    pub fn index(&self, l: usize, row: usize, col: usize) -> usize {
        let (fan_in, fan_out) = self.spec.layer_shape(l);
        assert!(row < fan_out && col <= fan_in, "index out of layer bounds");
        let off = self.offsets[l];
        if col == fan_in {
            off + fan_out * fan_in + row
        } else {
            off + row * fan_in + col
        }
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (fan_in, fan_out) = self.spec.layer_shape(l);
        let off = self.offsets[l];
        ArrayView2::from_shape((fan_out, fan_in), &self.theta[off..off + fan_in * fan_out])
            .expect("layout matches spec")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (fan_in, fan_out) = self.spec.layer_shape(l);
        let off = self.offsets[l] + fan_in * fan_out;
        ArrayView1::from(&self.theta[off..off + fan_out])
    }

    /// Registers every parameter as a graph variable, in flat order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.theta.iter().map(|_| g.var()).collect()
    }

    /// Embeds the parameters as constants (no parameter gradient).
    pub fn constants(&self, g: &mut Graph) -> Vec<NodeId> {
        self.theta.iter().map(|&w| g.constant(w)).collect()
    }

    /// Builds the network on the graph. `params` are the nodes standing for
    /// the flat parameter vector (see [`register`](Self::register)).
    pub fn forward_graph(&self, g: &mut Graph, params: &[NodeId], inputs: &[NodeId]) -> Result<Vec<NodeId>, NnError> {
        forward_graph(&self.spec, g, params, inputs)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.spec.input_dim {
            return Err(NnError::InputDim {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        for l in 0..self.spec.num_layers() {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut z: Vec<f64> = (0..w.nrows())
                .map(|r| b[r] + w.row(r).iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l < self.spec.hidden_layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.spec.input_dim {
            return Err(NnError::InputDim {
                expected: self.spec.input_dim,
                got: x.ncols(),
            });
        }
        let mut h = x.to_owned();
        for l in 0..self.spec.num_layers() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l).insert_axis(Axis(0));
            if l < self.spec.hidden_layers {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        Ok(h)
    }
}

pub(crate) fn forward_graph(
    spec: &MlpSpec,
    g: &mut Graph,
    params: &[NodeId],
    inputs: &[NodeId],
) -> Result<Vec<NodeId>, NnError> {
    if inputs.len() != spec.input_dim {
        return Err(NnError::InputDim {
            expected: spec.input_dim,
            got: inputs.len(),
        });
    }
    if params.len() != spec.num_params() {
        return Err(NnError::ParamCount {
            expected: spec.num_params(),
            got: params.len(),
        });
    }
    let mut h = inputs.to_vec();
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = spec.layer_shape(l);
        let off = spec.layer_offset(l);
        let mut next = Vec::with_capacity(fan_out);
        for r in 0..fan_out {
            let row = &params[off + r * fan_in..off + (r + 1) * fan_in];
            let dot = g.dot(row, &h);
            let z = g.add(dot, params[off + fan_out * fan_in + r]);
            next.push(if l < spec.hidden_layers { g.tanh(z) } else { z });
        }
        h = next;
    }
    Ok(h)
}
