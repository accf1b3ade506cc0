//! Batched reverse-mode tape over matrices holding one sample per row.
//!
//! This is the training-time counterpart of [`crate::graph`]: nodes are
//! `B x k` arrays and parameter products run as matrix multiplies. It is
//! first-order only. Input derivatives that a loss needs (velocities, time
//! derivatives, Laplacians, discriminator input gradients) are written out
//! as explicit tape operations, so one reverse sweep still yields exact
//! parameter gradients of expressions that contain them.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetId(usize);

#[derive(Clone, Debug)]
enum TOp {
    Leaf,
    /// `x W^T + b`
    Affine(TId, NetId, usize),
    /// `x W^T`
    Linear(TId, NetId, usize),
    /// `x W`
    LinearT(TId, NetId, usize),
    /// every row equals column `col` of `W`
    WeightColumn(NetId, usize, usize),
    Tanh(TId),
    /// `1 - x^2`
    OneMinusSquare(TId),
    Add(TId, TId),
    Sub(TId, TId),
    Mul(TId, TId),
    Scale(TId, f64),
    AddConst(TId),
    Square(TId),
    /// `a [B x k]` times per-row scalar `c [B x 1]`
    MulCol(TId, TId),
    RowSum(TId),
    RowNorm(TId),
    Mean(TId),
    Columns(TId, usize, usize),
    /// Scalar whose gradient w.r.t. its input was fixed at construction.
    FrozenGrad(TId, Array2<f64>),
}

struct TNode {
    value: Array2<f64>,
    op: TOp,
    needs_grad: bool,
}

struct Net<'p> {
    params: &'p ParamStore,
    track: bool,
}

/// Gradients from one reverse sweep.
pub struct Grads {
    params: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Flat parameter gradient of a tracked network.
    pub fn params(&self, net: NetId) -> &[f64] {
        self.params[net.0]
            .as_deref()
            .expect("network was registered without gradient tracking")
    }

    pub fn take_params(&mut self, net: NetId) -> Vec<f64> {
        self.params[net.0]
            .take()
            .expect("network was registered without gradient tracking")
    }

    /// Adjoint of a node, `None` when no seed reaches it.
    pub fn node(&self, id: TId) -> Option<&Array2<f64>> {
        self.nodes[id.0].as_ref()
    }
}

pub struct Tape<'p> {
    nets: Vec<Net<'p>>,
    nodes: Vec<TNode>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nets: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Registers a network; `track` selects whether its parameter gradient is
    /// accumulated.
    pub fn add_net(&mut self, params: &'p ParamStore, track: bool) -> NetId {
        self.nets.push(Net { params, track });
        NetId(self.nets.len() - 1)
    }

    pub fn net(&self, id: NetId) -> &'p ParamStore {
        self.nets[id.0].params
    }

    pub fn value(&self, id: TId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: TId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: TOp) -> TId {
        let needs_grad = match &op {
            TOp::Leaf => false,
            TOp::WeightColumn(net, ..) => self.nets[net.0].track,
            TOp::Affine(x, net, _) | TOp::Linear(x, net, _) | TOp::LinearT(x, net, _) => {
                self.nets[net.0].track || self.nodes[x.0].needs_grad
            }
            TOp::Add(a, b) | TOp::Sub(a, b) | TOp::Mul(a, b) | TOp::MulCol(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            TOp::Tanh(a)
            | TOp::OneMinusSquare(a)
            | TOp::Scale(a, _)
            | TOp::AddConst(a)
            | TOp::Square(a)
            | TOp::RowSum(a)
            | TOp::RowNorm(a)
            | TOp::Mean(a)
            | TOp::Columns(a, ..)
            | TOp::FrozenGrad(a, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(TNode { value, op, needs_grad });
        TId(self.nodes.len() - 1)
    }

    /// Input leaf; `requires_grad` leaves receive adjoints in [`Grads::node`].
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> TId {
        let id = self.push(value, TOp::Leaf);
        self.nodes[id.0].needs_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, value: Array2<f64>) -> TId {
        self.leaf(value, false)
    }

    pub fn affine(&mut self, x: TId, net: NetId, layer: usize) -> TId {
        let p = self.nets[net.0].params;
        let mut y = self.value(x).dot(&p.weight(layer).t());
        y += &p.bias(layer).insert_axis(Axis(0));
        self.push(y, TOp::Affine(x, net, layer))
    }

    pub fn linear(&mut self, x: TId, net: NetId, layer: usize) -> TId {
        let p = self.nets[net.0].params;
        let y = self.value(x).dot(&p.weight(layer).t());
        self.push(y, TOp::Linear(x, net, layer))
    }

    pub fn linear_t(&mut self, x: TId, net: NetId, layer: usize) -> TId {
        let p = self.nets[net.0].params;
        let y = self.value(x).dot(&p.weight(layer));
        self.push(y, TOp::LinearT(x, net, layer))
    }

    pub fn weight_column(&mut self, net: NetId, layer: usize, col: usize, rows: usize) -> TId {
        let p = self.nets[net.0].params;
        let w = p.weight(layer);
        let column = w.column(col);
        let y = column
            .insert_axis(Axis(0))
            .broadcast((rows, w.nrows()))
            .expect("broadcast")
            .to_owned();
        self.push(y, TOp::WeightColumn(net, layer, col))
    }

    pub fn tanh(&mut self, a: TId) -> TId {
        let y = self.value(a).mapv(f64::tanh);
        self.push(y, TOp::Tanh(a))
    }

    pub fn one_minus_square(&mut self, a: TId) -> TId {
        let y = self.value(a).mapv(|v| 1.0 - v * v);
        self.push(y, TOp::OneMinusSquare(a))
    }

    pub fn add(&mut self, a: TId, b: TId) -> TId {
        let y = self.value(a) + self.value(b);
        self.push(y, TOp::Add(a, b))
    }

    pub fn sub(&mut self, a: TId, b: TId) -> TId {
        let y = self.value(a) - self.value(b);
        self.push(y, TOp::Sub(a, b))
    }

    pub fn mul(&mut self, a: TId, b: TId) -> TId {
        let y = self.value(a) * self.value(b);
        self.push(y, TOp::Mul(a, b))
    }

    pub fn scale(&mut self, a: TId, c: f64) -> TId {
        let y = self.value(a) * c;
        self.push(y, TOp::Scale(a, c))
    }

    pub fn add_const(&mut self, a: TId, c: f64) -> TId {
        let y = self.value(a) + c;
        self.push(y, TOp::AddConst(a))
    }

    pub fn square(&mut self, a: TId) -> TId {
        let y = self.value(a).mapv(|v| v * v);
        self.push(y, TOp::Square(a))
    }

    pub fn mul_col(&mut self, a: TId, c: TId) -> TId {
        assert_eq!(self.value(c).ncols(), 1, "mul_col expects a column");
        let y = self.value(a) * self.value(c);
        self.push(y, TOp::MulCol(a, c))
    }

    pub fn row_sum(&mut self, a: TId) -> TId {
        let y = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(y, TOp::RowSum(a))
    }

    pub fn row_norm(&mut self, a: TId) -> TId {
        let y = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(y, TOp::RowNorm(a))
    }

    pub fn mean(&mut self, a: TId) -> TId {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), TOp::Mean(a))
    }

    pub fn columns(&mut self, a: TId, start: usize, len: usize) -> TId {
        let y = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(y, TOp::Columns(a, start, len))
    }

    /// Scalar `value` whose derivative w.r.t. `input` is `grad` (same shape
    /// as the input), treated as locally constant.
    pub fn frozen_grad(&mut self, input: TId, value: f64, grad: Array2<f64>) -> TId {
        assert_eq!(grad.dim(), self.value(input).dim());
        self.push(Array2::from_elem((1, 1), value), TOp::FrozenGrad(input, grad))
    }

    /// Reverse sweep from the given seeds (each the adjoint of a node, same
    /// shape as its value).
    pub fn backward(&self, seeds: &[(TId, Array2<f64>)]) -> Grads {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; n];
        for (id, seed) in seeds {
            assert_eq!(seed.dim(), self.value(*id).dim(), "seed shape mismatch");
            accumulate(&mut adj[id.0], seed.view());
        }
        let mut params: Vec<Option<Vec<f64>>> = self
            .nets
            .iter()
            .map(|n| n.track.then(|| vec![0.0; n.params.len()]))
            .collect();
        let top = seeds.iter().map(|s| s.0 .0).max().map_or(0, |m| m + 1);
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj, &mut params);
            adj[i] = Some(g);
        }
        Grads { params, nodes: adj }
    }

    fn wants(&self, id: TId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>], params: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            TOp::Leaf => {}
            &TOp::Affine(x, net, l) | &TOp::Linear(x, net, l) => {
                let p = self.nets[net.0].params;
                if let Some(buf) = &mut params[net.0] {
                    let xv = self.value(x);
                    let (off, fan_in, fan_out) = layer_slot(p, l);
                    let mut dw = ArrayViewMut2::from_shape((fan_out, fan_in), &mut buf[off..off + fan_in * fan_out])
                        .expect("layout");
                    general_mat_mul(1.0, &g.t(), xv, 1.0, &mut dw);
                    if matches!(node.op, TOp::Affine(..)) {
                        let db = g.sum_axis(Axis(0));
                        let boff = off + fan_in * fan_out;
                        for (b, d) in buf[boff..boff + fan_out].iter_mut().zip(db.iter()) {
                            *b += d;
                        }
                    }
                }
                if self.wants(x) {
                    let dx = g.dot(&p.weight(l));
                    add_into(&mut adj[x.0], dx);
                }
            }
            &TOp::LinearT(x, net, l) => {
                let p = self.nets[net.0].params;
                if let Some(buf) = &mut params[net.0] {
                    let xv = self.value(x);
                    let (off, fan_in, fan_out) = layer_slot(p, l);
                    let mut dw = ArrayViewMut2::from_shape((fan_out, fan_in), &mut buf[off..off + fan_in * fan_out])
                        .expect("layout");
                    general_mat_mul(1.0, &xv.t(), g, 1.0, &mut dw);
                }
                if self.wants(x) {
                    let dx = g.dot(&p.weight(l).t());
                    add_into(&mut adj[x.0], dx);
                }
            }
            &TOp::WeightColumn(net, l, col) => {
                let p = self.nets[net.0].params;
                if let Some(buf) = &mut params[net.0] {
                    let (off, fan_in, _) = layer_slot(p, l);
                    let colsum = g.sum_axis(Axis(0));
                    for (r, d) in colsum.iter().enumerate() {
                        buf[off + r * fan_in + col] += d;
                    }
                }
            }
            &TOp::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                d.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y);
                add_into(&mut adj[a.0], d);
            }
            &TOp::OneMinusSquare(a) => {
                let x = self.value(a);
                let mut d = g.clone();
                d.zip_mut_with(x, |d, &x| *d *= -2.0 * x);
                add_into(&mut adj[a.0], d);
            }
            &TOp::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.view());
                }
                if self.wants(b) {
                    accumulate(&mut adj[b.0], g.view());
                }
            }
            &TOp::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.view());
                }
                if self.wants(b) {
                    add_into(&mut adj[b.0], -g);
                }
            }
            &TOp::Mul(a, b) => {
                if self.wants(a) {
                    add_into(&mut adj[a.0], g * self.value(b));
                }
                if self.wants(b) {
                    add_into(&mut adj[b.0], g * self.value(a));
                }
            }
            &TOp::Scale(a, c) => add_into(&mut adj[a.0], g * c),
            &TOp::AddConst(a) => accumulate(&mut adj[a.0], g.view()),
            &TOp::Square(a) => {
                let x = self.value(a);
                let mut d = g.clone();
                d.zip_mut_with(x, |d, &x| *d *= 2.0 * x);
                add_into(&mut adj[a.0], d);
            }
            &TOp::MulCol(a, c) => {
                if self.wants(a) {
                    add_into(&mut adj[a.0], g * self.value(c));
                }
                if self.wants(c) {
                    let d = (g * self.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_into(&mut adj[c.0], d);
                }
            }
            &TOp::RowSum(a) => {
                let shape = self.value(a).dim();
                let d = g.broadcast(shape).expect("broadcast").to_owned();
                add_into(&mut adj[a.0], d);
            }
            &TOp::RowNorm(a) => {
                let x = self.value(a);
                let norms = &node.value;
                let mut d = x.clone();
                for ((mut row, n), gi) in d.rows_mut().into_iter().zip(norms.iter()).zip(g.iter()) {
                    // subgradient 0 at the origin
                    let f = if *n > 0.0 { gi / n } else { 0.0 };
                    row.mapv_inplace(|v| v * f);
                }
                add_into(&mut adj[a.0], d);
            }
            &TOp::Mean(a) => {
                let shape = self.value(a).dim();
                let n = (shape.0 * shape.1) as f64;
                add_into(&mut adj[a.0], Array2::from_elem(shape, g[[0, 0]] / n));
            }
            &TOp::Columns(a, start, len) => {
                let mut d = Array2::zeros(self.value(a).dim());
                d.slice_mut(s![.., start..start + len]).assign(g);
                add_into(&mut adj[a.0], d);
            }
            TOp::FrozenGrad(a, grad) => add_into(&mut adj[a.0], grad * g[[0, 0]]),
        }
    }
}

fn layer_slot(p: &ParamStore, l: usize) -> (usize, usize, usize) {
    let spec = p.spec();
    let (fan_in, fan_out) = spec.layer_shape(l);
    (spec.layer_offset(l), fan_in, fan_out)
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: ArrayView2<'_, f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn add_into(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

/// Cached forward pass of a tanh network on the tape.
pub struct MlpTrace {
    pub net: NetId,
    pub input: TId,
    /// hidden activations, one per hidden layer
    pub hidden: Vec<TId>,
    /// `1 - a^2` for each hidden layer
    pub slopes: Vec<TId>,
    pub output: TId,
}

impl<'p> Tape<'p> {
    pub fn mlp(&mut self, net: NetId, x: TId) -> MlpTrace {
        let spec = *self.net(net).spec();
        assert_eq!(self.value(x).ncols(), spec.input_dim, "input width");
        let mut h = x;
        let mut hidden = Vec::with_capacity(spec.hidden_layers);
        let mut slopes = Vec::with_capacity(spec.hidden_layers);
        for l in 0..spec.hidden_layers {
            let z = self.affine(h, net, l);
            h = self.tanh(z);
            hidden.push(h);
            slopes.push(self.one_minus_square(h));
        }
        let output = self.affine(h, net, spec.hidden_layers);
        MlpTrace {
            net,
            input: x,
            hidden,
            slopes,
            output,
        }
    }

    /// Gradient of a scalar-output network w.r.t. its inputs, `B x input_dim`,
    /// built from tape operations so that it can itself be differentiated.
    pub fn mlp_input_grad(&mut self, trace: &MlpTrace) -> TId {
        let spec = *self.net(trace.net).spec();
        assert_eq!(spec.output_dim, 1, "input gradient needs a scalar output");
        let rows = self.value(trace.input).nrows();
        let ones = self.constant(Array2::ones((rows, 1)));
        let mut g = self.linear_t(ones, trace.net, spec.hidden_layers);
        for l in (0..spec.hidden_layers).rev() {
            let gz = self.mul(g, trace.slopes[l]);
            g = self.linear_t(gz, trace.net, l);
        }
        g
    }

    /// Sum of second derivatives of a scalar-output network along the input
    /// coordinates `dims` (the Laplacian restricted to those coordinates),
    /// `B x 1`, via second-order forward propagation.
    pub fn mlp_laplacian(&mut self, trace: &MlpTrace, dims: std::ops::Range<usize>) -> TId {
        let spec = *self.net(trace.net).spec();
        assert_eq!(spec.output_dim, 1, "laplacian needs a scalar output");
        let rows = self.value(trace.input).nrows();
        let curv: Vec<TId> = (0..spec.hidden_layers)
            .map(|l| {
                let m = self.mul(trace.hidden[l], trace.slopes[l]);
                self.scale(m, -2.0)
            })
            .collect();
        let mut total: Option<TId> = None;
        for k in dims {
            let out = if spec.hidden_layers == 0 {
                self.constant(Array2::zeros((rows, 1)))
            } else {
                let dz = self.weight_column(trace.net, 0, k, rows);
                let mut da = self.mul(trace.slopes[0], dz);
                let dz2 = self.square(dz);
                let mut dda = self.mul(curv[0], dz2);
                // `l` also selects the network layer.
                #[allow(clippy::needless_range_loop)]
                for l in 1..spec.hidden_layers {
                    let dz = self.linear(da, trace.net, l);
                    let ddz = self.linear(dda, trace.net, l);
                    da = self.mul(trace.slopes[l], dz);
                    let t1 = self.mul(trace.slopes[l], ddz);
                    let dz2 = self.square(dz);
                    let t2 = self.mul(curv[l], dz2);
                    dda = self.add(t1, t2);
                }
                self.linear(dda, trace.net, spec.hidden_layers)
            };
            total = Some(match total {
                Some(t) => self.add(t, out),
                None => out,
            });
        }
        total.unwrap_or_else(|| self.constant(Array2::zeros((rows, 1))))
    }
}
