//! Training objectives: sliced Wasserstein, WGAN with gradient penalty, L2
//! transport penalty, Hamilton-Jacobi residual, and the flow likelihood.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{BatchTrajectory, ContinuousPfg, GeneratorError, NeuralPotential, Potential};
use crate::graph::{Graph, GraphError, NodeId};
use crate::nn::ParamStore;
use crate::problems::LogDensity;
use crate::tape::Tape;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch sizes differ: {fake} fake vs {real} real")]
    BatchMismatch { fake: usize, real: usize },
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("at least one projection is required")]
    NoProjections,
    #[error("residual point set is empty")]
    EmptyPoints,
    #[error("negative log-likelihood is not finite (sample {sample})")]
    NonFiniteLikelihood { sample: usize },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `lambda` weighs the HJ residual, `alpha` the transport penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

fn check_pair(fake: ArrayView2<'_, f64>, real: ArrayView2<'_, f64>) -> Result<(), LossError> {
    if fake.nrows() == 0 || real.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if fake.nrows() != real.nrows() {
        return Err(LossError::BatchMismatch {
            fake: fake.nrows(),
            real: real.nrows(),
        });
    }
    if fake.ncols() != real.ncols() {
        return Err(LossError::Dimension {
            expected: real.ncols(),
            got: fake.ncols(),
        });
    }
    Ok(())
}

/// `count` directions drawn uniformly on the unit sphere in `R^d`, one per row.
pub fn random_directions<R: Rng>(d: usize, count: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((count, d));
    for mut row in out.rows_mut() {
        loop {
            row.iter_mut().for_each(|v: &mut f64| *v = rng.sample(StandardNormal));
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }
    out
}

/// Sliced Wasserstein value and its gradient with respect to the fake batch.
#[derive(Clone, Debug)]
pub struct SlicedWasserstein {
    pub value: f64,
    pub grad_fake: Array2<f64>,
}

/// Stable ascending argsort.
fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

/// Mean over `directions` (rows, unit length) of the squared 1D Wasserstein
/// distance between the projected batches. The gradient treats the sorting
/// permutation as fixed.
pub fn sliced_wasserstein_with(
    fake: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
    directions: ArrayView2<'_, f64>,
) -> Result<SlicedWasserstein, LossError> {
    check_pair(fake, real)?;
    if directions.nrows() == 0 {
        return Err(LossError::NoProjections);
    }
    if directions.ncols() != fake.ncols() {
        return Err(LossError::Dimension {
            expected: fake.ncols(),
            got: directions.ncols(),
        });
    }
    let b = fake.nrows();
    let p = directions.nrows();
    let pf = fake.dot(&directions.t());
    let pr = real.dot(&directions.t());
    let mut value = 0.0;
    // adjoint of the projected fake values
    let mut adj = Array2::zeros((b, p));
    let mut col_f = vec![0.0; b];
    let mut col_r = vec![0.0; b];
    for j in 0..p {
        col_f.iter_mut().zip(pf.column(j)).for_each(|(c, v)| *c = *v);
        col_r.iter_mut().zip(pr.column(j)).for_each(|(c, v)| *c = *v);
        let of = argsort(&col_f);
        col_r.sort_by(f64::total_cmp);
        let mut acc = 0.0;
        for (rank, &i) in of.iter().enumerate() {
            let diff = col_f[i] - col_r[rank];
            acc += diff * diff;
            adj[[i, j]] = 2.0 * diff / (b * p) as f64;
        }
        value += acc / b as f64;
    }
    Ok(SlicedWasserstein {
        value: value / p as f64,
        grad_fake: adj.dot(&directions),
    })
}

/// Sliced Wasserstein distance with `num_projections` directions drawn from `seed`.
pub fn sliced_wasserstein(
    fake: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
    num_projections: usize,
    seed: u64,
) -> Result<SlicedWasserstein, LossError> {
    if num_projections == 0 {
        return Err(LossError::NoProjections);
    }
    let dirs = random_directions(fake.ncols(), num_projections, &mut ChaCha8Rng::seed_from_u64(seed));
    sliced_wasserstein_with(fake, real, dirs.view())
}

/// Sliced Wasserstein distance as a graph node in the fake coordinates
/// `fake[b][k]`, with the sorting permutation fixed at the values
/// `fake_values`.
pub fn sliced_wasserstein_graph(
    g: &mut Graph,
    fake: &[Vec<NodeId>],
    fake_values: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
    directions: ArrayView2<'_, f64>,
) -> Result<NodeId, LossError> {
    check_pair(fake_values, real)?;
    if fake.len() != fake_values.nrows() {
        return Err(LossError::BatchMismatch {
            fake: fake.len(),
            real: fake_values.nrows(),
        });
    }
    if directions.nrows() == 0 {
        return Err(LossError::NoProjections);
    }
    let b = fake.len();
    let p = directions.nrows();
    let pf = fake_values.dot(&directions.t());
    let pr = real.dot(&directions.t());
    let mut terms = Vec::with_capacity(b * p);
    for j in 0..p {
        let of = argsort(&pf.column(j).to_vec());
        let mut sr = pr.column(j).to_vec();
        sr.sort_by(f64::total_cmp);
        let w: Vec<f64> = directions.row(j).to_vec();
        for (rank, &i) in of.iter().enumerate() {
            let proj: Vec<NodeId> = fake[i].iter().zip(&w).map(|(&x, &c)| g.scale(x, c)).collect();
            let proj = g.sum(&proj);
            let target = g.constant(-sr[rank]);
            let diff = g.add(proj, target);
            terms.push(g.square(diff));
        }
    }
    let total = g.sum(&terms);
    Ok(g.scale(total, 1.0 / (b * p) as f64))
}

/// Critic network with its gradient-penalty weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: ParamStore,
    pub gp_weight: f64,
}

pub const DEFAULT_GP_WEIGHT: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct WganGp {
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub penalty: f64,
    /// gradient of `disc_loss` with respect to the critic parameters
    pub disc_grad: Vec<f64>,
    /// gradient of `gen_loss` with respect to the fake batch
    pub fake_grad: Array2<f64>,
}

/// `gen = -mean D(fake)`,
/// `disc = mean D(fake) - mean D(real) + w * mean (|grad D(x_hat)| - 1)^2`
/// over interpolates `x_hat = e real + (1 - e) fake`, `e ~ U(0, 1)`, whose
/// coordinates are detached.
pub fn wgan_gp_losses<R: Rng>(
    d: &Discriminator,
    fake: ArrayView2<'_, f64>,
    real: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Result<WganGp, LossError> {
    check_pair(fake, real)?;
    let dim = d.params.spec().input_dim;
    if fake.ncols() != dim {
        return Err(LossError::Dimension {
            expected: dim,
            got: fake.ncols(),
        });
    }
    let mut interp = fake.to_owned();
    for (mut row, r) in interp.rows_mut().into_iter().zip(real.rows()) {
        let e: f64 = rng.random();
        row.zip_mut_with(&r, |f, &r| *f = e * r + (1.0 - e) * *f);
    }
    let mut tape = Tape::new();
    let net = tape.add_net(&d.params, true);
    let xf = tape.leaf(fake.to_owned(), true);
    let xr = tape.constant(real.to_owned());
    let xi = tape.constant(interp);
    let df = tape.mlp(net, xf).output;
    let dr = tape.mlp(net, xr).output;
    let ti = tape.mlp(net, xi);
    let gi = tape.mlp_input_grad(&ti);
    let norm = tape.row_norm(gi);
    let dev = tape.add_const(norm, -1.0);
    let sq = tape.square(dev);
    let gp = tape.mean(sq);
    let gp_w = tape.scale(gp, d.gp_weight);
    let mf = tape.mean(df);
    let mr = tape.mean(dr);
    let gap = tape.sub(mf, mr);
    let disc = tape.add(gap, gp_w);
    let gen = tape.scale(mf, -1.0);
    let mut dg = tape.backward(&[(disc, Array2::ones((1, 1)))]);
    let disc_grad = dg.take_params(net);
    let gg = tape.backward(&[(gen, Array2::ones((1, 1)))]);
    Ok(WganGp {
        gen_loss: tape.scalar(gen),
        disc_loss: tape.scalar(disc),
        penalty: tape.scalar(gp),
        disc_grad,
        fake_grad: gg.node(xf).cloned().unwrap_or_else(|| Array2::zeros(fake.raw_dim())),
    })
}

/// Generator side only: `-mean D(fake)` and its gradient w.r.t. `fake`.
pub fn wgan_generator_loss(d: &Discriminator, fake: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>), LossError> {
    if fake.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let net = tape.add_net(&d.params, false);
    let xf = tape.leaf(fake.to_owned(), true);
    let df = tape.mlp(net, xf).output;
    let mf = tape.mean(df);
    let gen = tape.scale(mf, -1.0);
    let g = tape.backward(&[(gen, Array2::ones((1, 1)))]);
    Ok((tape.scalar(gen), g.node(xf).cloned().expect("fake reaches the loss")))
}

/// `mean |y - x|^2` and its gradient w.r.t. the outputs.
pub fn transport_penalty(
    inputs: ArrayView2<'_, f64>,
    outputs: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>), LossError> {
    if inputs.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if inputs.dim() != outputs.dim() {
        return Err(LossError::BatchMismatch {
            fake: outputs.nrows(),
            real: inputs.nrows(),
        });
    }
    let diff = &outputs - &inputs;
    let n = inputs.nrows() as f64;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Space-time points `(t, x)`, one per row, at which the HJ residual is
/// penalized. They are data: no gradient flows into their coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPointSet {
    points: Array2<f64>,
}

impl ResidualPointSet {
    pub fn new(points: Array2<f64>) -> Result<Self, LossError> {
        if points.nrows() == 0 {
            return Err(LossError::EmptyPoints);
        }
        if points.ncols() < 2 {
            return Err(LossError::Dimension {
                expected: 2,
                got: points.ncols(),
            });
        }
        Ok(Self { points })
    }

    /// Every recorded point of every trajectory: `(n + 1) * batch` rows.
    pub fn from_trajectory(traj: &BatchTrajectory) -> Result<Self, LossError> {
        let b = traj.batch_size();
        let d = traj.positions.first().map_or(0, |p| p.ncols());
        let mut points = Array2::zeros((traj.len() * b, d + 1));
        for (i, (t, pos)) in traj.times.iter().zip(&traj.positions).enumerate() {
            let mut block = points.slice_mut(s![i * b..(i + 1) * b, ..]);
            block.column_mut(0).fill(*t);
            block.slice_mut(s![.., 1..]).assign(pos);
        }
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols() - 1
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    fn chunks(&self) -> impl Iterator<Item = ArrayView2<'_, f64>> {
        self.points.axis_chunks_iter(Axis(0), RESIDUAL_CHUNK)
    }
}

const RESIDUAL_CHUNK: usize = 2048;

/// Pointwise residual `d phi/dt + |grad_x phi|^2 / 2`.
pub fn hj_pointwise(potential: &dyn Potential, tx: ArrayView2<'_, f64>) -> Array1<f64> {
    let (dt, g) = potential.derivatives(tx);
    let speed = g.map_axis(Axis(1), |r| r.dot(&r));
    dt + speed * 0.5
}

/// Mean squared HJ residual over the points.
pub fn hj_residual(potential: &dyn Potential, pts: &ResidualPointSet) -> Result<f64, LossError> {
    if pts.dim() != potential.dim() {
        return Err(LossError::Dimension {
            expected: potential.dim(),
            got: pts.dim(),
        });
    }
    let mut total = 0.0;
    for chunk in pts.chunks() {
        total += hj_pointwise(potential, chunk).iter().map(|r| r * r).sum::<f64>();
    }
    Ok(total / pts.len() as f64)
}

/// Mean squared HJ residual of a network potential. Adds `weight` times its
/// parameter gradient to `theta_grad` and returns the residual.
pub fn hj_residual_grad(
    potential: &NeuralPotential,
    pts: &ResidualPointSet,
    weight: f64,
    theta_grad: &mut [f64],
) -> Result<f64, LossError> {
    let d = potential.dim();
    if pts.dim() != d {
        return Err(LossError::Dimension {
            expected: d,
            got: pts.dim(),
        });
    }
    let n = pts.len() as f64;
    let mut total = 0.0;
    for chunk in pts.chunks() {
        let rows = chunk.nrows() as f64;
        let mut tape = Tape::new();
        let net = tape.add_net(&potential.params, true);
        let tr = NeuralPotential::trace(&mut tape, net, chunk.to_owned(), false);
        let dt = tape.columns(tr.grad, 0, 1);
        let v = tape.columns(tr.grad, 1, d);
        let v2 = tape.square(v);
        let speed = tape.row_sum(v2);
        let half = tape.scale(speed, 0.5);
        let r = tape.add(dt, half);
        let r2 = tape.square(r);
        let m = tape.mean(r2);
        let share = rows / n;
        total += tape.scalar(m) * share;
        if weight != 0.0 {
            let g = tape.backward(&[(m, Array2::from_elem((1, 1), weight * share))]);
            for (acc, gi) in theta_grad.iter_mut().zip(g.params(net)) {
                *acc += gi;
            }
        }
    }
    Ok(total)
}

/// HJ residual on the graph. `phi` is written in the variables `t` and `xs`
/// (and possibly others, such as parameters); each point gives node ids for
/// `(t, x_1, ..., x_d)`. Point coordinates enter through stop-gradient, so
/// the result differentiates only through the remaining variables.
pub fn hj_residual_graph(
    g: &mut Graph,
    phi: NodeId,
    t: NodeId,
    xs: &[NodeId],
    points: &[Vec<NodeId>],
) -> Result<NodeId, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptyPoints);
    }
    let mut wrt = vec![t];
    wrt.extend(xs);
    let d = g.grad(phi, &wrt)?;
    let speed = g.dot(&d[1..], &d[1..]);
    let half = g.scale(speed, 0.5);
    let r = g.add(d[0], half);
    let mut terms = Vec::with_capacity(points.len());
    for p in points {
        if p.len() != wrt.len() {
            return Err(LossError::Dimension {
                expected: wrt.len(),
                got: p.len(),
            });
        }
        let pairs: Vec<(NodeId, NodeId)> = wrt.iter().zip(p).map(|(&v, &c)| (v, g.stop_gradient(c))).collect();
        let at = g.substitute(&[r], &pairs)?[0];
        terms.push(g.square(at));
    }
    let total = g.sum(&terms);
    Ok(g.scale(total, 1.0 / points.len() as f64))
}

/// Components of the flow-based objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnfLoss {
    pub nll: f64,
    pub residual: f64,
    pub total: f64,
}

struct CnfForward {
    path: BatchTrajectory,
    traj: BatchTrajectory,
    log_p: Array1<f64>,
}

fn cnf_forward<P: Potential>(
    gen: &ContinuousPfg<P>,
    real: ArrayView2<'_, f64>,
    log_mu: &dyn LogDensity,
) -> Result<CnfForward, LossError> {
    if real.nrows() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let path = gen.inverse_path(real)?;
    let x = path.last().clone();
    let lm = log_mu.log_density(x.view());
    let traj = gen.forward(x.view())?;
    let lp = gen.log_density_along(&traj, lm.view())?;
    if let Some(sample) = lp.iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteLikelihood { sample });
    }
    Ok(CnfForward { path, traj, log_p: lp })
}

/// `-mean log p_{G#mu}(y) + lambda * residual`. Each `y` is pulled back by
/// the inverse flow, then carried forward with its log-density. Residual
/// points are the forward trajectories.
pub fn cnf_nll<P: Potential>(
    gen: &ContinuousPfg<P>,
    real: ArrayView2<'_, f64>,
    log_mu: &dyn LogDensity,
    lambda: f64,
) -> Result<CnfLoss, LossError> {
    let f = cnf_forward(gen, real, log_mu)?;
    let nll = -f.log_p.mean().expect("nonempty");
    let residual = if lambda != 0.0 {
        hj_residual(&gen.potential, &ResidualPointSet::from_trajectory(&f.traj)?)?
    } else {
        0.0
    };
    Ok(CnfLoss {
        nll,
        residual,
        total: nll + lambda * residual,
    })
}

/// [`cnf_nll`] together with its exact parameter gradient. The residual is
/// always evaluated so that it can be logged.
pub fn cnf_nll_grad(
    gen: &ContinuousPfg<NeuralPotential>,
    real: ArrayView2<'_, f64>,
    log_mu: &dyn LogDensity,
    lambda: f64,
) -> Result<(CnfLoss, Vec<f64>), LossError> {
    let f = cnf_forward(gen, real, log_mu)?;
    let b = real.nrows();
    let mut grad = vec![0.0; gen.potential.params.len()];
    let w = Array1::from_elem(b, 1.0 / b as f64);
    let zeros = Array2::zeros(real.raw_dim());
    let mut a0 = gen.pullback_forward(&f.traj, zeros.view(), Some(w.view()), &mut grad);
    let x0 = f.path.last();
    a0.scaled_add(-1.0 / b as f64, &log_mu.grad_log_density(x0.view()));
    gen.pullback_inverse(&f.path, a0.view(), &mut grad);
    let pts = ResidualPointSet::from_trajectory(&f.traj)?;
    let residual = hj_residual_grad(&gen.potential, &pts, lambda, &mut grad)?;
    let nll = -f.log_p.mean().expect("nonempty");
    Ok((
        CnfLoss {
            nll,
            residual,
            total: nll + lambda * residual,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GraphPotential, TimeGrid};
    use crate::nn::MlpSpec;
    use crate::problems::Density;
    use ndarray::array;
    use std::collections::HashMap;

    #[test]
    fn sw_identical_batches_is_zero() {
        let a = array![[0.1, 2.0], [1.0, -1.0], [0.5, 0.5]];
        let sw = sliced_wasserstein(a.view(), a.view(), 50, 1).unwrap();
        assert_eq!(sw.value, 0.0);
        assert!(sw.grad_fake.iter().all(|v| *v == 0.0));
        let mut shuffled = a.clone();
        shuffled.swap([0, 0], [2, 0]);
        shuffled.swap([0, 1], [2, 1]);
        assert_eq!(sliced_wasserstein(shuffled.view(), a.view(), 50, 1).unwrap().value, 0.0);
    }

    #[test]
    fn sw_one_dimensional_shift() {
        let real = array![[0.0], [1.0], [3.0]];
        let fake = &real + 0.7;
        let sw = sliced_wasserstein(fake.view(), real.view(), 9, 4).unwrap();
        assert!((sw.value - 0.49).abs() < 1e-14);
    }

    #[test]
    fn sw_errors() {
        let a = array![[0.0, 1.0]];
        let e = Array2::<f64>::zeros((0, 2));
        assert_eq!(
            sliced_wasserstein(e.view(), e.view(), 3, 0).unwrap_err(),
            LossError::EmptyBatch
        );
        assert_eq!(
            sliced_wasserstein(a.view(), a.view(), 0, 0).unwrap_err(),
            LossError::NoProjections
        );
        let two = array![[0.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            sliced_wasserstein(a.view(), two.view(), 3, 0),
            Err(LossError::BatchMismatch { .. })
        ));
    }

    #[test]
    fn sw_graph_form_matches_batched_form() {
        let fake = array![[0.3, -0.2], [1.1, 0.4], [-0.6, 0.9]];
        let real = array![[0.0, 0.1], [0.8, -0.5], [-1.0, 0.2]];
        let dirs = random_directions(2, 7, &mut ChaCha8Rng::seed_from_u64(2));
        let sw = sliced_wasserstein_with(fake.view(), real.view(), dirs.view()).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Vec<NodeId>> = (0..3).map(|_| vec![g.var(), g.var()]).collect();
        let out = sliced_wasserstein_graph(&mut g, &vars, fake.view(), real.view(), dirs.view()).unwrap();
        let flat: Vec<NodeId> = vars.iter().flatten().copied().collect();
        let grads = g.grad(out, &flat).unwrap();
        let bind: HashMap<NodeId, f64> = flat.iter().copied().zip(fake.iter().copied()).collect();
        assert!((g.evaluate(out, &bind).unwrap() - sw.value).abs() < 1e-14);
        let gv = g.evaluate_many(&grads, &bind).unwrap();
        for (a, b) in gv.iter().zip(sw.grad_fake.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn linear_disc(w: &[f64], gp: f64) -> Discriminator {
        let spec = MlpSpec::new(w.len(), 0, 1, 1);
        let mut theta = w.to_vec();
        theta.push(0.0);
        Discriminator {
            params: ParamStore::from_vec(spec, theta).unwrap(),
            gp_weight: gp,
        }
    }

    #[test]
    fn wgan_zero_critic() {
        let d = Discriminator {
            params: ParamStore::zeros(MlpSpec::new(2, 2, 4, 1)).unwrap(),
            gp_weight: 10.0,
        };
        let fake = array![[0.0, 1.0], [2.0, 0.0]];
        let real = array![[1.0, 1.0], [0.0, -1.0]];
        let l = wgan_gp_losses(&d, fake.view(), real.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.gen_loss, 0.0);
        assert_eq!(l.disc_loss, 10.0);
    }

    #[test]
    fn wgan_unit_linear_critic() {
        let w = [0.6, 0.8];
        let d = linear_disc(&w, 10.0);
        let fake = array![[0.0, 1.0], [2.0, 0.0]];
        let real = array![[1.0, 1.0], [0.0, -1.0]];
        let l = wgan_gp_losses(&d, fake.view(), real.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(l.penalty.abs() < 1e-28);
        let (mf, mr) = (fake.mean_axis(Axis(0)).unwrap(), real.mean_axis(Axis(0)).unwrap());
        let want = w[0] * (mf[0] - mr[0]) + w[1] * (mf[1] - mr[1]);
        assert!((l.disc_loss - want).abs() < 1e-14);
        assert!((l.fake_grad[[0, 0]] + 0.3).abs() < 1e-15);
        let (gl, gg) = wgan_generator_loss(&d, fake.view()).unwrap();
        assert_eq!(gl, l.gen_loss);
        assert_eq!(gg, l.fake_grad);
    }

    #[test]
    fn wgan_disc_grad_matches_finite_differences() {
        let d = Discriminator {
            params: ParamStore::init(MlpSpec::new(2, 2, 5, 1), 3).unwrap(),
            gp_weight: 10.0,
        };
        let fake = array![[0.0, 1.0], [2.0, 0.5], [-0.4, 0.3]];
        let real = array![[1.0, 1.0], [0.0, -1.0], [0.7, 0.2]];
        let run =
            |d: &Discriminator| wgan_gp_losses(d, fake.view(), real.view(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let l = run(&d);
        let h = 1e-6;
        for k in 0..d.params.len() {
            let mut a = d.clone();
            a.params.as_mut_slice()[k] += h;
            let mut b = d.clone();
            b.params.as_mut_slice()[k] -= h;
            let fd = (run(&a).disc_loss - run(&b).disc_loss) / (2.0 * h);
            assert!((l.disc_grad[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k}");
        }
    }

    #[test]
    fn transport_penalty_examples() {
        let x = array![[0.0, 0.0], [0.0, 1.0]];
        assert_eq!(transport_penalty(x.view(), x.view()).unwrap().0, 0.0);
        let shifted = &x + &array![[1.0, 0.0]];
        assert_eq!(transport_penalty(x.view(), shifted.view()).unwrap().0, 1.0);
        let y = array![[2.0, 0.0], [0.0, 0.5]];
        assert_eq!(transport_penalty(x.view(), y.view()).unwrap().0, 2.125);
    }

    #[test]
    fn hj_residual_examples() {
        let pts = ResidualPointSet::new(array![[0.0, 1.0, 2.0], [0.5, -1.0, 0.3]]).unwrap();
        assert_eq!(hj_residual(&GraphPotential::zero(2), &pts).unwrap(), 0.0);
        assert_eq!(hj_residual(&GraphPotential::linear(&[1.0, 0.0]), &pts).unwrap(), 0.25);
        assert!(hj_residual(&GraphPotential::hj_gaussian(), &pts).unwrap() < 1e-28);
        assert!(hj_residual(&GraphPotential::hj_quadratic(&[0.3, -1.0], 0.5), &pts).unwrap() < 1e-28);
        assert_eq!(
            ResidualPointSet::new(Array2::zeros((0, 3))).unwrap_err(),
            LossError::EmptyPoints
        );
    }

    #[test]
    fn residual_points_from_trajectory() {
        let g = ContinuousPfg::new(GraphPotential::linear(&[1.0]), TimeGrid::new(2, 1.0).unwrap());
        let traj = g.forward(array![[0.0], [1.0]].view()).unwrap();
        let pts = ResidualPointSet::from_trajectory(&traj).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts.points().row(3).to_vec(), vec![0.5, 1.5]);
    }

    #[test]
    fn hj_tape_and_graph_agree_and_coordinates_are_detached() {
        let params = ParamStore::init(MlpSpec::new(3, 1, 4, 1), 13).unwrap();
        let pts_v = array![[0.1, 0.5, -0.2], [0.7, -1.0, 0.4]];
        let np = NeuralPotential::new(params.clone()).unwrap();
        let mut tg = vec![0.0; params.len()];
        let r = hj_residual_grad(&np, &ResidualPointSet::new(pts_v.clone()).unwrap(), 1.0, &mut tg).unwrap();

        let mut g = Graph::new();
        let theta = params.register(&mut g);
        let t = g.var();
        let xs = vec![g.var(), g.var()];
        let phi = params.forward_graph(&mut g, &theta, &[t, xs[0], xs[1]]).unwrap()[0];
        let coords: Vec<Vec<NodeId>> = (0..2).map(|_| vec![g.var(), g.var(), g.var()]).collect();
        let out = hj_residual_graph(&mut g, phi, t, &xs, &coords).unwrap();
        let flat: Vec<NodeId> = coords.iter().flatten().copied().collect();
        let mut wrt = theta.clone();
        wrt.extend(&flat);
        let grads = g.grad(out, &wrt).unwrap();
        let mut bind: HashMap<NodeId, f64> = theta.iter().copied().zip(params.as_slice().iter().copied()).collect();
        bind.extend(flat.iter().copied().zip(pts_v.iter().copied()));
        bind.insert(t, 0.0);
        bind.insert(xs[0], 0.0);
        bind.insert(xs[1], 0.0);
        assert!((g.evaluate(out, &bind).unwrap() - r).abs() < 1e-14);
        let gv = g.evaluate_many(&grads, &bind).unwrap();
        for (a, b) in gv[..theta.len()].iter().zip(&tg) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gv[theta.len()..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cnf_zero_potential_is_gaussian_entropy() {
        let gen = ContinuousPfg::new(GraphPotential::zero(2), TimeGrid::new(10, 1.0).unwrap());
        let dens = Density::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        let y = crate::problems::Sampler::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        }
        .sample_seeded(20000, 5);
        let l = cnf_nll(&gen, y.view(), &dens, 0.0).unwrap();
        let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
        assert!((l.nll - entropy).abs() < 0.03, "{}", l.nll);
    }

    #[test]
    fn cnf_grad_matches_finite_differences() {
        let params = ParamStore::init(MlpSpec::new(3, 1, 4, 1), 17).unwrap();
        let gen = ContinuousPfg::new(NeuralPotential::new(params).unwrap(), TimeGrid::new(4, 1.0).unwrap());
        let dens = Density::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![0.5, 1.0],
        };
        let y = array![[0.3, -0.4], [1.0, 0.2], [-0.5, 0.5]];
        // residual points follow the trajectories, so finite differences see
        // their motion; the detached gradient is compared at frozen points
        let lambda = 0.7;
        let (l, grad_l) = cnf_nll_grad(&gen, y.view(), &dens, lambda).unwrap();
        assert!((l.total - cnf_nll(&gen, y.view(), &dens, lambda).unwrap().total).abs() < 1e-14);
        let (_, grad) = cnf_nll_grad(&gen, y.view(), &dens, 0.0).unwrap();
        let x = gen.inverse(y.view()).unwrap();
        let pts = ResidualPointSet::from_trajectory(&gen.forward(x.view()).unwrap()).unwrap();
        let mut rg = vec![0.0; grad.len()];
        hj_residual_grad(&gen.potential, &pts, lambda, &mut rg).unwrap();
        for k in 0..grad.len() {
            assert!((grad_l[k] - grad[k] - rg[k]).abs() < 1e-12);
        }
        let lambda = 0.0;
        let h = 1e-6;
        for (k, &gk) in grad.iter().enumerate() {
            let mut a = gen.clone();
            a.potential.params.as_mut_slice()[k] += h;
            let mut b = gen.clone();
            b.potential.params.as_mut_slice()[k] -= h;
            let fd = (cnf_nll(&a, y.view(), &dens, lambda).unwrap().total
                - cnf_nll(&b, y.view(), &dens, lambda).unwrap().total)
                / (2.0 * h);
            assert!((gk - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {gk} vs {fd}");
        }
    }
}
