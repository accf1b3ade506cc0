//! Training loops binding generators, losses and problems, with periodic
//! evaluation, CSV logging and checkpointing.

use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{
    BatchTrajectory, ContinuousPfg, DiscretePfg, DiscreteProgram, GeneratorError, NeuralPotential, TimeGrid,
    VanillaGenerator,
};
use crate::losses::{
    cnf_nll, cnf_nll_grad, hj_residual, hj_residual_grad, random_directions, sliced_wasserstein,
    sliced_wasserstein_with, transport_penalty, wgan_generator_loss, wgan_gp_losses, Discriminator, LossError,
    ResidualPointSet,
};
use crate::nn::checkpoint::{CheckpointError, Container};
use crate::nn::{AdamConfig, AdamState, MlpSpec, NnError, ParamStore};
use crate::problems::{mean_distance, problem_by_name, ProblemError, ProblemSpec};

/// Projections used by the evaluation sliced Wasserstein distance.
pub const EVAL_PROJECTIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Vanilla,
    DiscretePfg,
    ContinuousPfg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Swg,
    WganGp,
    Cnf,
}

/// Complete description of a training run. Fields missing from a JSON
/// document take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub generator: GeneratorKind,
    pub loss: LossKind,
    /// HJ residual weight (continuous-pfg only).
    pub lambda: f64,
    /// Transport penalty weight (vanilla only).
    pub alpha: f64,
    /// Time steps of the flow.
    pub n: usize,
    pub dt: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation; the initial and final ones always run.
    pub eval_every: usize,
    pub num_projections: usize,
    /// Samples drawn once from each distribution; batches are drawn from these.
    pub pool_size: usize,
    pub eval_samples: usize,
    pub gp_weight: f64,
    /// Start flow potentials with a zero output layer, so the initial
    /// generator is the identity. Ignored by the vanilla generator.
    pub zero_output_init: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "gaussian".into(),
            generator: GeneratorKind::ContinuousPfg,
            loss: LossKind::Swg,
            lambda: 1.0,
            alpha: 0.0,
            n: 100,
            dt: 0.01,
            hidden_layers: 3,
            hidden_width: 64,
            adam: AdamConfig::default(),
            batch_size: 1000,
            steps: 20_000,
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 1000,
            num_projections: 1000,
            pool_size: 40_000,
            eval_samples: 10_000,
            gp_weight: crate::losses::DEFAULT_GP_WEIGHT,
            zero_output_init: false,
        }
    }
}

impl RunConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.loss == LossKind::Cnf && self.generator != GeneratorKind::ContinuousPfg {
            return fail("the cnf loss requires the continuous-pfg generator");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) || !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail("lambda and alpha must be finite and non-negative");
        }
        if self.lambda != 0.0 && self.generator != GeneratorKind::ContinuousPfg {
            return fail("lambda applies only to the continuous-pfg generator; set it to 0");
        }
        if self.alpha != 0.0 && self.generator != GeneratorKind::Vanilla {
            return fail("alpha applies only to the vanilla generator; set it to 0");
        }
        if self.n == 0 || !(self.dt.is_finite() && self.dt > 0.0) {
            return fail("n must be positive and dt a positive number");
        }
        if self.hidden_width == 0 {
            return fail("hidden_width must be positive");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite())
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
        {
            return fail("adam needs lr > 0, betas in [0, 1) and eps > 0");
        }
        if self.batch_size == 0 || self.pool_size == 0 {
            return fail("batch_size and pool_size must be positive");
        }
        if self.eval_samples < 2 {
            return fail("eval_samples must be at least 2");
        }
        if self.loss == LossKind::Swg && self.num_projections == 0 {
            return fail("num_projections must be positive");
        }
        if !(self.gp_weight.is_finite() && self.gp_weight >= 0.0) {
            return fail("gp_weight must be finite and non-negative");
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid { n: self.n, dt: self.dt }
    }

    /// Network and step budget of the published runs: 5 hidden layers of
    /// width 128 and 100k steps.
    pub fn paper_scale(mut self) -> Self {
        self.hidden_layers = 5;
        self.hidden_width = 128;
        self.steps = 100_000;
        self
    }
}

/// Loss components of one training step; absent entries were not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Sliced Wasserstein value or WGAN generator loss.
    pub gan: Option<f64>,
    pub nll: Option<f64>,
    pub hj_residual: Option<f64>,
    pub transport_penalty: Option<f64>,
    pub disc_loss: Option<f64>,
}

/// Statistics of a generator on fresh samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub map_error: Option<f64>,
    pub sw_distance: f64,
    pub std_x: f64,
    pub std_y: Option<f64>,
    pub mean_norm: f64,
    pub hj_residual: Option<f64>,
    pub nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub losses: StepLosses,
    pub metrics: Option<EvalMetrics>,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str = "step,gan,nll,hj_residual,transport_penalty,disc_loss,map_error,sw_distance,std_x,std_y,mean_norm,eval_hj_residual,eval_nll,wall_time";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let m = self.metrics.as_ref();
        [
            self.step.to_string(),
            cell(l.gan),
            cell(l.nll),
            cell(l.hj_residual),
            cell(l.transport_penalty),
            cell(l.disc_loss),
            cell(m.and_then(|m| m.map_error)),
            cell(m.map(|m| m.sw_distance)),
            cell(m.map(|m| m.std_x)),
            cell(m.and_then(|m| m.std_y)),
            cell(m.map(|m| m.mean_norm)),
            cell(m.and_then(|m| m.hj_residual)),
            cell(m.and_then(|m| m.nll)),
            format!("{:.3}", self.wall_time),
        ]
        .join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub step: usize,
    /// Loss component or stage that produced the non-finite value.
    pub component: String,
    pub detail: String,
}

/// Final metrics of a run, with the fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub problem: String,
    /// The problem is a stand-in pair rather than a published benchmark.
    pub substitute: bool,
    pub steps_completed: usize,
    pub seed: u64,
    pub eval_samples: usize,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub final_losses: Option<StepLosses>,
    /// Excluded from the JSON so that reports are reproducible bit for bit.
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("diverged at step {} in {}: {}", .0.step, .0.component, .0.detail)]
    Diverged(DivergenceRecord),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    fn diverged(component: &str, detail: impl Display) -> Self {
        TrainError::Diverged(DivergenceRecord {
            step: 0,
            component: component.into(),
            detail: detail.to_string(),
        })
    }

    /// Turns non-finite failures of the lower layers into divergence
    /// records stamped with `step`.
    fn at_step(self, step: usize) -> Self {
        let mut out = match self {
            TrainError::Generator(e @ GeneratorError::Divergence { .. })
            | TrainError::Loss(LossError::Generator(e @ GeneratorError::Divergence { .. })) => {
                Self::diverged("generator", e)
            }
            TrainError::Loss(e @ LossError::NonFiniteLikelihood { .. }) => Self::diverged("nll", e),
            TrainError::Nn(e @ NnError::NonFiniteGradient { .. }) => Self::diverged("gradient", e),
            other => other,
        };
        if let TrainError::Diverged(r) = &mut out {
            r.step = step;
        }
        out
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Independent seed for one consumer of randomness in a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT_GEN: u64 = 1;
const STREAM_INIT_DISC: u64 = 2;
const STREAM_POOL_MU: u64 = 3;
const STREAM_POOL_NU: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_EVAL: u64 = 6;
const STREAM_EVAL_MU: u64 = 7;
const STREAM_EVAL_NU: u64 = 8;
const STREAM_EVAL_DIRS: u64 = 9;

/// A trainable generator of any kind.
#[derive(Clone, Debug)]
pub enum Model {
    Vanilla(VanillaGenerator),
    Discrete(DiscretePfg),
    Continuous(ContinuousPfg),
}

impl Model {
    pub fn spec_for(kind: GeneratorKind, dim: usize, hidden_layers: usize, hidden_width: usize) -> MlpSpec {
        match kind {
            GeneratorKind::Vanilla => MlpSpec::new(dim, hidden_layers, hidden_width, dim),
            GeneratorKind::DiscretePfg => MlpSpec::new(dim, hidden_layers, hidden_width, 1),
            GeneratorKind::ContinuousPfg => MlpSpec::new(dim + 1, hidden_layers, hidden_width, 1),
        }
    }

    pub fn from_params(kind: GeneratorKind, params: ParamStore, grid: TimeGrid) -> Result<Self, TrainError> {
        Ok(match kind {
            GeneratorKind::Vanilla => Model::Vanilla(VanillaGenerator::new(params)?),
            GeneratorKind::DiscretePfg => Model::Discrete(DiscretePfg::new(params, grid)?),
            GeneratorKind::ContinuousPfg => Model::Continuous(ContinuousPfg::new(NeuralPotential::new(params)?, grid)),
        })
    }

    /// Freshly initialized generator for `cfg` on a `dim`-dimensional problem.
    pub fn init(cfg: &RunConfig, dim: usize) -> Result<Self, TrainError> {
        let spec = Self::spec_for(cfg.generator, dim, cfg.hidden_layers, cfg.hidden_width);
        let mut params = ParamStore::init(spec, sub_seed(cfg.seed, STREAM_INIT_GEN))?;
        if cfg.zero_output_init && cfg.generator != GeneratorKind::Vanilla {
            let last = spec.num_layers() - 1;
            let (rows, cols) = spec.layer_shape(last);
            let off = spec.layer_offset(last);
            params.as_mut_slice()[off..off + rows * cols]
                .iter_mut()
                .for_each(|w| *w = 0.0);
        }
        Self::from_params(cfg.generator, params, cfg.grid())
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Model::Vanilla(_) => GeneratorKind::Vanilla,
            Model::Discrete(_) => GeneratorKind::DiscretePfg,
            Model::Continuous(_) => GeneratorKind::ContinuousPfg,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Vanilla(g) => g.dim(),
            Model::Discrete(g) => g.dim(),
            Model::Continuous(g) => g.dim(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Vanilla(g) => &g.params,
            Model::Discrete(g) => &g.params,
            Model::Continuous(g) => &g.potential.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Vanilla(g) => &mut g.params,
            Model::Discrete(g) => &mut g.params,
            Model::Continuous(g) => &mut g.potential.params,
        }
    }

    /// Outputs and, for flows, the trajectory. A prebuilt discrete program
    /// may be supplied to avoid rebuilding it.
    pub fn push(
        &self,
        x: ArrayView2<'_, f64>,
        program: Option<&DiscreteProgram>,
    ) -> Result<(Array2<f64>, Option<BatchTrajectory>), GeneratorError> {
        match self {
            Model::Vanilla(g) => Ok((g.forward(x)?, None)),
            Model::Continuous(g) => {
                let t = g.forward(x)?;
                Ok((t.last().clone(), Some(t)))
            }
            Model::Discrete(g) => {
                let t = match program {
                    Some(p) => p.forward(g.params.as_slice(), x)?,
                    None => g.forward(x)?,
                };
                Ok((t.last().clone(), Some(t)))
            }
        }
    }
}

fn column_std(y: ArrayView2<'_, f64>, k: usize) -> f64 {
    y.column(k).std(1.0)
}

/// Metrics of the map `x -> y` where `x` are `mu` samples drawn with
/// [`eval_inputs`].
pub fn output_metrics(
    problem: &ProblemSpec,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<EvalMetrics, TrainError> {
    let m = y.nrows();
    let nu = problem.nu.sample_seeded(m, sub_seed(seed, STREAM_EVAL_NU));
    let sw = sliced_wasserstein(y, nu.view(), EVAL_PROJECTIONS, sub_seed(seed, STREAM_EVAL_DIRS))?;
    let norms = y.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m as f64;
    Ok(EvalMetrics {
        map_error: problem
            .analytic_map
            .as_ref()
            .map(|f| mean_distance(y, f.apply(x).view())),
        sw_distance: sw.value,
        std_x: column_std(y, 0),
        std_y: (y.ncols() > 1).then(|| column_std(y, 1)),
        mean_norm: norms,
        hj_residual: None,
        nll: None,
    })
}

/// The `mu` samples an evaluation with this seed uses.
pub fn eval_inputs(problem: &ProblemSpec, num_samples: usize, seed: u64) -> Array2<f64> {
    problem.mu.sample_seeded(num_samples, sub_seed(seed, STREAM_EVAL_MU))
}

/// Evaluates an arbitrary map, e.g. an analytic oracle, as a frozen generator.
pub fn evaluate_map<E: Display>(
    map: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>, E>,
    problem: &ProblemSpec,
    num_samples: usize,
    seed: u64,
) -> Result<EvalMetrics, TrainError> {
    let x = eval_inputs(problem, num_samples, seed);
    let y = map(x.view()).map_err(|e| ProblemError::Generator(e.to_string()))?;
    output_metrics(problem, x.view(), y.view(), seed)
}

/// All applicable metrics of `model`. The likelihood is computed when
/// `with_nll` is set and the problem has a `mu` density.
pub fn evaluate_model(
    model: &Model,
    program: Option<&DiscreteProgram>,
    problem: &ProblemSpec,
    num_samples: usize,
    seed: u64,
    with_nll: bool,
) -> Result<EvalMetrics, TrainError> {
    if model.dim() != problem.dim {
        return Err(TrainError::Problem(ProblemError::Dimension {
            expected: problem.dim,
            got: model.dim(),
        }));
    }
    let x = eval_inputs(problem, num_samples, seed);
    let (y, traj) = model.push(x.view(), program)?;
    let mut metrics = output_metrics(problem, x.view(), y.view(), seed)?;
    if let (Model::Continuous(g), Some(traj)) = (model, traj) {
        metrics.hj_residual = Some(hj_residual(&g.potential, &ResidualPointSet::from_trajectory(&traj)?)?);
        if let (true, Some(density)) = (with_nll, problem.mu_density.as_ref()) {
            let nu = problem.nu.sample_seeded(num_samples, sub_seed(seed, STREAM_EVAL_NU));
            metrics.nll = Some(cnf_nll(g, nu.view(), density, 0.0)?.nll);
        }
    }
    let values = [
        metrics.map_error,
        Some(metrics.sw_distance),
        Some(metrics.std_x),
        metrics.std_y,
        Some(metrics.mean_norm),
        metrics.hj_residual,
        metrics.nll,
    ];
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::diverged("evaluation", "non-finite metric"));
    }
    Ok(metrics)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    step: usize,
    dim: usize,
    config: RunConfig,
}

/// Generator (and critic) state restored from a run checkpoint.
#[derive(Clone, Debug)]
pub struct RunCheckpoint {
    pub config: RunConfig,
    pub step: usize,
    pub model: Model,
    pub adam: AdamState,
    pub discriminator: Option<(Discriminator, AdamState)>,
}

impl RunCheckpoint {
    fn to_container(&self) -> Container {
        let mut c = Container::new();
        let header = CheckpointHeader {
            kind: "run".into(),
            step: self.step,
            dim: self.model.dim(),
            config: self.config.clone(),
        };
        c.push_json(&serde_json::to_string(&header).expect("header serializes"));
        c.push_mlp(self.model.params());
        c.push_adam(&self.adam);
        if let Some((d, a)) = &self.discriminator {
            c.push_mlp(&d.params);
            c.push_adam(a);
        }
        c
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces the previous checkpoint with a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        self.to_container().save(&tmp)?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let c = Container::load(path)?;
        let malformed = |reason: String| CheckpointError::Malformed { offset: 0, reason };
        let header: CheckpointHeader =
            serde_json::from_str(&c.json(0)?).map_err(|e| malformed(format!("run header: {e}")))?;
        if header.kind != "run" {
            return Err(malformed(format!("expected a run checkpoint, found {:?}", header.kind)).into());
        }
        let model = Model::from_params(header.config.generator, c.mlp(0)?, header.config.grid())?;
        if model.dim() != header.dim {
            return Err(malformed("generator shape disagrees with header".into()).into());
        }
        let adam = c.adam(0)?;
        let discriminator = match c.mlp(1) {
            Ok(params) => Some((
                Discriminator {
                    params,
                    gp_weight: header.config.gp_weight,
                },
                c.adam(1)?,
            )),
            Err(_) => None,
        };
        Ok(Self {
            config: header.config,
            step: header.step,
            model,
            adam,
            discriminator,
        })
    }
}

/// Recomputes the metrics of a saved generator on fresh samples.
pub fn evaluate(
    checkpoint: impl AsRef<Path>,
    problem: &ProblemSpec,
    num_samples: usize,
    seed: u64,
) -> Result<RunReport, TrainError> {
    let start = Instant::now();
    let ck = RunCheckpoint::load(checkpoint)?;
    let metrics = evaluate_model(
        &ck.model,
        None,
        problem,
        num_samples,
        seed,
        ck.config.loss == LossKind::Cnf,
    )
    .map_err(|e| e.at_step(ck.step))?;
    Ok(RunReport {
        config: ck.config,
        problem: problem.name.clone(),
        substitute: problem.substitute,
        steps_completed: ck.step,
        seed,
        eval_samples: num_samples,
        metrics,
        final_losses: None,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

struct Session<'a> {
    cfg: &'a RunConfig,
    problem: &'a ProblemSpec,
    model: Model,
    adam: AdamState,
    program: Option<DiscreteProgram>,
    disc: Option<(Discriminator, AdamState)>,
    mu_pool: Array2<f64>,
    nu_pool: Array2<f64>,
    rng: ChaCha8Rng,
}

fn draw<R: Rng>(pool: &Array2<f64>, b: usize, rng: &mut R) -> Array2<f64> {
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..pool.nrows())).collect();
    pool.select(Axis(0), &idx)
}

fn finite(component: &str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::diverged(component, format!("loss value {v}")))
    }
}

impl<'a> Session<'a> {
    fn new(cfg: &'a RunConfig, problem: &'a ProblemSpec) -> Result<Self, TrainError> {
        let model = Model::init(cfg, problem.dim)?;
        let adam = AdamState::new(cfg.adam, model.params().len());
        let program = match &model {
            Model::Discrete(g) => {
                let mut p = g.program()?;
                p.enable_param_grad()?;
                Some(p)
            }
            _ => None,
        };
        let disc = (cfg.loss == LossKind::WganGp)
            .then(|| -> Result<_, TrainError> {
                let spec = MlpSpec::new(problem.dim, cfg.hidden_layers, cfg.hidden_width, 1);
                let params = ParamStore::init(spec, sub_seed(cfg.seed, STREAM_INIT_DISC))?;
                let a = AdamState::new(cfg.adam, params.len());
                Ok((
                    Discriminator {
                        params,
                        gp_weight: cfg.gp_weight,
                    },
                    a,
                ))
            })
            .transpose()?;
        Ok(Self {
            cfg,
            problem,
            model,
            adam,
            program,
            disc,
            mu_pool: problem
                .mu
                .sample_seeded(cfg.pool_size, sub_seed(cfg.seed, STREAM_POOL_MU)),
            nu_pool: problem
                .nu
                .sample_seeded(cfg.pool_size, sub_seed(cfg.seed, STREAM_POOL_NU)),
            rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_TRAIN)),
        })
    }

    fn evaluate(&self) -> Result<EvalMetrics, TrainError> {
        evaluate_model(
            &self.model,
            self.program.as_ref(),
            self.problem,
            self.cfg.eval_samples,
            sub_seed(self.cfg.seed, STREAM_EVAL),
            self.cfg.loss == LossKind::Cnf,
        )
    }

    fn checkpoint(&self, step: usize) -> RunCheckpoint {
        RunCheckpoint {
            config: self.cfg.clone(),
            step,
            model: self.model.clone(),
            adam: self.adam.clone(),
            discriminator: self.disc.clone(),
        }
    }

    fn step(&mut self) -> Result<StepLosses, TrainError> {
        let mut grad = vec![0.0; self.model.params().len()];
        let losses = match self.cfg.loss {
            LossKind::Cnf => self.cnf_grad(&mut grad)?,
            LossKind::Swg | LossKind::WganGp => self.gan_grad(&mut grad)?,
        };
        let theta = self.model.params_mut().as_mut_slice();
        let before = theta.to_vec();
        self.adam.step(theta, &grad)?;
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            theta.copy_from_slice(&before);
            return Err(TrainError::diverged(
                "parameters",
                format!("parameter {i} left the finite range"),
            ));
        }
        Ok(losses)
    }

    fn cnf_grad(&mut self, grad: &mut [f64]) -> Result<StepLosses, TrainError> {
        let y = draw(&self.nu_pool, self.cfg.batch_size, &mut self.rng);
        let density = self.problem.mu_density.as_ref().expect("checked before training");
        let Model::Continuous(g) = &self.model else {
            unreachable!("validated: cnf uses the continuous generator")
        };
        let (loss, gr) = cnf_nll_grad(g, y.view(), density, self.cfg.lambda)?;
        grad.copy_from_slice(&gr);
        Ok(StepLosses {
            nll: Some(finite("nll", loss.nll)?),
            hj_residual: Some(finite("hj-residual", loss.residual)?),
            ..Default::default()
        })
    }

    fn gan_grad(&mut self, grad: &mut [f64]) -> Result<StepLosses, TrainError> {
        let cfg = self.cfg;
        let x = draw(&self.mu_pool, cfg.batch_size, &mut self.rng);
        let y = draw(&self.nu_pool, cfg.batch_size, &mut self.rng);
        let (out, traj) = self.model.push(x.view(), self.program.as_ref())?;
        let mut losses = StepLosses::default();
        let mut seed = match &mut self.disc {
            None => {
                let dirs = random_directions(self.problem.dim, cfg.num_projections, &mut self.rng);
                let sw = sliced_wasserstein_with(out.view(), y.view(), dirs.view())?;
                losses.gan = Some(finite("gan", sw.value)?);
                sw.grad_fake
            }
            Some((d, da)) => {
                let w = wgan_gp_losses(d, out.view(), y.view(), &mut self.rng)?;
                losses.disc_loss = Some(finite("discriminator", w.disc_loss)?);
                da.step(d.params.as_mut_slice(), &w.disc_grad)?;
                let (gen_loss, g) = wgan_generator_loss(d, out.view())?;
                losses.gan = Some(finite("gan", gen_loss)?);
                g
            }
        };
        let (tp, tp_grad) = transport_penalty(x.view(), out.view())?;
        losses.transport_penalty = Some(finite("transport-penalty", tp)?);
        if cfg.alpha != 0.0 {
            seed.scaled_add(cfg.alpha, &tp_grad);
        }
        match &self.model {
            Model::Vanilla(g) => g.pullback(x.view(), seed.view(), grad)?,
            Model::Continuous(g) => {
                let traj = traj.expect("flows record trajectories");
                g.pullback_forward(&traj, seed.view(), None, grad);
                if cfg.lambda != 0.0 {
                    let pts = ResidualPointSet::from_trajectory(&traj)?;
                    let r = hj_residual_grad(&g.potential, &pts, cfg.lambda, grad)?;
                    losses.hj_residual = Some(finite("hj-residual", r)?);
                }
            }
            Model::Discrete(g) => {
                let program = self.program.as_ref().expect("built with the session");
                let gr = program.pullback(g.params.as_slice(), x.view(), seed.view())?;
                grad.copy_from_slice(&gr);
            }
        }
        Ok(losses)
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub log: Vec<TrainLogRecord>,
    pub model: Model,
}

/// Trains on the registered problem named in the config.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let problem = problem_by_name(&cfg.problem)?;
    train_on(cfg, &problem, out_dir, |_| {})
}

/// Runs `cfg` on `problem`. With `out_dir`, writes `log.csv`,
/// `checkpoint.bin` (every `checkpoint_every` steps and at the end) and
/// `report.json`; on divergence writes `divergence.json` and keeps the last
/// good checkpoint. `progress` sees every log record.
pub fn train_on(
    cfg: &RunConfig,
    problem: &ProblemSpec,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.loss == LossKind::Cnf && problem.mu_density.is_none() {
        return Err(TrainError::Config(format!(
            "problem {} has no mu density for the cnf loss",
            problem.name
        )));
    }
    let start = Instant::now();
    let mut session = Session::new(cfg, problem)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let stale = dir.join("divergence.json");
            if stale.exists() {
                fs::remove_file(&stale).map_err(io_err(&stale))?;
            }
            let path = dir.join("log.csv");
            let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            writeln!(w, "{LOG_HEADER}").map_err(io_err(&path))?;
            Some((path, w))
        }
        None => None,
    };
    let ck_path = out_dir.map(|d| d.join("checkpoint.bin"));
    let mut log = Vec::new();
    let mut emit = |rec: TrainLogRecord, log: &mut Vec<TrainLogRecord>| -> Result<(), TrainError> {
        if let Some((path, w)) = &mut log_file {
            writeln!(w, "{}", rec.csv_row()).map_err(io_err(path))?;
        }
        progress(&rec);
        log.push(rec);
        Ok(())
    };

    let mut run = || -> Result<(EvalMetrics, Option<StepLosses>), TrainError> {
        let mut metrics = session.evaluate().map_err(|e| e.at_step(0))?;
        emit(
            TrainLogRecord {
                step: 0,
                losses: StepLosses::default(),
                metrics: Some(metrics.clone()),
                wall_time: start.elapsed().as_secs_f64(),
            },
            &mut log,
        )?;
        if let Some(p) = &ck_path {
            session.checkpoint(0).save(p)?;
        }
        let mut last = None;
        for step in 1..=cfg.steps {
            let losses = session.step().map_err(|e| e.at_step(step))?;
            last = Some(losses);
            let due = |every: usize| step == cfg.steps || (every > 0 && step % every == 0);
            let eval = if due(cfg.eval_every) {
                metrics = session.evaluate().map_err(|e| e.at_step(step))?;
                Some(metrics.clone())
            } else {
                None
            };
            emit(
                TrainLogRecord {
                    step,
                    losses,
                    metrics: eval,
                    wall_time: start.elapsed().as_secs_f64(),
                },
                &mut log,
            )?;
            if let (Some(p), true) = (&ck_path, due(cfg.checkpoint_every)) {
                session.checkpoint(step).save(p)?;
            }
        }
        Ok((metrics, last))
    };
    let result = run();
    if let Some((path, w)) = &mut log_file {
        w.flush().map_err(io_err(path))?;
    }
    let (metrics, final_losses) = match result {
        Ok(v) => v,
        Err(TrainError::Diverged(record)) => {
            if let Some(dir) = out_dir {
                let path = dir.join("divergence.json");
                let text = serde_json::to_string_pretty(&record).expect("record serializes");
                fs::write(&path, text).map_err(io_err(&path))?;
            }
            return Err(TrainError::Diverged(record));
        }
        Err(e) => return Err(e),
    };
    let report = RunReport {
        config: cfg.clone(),
        problem: problem.name.clone(),
        substitute: problem.substitute,
        steps_completed: cfg.steps,
        seed: cfg.seed,
        eval_samples: cfg.eval_samples,
        metrics,
        final_losses,
        wall_time: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        let path = dir.join("report.json");
        fs::write(&path, report.to_json()).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        report,
        log,
        model: session.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gaussian_problem, ring_problem};

    fn tiny(generator: GeneratorKind, loss: LossKind) -> RunConfig {
        RunConfig {
            generator,
            loss,
            lambda: if generator == GeneratorKind::ContinuousPfg {
                1.0
            } else {
                0.0
            },
            n: 4,
            dt: 0.25,
            hidden_layers: 1,
            hidden_width: 8,
            batch_size: 32,
            steps: 3,
            checkpoint_every: 2,
            eval_every: 2,
            num_projections: 16,
            pool_size: 256,
            eval_samples: 128,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(RunConfig::default().validate().is_ok());
        let cnf_vanilla = RunConfig {
            generator: GeneratorKind::Vanilla,
            loss: LossKind::Cnf,
            lambda: 0.0,
            ..RunConfig::default()
        };
        assert!(matches!(cnf_vanilla.validate(), Err(TrainError::Config(_))));
        let lambda_vanilla = RunConfig {
            generator: GeneratorKind::Vanilla,
            ..RunConfig::default()
        };
        assert!(lambda_vanilla.validate().is_err());
        let alpha_flow = RunConfig {
            alpha: 0.1,
            ..RunConfig::default()
        };
        assert!(alpha_flow.validate().is_err());
    }

    #[test]
    fn config_json_uses_kebab_case_and_rejects_unknown_keys() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"generator": "discrete-pfg", "loss": "wgan-gp", "lambda": 0}"#).unwrap();
        assert_eq!(cfg.generator, GeneratorKind::DiscretePfg);
        assert_eq!(cfg.steps, RunConfig::default().steps);
        let err = serde_json::from_str::<RunConfig>(r#"{"lamda": 1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lamda") && err.contains("lambda"));
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let cfg = RunConfig {
            steps: 0,
            ..tiny(GeneratorKind::ContinuousPfg, LossKind::Swg)
        };
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.report.steps_completed, 0);
        assert!(out.report.final_losses.is_none());
        assert_eq!(out.model.params(), Model::init(&cfg, 2).unwrap().params());
    }

    #[test]
    fn every_generator_and_loss_runs() {
        for (g, l) in [
            (GeneratorKind::Vanilla, LossKind::Swg),
            (GeneratorKind::Vanilla, LossKind::WganGp),
            (GeneratorKind::ContinuousPfg, LossKind::Swg),
            (GeneratorKind::ContinuousPfg, LossKind::WganGp),
            (GeneratorKind::ContinuousPfg, LossKind::Cnf),
            (GeneratorKind::DiscretePfg, LossKind::Swg),
        ] {
            let mut cfg = tiny(g, l);
            if g == GeneratorKind::DiscretePfg {
                cfg.n = 2;
                cfg.dt = 0.5;
                cfg.hidden_width = 3;
                cfg.batch_size = 8;
                cfg.eval_samples = 16;
            }
            let out = train(&cfg, None).unwrap_or_else(|e| panic!("{g:?}/{l:?}: {e}"));
            let steps: Vec<usize> = out.log.iter().map(|r| r.step).collect();
            assert_eq!(steps, vec![0, 1, 2, 3]);
            assert!(out.log[2].metrics.is_some() && out.log[1].metrics.is_none());
            assert!(out.report.metrics.map_error.unwrap() >= 0.0);
        }
    }

    #[test]
    fn run_is_reproducible_and_checkpoint_evaluates_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(GeneratorKind::ContinuousPfg, LossKind::Swg);
        let a = train(&cfg, Some(dir.path())).unwrap();
        let first = fs::read(dir.path().join("report.json")).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(first, a.report.to_json().as_bytes());
        let ck = dir.path().join("checkpoint.bin");
        let problem = gaussian_problem();
        let e1 = evaluate(&ck, &problem, 200, 9).unwrap();
        let e2 = evaluate(&ck, &problem, 200, 9).unwrap();
        assert_eq!(e1.to_json(), e2.to_json());
        assert_eq!(e1.steps_completed, 3);
        let log = fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert!(log.starts_with(LOG_HEADER));
    }

    #[test]
    fn zero_output_init_starts_at_identity() {
        let cfg = RunConfig {
            zero_output_init: true,
            ..tiny(GeneratorKind::ContinuousPfg, LossKind::Swg)
        };
        let x = ndarray::array![[0.3, -1.2], [2.0, 0.5]];
        let (y, _) = Model::init(&cfg, 2).unwrap().push(x.view(), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn analytic_map_and_identity_oracles() {
        let p = gaussian_problem();
        let map = p.analytic_map.clone().unwrap();
        let m = evaluate_map(|x| Ok::<_, String>(map.apply(x)), &p, 10_000, 1).unwrap();
        assert_eq!(m.map_error, Some(0.0));
        assert!((m.std_x - 1.0).abs() < 0.03 && (m.std_y.unwrap() - 0.5).abs() < 0.015);
        let r = ring_problem();
        let m = evaluate_map(|x| Ok::<_, String>(x.to_owned()), &r, 10_000, 2).unwrap();
        assert!((m.mean_norm - 0.75).abs() < 0.01);
    }

    #[test]
    fn divergence_is_reported_with_step_and_checkpoint_kept() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            adam: AdamConfig {
                lr: 1e307,
                ..AdamConfig::default()
            },
            steps: 100,
            checkpoint_every: 1,
            eval_every: 0,
            ..tiny(GeneratorKind::Vanilla, LossKind::Swg)
        };
        let err = train(&cfg, Some(dir.path())).unwrap_err();
        let TrainError::Diverged(rec) = err else {
            panic!("expected divergence, got {err}")
        };
        assert!(rec.step >= 1);
        let saved: DivergenceRecord =
            serde_json::from_str(&fs::read_to_string(dir.path().join("divergence.json")).unwrap()).unwrap();
        assert_eq!(saved, rec);
        let ck = RunCheckpoint::load(dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ck.step, rec.step - 1);
        assert!(ck.model.params().as_slice().iter().all(|v| v.is_finite()));
    }
}
