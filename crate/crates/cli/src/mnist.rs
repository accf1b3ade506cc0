//! Digit-cluster translation in a PCA embedding: digits 0-4 are mapped to
//! digits 5-9 by a flow trained with a WGAN-GP loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use pfgen::nn::AdamConfig;
use pfgen::pipeline::{export_pgm_grid, fit_pca, load_idx, ImageSet, PcaModel};
use pfgen::problems::{ProblemSpec, Sampler};
use pfgen::trainer::{train_on, GeneratorKind, LossKind, RunConfig, RunReport, TrainLogRecord};
use serde::Serialize;

use crate::error::{io, CliError};

pub const DOWNLOAD_HINT: &str = "download train-images-idx3-ubyte.gz and train-labels-idx1-ubyte.gz from an MNIST mirror and gunzip them, or convert the digits bundled with the npm `mnist` package using scripts/mnist_from_npm.py";

pub const GRID_COLUMNS: usize = 8;

/// Desk-scale defaults: ten flow steps over unit time, unit HJ weight,
/// and the optimizer settings of the published image experiment.
pub fn mnist_default_config() -> RunConfig {
    RunConfig {
        problem: "mnist-pca".into(),
        generator: GeneratorKind::ContinuousPfg,
        loss: LossKind::WganGp,
        lambda: 1.0,
        n: 10,
        dt: 0.1,
        hidden_layers: 3,
        hidden_width: 128,
        adam: AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        },
        batch_size: 256,
        steps: 10_000,
        eval_samples: 2000,
        zero_output_init: true,
        ..RunConfig::default()
    }
}

/// Images of digits 0-4 and of digits 5-9.
pub fn cluster_split(set: &ImageSet) -> (Array2<f64>, Array2<f64>) {
    set.split_by_label(|l| l <= 4)
}

pub fn embedded_problem(mu: Array2<f64>, nu: Array2<f64>) -> ProblemSpec {
    ProblemSpec {
        name: "mnist-pca".into(),
        dim: mu.ncols(),
        mu: Sampler::Empirical(Arc::new(mu)),
        nu: Sampler::Empirical(Arc::new(nu)),
        mu_density: None,
        nu_density: None,
        analytic_map: None,
        analytic_cost: None,
        substitute: false,
    }
}

/// PCA reconstructions of `images` before and after `map` acts on their
/// codes. Values are unclipped.
pub fn translate<E: std::fmt::Display>(
    pca: &PcaModel,
    map: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>, E>,
    images: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>), CliError> {
    let codes = pca.embed_batch(images)?;
    let moved = map(codes.view()).map_err(|e| CliError::Diverged(e.to_string()))?;
    Ok((
        pca.reconstruct_batch(codes.view())?,
        pca.reconstruct_batch(moved.view())?,
    ))
}

pub fn load_dataset(images: &Path, labels: &Path) -> Result<ImageSet, CliError> {
    for p in [images, labels] {
        if !p.exists() {
            return Err(CliError::Io(format!("{} not found; {DOWNLOAD_HINT}", p.display())));
        }
    }
    Ok(load_idx(images, labels)?)
}

#[derive(Clone, Debug)]
pub struct MnistOptions {
    pub k: usize,
    pub pairs: usize,
    /// Existing PCA model; fitted on the pooled images when absent.
    pub pca: Option<PathBuf>,
}

impl Default for MnistOptions {
    fn default() -> Self {
        Self {
            k: 100,
            pairs: 16,
            pca: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MnistSummary {
    pub k: usize,
    pub mu_count: usize,
    pub nu_count: usize,
    /// Evaluation sliced Wasserstein distance before and after training.
    pub initial_sw: f64,
    pub final_sw: f64,
    pub report: RunReport,
}

/// Writes `pca.bin`, the run outputs under `run/`, `inputs.pgm`,
/// `outputs.pgm` and `summary.json` into `out`.
pub fn run_mnist(
    images: &Path,
    labels: &Path,
    cfg: &RunConfig,
    opts: &MnistOptions,
    out: &Path,
    progress: impl FnMut(&TrainLogRecord),
) -> Result<MnistSummary, CliError> {
    let set = load_dataset(images, labels)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let pca = match &opts.pca {
        Some(p) => PcaModel::load(p)?,
        None => fit_pca(set.images.view(), opts.k)?,
    };
    pca.save(out.join("pca.bin"))?;
    let (mu_img, nu_img) = cluster_split(&set);
    if mu_img.nrows() == 0 || nu_img.nrows() == 0 {
        return Err(CliError::Config("both digit clusters need at least one image".into()));
    }
    let problem = embedded_problem(pca.embed_batch(mu_img.view())?, pca.embed_batch(nu_img.view())?);
    let outcome = train_on(cfg, &problem, Some(&out.join("run")), progress)?;
    let initial_sw = outcome.log[0].metrics.as_ref().expect("initial evaluation").sw_distance;
    let pairs = opts.pairs.min(mu_img.nrows());
    let model = outcome.model;
    let push = |x: ArrayView2<'_, f64>| model.push(x, None).map(|(y, _)| y);
    let (before, after) = translate(&pca, push, mu_img.slice(s![..pairs, ..]))?;
    export_pgm_grid(before.view(), set.cols, set.rows, GRID_COLUMNS, out.join("inputs.pgm"))?;
    export_pgm_grid(after.view(), set.cols, set.rows, GRID_COLUMNS, out.join("outputs.pgm"))?;
    let summary = MnistSummary {
        k: pca.k(),
        mu_count: mu_img.nrows(),
        nu_count: nu_img.nrows(),
        initial_sw,
        final_sw: outcome.report.metrics.sw_distance,
        report: outcome.report,
    };
    let path = out.join("summary.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| io(&path, e))?;
    Ok(summary)
}
