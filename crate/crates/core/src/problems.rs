//! Benchmark distribution pairs, analytic optimal-transport oracles and
//! evaluation metrics.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{sqrtm_psd, LinalgError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem {name:?}; expected one of {known:?}")]
    Unknown { name: String, known: Vec<&'static str> },
    #[error("problem {0:?} has no analytic map")]
    NoAnalyticMap(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance is not a valid Gaussian covariance: {0}")]
    Covariance(#[from] LinalgError),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seeded sampler of a distribution on `R^d`.
#[derive(Clone, Debug)]
pub enum Sampler {
    /// Independent normal coordinates.
    DiagGaussian { mean: Vec<f64>, std: Vec<f64> },
    /// Uniform angle, radius uniform on `[r0, r1]` (not area-uniform).
    Annulus { r0: f64, r1: f64 },
    /// Equal-weight isotropic Gaussian mixture in any dimension.
    Mixture { means: Vec<Vec<f64>>, std: f64 },
    /// Rows drawn uniformly with replacement from a fixed data set.
    Empirical(Arc<Array2<f64>>),
}

impl Sampler {
    pub fn dim(&self) -> usize {
        match self {
            Sampler::DiagGaussian { mean, .. } => mean.len(),
            Sampler::Annulus { .. } => 2,
            Sampler::Mixture { means, .. } => means[0].len(),
            Sampler::Empirical(data) => data.ncols(),
        }
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            match self {
                Sampler::DiagGaussian { mean, std } => {
                    for k in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        row[k] = mean[k] + std[k] * z;
                    }
                }
                Sampler::Annulus { r0, r1 } => {
                    let r = rng.random_range(*r0..*r1);
                    let a = rng.random_range(0.0..2.0 * PI);
                    row[0] = r * a.cos();
                    row[1] = r * a.sin();
                }
                Sampler::Mixture { means, std } => {
                    let m = &means[rng.random_range(0..means.len())];
                    for k in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        row[k] = m[k] + std * z;
                    }
                }
                Sampler::Empirical(data) => {
                    row.assign(&data.row(rng.random_range(0..data.nrows())));
                }
            }
        }
        out
    }

    pub fn sample_seeded(&self, n: usize, seed: u64) -> Array2<f64> {
        self.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Log-density, possibly unnormalized, with its gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, x: ArrayView2<'_, f64>) -> Array1<f64>;
    fn grad_log_density(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

#[derive(Clone, Debug)]
pub enum Density {
    /// Normalized.
    DiagGaussian { mean: Vec<f64>, std: Vec<f64> },
    /// `-log r` on the annulus `r0 <= r <= r1`, `-inf` outside: the density
    /// of [`Sampler::Annulus`] up to a constant.
    Annulus { r0: f64, r1: f64 },
    /// Normalized.
    Mixture { means: Vec<Vec<f64>>, std: f64 },
}

impl Density {
    /// Mixture component log-weights (unnormalized over components) for one point.
    fn mixture_terms(means: &[Vec<f64>], std: f64, x: ArrayView1<'_, f64>) -> Vec<f64> {
        let var = std * std;
        means
            .iter()
            .map(|m| -m.iter().zip(x.iter()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / (2.0 * var))
            .collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl LogDensity for Density {
    fn dim(&self) -> usize {
        match self {
            Density::DiagGaussian { mean, .. } => mean.len(),
            Density::Annulus { .. } => 2,
            Density::Mixture { means, .. } => means[0].len(),
        }
    }

    fn log_density(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let d = self.dim() as f64;
        x.rows()
            .into_iter()
            .map(|r| match self {
                Density::DiagGaussian { mean, std } => r
                    .iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((x, m), s)| {
                        let z = (x - m) / s;
                        -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
                    })
                    .sum(),
                Density::Annulus { r0, r1 } => {
                    let rad = r.dot(&r).sqrt();
                    if rad >= *r0 && rad <= *r1 {
                        -rad.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                Density::Mixture { means, std } => {
                    let terms = Self::mixture_terms(means, *std, r);
                    log_sum_exp(&terms) - (means.len() as f64).ln() - d * std.ln() - 0.5 * d * (2.0 * PI).ln()
                }
            })
            .collect()
    }

    fn grad_log_density(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (r, mut g) in x.rows().into_iter().zip(out.rows_mut()) {
            match self {
                Density::DiagGaussian { mean, std } => {
                    for k in 0..r.len() {
                        g[k] = -(r[k] - mean[k]) / (std[k] * std[k]);
                    }
                }
                Density::Annulus { .. } => {
                    let r2 = r.dot(&r);
                    if r2 > 0.0 {
                        g.assign(&(&r * (-1.0 / r2)));
                    }
                }
                Density::Mixture { means, std } => {
                    let terms = Self::mixture_terms(means, *std, r);
                    let lse = log_sum_exp(&terms);
                    let var = std * std;
                    for (m, t) in means.iter().zip(&terms) {
                        let w = (t - lse).exp();
                        for k in 0..r.len() {
                            g[k] -= w * (r[k] - m[k]) / var;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Known optimal transport map of a benchmark pair.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticMap {
    /// Coordinate-wise scaling.
    Scale(Vec<f64>),
    /// Adds a constant to the radius, keeping the angle.
    RadialShift(f64),
}

impl AnalyticMap {
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            AnalyticMap::Scale(s) => &x * &ArrayView1::from(s.as_slice()).insert_axis(Axis(0)),
            AnalyticMap::RadialShift(c) => {
                let mut y = x.to_owned();
                for mut row in y.rows_mut() {
                    let r = row.dot(&row).sqrt();
                    if r > 0.0 {
                        row *= (r + c) / r;
                    }
                }
                y
            }
        }
    }

    pub fn apply_one(&self, x: &[f64]) -> Vec<f64> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row");
        self.apply(xb).row(0).to_vec()
    }
}

/// A `(mu, nu)` benchmark pair.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub mu: Sampler,
    pub nu: Sampler,
    pub mu_density: Option<Density>,
    pub nu_density: Option<Density>,
    pub analytic_map: Option<AnalyticMap>,
    /// Squared 2-Wasserstein distance between `mu` and `nu`, when known.
    pub analytic_cost: Option<f64>,
    /// Stand-in pair, not taken from a published experiment.
    pub substitute: bool,
}

pub const PROBLEM_NAMES: [&str; 5] = ["gaussian", "ring", "gaussian-mixture", "two-moons", "annulus-gaussian"];

/// `mu = N(0, diag(0.25, 1))` to `nu = N(0, diag(1, 0.25))`; the optimal
/// map is `(x, y) -> (2x, y/2)`.
pub fn gaussian_problem() -> ProblemSpec {
    let cost = gelbrich_cost(
        &[0.0, 0.0],
        &ndarray::array![[0.25, 0.0], [0.0, 1.0]],
        &[0.0, 0.0],
        &ndarray::array![[1.0, 0.0], [0.0, 0.25]],
    )
    .expect("valid covariances");
    ProblemSpec {
        name: "gaussian".into(),
        dim: 2,
        mu: Sampler::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![0.5, 1.0],
        },
        nu: Sampler::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 0.5],
        },
        mu_density: Some(Density::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![0.5, 1.0],
        }),
        nu_density: Some(Density::DiagGaussian {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 0.5],
        }),
        analytic_map: Some(AnalyticMap::Scale(vec![2.0, 0.5])),
        analytic_cost: Some(cost),
        substitute: false,
    }
}

/// Radius uniform on `[0.5, 1]` to radius uniform on `[2, 2.5]`, uniform
/// angle; the optimal map adds 1.5 to the radius.
pub fn ring_problem() -> ProblemSpec {
    ProblemSpec {
        name: "ring".into(),
        dim: 2,
        mu: Sampler::Annulus { r0: 0.5, r1: 1.0 },
        nu: Sampler::Annulus { r0: 2.0, r1: 2.5 },
        mu_density: Some(Density::Annulus { r0: 0.5, r1: 1.0 }),
        nu_density: Some(Density::Annulus { r0: 2.0, r1: 2.5 }),
        analytic_map: Some(AnalyticMap::RadialShift(1.5)),
        analytic_cost: None,
        substitute: false,
    }
}

fn standard_normal_2d() -> (Sampler, Density) {
    let (mean, std) = (vec![0.0, 0.0], vec![1.0, 1.0]);
    (
        Sampler::DiagGaussian {
            mean: mean.clone(),
            std: std.clone(),
        },
        Density::DiagGaussian { mean, std },
    )
}

/// Means of the eight-mode mixture: radius 2, angles `k * pi / 4`.
pub fn eight_mode_means() -> Vec<Vec<f64>> {
    (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect()
}

/// Centers of the two-moons mixture: 100 points along each of two
/// interleaved half circles of radius 1, centered on the origin.
pub fn two_moons_means() -> Vec<Vec<f64>> {
    let m = 100;
    let mut out = Vec::with_capacity(2 * m);
    for i in 0..m {
        let a = PI * (i as f64 + 0.5) / m as f64;
        out.push(vec![a.cos() - 0.5, a.sin() - 0.25]);
        out.push(vec![1.0 - a.cos() - 0.5, 0.5 - a.sin() - 0.25]);
    }
    out
}

/// Three stand-in pairs: standard normal to an eight-mode mixture, standard
/// normal to two moons, and the ring problem's source annulus to a standard
/// normal. None has a known optimal map.
pub fn extra_problems() -> Vec<ProblemSpec> {
    let (g, gd) = standard_normal_2d();
    let mix = |name: &str, means: Vec<Vec<f64>>, std: f64| ProblemSpec {
        name: name.into(),
        dim: 2,
        mu: g.clone(),
        nu: Sampler::Mixture {
            means: means.clone(),
            std,
        },
        mu_density: Some(gd.clone()),
        nu_density: Some(Density::Mixture { means, std }),
        analytic_map: None,
        analytic_cost: None,
        substitute: true,
    };
    vec![
        mix("gaussian-mixture", eight_mode_means(), 0.2),
        mix("two-moons", two_moons_means(), 0.1),
        ProblemSpec {
            name: "annulus-gaussian".into(),
            dim: 2,
            mu: Sampler::Annulus { r0: 0.5, r1: 1.0 },
            nu: g.clone(),
            mu_density: Some(Density::Annulus { r0: 0.5, r1: 1.0 }),
            nu_density: Some(gd.clone()),
            analytic_map: None,
            analytic_cost: None,
            substitute: true,
        },
    ]
}

pub fn problem_by_name(name: &str) -> Result<ProblemSpec, ProblemError> {
    match name {
        "gaussian" => Ok(gaussian_problem()),
        "ring" => Ok(ring_problem()),
        _ => extra_problems()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ProblemError::Unknown {
                name: name.into(),
                known: PROBLEM_NAMES.to_vec(),
            }),
    }
}

/// Squared 2-Wasserstein distance between `N(m1, s1)` and `N(m2, s2)`:
/// `|m1 - m2|^2 + tr(s1 + s2 - 2 (s1^1/2 s2 s1^1/2)^1/2)`.
pub fn gelbrich_cost(m1: &[f64], s1: &Array2<f64>, m2: &[f64], s2: &Array2<f64>) -> Result<f64, ProblemError> {
    let d = m1.len();
    for got in [m2.len(), s1.nrows(), s2.nrows()] {
        if got != d {
            return Err(ProblemError::Dimension { expected: d, got });
        }
    }
    let r1 = sqrtm_psd(s1)?;
    sqrtm_psd(s2)?;
    let cross = sqrtm_psd(&r1.dot(s2).dot(&r1))?;
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(mean_term + s1.diag().sum() + s2.diag().sum() - 2.0 * cross.diag().sum())
}

/// Mean Euclidean distance between a generator's outputs and the analytic
/// map over `num_samples` fresh draws from `mu`.
pub fn map_error<E: std::fmt::Display>(
    generator: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>, E>,
    problem: &ProblemSpec,
    num_samples: usize,
    seed: u64,
) -> Result<f64, ProblemError> {
    let map = problem
        .analytic_map
        .as_ref()
        .ok_or_else(|| ProblemError::NoAnalyticMap(problem.name.clone()))?;
    let x = problem.mu.sample_seeded(num_samples, seed);
    let y = generator(x.view()).map_err(|e| ProblemError::Generator(e.to_string()))?;
    Ok(mean_distance(y.view(), map.apply(x.view()).view()))
}

/// Mean row-wise Euclidean distance.
pub fn mean_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let diff = &a - &b;
    let total: f64 = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    total / a.nrows() as f64
}

/// Writes samples as CSV with header `x1,...,xd`.
pub fn write_csv(path: impl AsRef<Path>, samples: ArrayView2<'_, f64>) -> Result<(), ProblemError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (1..=samples.ncols()).map(|k| format!("x{k}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in samples.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}
