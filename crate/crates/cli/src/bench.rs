//! Benchmark suites mirroring the two published comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use pfgen::problems::{problem_by_name, ProblemSpec};
use pfgen::trainer::{evaluate_map, train_on, EvalMetrics, GeneratorKind, LossKind, RunConfig};
use serde::Serialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Gaussian to Gaussian.
    Table1,
    /// Ring to ring.
    Table2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum RowKind {
    Reference,
    Vanilla { alpha: f64 },
    Discrete,
    Continuous { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub label: &'static str,
    pub kind: RowKind,
    /// Published mean and spread for each column; empty where not reported.
    pub paper: Vec<&'static str>,
}

fn row(label: &'static str, kind: RowKind, paper: &[&'static str]) -> BenchRow {
    BenchRow {
        label,
        kind,
        paper: paper.to_vec(),
    }
}

pub fn suite_problem(suite: Suite) -> &'static str {
    match suite {
        Suite::Table1 => "gaussian",
        Suite::Table2 => "ring",
    }
}

pub fn suite_columns(suite: Suite) -> &'static [&'static str] {
    match suite {
        Suite::Table1 => &["Std in x-axis", "Std in y-axis", "Error of map"],
        Suite::Table2 => &["Mean of norm", "Error of map"],
    }
}

/// Rows in published order. The ring table has no discrete generator row:
/// that generator produced non-finite values on the ring problem.
pub fn suite_rows(suite: Suite) -> Vec<BenchRow> {
    use RowKind::*;
    match suite {
        Suite::Table1 => vec![
            row("Reference", Reference, &["1.000", "0.500", ""]),
            row(
                "Vanilla (α = 0.1)",
                Vanilla { alpha: 0.1 },
                &["0.919±0.004", "0.592±0.003", "0.108±0.002"],
            ),
            row(
                "Vanilla (α = 0.01)",
                Vanilla { alpha: 0.01 },
                &["0.985±0.005", "0.499±0.006", "0.439±0.587"],
            ),
            row(
                "Vanilla (α = 0.001)",
                Vanilla { alpha: 0.001 },
                &["0.992±0.009", "0.493±0.001", "0.462±0.593"],
            ),
            row("Discrete PFG", Discrete, &["0.993±0.001", "0.498±0.002", "0.018±0.006"]),
            row(
                "Continuous PFG (λ = 10.0)",
                Continuous { lambda: 10.0 },
                &["0.991±0.001", "0.502±0.001", "0.018±0.006"],
            ),
            row(
                "Continuous PFG (λ = 1.0)",
                Continuous { lambda: 1.0 },
                &["0.992±0.001", "0.499±0.002", "0.019±0.007"],
            ),
            row(
                "Continuous PFG (λ = 0.1)",
                Continuous { lambda: 0.1 },
                &["0.990±0.002", "0.503±0.003", "0.025±0.008"],
            ),
        ],
        Suite::Table2 => vec![
            row("Reference", Reference, &["2.250", ""]),
            row(
                "Vanilla (α = 0.1)",
                Vanilla { alpha: 0.1 },
                &["2.107±0.002", "0.146±0.003"],
            ),
            row(
                "Vanilla (α = 0.01)",
                Vanilla { alpha: 0.01 },
                &["2.227±0.004", "0.973±1.319"],
            ),
            row(
                "Vanilla (α = 0.001)",
                Vanilla { alpha: 0.001 },
                &["2.243±0.002", "1.000±1.311"],
            ),
            row(
                "Continuous PFG (λ = 10.0)",
                Continuous { lambda: 10.0 },
                &["2.243±0.001", "0.024±0.004"],
            ),
            row(
                "Continuous PFG (λ = 1.0)",
                Continuous { lambda: 1.0 },
                &["2.245±0.000", "0.029±0.002"],
            ),
            row(
                "Continuous PFG (λ = 0.1)",
                Continuous { lambda: 0.1 },
                &["2.245±0.001", "0.031±0.004"],
            ),
        ],
    }
}

pub fn metric_values(suite: Suite, m: &EvalMetrics) -> Vec<f64> {
    let err = m.map_error.unwrap_or(f64::NAN);
    match suite {
        Suite::Table1 => vec![m.std_x, m.std_y.unwrap_or(f64::NAN), err],
        Suite::Table2 => vec![m.mean_norm, err],
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seeds: usize,
    pub dry_run: bool,
    /// Time steps of the discrete generator, whose unrolled graph grows
    /// quickly with the step count; the total time is kept.
    pub discrete_n: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            seeds: 3,
            dry_run: false,
            discrete_n: 4,
        }
    }
}

/// Training config of a row, or `None` for the analytic reference.
pub fn row_config(base: &RunConfig, suite: Suite, row: &BenchRow, opts: &BenchOptions) -> Option<RunConfig> {
    let mut cfg = base.clone();
    cfg.problem = suite_problem(suite).to_string();
    if cfg.loss == LossKind::Cnf {
        cfg.loss = LossKind::Swg;
    }
    cfg.lambda = 0.0;
    cfg.alpha = 0.0;
    match row.kind {
        RowKind::Reference => return None,
        RowKind::Vanilla { alpha } => {
            cfg.generator = GeneratorKind::Vanilla;
            cfg.alpha = alpha;
        }
        RowKind::Discrete => {
            cfg.generator = GeneratorKind::DiscretePfg;
            let total = cfg.n as f64 * cfg.dt;
            cfg.n = opts.discrete_n;
            cfg.dt = total / opts.discrete_n as f64;
        }
        RowKind::Continuous { lambda } => {
            cfg.generator = GeneratorKind::ContinuousPfg;
            cfg.lambda = lambda;
        }
    }
    Some(cfg)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub values: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RowResult {
    pub row: BenchRow,
    pub runs: Vec<SeedResult>,
}

impl RowResult {
    /// Mean and population standard deviation of column `c` over the
    /// successful seeds.
    pub fn cell(&self, c: usize) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.values.as_ref().map(|v| v[c]))
            .collect();
        if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        match c {
            'α' => out.push_str("alpha"),
            'λ' => out.push_str("lambda"),
            c if c.is_ascii_alphanumeric() => out.push(c.to_ascii_lowercase()),
            '.' => out.push('p'),
            _ if !out.ends_with('-') => out.push('-'),
            _ => {}
        }
    }
    out.trim_matches('-').to_string()
}

fn run_row(
    problem: &ProblemSpec,
    base: &RunConfig,
    suite: Suite,
    row: &BenchRow,
    opts: &BenchOptions,
    out: &Path,
) -> Vec<SeedResult> {
    (0..opts.seeds as u64)
        .map(|i| {
            let seed = base.seed + i;
            let outcome = match row_config(base, suite, row, opts) {
                None => {
                    let map = problem.analytic_map.clone().expect("benchmark problems have oracles");
                    evaluate_map(|x| Ok::<_, String>(map.apply(x)), problem, base.eval_samples, seed)
                }
                Some(mut cfg) => {
                    cfg.seed = seed;
                    let dir = out.join(slug(row.label)).join(format!("seed{seed}"));
                    train_on(&cfg, problem, Some(&dir), |_| {}).map(|o| o.report.metrics)
                }
            };
            match outcome {
                Ok(m) => SeedResult {
                    seed,
                    values: Some(metric_values(suite, &m)),
                    error: None,
                },
                Err(e) => SeedResult {
                    seed,
                    values: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Runs every row over `opts.seeds` seeds starting at `base.seed`. Failed
/// runs are recorded and the suite continues.
pub fn run_bench(
    suite: Suite,
    base: &RunConfig,
    opts: &BenchOptions,
    out: &Path,
    mut progress: impl FnMut(&RowResult),
) -> Result<Vec<RowResult>, CliError> {
    let problem = problem_by_name(suite_problem(suite))?;
    let mut results = Vec::new();
    for row in suite_rows(suite) {
        let runs = if opts.dry_run {
            Vec::new()
        } else {
            run_row(&problem, base, suite, &row, opts, out)
        };
        let r = RowResult { row, runs };
        progress(&r);
        results.push(r);
    }
    Ok(results)
}

/// Markdown table with `mean±std (paper value)` per cell; a dry run lists
/// the row names only.
pub fn render_markdown(suite: Suite, results: &[RowResult], dry_run: bool) -> String {
    let mut s = String::new();
    if dry_run {
        s.push_str("| Generator |\n|---|\n");
        for r in results {
            let _ = writeln!(s, "| {} |", r.row.label);
        }
        return s;
    }
    let cols = suite_columns(suite);
    let _ = writeln!(s, "| Generator | {} |", cols.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(cols.len()));
    for r in results {
        let cells: Vec<String> = (0..cols.len())
            .map(|c| {
                let ours = match r.cell(c) {
                    Some((m, sd)) => format!("{m:.3}±{sd:.3}"),
                    None if r.runs.iter().all(|x| x.values.is_some()) => "n/a".into(),
                    None => {
                        let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
                        format!("failed ({failed}/{})", r.runs.len())
                    }
                };
                match r.row.paper[c] {
                    "" => ours,
                    p => format!("{ours} (paper {p})"),
                }
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", r.row.label, cells.join(" | "));
    }
    s
}
