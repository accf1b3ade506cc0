//! Command-line surface of the potential-flow generator library.

pub mod bench;
pub mod config;
pub mod error;
pub mod mnist;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pfgen::pipeline::{fit_pca, PcaModel};
use pfgen::problems::problem_by_name;
use pfgen::trainer::{evaluate, train_on, RunCheckpoint, RunConfig, TrainLogRecord};

use crate::bench::{render_markdown, run_bench, BenchOptions, Suite};
use crate::error::{io, CliError};
use crate::mnist::{load_dataset, mnist_default_config, run_mnist, MnistOptions};

#[derive(Debug, Parser)]
#[command(name = "pfgen", version, about = "Train and evaluate potential-flow generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file, overrides and budget shared by training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field after the file is read (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the published network size and step budget.
    #[arg(long)]
    pub paper_scale: bool,
}

impl ConfigArgs {
    pub fn resolve(&self, defaults: &RunConfig) -> Result<RunConfig, CliError> {
        config::load_config(
            self.config.as_deref(),
            defaults,
            &self.overrides,
            self.seed,
            self.paper_scale,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    /// The known optimal map of the problem.
    Analytic,
    Identity,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one generator; writes log.csv, checkpoint.bin and report.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on fresh samples; writes report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the problem the checkpoint was trained on.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every row of a comparison table over several seeds.
    Bench {
        suite: Suite,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// List the rows without training.
        #[arg(long)]
        dry_run: bool,
        /// Time steps of the discrete generator row.
        #[arg(long, default_value_t = 4)]
        discrete_n: usize,
    },
    /// Scatter plot with transport arrows as SVG and CSV.
    Plot {
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: Option<Oracle>,
        /// Required with --oracle; defaults to the checkpoint's problem.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 100)]
        arrows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a PCA model on IDX images and save it.
    PcaFit {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate digits 0-4 to digits 5-9 in a PCA embedding.
    MnistTranslate {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Number of image pairs exported.
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        /// Reuse a saved PCA model instead of fitting one.
        #[arg(long)]
        pca: Option<PathBuf>,
    },
}

fn print_progress(rec: &TrainLogRecord) {
    if let Some(m) = &rec.metrics {
        let err = m.map_error.map(|e| format!(" map-error {e:.4}")).unwrap_or_default();
        eprintln!(
            "step {:>7}  sw {:.5}{err}  [{:.1}s]",
            rec.step, m.sw_distance, rec.wall_time
        );
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { cfg, out, quiet } => {
            let cfg = cfg.resolve(&RunConfig::default())?;
            let problem = problem_by_name(&cfg.problem)?;
            let outcome = train_on(&cfg, &problem, Some(&out), |r| {
                if !quiet {
                    print_progress(r)
                }
            })?;
            println!("{}", outcome.report.to_json());
        }
        Command::Eval {
            checkpoint,
            out,
            problem,
            samples,
            seed,
        } => {
            let name = match problem {
                Some(p) => p,
                None => RunCheckpoint::load(&checkpoint)?.config.problem,
            };
            let report = evaluate(&checkpoint, &problem_by_name(&name)?, samples, seed)?;
            let json = report.to_json();
            write_text(&out.join("report.json"), &json)?;
            println!("{json}");
        }
        Command::Bench {
            suite,
            cfg,
            out,
            seeds,
            dry_run,
            discrete_n,
        } => {
            let base = cfg.resolve(&RunConfig::default())?;
            let opts = BenchOptions {
                seeds,
                dry_run,
                discrete_n,
            };
            let results = run_bench(suite, &base, &opts, &out, |r| {
                if !dry_run {
                    eprintln!("finished row {}", r.row.label)
                }
            })?;
            let md = render_markdown(suite, &results, dry_run);
            write_text(&out.join("bench.md"), &md)?;
            if !dry_run {
                let json = serde_json::to_string_pretty(&results).expect("results serialize");
                write_text(&out.join("bench.json"), &json)?;
            }
            print!("{md}");
        }
        Command::Plot {
            checkpoint,
            oracle,
            problem,
            out,
            samples,
            arrows,
            seed,
        } => {
            let data = match (checkpoint, oracle) {
                (Some(ck), _) => {
                    let ck = RunCheckpoint::load(ck)?;
                    let p = problem_by_name(problem.as_deref().unwrap_or(&ck.config.problem))?;
                    plot::plot_data(|x| ck.model.push(x, None).map(|(y, _)| y), &p, samples, arrows, seed)?
                }
                (None, Some(o)) => {
                    let name = problem.ok_or_else(|| CliError::Config("--oracle needs --problem".into()))?;
                    let p = problem_by_name(&name)?;
                    match o {
                        Oracle::Identity => {
                            plot::plot_data(|x| Ok::<_, String>(x.to_owned()), &p, samples, arrows, seed)?
                        }
                        Oracle::Analytic => {
                            let map = p
                                .analytic_map
                                .clone()
                                .ok_or_else(|| CliError::Config(format!("problem {name} has no analytic map")))?;
                            plot::plot_data(|x| Ok::<_, String>(map.apply(x)), &p, samples, arrows, seed)?
                        }
                    }
                }
                (None, None) => return Err(CliError::Config("plot needs --checkpoint or --oracle".into())),
            };
            plot::write_plot(&data, &out)?;
            println!("wrote {}", out.join("plot.svg").display());
        }
        Command::PcaFit { images, labels, k, out } => {
            let set = load_dataset(&images, &labels)?;
            let pca: PcaModel = fit_pca(set.images.view(), k)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            pca.save(&out)?;
            let kept: f64 = pca.eigenvalues.iter().take(k).sum();
            let total: f64 = pca.eigenvalues.sum();
            println!(
                "fitted {k} components on {} images ({:.1}% of variance); wrote {}",
                set.len(),
                100.0 * kept / total.max(f64::MIN_POSITIVE),
                out.display()
            );
        }
        Command::MnistTranslate {
            images,
            labels,
            cfg,
            out,
            k,
            pairs,
            pca,
        } => {
            let cfg = cfg.resolve(&mnist_default_config())?;
            let opts = MnistOptions { k, pairs, pca };
            let summary = run_mnist(&images, &labels, &cfg, &opts, &out, print_progress)?;
            println!(
                "sliced Wasserstein {:.5} -> {:.5}; images in {}",
                summary.initial_sw,
                summary.final_sw,
                out.display()
            );
        }
    }
    Ok(())
}
