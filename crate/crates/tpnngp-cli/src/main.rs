//! Command-line workflows for scale mixtures of NNGPs.

mod config;
mod data;
mod workflows;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tpnngp::kernels::GramKind;

use config::{parse_inference, parse_prior, ExperimentConfig};
use workflows::verify::Theorem;
use workflows::{classify, ensure_out_dir, grid, kernel_export, regress, verify, write_json};

#[derive(Parser)]
#[command(
    name = "tpnngp",
    about = "Scale mixtures of neural-network Gaussian processes: kernels, exact and approximate posteriors, variational classification, and limit-theorem verification",
    version
)]
struct Cli {
    /// JSON experiment configuration; flags override config fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input dataset (CSV with a header row).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Target column, by name or zero-based index.
    #[arg(long, global = true, default_value = "y")]
    target: String,
    /// Scale prior: invgamma:a,b | burr:c,k | point:s.
    #[arg(long, global = true)]
    prior: Option<String>,
    /// Inference method: exact | is:N | svgp | svtp.
    #[arg(long, global = true)]
    inference: Option<String>,
    /// Observation noise variance (overrides the config default).
    #[arg(long, global = true)]
    noise: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export NNGP/NTK gram blocks for a dataset.
    Kernel {
        /// Which kernel to export.
        #[arg(long, value_enum, default_value = "nngp")]
        kind: KernelKind,
    },
    /// Gaussian-likelihood regression (exact posterior or importance sampling).
    Regress {
        /// Load a previously exported kernel instead of recomputing it.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Categorical-likelihood classification via SVGP/SVTP.
    ClassifySv,
    /// Verify a limit theorem against finite-width simulation.
    Verify {
        #[arg(long, value_enum)]
        theorem: Theorem,
    },
    /// Hyperparameter grid search selected by validation NLL.
    Grid,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum KernelKind {
    Nngp,
    Ntk,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("TPNNGP_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}

/// Exit codes by error class: 2 parse/config, 3 numerical, 4 divergence,
/// 1 anything else.
fn classify_error(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(lib) = cause.downcast_ref::<tpnngp::Error>() {
            return match lib {
                tpnngp::Error::NotPositiveDefinite { .. }
                | tpnngp::Error::NumericalDomain { .. } => 3,
                tpnngp::Error::Divergence { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<csv::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    let text = format!("{err:#}");
    if text.contains("not positive definite") || text.contains("numerical domain") {
        3
    } else if text.contains("divergence") {
        4
    } else if text.contains("parsing")
        || text.contains("parse")
        || text.contains("config")
        || text.contains("spec")
        || text.contains("column")
    {
        2
    } else {
        1
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(spec) = &cli.prior {
        cfg.prior = parse_prior(spec)?;
    }
    if let Some(spec) = &cli.inference {
        cfg.inference = parse_inference(spec)?;
    }
    if let Some(noise) = cli.noise {
        cfg.noise_variance = Some(noise);
    }
    cfg.validate()?;
    ensure_out_dir(&cli.out)?;

    let load_data = || -> Result<data::Dataset> {
        let path = cli
            .data
            .as_ref()
            .context("this workflow needs --data <csv>")?;
        data::load_csv(path, &cli.target, &cfg.split, cfg.seed)
    };

    match cli.command {
        Command::Kernel { kind } => {
            let ds = load_data()?;
            let kind = match kind {
                KernelKind::Nngp => GramKind::Nngp,
                KernelKind::Ntk => GramKind::Ntk,
            };
            let sidecar = kernel_export::export_kernel(&cfg, &ds, kind, &cli.out)?;
            println!(
                "exported {:?} kernel: {} train x {} test (hash {})",
                kind, sidecar.n_train, sidecar.n_test, &sidecar.config_hash[..12]
            );
        }
        Command::Regress { kernel } => {
            let ds = load_data()?;
            let outcome = match kernel {
                Some(dir) => {
                    let (gram, meta) = kernel_export::load_kernel(&dir)?;
                    anyhow::ensure!(
                        meta.n_train == ds.train_idx.len() && meta.n_test == ds.test_idx.len(),
                        "exported kernel shapes do not match the dataset split"
                    );
                    regress::run_regression_on(&cfg, &ds, &ds.test_idx, Some(&gram))?
                }
                None => regress::run_regression_on(&cfg, &ds, &ds.test_idx, None)?,
            };
            write_json(&cli.out.join("metrics.json"), &outcome.metrics)?;
            regress::write_predictions(&cli.out.join("predictions.csv"), &outcome.predictions)?;
            println!(
                "regress: test NLL {:.4} nats/point, RMSE {:.4}",
                outcome.metrics.nll_test, outcome.metrics.rmse_test
            );
        }
        Command::ClassifySv => {
            let ds = load_data()?;
            let outcome = classify::run_classification(&cfg, &ds)?;
            write_json(&cli.out.join("metrics.json"), &outcome.metrics)?;
            classify::write_trace(&cli.out.join("trace.csv"), &outcome.trace)?;
            println!(
                "classify-sv ({}): accuracy {:.4}, test NLL {:.4}",
                outcome.metrics.model, outcome.metrics.accuracy, outcome.metrics.nll_test
            );
        }
        Command::Verify { theorem } => {
            let outcome = verify::run_verify(&cfg, theorem)?;
            write_json(&cli.out.join("metrics.json"), &outcome.report)?;
            verify::write_samples(&cli.out.join("samples.csv"), &outcome.samples)?;
            println!(
                "verify {}: statistic {:.5}, p {:?}, pass {}",
                outcome.report.theorem,
                outcome.report.statistic,
                outcome.report.p_value,
                outcome.report.pass
            );
        }
        Command::Grid => {
            let ds = load_data()?;
            let (metrics, rows) = grid::run_grid(&cfg, &ds)?;
            write_json(&cli.out.join("metrics.json"), &metrics)?;
            grid::write_grid_rows(&cli.out.join("grid.csv"), &rows)?;
            println!(
                "grid: best val NLL {:.4} -> test NLL {:.4} (prior {:?})",
                metrics.best_val_nll, metrics.nll_test, metrics.best_prior
            );
        }
    }
    Ok(())
}
