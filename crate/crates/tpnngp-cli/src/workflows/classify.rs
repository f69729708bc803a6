//! Classification with categorical likelihood through stochastic variational
//! inference (SVGP or SVTP).

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::path::Path;
use tpnngp::svi::{self, FitConfig, SviModel, TraceRow};

use crate::config::{ExperimentConfig, Inference};
use crate::data::Dataset;

#[derive(Debug, Serialize)]
pub struct ClassificationMetrics {
    pub workflow: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub accuracy: f64,
    pub nll_test: f64,
    pub final_elbo: Option<f64>,
}

pub struct ClassificationOutcome {
    pub metrics: ClassificationMetrics,
    pub trace: Vec<TraceRow>,
}

pub fn run_classification(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ClassificationOutcome> {
    let model = match cfg.inference {
        Inference::Svgp => SviModel::Svgp,
        Inference::Svtp => SviModel::Svtp,
        other => bail!("classification requires svgp or svtp inference, got {other:?}"),
    };
    let (labels, n_classes) = ds.class_labels()?;
    if n_classes < 2 {
        bail!("classification needs at least two classes");
    }
    let x_tr = ds.rows(&ds.train_idx);
    let y_tr: Vec<usize> = ds.train_idx.iter().map(|&i| labels[i]).collect();
    let net = cfg.network.to_kernel_config(ds.input_dim())?;

    let fit_cfg = FitConfig {
        model,
        n_inducing: cfg.svi.n_inducing,
        batch_size: cfg.svi.batch_size,
        n_mc: cfg.svi.n_mc,
        steps: cfg.svi.steps,
        learning_rate: cfg.svi.learning_rate,
        seed: cfg.seed,
        scale_prior: cfg.svi.scale_prior,
        train_inducing: cfg.svi.train_inducing,
        train_scale: true,
    };
    let (state, trace) =
        svi::fit(&x_tr, &y_tr, n_classes, &net, &fit_cfg).map_err(|e| anyhow::anyhow!("{e}"))?;

    let x_te = ds.rows(&ds.test_idx);
    let y_te: Vec<usize> = ds.test_idx.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let pred = svi::predict_with_kernel(&state, &x_te, &net, model, cfg.svi.predict_mc, &mut rng)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut correct = 0usize;
    let mut nll = 0.0;
    for (i, &truth) in y_te.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..n_classes {
            if pred.probabilities[(i, c)] > best.0 {
                best = (pred.probabilities[(i, c)], c);
            }
        }
        if best.1 == truth {
            correct += 1;
        }
        nll -= pred.probabilities[(i, truth)].max(1e-300).ln();
    }
    let accuracy = correct as f64 / y_te.len() as f64;
    let nll_test = nll / y_te.len() as f64;

    Ok(ClassificationOutcome {
        metrics: ClassificationMetrics {
            workflow: "classify-sv",
            config_hash: cfg.hash(),
            seed: cfg.seed,
            model: format!("{model:?}").to_lowercase(),
            n_train: y_tr.len(),
            n_test: y_te.len(),
            n_classes,
            accuracy,
            nll_test,
            final_elbo: trace.last().map(|r| r.elbo),
        },
        trace,
    })
}

/// Training trace as CSV: step, elbo, kl, likelihood.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).context("opening trace.csv")?;
    w.write_record(["step", "elbo", "kl", "likelihood"])?;
    for row in trace {
        w.write_record(&[
            row.step.to_string(),
            format!("{}", row.elbo),
            format!("{}", row.kl),
            format!("{}", row.likelihood),
        ])?;
    }
    w.flush()?;
    Ok(())
}
