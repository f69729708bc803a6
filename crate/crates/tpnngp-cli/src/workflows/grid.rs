//! Hyperparameter grid search: prior parameters over the configured grid
//! (optionally crossed with kernel hyperparameters), selected by validation
//! NLL, with test metrics computed exactly once for the winner.

use anyhow::{bail, Context, Result};
use serde::Serialize;
use std::path::Path;
use tpnngp::dist::ScalePrior;

use crate::config::{ExperimentConfig, Inference};
use crate::data::Dataset;
use crate::workflows::regress::run_regression_on;

#[derive(Debug, Serialize)]
pub struct GridMetrics {
    pub workflow: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub n_combinations: usize,
    pub best_prior: ScalePrior,
    pub best_weight_variance: f64,
    pub best_bias_variance: f64,
    pub best_depth: usize,
    pub best_val_nll: f64,
    pub nll_test: f64,
    pub rmse_test: f64,
}

#[derive(Debug, Serialize)]
pub struct GridRow {
    pub prior: ScalePrior,
    pub weight_variance: f64,
    pub bias_variance: f64,
    pub depth: usize,
    pub val_nll: f64,
}

fn prior_candidates(template: &ScalePrior, grid: &[f64]) -> Result<Vec<ScalePrior>> {
    let mut out = Vec::new();
    match template {
        ScalePrior::InvGamma { .. } => {
            for &a in grid {
                for &b in grid {
                    out.push(ScalePrior::inv_gamma(a, b).map_err(|e| anyhow::anyhow!("{e}"))?);
                }
            }
        }
        ScalePrior::BurrXii { .. } => {
            for &c in grid {
                for &k in grid {
                    out.push(ScalePrior::burr_xii(c, k).map_err(|e| anyhow::anyhow!("{e}"))?);
                }
            }
        }
        ScalePrior::PointMass { .. } => {
            for &s in grid {
                out.push(ScalePrior::point_mass(s).map_err(|e| anyhow::anyhow!("{e}"))?);
            }
        }
    }
    Ok(out)
}

pub fn run_grid(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(GridMetrics, Vec<GridRow>)> {
    if ds.val_idx.is_empty() {
        bail!("grid search needs a non-empty validation split");
    }
    if matches!(cfg.inference, Inference::Svgp | Inference::Svtp) {
        bail!("grid search covers the regression paths (exact or is:N)");
    }
    let priors = prior_candidates(&cfg.prior, &cfg.grid.prior_grid)?;
    let sw_grid = cfg
        .grid
        .weight_variances
        .clone()
        .unwrap_or_else(|| vec![cfg.network.weight_variance]);
    let sb_grid = cfg
        .grid
        .bias_variances
        .clone()
        .unwrap_or_else(|| vec![cfg.network.bias_variance]);
    let depth_grid = cfg.grid.depths.clone().unwrap_or_else(|| vec![cfg.network.depth]);

    let mut rows = Vec::new();
    let mut best: Option<(f64, ExperimentConfig)> = None;
    for &depth in &depth_grid {
        for &sw in &sw_grid {
            for &sb in &sb_grid {
                // One kernel per network combination, shared across priors.
                let mut combo = cfg.clone();
                combo.network.depth = depth;
                combo.network.weight_variance = sw;
                combo.network.bias_variance = sb;
                let net = combo.network.to_kernel_config(ds.input_dim())?;
                let x_tr = ds.rows(&ds.train_idx);
                let x_val = ds.rows(&ds.val_idx);
                let gram = tpnngp::kernels::nngp_gram(&x_tr, &x_val, &net)
                    .map_err(|e| anyhow::anyhow!("kernel: {e}"))?;
                for prior in &priors {
                    combo.prior = *prior;
                    combo
                        .validate()
                        .context("grid combination incompatible with inference")?;
                    let outcome = run_regression_on(&combo, ds, &ds.val_idx, Some(&gram))?;
                    let val_nll = outcome.metrics.nll_test;
                    rows.push(GridRow {
                        prior: *prior,
                        weight_variance: sw,
                        bias_variance: sb,
                        depth,
                        val_nll,
                    });
                    if best.as_ref().is_none_or(|(b, _)| val_nll < *b) {
                        best = Some((val_nll, combo.clone()));
                    }
                }
            }
        }
    }
    let (best_val_nll, best_cfg) = best.expect("non-empty grid");
    // Test metrics exactly once, for the winner only.
    let test_outcome = run_regression_on(&best_cfg, ds, &ds.test_idx, None)?;

    Ok((
        GridMetrics {
            workflow: "grid",
            config_hash: cfg.hash(),
            seed: cfg.seed,
            n_combinations: rows.len(),
            best_prior: best_cfg.prior,
            best_weight_variance: best_cfg.network.weight_variance,
            best_bias_variance: best_cfg.network.bias_variance,
            best_depth: best_cfg.network.depth,
            best_val_nll,
            nll_test: test_outcome.metrics.nll_test,
            rmse_test: test_outcome.metrics.rmse_test,
        },
        rows,
    ))
}

pub fn write_grid_rows(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["prior", "weight_variance", "bias_variance", "depth", "val_nll"])?;
    for r in rows {
        w.write_record(&[
            serde_json::to_string(&r.prior)?,
            format!("{}", r.weight_variance),
            format!("{}", r.bias_variance),
            format!("{}", r.depth),
            format!("{}", r.val_nll),
        ])?;
    }
    w.flush()?;
    Ok(())
}
