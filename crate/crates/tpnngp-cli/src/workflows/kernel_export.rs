//! Kernel export: gram blocks as CSV with a JSON sidecar carrying the
//! resolved configuration and its hash. Round trips are bit-exact because
//! floats are written in Rust's shortest round-trip representation.

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tpnngp::kernels::{nngp_gram, ntk_gram, GramKind, GramPair};

use crate::config::ExperimentConfig;
use crate::data::Dataset;

#[derive(Debug, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub kind: GramKind,
    pub n_train: usize,
    pub n_test: usize,
    pub input_dim: usize,
    pub config_hash: String,
    pub config: serde_json::Value,
}

pub fn export_kernel(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    kind: GramKind,
    out: &Path,
) -> Result<KernelSidecar> {
    let x_tr = ds.rows(&ds.train_idx);
    let x_te = ds.rows(&ds.test_idx);
    let net = cfg.network.to_kernel_config(ds.input_dim())?;
    let gram = match kind {
        GramKind::Nngp => nngp_gram(&x_tr, &x_te, &net),
        GramKind::Ntk => ntk_gram(&x_tr, &x_te, &net),
    }
    .map_err(|e| anyhow::anyhow!("kernel construction: {e}"))?;

    write_matrix(&out.join("kernel_trtr.csv"), gram.trtr())?;
    write_matrix(&out.join("kernel_tetr.csv"), gram.tetr())?;
    write_matrix(&out.join("kernel_tete.csv"), gram.tete())?;
    let sidecar = KernelSidecar {
        kind,
        n_train: gram.n_train(),
        n_test: gram.n_test(),
        input_dim: ds.input_dim(),
        config_hash: cfg.hash(),
        config: serde_json::from_str(&cfg.canonical_json())?,
    };
    super::write_json(&out.join("kernel_meta.json"), &sidecar)?;
    Ok(sidecar)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(
            record
                .iter()
                .map(|f| f.trim().parse::<f64>().context("parsing kernel entry"))
                .collect::<Result<_>>()?,
        );
    }
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Load an exported gram back into a [`GramPair`].
pub fn load_kernel(dir: &Path) -> Result<(GramPair, KernelSidecar)> {
    let meta: KernelSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join("kernel_meta.json"))?)
            .context("parsing kernel_meta.json")?;
    let trtr = read_matrix(&dir.join("kernel_trtr.csv"))?;
    let mut tetr = read_matrix(&dir.join("kernel_tetr.csv"))?;
    let tete = read_matrix(&dir.join("kernel_tete.csv"))?;
    if meta.n_test == 0 {
        tetr = DMatrix::zeros(0, meta.n_train);
    }
    if trtr.nrows() != meta.n_train || tete.nrows() != meta.n_test {
        bail!(
            "kernel blocks disagree with sidecar: trtr {} vs {}, tete {} vs {}",
            trtr.nrows(),
            meta.n_train,
            tete.nrows(),
            meta.n_test
        );
    }
    let gram = GramPair::new(trtr, tetr, tete, meta.kind)
        .map_err(|e| anyhow::anyhow!("validating loaded kernel: {e}"))?;
    Ok((gram, meta))
}
