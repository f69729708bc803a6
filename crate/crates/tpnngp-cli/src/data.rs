//! CSV ingestion, seeded splitting and train-statistics standardization.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

use crate::config::SplitSection;

/// Per-column standardization statistics (computed on the training split).
#[derive(Debug, Clone)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    fn fit(rows: &[Vec<f64>], idx: &[usize], dim: usize) -> Self {
        let n = idx.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for &i in idx {
            for j in 0..dim {
                mean[j] += rows[i][j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0; dim];
        for &i in idx {
            for j in 0..dim {
                std[j] += (rows[i][j] - mean[j]).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Standardization { mean, std }
    }
}

/// A loaded dataset: standardized features, raw and standardized targets,
/// and disjoint covering splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Standardized features, all rows.
    pub features: DMatrix<f64>,
    /// Raw targets.
    pub targets: DVector<f64>,
    /// Targets standardized with training statistics.
    pub targets_std: DVector<f64>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub feature_stats: Standardization,
    pub target_mean: f64,
    pub target_std: f64,
    /// Rows dropped during parsing (missing or non-numeric features).
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.features.ncols(), |i, j| {
            self.features[(idx[i], j)]
        })
    }

    pub fn targets_std_at(&self, idx: &[usize]) -> DVector<f64> {
        DVector::from_fn(idx.len(), |i, _| self.targets_std[idx[i]])
    }

    pub fn targets_raw_at(&self, idx: &[usize]) -> DVector<f64> {
        DVector::from_fn(idx.len(), |i, _| self.targets[idx[i]])
    }

    /// Integer class labels (for classification datasets): the distinct
    /// target values, sorted, are mapped to 0..C-1.
    pub fn class_labels(&self) -> Result<(Vec<usize>, usize)> {
        let mut distinct: Vec<f64> = Vec::new();
        for &t in self.targets.iter() {
            if t.fract() != 0.0 {
                bail!("classification target contains non-integer value {t}");
            }
            if !distinct.contains(&t) {
                distinct.push(t);
            }
        }
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let labels = self
            .targets
            .iter()
            .map(|t| distinct.iter().position(|d| d == t).unwrap())
            .collect();
        Ok((labels, distinct.len()))
    }
}

/// Load a CSV with a header row, pick the target column by name or index,
/// split with a seeded permutation and standardize on the training portion.
pub fn load_csv(
    path: &Path,
    target: &str,
    split: &SplitSection,
    seed: u64,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("reading CSV header")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_col = match headers.iter().position(|h| h == target) {
        Some(i) => i,
        None => target
            .parse::<usize>()
            .ok()
            .filter(|&i| i < headers.len())
            .with_context(|| {
                format!(
                    "target column '{target}' not found among {:?}",
                    headers
                )
            })?,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.context("reading CSV record")?;
        let mut feats = Vec::with_capacity(headers.len() - 1);
        let mut target_val: Option<f64> = None;
        let mut bad_feature = false;
        for (j, field) in record.iter().enumerate() {
            let trimmed = field.trim();
            if j == target_col {
                match trimmed.parse::<f64>() {
                    Ok(v) if v.is_finite() => target_val = Some(v),
                    _ => bail!("non-numeric target value '{trimmed}' in {}", path.display()),
                }
            } else {
                match trimmed.parse::<f64>() {
                    Ok(v) if v.is_finite() => feats.push(v),
                    _ => {
                        bad_feature = true;
                        break;
                    }
                }
            }
        }
        if bad_feature {
            dropped += 1;
            continue;
        }
        rows.push(feats);
        targets.push(target_val.expect("target parsed"));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing or non-numeric features");
    }
    let n = rows.len();
    if n < 3 {
        bail!("dataset has only {n} usable rows");
    }
    let dim = rows[0].len();
    if dim == 0 {
        bail!("dataset has no feature columns");
    }

    // Seeded permutation split.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((split.train * n as f64).floor() as usize).max(1).min(n);
    let n_val = ((split.val * n as f64).floor() as usize).min(n - n_train);
    let train_idx: Vec<usize> = order[..n_train].to_vec();
    let val_idx: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test_idx: Vec<usize> = order[n_train + n_val..].to_vec();

    let feature_stats = Standardization::fit(&rows, &train_idx, dim);
    log::debug!(
        "standardizing {dim} feature columns on {} training rows",
        train_idx.len()
    );
    let mut features = DMatrix::zeros(n, dim);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..dim {
            features[(i, j)] = (row[j] - feature_stats.mean[j]) / feature_stats.std[j];
        }
    }
    let targets = DVector::from_vec(targets);
    let t_mean = train_idx.iter().map(|&i| targets[i]).sum::<f64>() / n_train as f64;
    let t_var = train_idx
        .iter()
        .map(|&i| (targets[i] - t_mean).powi(2))
        .sum::<f64>()
        / n_train as f64;
    let t_std = t_var.sqrt().max(1e-12);
    let targets_std = targets.map(|t| (t - t_mean) / t_std);

    Ok(Dataset {
        features,
        targets,
        targets_std,
        train_idx,
        val_idx,
        test_idx,
        feature_stats,
        target_mean: t_mean,
        target_std: t_std,
        dropped_rows: dropped,
    })
}
