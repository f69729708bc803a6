//! Self-normalized importance sampling for posterior predictives under
//! generic scale priors.
//!
//! With the prior as proposal, each variance draw `beta_i` gets the weight
//! `w_i = N(Y_tr; 0, beta_i Kbar_trtr)`. The log weight decomposes as
//!
//! ```text
//! log w_i = -(K/2) log 2pi - (1/2) log det Kbar_trtr
//!           - (K/2) log beta_i - Y^T Kbar^{-1} Y / (2 beta_i)
//! ```
//!
//! so everything except the last two terms is shared across samples and is
//! computed once ([`precompute`]); after that each weight costs O(1).
//! Predictive draws reuse a single Cholesky factor of the Schur complement:
//! `y_i = mean + sqrt(beta_i) * z_i` with `z_i ~ N(0, Schur)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dist::ScalePrior;
use crate::error::{Error, Result};
use crate::kernels::{GramKind, GramPair};
use crate::linalg;
use crate::posterior::RegressionTask;

/// Quantities shared by every importance weight and predictive draw.
#[derive(Debug, Clone)]
pub struct SharedTerms {
    /// `(1/2) log det(Kbar_trtr + eps^2 I)`.
    pub log_det_half: f64,
    /// `Y^T (Kbar_trtr + eps^2 I)^{-1} Y`.
    pub quad_form: f64,
    /// `(K/2) log 2pi`.
    pub const_term: f64,
    /// Factor of the (jittered) training gram.
    pub chol_tr: Cholesky<f64, Dyn>,
    /// Predictive mean `Kbar_tetr (Kbar_trtr + eps^2 I)^{-1} Y`.
    pub mean_te: DVector<f64>,
    /// Schur complement `Kbar_tete - Kbar_tetr (...)^{-1} Kbar_trte`.
    pub schur_te: DMatrix<f64>,
    schur_chol: Cholesky<f64, Dyn>,
    n_train: usize,
}

impl SharedTerms {
    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_test(&self) -> usize {
        self.mean_te.len()
    }
}

/// One-time factorization and Schur complement for a task/gram pair.
pub fn precompute(task: &RegressionTask, gram: &GramPair) -> Result<SharedTerms> {
    if gram.kind() != GramKind::Nngp {
        return Err(Error::invalid("importance sampling expects an NNGP gram"));
    }
    let k = gram.n_train();
    if task.y_tr.len() != k {
        return Err(Error::dim(format!(
            "gram has {k} training rows, task has {}",
            task.y_tr.len()
        )));
    }
    let mut trtr = gram.trtr().clone();
    for i in 0..k {
        trtr[(i, i)] += task.noise_variance;
    }
    let (chol_tr, _) = linalg::cholesky_with_jitter(&trtr, "training gram")?;
    let log_det_half = 0.5 * linalg::log_det(&chol_tr);
    let quad_form = linalg::inv_quad_form(&chol_tr, &task.y_tr);
    let const_term = k as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();

    let mut alpha = task.y_tr.clone();
    chol_tr.solve_mut(&mut alpha);
    let mean_te = gram.tetr() * &alpha;

    let mut cross = gram.tetr().transpose();
    chol_tr.solve_mut(&mut cross);
    let mut schur_te = gram.tete() - gram.tetr() * &cross;
    linalg::symmetrize(&mut schur_te);
    let schur_chol = if schur_te.nrows() > 0 {
        linalg::cholesky_with_jitter(&schur_te, "predictive Schur complement")?.0
    } else {
        Cholesky::new(DMatrix::identity(0, 0)).expect("empty factorization")
    };

    Ok(SharedTerms {
        log_det_half,
        quad_form,
        const_term,
        chol_tr,
        mean_te,
        schur_te,
        schur_chol,
        n_train: k,
    })
}

/// Log importance weight of a variance draw; O(1) scalar arithmetic.
pub fn log_weight(st: &SharedTerms, beta: f64) -> f64 {
    let k = st.n_train as f64;
    -st.const_term - st.log_det_half - 0.5 * k * beta.ln() - st.quad_form / (2.0 * beta)
}

/// The variance maximizing [`log_weight`]: `quad_form / K`.
pub fn argmax_weight(st: &SharedTerms) -> f64 {
    st.quad_form / st.n_train as f64
}

/// A weighted predictive ensemble: variance draws, their log weights, the
/// corresponding test-function draws and the effective sample size
/// `(sum w)^2 / sum w^2`.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub betas: Vec<f64>,
    pub log_weights: Vec<f64>,
    /// `N x L` matrix of predictive draws.
    pub samples: DMatrix<f64>,
    pub ess: f64,
}

impl WeightedEnsemble {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Normalized weights (sum to 1), computed through log-sum-exp.
    pub fn normalized_weights(&self) -> Vec<f64> {
        normalized(&self.log_weights)
    }
}

fn normalized(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|w| w / total).collect()
}

/// Draw a weighted predictive ensemble of size `n >= 2` under the given prior.
pub fn predict<R: Rng + ?Sized>(
    task: &RegressionTask,
    gram: &GramPair,
    prior: &ScalePrior,
    n_samples: usize,
    rng: &mut R,
) -> Result<WeightedEnsemble> {
    if n_samples < 2 {
        return Err(Error::invalid("need at least two importance samples"));
    }
    let st = precompute(task, gram)?;
    predict_with(&st, prior, n_samples, rng)
}

/// As [`predict`] but reusing an existing [`SharedTerms`].
pub fn predict_with<R: Rng + ?Sized>(
    st: &SharedTerms,
    prior: &ScalePrior,
    n_samples: usize,
    rng: &mut R,
) -> Result<WeightedEnsemble> {
    if n_samples < 2 {
        return Err(Error::invalid("need at least two importance samples"));
    }
    let l = st.n_test();
    let sl = st.schur_chol.l();
    let mut betas = Vec::with_capacity(n_samples);
    let mut log_weights = Vec::with_capacity(n_samples);
    let mut samples = DMatrix::zeros(n_samples, l);
    let mut z = DVector::zeros(l);
    for i in 0..n_samples {
        let beta = prior.sample_one(rng);
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid(format!("prior drew invalid variance {beta}")));
        }
        let lw = log_weight(st, beta);
        let sqrt_beta = beta.sqrt();
        for kk in 0..l {
            z[kk] = rng.sample::<f64, _>(StandardNormal);
        }
        let corr = &sl * &z;
        for kk in 0..l {
            samples[(i, kk)] = st.mean_te[kk] + sqrt_beta * corr[kk];
        }
        betas.push(beta);
        log_weights.push(lw);
    }
    let weights = normalized(&log_weights);
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    if ess < 0.01 * n_samples as f64 {
        log::warn!(
            "importance sampling ESS {:.1} below 1% of {} samples; predictions may be unstable",
            ess,
            n_samples
        );
    }
    Ok(WeightedEnsemble {
        betas,
        log_weights,
        samples,
        ess,
    })
}

/// Self-normalized estimator `sum_i w_i h(y_i) / sum_j w_j`.
pub fn expectation<F>(ens: &WeightedEnsemble, h: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let weights = ens.normalized_weights();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let row: Vec<f64> = ens.samples.row(i).iter().cloned().collect();
        acc += w * h(&row);
    }
    acc
}

/// Log predictive density of a scalar target at test coordinate `j`:
/// `log sum_i w_i N(y; mean_j, beta_i * (Schur_jj + extra_var)) / sum w`.
///
/// `extra_var` carries per-point observation noise when scoring raw targets.
pub fn log_predictive_1d(
    st: &SharedTerms,
    ens: &WeightedEnsemble,
    j: usize,
    y: f64,
    extra_var: f64,
) -> f64 {
    let var_factor = st.schur_te[(j, j)] + extra_var;
    let mean = st.mean_te[j];
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let max_lw = ens
        .log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (beta, lw) in ens.betas.iter().zip(&ens.log_weights) {
        let w = (lw - max_lw).exp();
        let var = beta * var_factor;
        let ll = -half_log_2pi - 0.5 * var.ln() - (y - mean).powi(2) / (2.0 * var);
        num += w * ll.exp();
        den += w;
    }
    (num / den).ln()
}
