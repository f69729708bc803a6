//! Exact limiting and posterior distributions for Gaussian likelihoods.
//!
//! Three limits of a wide network with readout variance `sigma_v^2 ~ H`:
//!
//! * at initialization the outputs are `N(0, sigma_v^2 Kbar)` given the scale
//!   ([`prior_limit`]);
//! * after training only the readout layer to convergence they are
//!   `N(Kbar_tetr Kbar_trtr^{-1} Y, sigma_v^2 Schur(Kbar))` — note the scale
//!   keeps its *prior*, this is not the Bayesian posterior
//!   ([`readout_train_limit`]);
//! * after training all layers under the NTK parameterization they are
//!   `N(mu', sigma_v^2 Theta')` with the four-term covariance built from the
//!   NNGP and NTK blocks ([`ntk_train_limit`]).
//!
//! For an inverse-gamma prior each mixture marginalizes to a multivariate t
//! with degrees of freedom `2a`, and the Bayesian posterior predictive is
//! computed exactly by conditioning the joint t distribution — raising the
//! degrees of freedom to `2a + K` ([`bayes_posterior`]).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{scale_mixture_sample, MvtParams, ScalePrior};
use crate::error::{Error, Result};
use crate::kernels::{GramKind, GramPair};
use crate::linalg;

/// A regression problem: training inputs/targets, test inputs, and the
/// observation jitter added to the training block of the kernel.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub x_tr: DMatrix<f64>,
    pub y_tr: DVector<f64>,
    pub x_te: DMatrix<f64>,
    pub noise_variance: f64,
}

impl RegressionTask {
    pub fn new(
        x_tr: DMatrix<f64>,
        y_tr: DVector<f64>,
        x_te: DMatrix<f64>,
        noise_variance: f64,
    ) -> Result<Self> {
        if x_tr.nrows() == 0 {
            return Err(Error::invalid("need at least one training point"));
        }
        if x_tr.nrows() != y_tr.len() {
            return Err(Error::dim(format!(
                "{} training rows but {} targets",
                x_tr.nrows(),
                y_tr.len()
            )));
        }
        if !(noise_variance >= 0.0) {
            return Err(Error::invalid("noise variance must be non-negative"));
        }
        linalg::check_finite(&x_tr, "training inputs")?;
        linalg::check_finite(&x_te, "test inputs")?;
        if y_tr.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("targets contain non-finite values"));
        }
        Ok(RegressionTask {
            x_tr,
            y_tr,
            x_te,
            noise_variance,
        })
    }
}

/// Default observation jitter: `1e-6 * mean(diag Kbar_trtr)`.
pub fn default_noise_variance(gram: &GramPair) -> f64 {
    let k = gram.n_train();
    1e-6 * gram.trtr().diagonal().sum() / k as f64
}

/// A scale mixture of Gaussians over the predicted coordinates: mean is
/// scale-free, the covariance factor is multiplied by `sigma_v^2 ~ prior`.
/// `as_mvt` holds the marginalized Student's t exactly when the prior is
/// inverse gamma.
#[derive(Debug, Clone)]
pub struct MixturePredictive {
    pub conditional_mean: DVector<f64>,
    pub conditional_cov_factor: DMatrix<f64>,
    pub prior: ScalePrior,
    pub as_mvt: Option<MvtParams>,
}

impl MixturePredictive {
    fn build(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        prior: ScalePrior,
        psd_ref: f64,
    ) -> Result<Self> {
        linalg::check_symmetric(&cov, "mixture covariance factor")?;
        check_psd_with_floor(&cov, psd_ref, "mixture covariance factor")?;
        let as_mvt = match prior {
            ScalePrior::InvGamma { shape: a, scale: b } => {
                let scale = &cov * (b / a);
                let mvt = match MvtParams::new(2.0 * a, mean.clone(), scale.clone()) {
                    Ok(m) => m,
                    // Degenerate factors (e.g. test set equal to train set)
                    // cancel to ~0; regularize relative to the source kernel.
                    Err(Error::NotPositiveDefinite { .. }) => {
                        let floor = DMatrix::identity(cov.nrows(), cov.ncols())
                            * (1e-12 * psd_ref * (b / a));
                        MvtParams::new(2.0 * a, mean.clone(), scale + floor)?
                    }
                    Err(e) => return Err(e),
                };
                Some(mvt)
            }
            _ => None,
        };
        Ok(MixturePredictive {
            conditional_mean: mean,
            conditional_cov_factor: cov,
            prior,
            as_mvt,
        })
    }

    /// Draw from the mixture: `sigma^2 ~ prior`, then a Gaussian with
    /// covariance `sigma^2 * cov_factor`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        scale_mixture_sample(
            &self.prior,
            &self.conditional_mean,
            &self.conditional_cov_factor,
            n,
            rng,
        )
    }
}

/// PSD check with an absolute floor tied to the magnitude of the source
/// kernel, so that covariance factors that cancel to ~0 (e.g. test set equal
/// to the training set) still validate.
fn check_psd_with_floor(m: &DMatrix<f64>, psd_ref: f64, context: &str) -> Result<(f64, f64)> {
    if m.nrows() == 0 {
        return Ok((0.0, 0.0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = linalg::PSD_RTOL * max.abs().max(1e-6 * psd_ref.abs());
    if min < -floor {
        return Err(Error::invalid(format!(
            "{context}: not positive semi-definite (lambda_min={min:e}, lambda_max={max:e})"
        )));
    }
    Ok((min, max))
}

fn psd_ref_of(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    (m.diagonal().sum() / m.nrows() as f64).abs().max(1e-300)
}

fn require_kind(gram: &GramPair, kind: GramKind, what: &str) -> Result<()> {
    if gram.kind() != kind {
        return Err(Error::invalid(format!(
            "{what} expects a {kind:?} gram, got {:?}",
            gram.kind()
        )));
    }
    Ok(())
}

/// Limiting distribution at initialization over all `K + L` inputs:
/// zero mean, covariance factor `Kbar`, and for `InvGamma(a, b)` the marginal
/// `MVT_{K+L}(2a, 0, (b/a) Kbar)`.
pub fn prior_limit(gram: &GramPair, prior: ScalePrior) -> Result<MixturePredictive> {
    require_kind(gram, GramKind::Nngp, "prior_limit")?;
    let joint = gram.joint();
    let mean = DVector::zeros(joint.nrows());
    let psd_ref = psd_ref_of(&joint);
    MixturePredictive::build(mean, joint, prior, psd_ref)
}

fn train_solve(task: &RegressionTask, gram: &GramPair) -> Result<(DVector<f64>, DMatrix<f64>)> {
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
    let (chol, _) = linalg::cholesky_with_jitter(&trtr, "training gram")?;
    let mut alpha = task.y_tr.clone();
    chol.solve_mut(&mut alpha);
    // K^{-1} * K_trte, reused for the Schur complement.
    let mut cross = gram.tetr().transpose();
    chol.solve_mut(&mut cross);
    Ok((alpha, cross))
}

/// Readout-layer training limit: mean `Kbar_tetr (Kbar_trtr + eps^2 I)^{-1} Y`,
/// covariance factor the Schur complement, and — crucially — the *prior*
/// scale mixing, so the inverse-gamma marginal keeps `2a` degrees of freedom
/// no matter how many points were fit.
pub fn readout_train_limit(
    task: &RegressionTask,
    gram: &GramPair,
    prior: ScalePrior,
) -> Result<MixturePredictive> {
    require_kind(gram, GramKind::Nngp, "readout_train_limit")?;
    let (alpha, cross) = train_solve(task, gram)?;
    let mean = gram.tetr() * &alpha;
    let mut cov = gram.tete() - gram.tetr() * &cross;
    linalg::symmetrize(&mut cov);
    let psd_ref = psd_ref_of(gram.tete());
    MixturePredictive::build(mean, cov, prior, psd_ref)
}

/// Exact Bayesian posterior predictive for an inverse-gamma prior: condition
/// the joint `MVT_{K+L}(2a, 0, (b/a)(Kbar + eps^2 I_tr))` on the observed
/// training targets. Degrees of freedom come out as `2a + K`.
pub fn bayes_posterior(
    task: &RegressionTask,
    gram: &GramPair,
    prior: ScalePrior,
) -> Result<MvtParams> {
    require_kind(gram, GramKind::Nngp, "bayes_posterior")?;
    let ScalePrior::InvGamma { shape: a, scale: b } = prior else {
        return Err(Error::Unsupported(
            "bayes_posterior requires an inverse-gamma prior; use importance sampling otherwise"
                .into(),
        ));
    };
    let k = gram.n_train();
    if task.y_tr.len() != k {
        return Err(Error::dim(format!(
            "gram has {k} training rows, task has {}",
            task.y_tr.len()
        )));
    }
    if gram.n_test() == 0 {
        return Err(Error::invalid("bayes_posterior needs at least one test point"));
    }
    let mut joint = gram.joint();
    for i in 0..k {
        joint[(i, i)] += task.noise_variance;
    }
    let d = joint.nrows();
    let scale = joint * (b / a);
    let joint_mvt = MvtParams::new(2.0 * a, DVector::zeros(d), scale)?;
    joint_mvt.condition(&task.y_tr)
}

/// Full-training (NTK) limit: mean `ThetaBar_tetr ThetaBar_trtr^{-1} Y` and
/// the four-term covariance factor mixing NNGP and NTK blocks.
pub fn ntk_train_limit(
    task: &RegressionTask,
    gram_nngp: &GramPair,
    gram_ntk: &GramPair,
    prior: ScalePrior,
) -> Result<MixturePredictive> {
    require_kind(gram_nngp, GramKind::Nngp, "ntk_train_limit")?;
    require_kind(gram_ntk, GramKind::Ntk, "ntk_train_limit")?;
    if gram_nngp.n_train() != gram_ntk.n_train() || gram_nngp.n_test() != gram_ntk.n_test() {
        return Err(Error::dim("NNGP and NTK grams cover different inputs"));
    }
    let (alpha, cross) = train_solve(task, gram_ntk)?;
    let mean = gram_ntk.tetr() * &alpha;
    // B = ThetaBar_tetr ThetaBar_trtr^{-1}  (transposed solve already in `cross`)
    let b_t = cross; // K x L, equals ThetaBar_trtr^{-1} ThetaBar_trte
    let kbar_tete = gram_nngp.tete();
    let kbar_tetr = gram_nngp.tetr();
    let kbar_trtr = gram_nngp.trtr();
    let middle = b_t.transpose() * kbar_trtr * &b_t;
    let cross_term = b_t.transpose() * kbar_tetr.transpose();
    let mut cov = kbar_tete + middle - &cross_term - cross_term.transpose();
    linalg::symmetrize(&mut cov);
    let psd_ref = psd_ref_of(kbar_tete);
    check_psd_with_floor(&cov, psd_ref, "ntk training covariance")?;
    MixturePredictive::build(mean, cov, prior, psd_ref)
}
