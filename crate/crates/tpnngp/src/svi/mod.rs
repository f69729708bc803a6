//! Stochastic variational inference with inducing points for categorical
//! likelihoods: SVGP and its scale-mixture extension SVTP.
//!
//! The variational family is whitened: with `L` the Cholesky factor of
//! `K_ZZ`, inducing values are `f_Z = L u` so the prior on `u` is standard
//! normal. SVGP uses `q(u) = N(mu_u, Sigma_u)`; SVTP augments it with an
//! inverse-gamma scale, `q(u | sigma^2) = N(mu_u, sigma^2 Sigma_u)`,
//! `q(sigma^2) = InvGamma(a, b)`, against the prior
//! `N(0, sigma^2 I) InvGamma(alpha, beta)`.
//!
//! The ELBO is the minibatch Monte-Carlo estimate
//! `(N/B)(1/T) sum_{t,i} log p(y_i | f_i^(t)) - KL`, with function draws
//! reparameterized as
//!
//! ```text
//! f^(t) = P mu_u + sigma_t (P Sigma_u^{1/2} zeta_t + L_B xi_t),   P = A L,
//! ```
//!
//! where `A = K_XZ K_ZZ^{-1}`, `L_B L_B^T = K_XX - A K_ZX`, `sigma_t = 1` for
//! SVGP and `sigma_t = sqrt(b / g_t)`, `g_t ~ Gamma(a, 1)` for SVTP — so the
//! marginal of `f^(t)` is exactly the Appendix-style Gaussian or `MVT(2a, ...)`
//! likelihood distribution. Gradients with respect to `(mu_u, Sigma_u, a, b)`
//! are analytic; the inverse-gamma draw uses implicit reparameterization
//! through the inverse CDF so the `a`-gradient stays score-function-free.

mod fit;

pub use fit::{fit, kmeans_inducing, predict_with_kernel, FitConfig, TraceRow};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg;
use crate::special::{digamma, gamma_lr, ln_gamma, trigamma};

/// Which variational model is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SviModel {
    Svgp,
    Svtp,
}

/// Whitened variational parameters for one output class.
#[derive(Debug, Clone)]
pub struct Head {
    /// Whitened mean of the inducing values.
    pub mu_u: DVector<f64>,
    /// Lower-triangular covariance factor with positive diagonal.
    pub sigma_u: DMatrix<f64>,
}

impl Head {
    pub fn identity(m: usize) -> Self {
        Head {
            mu_u: DVector::zeros(m),
            sigma_u: DMatrix::identity(m, m),
        }
    }
}

/// Inverse-gamma scale posterior `(a, b)` along with its prior `(alpha, beta)`.
#[derive(Debug, Clone, Copy)]
pub struct ScalePosterior {
    pub a: f64,
    pub b: f64,
    pub prior_a: f64,
    pub prior_b: f64,
}

/// The trainable state: inducing inputs, one head per class, and the scale
/// posterior for SVTP.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub inducing: DMatrix<f64>,
    pub heads: Vec<Head>,
    pub scale: Option<ScalePosterior>,
}

impl VariationalState {
    pub fn n_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.heads.len()
    }
}

/// One ELBO evaluation: `total = likelihood_term - kl_term`.
#[derive(Debug, Clone, Copy)]
pub struct ElboEstimate {
    pub likelihood_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub n_mc: usize,
}

/// Kernel blocks against the current inducing set: `(Z,Z)`, `(X,Z)`, `(X,X)`.
#[derive(Debug, Clone)]
pub struct GramPieces {
    pub k_zz: DMatrix<f64>,
    pub k_xz: DMatrix<f64>,
    pub k_xx: DMatrix<f64>,
}

/// `KL(N(mu_u, Sigma_u) || N(0, I))` for the whitened inducing values:
/// `(|mu|^2 + tr Sigma - M - log det Sigma) / 2`.
pub fn kl_gaussian_whitened(mu_u: &DVector<f64>, sigma_u: &DMatrix<f64>) -> f64 {
    let m = mu_u.len() as f64;
    let trace: f64 = sigma_u.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..mu_u.len()).map(|j| sigma_u[(j, j)].ln()).sum::<f64>() * 2.0;
    0.5 * (mu_u.norm_squared() + trace - m - log_det)
}

/// Gaussian part of the normal–inverse-gamma KL under whitening (`K = I`):
/// `a/b` replaces the unit precision in the quadratic term because the prior
/// and posterior share the random scale.
fn kl_gauss_scaled(mu_u: &DVector<f64>, sigma_u: &DMatrix<f64>, a: f64, b: f64) -> f64 {
    let m = mu_u.len() as f64;
    let trace: f64 = sigma_u.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..mu_u.len()).map(|j| sigma_u[(j, j)].ln()).sum::<f64>() * 2.0;
    0.5 * (a / b) * mu_u.norm_squared() + 0.5 * trace - 0.5 * log_det - 0.5 * m
}

/// `KL(InvGamma(a, b) || InvGamma(alpha, beta))`.
fn kl_inv_gamma(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (b / beta).ln() - ln_gamma(a) + ln_gamma(alpha) + (a - alpha) * digamma(a)
        + (beta - b) * (a / b)
}

/// Joint KL between `N(u; mu_u, sigma^2 Sigma_u) InvGamma(sigma^2; a, b)` and
/// the whitened prior `N(u; 0, sigma^2 I) InvGamma(sigma^2; alpha, beta)`.
pub fn kl_normal_invgamma(
    mu_u: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
) -> f64 {
    kl_gauss_scaled(mu_u, sigma_u, a, b) + kl_inv_gamma(a, b, alpha, beta)
}

/// Monte-Carlo draws shared across an ELBO evaluation, kept explicit so that
/// gradient checks can reuse common random numbers.
#[derive(Debug, Clone)]
pub struct McDraws {
    /// `[t][class]` whitened-head noise, length M.
    pub zeta: Vec<Vec<DVector<f64>>>,
    /// `[t][class]` residual-noise vectors, length B.
    pub xi: Vec<Vec<DVector<f64>>>,
    /// `[t]` uniforms feeding the inverse-gamma draw (SVTP only).
    pub scale_u: Vec<f64>,
}

impl McDraws {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        n_mc: usize,
        n_classes: usize,
        n_inducing: usize,
        batch: usize,
    ) -> Self {
        let mut zeta = Vec::with_capacity(n_mc);
        let mut xi = Vec::with_capacity(n_mc);
        let mut scale_u = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            let mut zc = Vec::with_capacity(n_classes);
            let mut xc = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                zc.push(DVector::from_fn(n_inducing, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                }));
                xc.push(DVector::from_fn(batch, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                }));
            }
            zeta.push(zc);
            xi.push(xc);
            scale_u.push(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12));
        }
        McDraws { zeta, xi, scale_u }
    }
}

/// Gradients of the ELBO with respect to the variational parameters.
#[derive(Debug, Clone)]
pub struct ElboGrads {
    pub d_mu: Vec<DVector<f64>>,
    /// Lower-triangular gradients w.r.t. the entries of `sigma_u`.
    pub d_sigma: Vec<DMatrix<f64>>,
    pub d_a: f64,
    pub d_b: f64,
}

/// Inverse-gamma draw through the Gamma inverse CDF, with the implicit
/// reparameterization derivative `dg/da = -(dP/da) / pdf(g)`.
fn gamma_draw_with_grad(a: f64, u: f64) -> Result<(f64, f64)> {
    let gamma = statrs::distribution::Gamma::new(a, 1.0)
        .map_err(|e| Error::invalid(format!("gamma shape {a}: {e}")))?;
    let g = gamma.inverse_cdf(u);
    if !g.is_finite() || g <= 0.0 {
        return Err(Error::invalid(format!("gamma inverse cdf returned {g}")));
    }
    let h = 1e-5 * a.max(1.0);
    let dp_da = (gamma_lr(a + h, g) - gamma_lr(a - h, g)) / (2.0 * h);
    let pdf = gamma.pdf(g);
    Ok((g, -dp_da / pdf.max(1e-300)))
}

struct Projection {
    /// `P = A L`.
    p: DMatrix<f64>,
    /// Cholesky factor of the residual covariance `K_XX - A K_ZX`.
    l_b: DMatrix<f64>,
}

fn project(pieces: &GramPieces) -> Result<Projection> {
    linalg::check_symmetric(&pieces.k_zz, "K_ZZ")?;
    let (chol_zz, _) = linalg::cholesky_with_jitter(&pieces.k_zz, "K_ZZ")?;
    let l = chol_zz.l();
    let mut a_t = pieces.k_xz.transpose();
    chol_zz.solve_mut(&mut a_t); // a_t = K_ZZ^{-1} K_ZX
    let p = (l.transpose() * &a_t).transpose(); // A L = (L^T K_ZZ^{-1} K_ZX)^T
    let mut b_b = &pieces.k_xx - &pieces.k_xz * &a_t;
    linalg::symmetrize(&mut b_b);
    let (chol_b, _) = linalg::cholesky_with_jitter(&b_b, "residual covariance")?;
    Ok(Projection {
        p,
        l_b: chol_b.l_dirty().lower_triangle(),
    })
}

/// Evaluate the ELBO on a minibatch with fresh Monte-Carlo draws.
#[allow(clippy::too_many_arguments)]
pub fn elbo<R: Rng + ?Sized>(
    state: &VariationalState,
    y_batch: &[usize],
    pieces: &GramPieces,
    total_n: usize,
    n_mc: usize,
    rng: &mut R,
    model: SviModel,
) -> Result<ElboEstimate> {
    let draws = McDraws::sample(rng, n_mc, state.n_classes(), state.n_inducing(), y_batch.len());
    elbo_with_grads(state, y_batch, pieces, total_n, &draws, model).map(|(e, _)| e)
}

/// ELBO with analytic gradients under fixed Monte-Carlo draws.
pub fn elbo_with_grads(
    state: &VariationalState,
    y_batch: &[usize],
    pieces: &GramPieces,
    total_n: usize,
    draws: &McDraws,
    model: SviModel,
) -> Result<(ElboEstimate, ElboGrads)> {
    let b = y_batch.len();
    if b == 0 {
        return Err(Error::invalid("minibatch must be non-empty"));
    }
    if pieces.k_xz.nrows() != b || pieces.k_xx.nrows() != b {
        return Err(Error::dim("gram pieces disagree with batch size"));
    }
    let c = state.n_classes();
    if y_batch.iter().any(|&y| y >= c) {
        return Err(Error::invalid("label out of class range"));
    }
    let m = state.n_inducing();
    let t_mc = draws.zeta.len();
    if t_mc == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    let proj = project(pieces)?;
    let scale = match (model, state.scale.as_ref()) {
        (SviModel::Svtp, Some(s)) => Some(*s),
        (SviModel::Svtp, None) => {
            return Err(Error::invalid("SVTP requires a scale posterior in the state"))
        }
        (SviModel::Svgp, _) => None,
    };

    let means: Vec<DVector<f64>> = state.heads.iter().map(|h| &proj.p * &h.mu_u).collect();

    let rescale = total_n as f64 / b as f64;
    let mut lik = 0.0;
    let mut d_mu = vec![DVector::zeros(m); c];
    let mut d_sigma = vec![DMatrix::zeros(m, m); c];
    let mut d_a = 0.0;
    let mut d_b = 0.0;

    for t in 0..t_mc {
        // Per-sample scale and its derivative chain for SVTP.
        let (sigma_t, d_sigma_t_da, d_sigma_t_db) = match scale {
            None => (1.0, 0.0, 0.0),
            Some(s) => {
                let (g, dg_da) = gamma_draw_with_grad(s.a, draws.scale_u[t])?;
                let sigma_t = (s.b / g).sqrt();
                // d sigma_t / da = -(sigma_t / (2g)) dg/da, d/db = sigma_t / (2b)
                (sigma_t, -(sigma_t / (2.0 * g)) * dg_da, sigma_t / (2.0 * s.b))
            }
        };

        // Stochastic parts w^c and the realized logits.
        let mut w_parts = Vec::with_capacity(c);
        let mut logits = DMatrix::zeros(b, c);
        for (ci, head) in state.heads.iter().enumerate() {
            let w = &proj.p * (&head.sigma_u * &draws.zeta[t][ci]) + &proj.l_b * &draws.xi[t][ci];
            for i in 0..b {
                logits[(i, ci)] = means[ci][i] + sigma_t * w[i];
            }
            w_parts.push(w);
        }

        // Softmax log-likelihood and dL/df.
        let mut grad_f = DMatrix::zeros(b, c);
        for i in 0..b {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lik += logits[(i, y_batch[i])] - lse;
            for ci in 0..c {
                let p = (logits[(i, ci)] - lse).exp();
                grad_f[(i, ci)] = (if ci == y_batch[i] { 1.0 } else { 0.0 }) - p;
            }
        }

        // Chain into the variational parameters.
        let factor = rescale / t_mc as f64;
        for ci in 0..c {
            let g_col = grad_f.column(ci).into_owned();
            let back = proj.p.transpose() * &g_col; // M-vector
            d_mu[ci].axpy(factor, &back, 1.0);
            // d/d sigma_{jk} = sigma_t * back_j * zeta_k (lower triangle)
            for j in 0..m {
                for k in 0..=j {
                    d_sigma[ci][(j, k)] += factor * sigma_t * back[j] * draws.zeta[t][ci][k];
                }
            }
            if scale.is_some() {
                let gw = g_col.dot(&w_parts[ci]);
                d_a += factor * d_sigma_t_da * gw;
                d_b += factor * d_sigma_t_db * gw;
            }
        }
    }
    let likelihood_term = rescale * lik / t_mc as f64;

    // KL term and its gradients.
    let mut kl = 0.0;
    match scale {
        None => {
            for (ci, head) in state.heads.iter().enumerate() {
                kl += kl_gaussian_whitened(&head.mu_u, &head.sigma_u);
                d_mu[ci] -= &head.mu_u;
                for j in 0..m {
                    for k in 0..=j {
                        d_sigma[ci][(j, k)] -= head.sigma_u[(j, k)];
                    }
                    d_sigma[ci][(j, j)] += 1.0 / head.sigma_u[(j, j)];
                }
            }
        }
        Some(s) => {
            let mut mu_sq = 0.0;
            for (ci, head) in state.heads.iter().enumerate() {
                kl += kl_gauss_scaled(&head.mu_u, &head.sigma_u, s.a, s.b);
                mu_sq += head.mu_u.norm_squared();
                d_mu[ci].axpy(-(s.a / s.b), &head.mu_u, 1.0);
                for j in 0..m {
                    for k in 0..=j {
                        d_sigma[ci][(j, k)] -= head.sigma_u[(j, k)];
                    }
                    d_sigma[ci][(j, j)] += 1.0 / head.sigma_u[(j, j)];
                }
            }
            kl += kl_inv_gamma(s.a, s.b, s.prior_a, s.prior_b);
            let dkl_da =
                mu_sq / (2.0 * s.b) + (s.a - s.prior_a) * trigamma(s.a) + (s.prior_b - s.b) / s.b;
            let dkl_db = -s.a * mu_sq / (2.0 * s.b * s.b) + s.prior_a / s.b
                - s.a * s.prior_b / (s.b * s.b);
            d_a -= dkl_da;
            d_b -= dkl_db;
        }
    }

    let estimate = ElboEstimate {
        likelihood_term,
        kl_term: kl,
        total: likelihood_term - kl,
        n_mc: t_mc,
    };
    Ok((
        estimate,
        ElboGrads {
            d_mu,
            d_sigma,
            d_a,
            d_b,
        },
    ))
}

/// Per-class predictive marginals and class probabilities at a set of points.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `points x classes` predictive means.
    pub means: DMatrix<f64>,
    /// `points x classes` covariance factors (variance for SVGP; the MVT
    /// scale entry before the `b/a` multiplier for SVTP).
    pub var_factors: DMatrix<f64>,
    /// Degrees of freedom `2a` for SVTP.
    pub dof: Option<f64>,
    /// `b/a` multiplier for SVTP scale entries.
    pub scale_ratio: Option<f64>,
    /// `points x classes` Monte-Carlo softmax-averaged probabilities.
    pub probabilities: DMatrix<f64>,
}

/// Predictive distribution at new points given kernel pieces for
/// `(Z, Z)`, `(*, Z)` and `(*, *)`, with class probabilities averaged over
/// `n_mc` function samples.
pub fn predict<R: Rng + ?Sized>(
    state: &VariationalState,
    pieces: &GramPieces,
    model: SviModel,
    n_mc: usize,
    rng: &mut R,
) -> Result<Prediction> {
    let l_pts = pieces.k_xx.nrows();
    let c = state.n_classes();
    let proj = project(pieces)?;
    let scale = match (model, state.scale.as_ref()) {
        (SviModel::Svtp, Some(s)) => Some(*s),
        (SviModel::Svtp, None) => {
            return Err(Error::invalid("SVTP requires a scale posterior in the state"))
        }
        (SviModel::Svgp, _) => None,
    };

    let mut means = DMatrix::zeros(l_pts, c);
    let mut var_factors = DMatrix::zeros(l_pts, c);
    for (ci, head) in state.heads.iter().enumerate() {
        let mean = &proj.p * &head.mu_u;
        let ps = &proj.p * &head.sigma_u; // rows give head-induced variance
        for i in 0..l_pts {
            means[(i, ci)] = mean[i];
            let head_var = ps.row(i).norm_squared();
            let resid_var = proj.l_b.row(i).norm_squared();
            var_factors[(i, ci)] = head_var + resid_var;
        }
    }

    // MC softmax averaging over independent per-class marginal draws.
    let mut probabilities = DMatrix::zeros(l_pts, c);
    let mut logits = vec![0.0f64; c];
    for i in 0..l_pts {
        for _ in 0..n_mc.max(1) {
            for (ci, logit) in logits.iter_mut().enumerate() {
                let sigma2 = match scale {
                    None => 1.0,
                    Some(s) => {
                        // sigma^2 ~ InvGamma(a, b) marginalizes the draw to MVT(2a).
                        let gamma = statrs::distribution::Gamma::new(s.a, 1.0)
                            .map_err(|e| Error::invalid(format!("gamma: {e}")))?;
                        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
                        s.b / gamma.inverse_cdf(u)
                    }
                };
                let z: f64 = rng.sample(StandardNormal);
                *logit = means[(i, ci)] + (sigma2 * var_factors[(i, ci)]).sqrt() * z;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for ci in 0..c {
                probabilities[(i, ci)] += (logits[ci] - max).exp() / denom;
            }
        }
        for ci in 0..c {
            probabilities[(i, ci)] /= n_mc.max(1) as f64;
        }
    }

    Ok(Prediction {
        means,
        var_factors,
        dof: scale.map(|s| 2.0 * s.a),
        scale_ratio: scale.map(|s| s.b / s.a),
        probabilities,
    })
}
