//! Gradient and KL oracles for the variational machinery: analytic ELBO
//! gradients against central finite differences under common random numbers,
//! and closed-form KL terms against Monte-Carlo estimates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use tpnngp::svi::{
    elbo_with_grads, kl_gaussian_whitened, kl_normal_invgamma, GramPieces, Head, McDraws,
    ScalePosterior, SviModel, VariationalState,
};

fn toy_pieces(m: usize, b: usize) -> GramPieces {
    let z: Vec<f64> = (0..m).map(|i| i as f64 / m as f64).collect();
    let x: Vec<f64> = (0..b).map(|i| 0.03 + i as f64 / b as f64).collect();
    let k = |p: f64, q: f64| (-(p - q) * (p - q) / 0.15).exp() + if p == q { 1e-8 } else { 0.0 };
    GramPieces {
        k_zz: DMatrix::from_fn(m, m, |i, j| k(z[i], z[j])),
        k_xz: DMatrix::from_fn(b, m, |i, j| k(x[i], z[j])),
        k_xx: DMatrix::from_fn(b, b, |i, j| k(x[i], x[j])),
    }
}

fn random_state(m: usize, classes: usize, svtp: bool, seed: u64) -> VariationalState {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut heads = Vec::new();
    for _ in 0..classes {
        let mut h = Head::identity(m);
        for j in 0..m {
            h.mu_u[j] = 0.6 * (rng.random::<f64>() - 0.5);
            for k in 0..j {
                h.sigma_u[(j, k)] = 0.25 * (rng.random::<f64>() - 0.5);
            }
            h.sigma_u[(j, j)] = 0.7 + 0.6 * rng.random::<f64>();
        }
        heads.push(h);
    }
    VariationalState {
        inducing: DMatrix::zeros(m, 1),
        heads,
        scale: svtp.then(|| ScalePosterior {
            a: 1.6 + rng.random::<f64>(),
            b: 1.2 + rng.random::<f64>(),
            prior_a: 2.0,
            prior_b: 2.0,
        }),
    }
}

/// Analytic gradient vs central finite differences (relative error < 1e-3)
/// for mu_u, the sigma_u entries, and the scale parameters, all under common
/// random numbers.
#[test]
fn analytic_elbo_gradients_match_finite_differences() {
    let (m, b, classes) = (4usize, 6usize, 2usize);
    let pieces = toy_pieces(m, b);
    let y: Vec<usize> = (0..b).map(|i| i % classes).collect();
    let draws = McDraws::sample(&mut ChaCha12Rng::seed_from_u64(77), 24, classes, m, b);
    for (model, svtp) in [(SviModel::Svgp, false), (SviModel::Svtp, true)] {
        let state = random_state(m, classes, svtp, 13);
        let (_, grads) = elbo_with_grads(&state, &y, &pieces, 60, &draws, model).unwrap();
        let eval = |s: &VariationalState| -> f64 {
            elbo_with_grads(s, &y, &pieces, 60, &draws, model).unwrap().0.total
        };
        let check = |name: String, analytic: f64, fd: f64| {
            let denom = fd.abs().max(1e-4);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "{model:?} {name}: analytic {analytic} vs fd {fd}"
            );
        };

        let h = 1e-5;
        for ci in 0..classes {
            for j in 0..m {
                let mut sp = state.clone();
                sp.heads[ci].mu_u[j] += h;
                let mut sm = state.clone();
                sm.heads[ci].mu_u[j] -= h;
                check(
                    format!("mu[{ci}][{j}]"),
                    grads.d_mu[ci][j],
                    (eval(&sp) - eval(&sm)) / (2.0 * h),
                );
            }
            for j in 0..m {
                for k in 0..=j {
                    let mut sp = state.clone();
                    sp.heads[ci].sigma_u[(j, k)] += h;
                    let mut sm = state.clone();
                    sm.heads[ci].sigma_u[(j, k)] -= h;
                    check(
                        format!("sigma[{ci}][{j},{k}]"),
                        grads.d_sigma[ci][(j, k)],
                        (eval(&sp) - eval(&sm)) / (2.0 * h),
                    );
                }
            }
        }
        if svtp {
            let mut sp = state.clone();
            sp.scale.as_mut().unwrap().a += h;
            let mut sm = state.clone();
            sm.scale.as_mut().unwrap().a -= h;
            check("a".into(), grads.d_a, (eval(&sp) - eval(&sm)) / (2.0 * h));
            let mut sp = state.clone();
            sp.scale.as_mut().unwrap().b += h;
            let mut sm = state.clone();
            sm.scale.as_mut().unwrap().b -= h;
            check("b".into(), grads.d_b, (eval(&sp) - eval(&sm)) / (2.0 * h));
        }
    }
}

fn mc_kl_normal_invgamma(
    mu: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let m = mu.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gamma = Gamma::new(a, 1.0 / b).unwrap();
    let cov = sigma_u * sigma_u.transpose();
    let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
    let log_det: f64 = 2.0 * (0..m).map(|j| sigma_u[(j, j)].ln()).sum::<f64>();
    let inv = cov.try_inverse().unwrap();
    let ln_ig = |s2: f64, sh: f64, sc: f64| {
        sh * sc.ln() - statrs::function::gamma::ln_gamma(sh) - (sh + 1.0) * s2.ln() - sc / s2
    };
    let half_m_ln2pi = 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..n {
        let s2 = 1.0 / gamma.sample(&mut rng);
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = mu + chol.l() * &z * s2.sqrt();
        // log q(u, s2)
        let diff = &u - mu;
        let quad_q = (&inv * &diff).dot(&diff) / s2;
        let log_q = -half_m_ln2pi - 0.5 * (m as f64) * s2.ln() - 0.5 * log_det - 0.5 * quad_q
            + ln_ig(s2, a, b);
        // log p(u, s2) with identity covariance
        let quad_p = u.norm_squared() / s2;
        let log_p =
            -half_m_ln2pi - 0.5 * (m as f64) * s2.ln() - 0.5 * quad_p + ln_ig(s2, alpha, beta);
        let v = log_q - log_p;
        acc += v;
        acc2 += v * v;
    }
    let mean = acc / n as f64;
    let var = acc2 / n as f64 - mean * mean;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn normal_invgamma_kl_matches_monte_carlo() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for trial in 0..5 {
        let m = 3;
        let mut mu = DVector::zeros(m);
        let mut sigma = DMatrix::identity(m, m);
        for j in 0..m {
            mu[j] = rng.random::<f64>() - 0.5;
            for k in 0..j {
                sigma[(j, k)] = 0.3 * (rng.random::<f64>() - 0.5);
            }
            sigma[(j, j)] = 0.6 + 0.8 * rng.random::<f64>();
        }
        let (a, b) = (1.5 + rng.random::<f64>(), 1.0 + rng.random::<f64>());
        let (alpha, beta) = (2.0, 2.0);
        let closed = kl_normal_invgamma(&mu, &sigma, a, b, alpha, beta);
        let (mc, se) = mc_kl_normal_invgamma(&mu, &sigma, a, b, alpha, beta, 1_000_000, 100 + trial);
        assert!(
            (closed - mc).abs() < 3.0 * se,
            "trial {trial}: closed {closed} vs MC {mc} +- {se}"
        );
    }
}

#[test]
fn gaussian_whitened_kl_matches_monte_carlo() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let m = 3;
    let mut mu = DVector::zeros(m);
    let mut sigma = DMatrix::identity(m, m);
    for j in 0..m {
        mu[j] = rng.random::<f64>() - 0.5;
        for k in 0..j {
            sigma[(j, k)] = 0.4 * (rng.random::<f64>() - 0.5);
        }
        sigma[(j, j)] = 0.5 + rng.random::<f64>();
    }
    let closed = kl_gaussian_whitened(&mu, &sigma);
    // MC of E_q[log q - log p] with q = N(mu, Sigma), p = N(0, I).
    let cov = &sigma * sigma.transpose();
    let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
    let inv = cov.clone().try_inverse().unwrap();
    let log_det = cov.determinant().ln();
    let n = 1_000_000;
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    for _ in 0..n {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &mu + chol.l() * z;
        let diff = &u - &mu;
        let log_q = -0.5 * log_det - 0.5 * (&inv * &diff).dot(&diff);
        let log_p = -0.5 * u.norm_squared();
        let v = log_q - log_p;
        acc += v;
        acc2 += v * v;
    }
    let mc = acc / n as f64;
    let se = ((acc2 / n as f64 - mc * mc) / n as f64).sqrt();
    assert!(
        (closed - mc).abs() < 3.0 * se,
        "closed {closed} vs MC {mc} +- {se}"
    );
}

/// Whitened and unwhitened parameterizations define the same q(f_Z) law.
#[test]
fn whitened_parameterization_matches_direct_covariance() {
    let m = 4;
    let pieces = toy_pieces(m, 2);
    let chol = nalgebra::Cholesky::new(pieces.k_zz.clone()).unwrap();
    let l = chol.l();
    let state = random_state(m, 1, false, 31);
    let head = &state.heads[0];

    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let n = 200_000;
    let mut mean_acc = DVector::zeros(m);
    let mut cov_acc = DMatrix::zeros(m, m);
    for _ in 0..n {
        let zeta = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &head.mu_u + &head.sigma_u * zeta;
        let f_z = &l * u;
        mean_acc += &f_z;
        cov_acc += &f_z * f_z.transpose();
    }
    let mean = mean_acc / n as f64;
    let cov = cov_acc / n as f64 - &mean * mean.transpose();

    let direct_mean = &l * &head.mu_u;
    let sigma_full = &head.sigma_u * head.sigma_u.transpose();
    let direct_cov = &l * sigma_full * l.transpose();
    for i in 0..m {
        assert!((mean[i] - direct_mean[i]).abs() < 0.02);
        for j in 0..m {
            assert!(
                (cov[(i, j)] - direct_cov[(i, j)]).abs() < 0.03 * direct_cov[(i, i)].max(0.1),
                "cov ({i},{j}): {} vs {}",
                cov[(i, j)],
                direct_cov[(i, j)]
            );
        }
    }
}

/// The SVTP predictive carries 2a degrees of freedom, structurally.
#[test]
fn svtp_predictive_dof_is_twice_shape() {
    let m = 4;
    let pieces = toy_pieces(m, 3);
    for a in [0.7, 2.0, 9.5] {
        let mut state = random_state(m, 2, true, 55);
        state.scale.as_mut().unwrap().a = a;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let pred =
            tpnngp::svi::predict(&state, &pieces, SviModel::Svtp, 8, &mut rng).unwrap();
        assert_eq!(pred.dof, Some(2.0 * a));
    }
}

/// Training trace property: windowed ELBO is non-decreasing for at least 90%
/// of windows on a separable toy problem.
#[test]
fn smoothed_elbo_rises_during_training() {
    use tpnngp::kernels::{Activation, NetworkConfig};
    use tpnngp::svi::{fit, FitConfig};

    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let n = 120;
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let c = if class == 0 { -1.3 } else { 1.3 };
        x[(i, 0)] = c + 0.5 * rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = -c + 0.5 * rng.sample::<f64, _>(StandardNormal);
        y.push(class);
    }
    let net_cfg = NetworkConfig::new(2, Activation::Erf, 2.0, 0.1, 2).unwrap();
    let cfg = FitConfig {
        model: SviModel::Svtp,
        n_inducing: 8,
        batch_size: 120,
        n_mc: 16,
        steps: 240,
        learning_rate: 3e-2,
        seed: 11,
        scale_prior: (2.0, 2.0),
        train_inducing: false,
        train_scale: true,
    };
    let (_, trace) = fit(&x, &y, 2, &net_cfg, &cfg).unwrap();
    let window = 50;
    let smoothed: Vec<f64> = (0..=trace.len() - window)
        .map(|i| trace[i..i + window].iter().map(|r| r.elbo).sum::<f64>() / window as f64)
        .collect();
    let rises = smoothed.windows(2).filter(|w| w[1] >= w[0] - 1e-9).count();
    let frac = rises as f64 / (smoothed.len() - 1) as f64;
    assert!(frac >= 0.9, "rising fraction {frac}");
    assert!(smoothed.last().unwrap() > smoothed.first().unwrap());
}
