//! Quadrature and Monte-Carlo oracles for the closed-form kernel recursions.

mod common;

use common::{
    gaussian_pair_expectation_gh, relu_pair_expectation_quadrature, simpson,
    step_pair_expectation_quadrature,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tpnngp::finitenet::sample_feature_gram;
use tpnngp::kernels::{nngp_gram, Activation, NetworkConfig};

const CORRELATIONS: [f64; 5] = [-0.99, -0.5, 0.0, 0.5, 0.99];
const VARIANCES: [f64; 3] = [0.3, 1.0, 2.5];

#[test]
fn erf_pair_expectation_matches_gauss_hermite() {
    for &c11 in &VARIANCES {
        for &c22 in &VARIANCES {
            for &rho in &CORRELATIONS {
                let c12 = rho * (c11 * c22).sqrt();
                let closed = Activation::Erf.pair_expectation(c11, c22, c12, 0).unwrap();
                let quad = gaussian_pair_expectation_gh(
                    c11,
                    c22,
                    c12,
                    80,
                    statrs::function::erf::erf,
                    statrs::function::erf::erf,
                );
                assert!(
                    (closed - quad).abs() < 1e-6,
                    "erf c11={c11} c22={c22} rho={rho}: closed {closed} vs quad {quad}"
                );
            }
        }
    }
}

#[test]
fn erf_derivative_expectation_matches_gauss_hermite() {
    let dphi = |z: f64| std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp();
    for &c11 in &VARIANCES {
        for &c22 in &VARIANCES {
            for &rho in &CORRELATIONS {
                let c12 = rho * (c11 * c22).sqrt();
                let closed = Activation::Erf
                    .deriv_pair_expectation(c11, c22, c12, 0)
                    .unwrap();
                let quad = gaussian_pair_expectation_gh(c11, c22, c12, 80, dphi, dphi);
                assert!(
                    (closed - quad).abs() < 1e-6,
                    "erf' c11={c11} c22={c22} rho={rho}: closed {closed} vs quad {quad}"
                );
            }
        }
    }
}

#[test]
fn relu_pair_expectation_matches_quadrature() {
    for &c11 in &VARIANCES {
        for &c22 in &VARIANCES {
            for &rho in &CORRELATIONS {
                let c12 = rho * (c11 * c22).sqrt();
                let closed = Activation::Relu.pair_expectation(c11, c22, c12, 0).unwrap();
                let quad = relu_pair_expectation_quadrature(c11, c22, c12, 200);
                assert!(
                    (closed - quad).abs() < 1e-6,
                    "relu c11={c11} c22={c22} rho={rho}: closed {closed} vs quad {quad}"
                );
            }
        }
    }
}

#[test]
fn relu_derivative_expectation_matches_quadrature() {
    for &c11 in &VARIANCES {
        for &c22 in &VARIANCES {
            for &rho in &CORRELATIONS {
                let c12 = rho * (c11 * c22).sqrt();
                let closed = Activation::Relu
                    .deriv_pair_expectation(c11, c22, c12, 0)
                    .unwrap();
                let quad = step_pair_expectation_quadrature(c11, c22, c12, 200);
                assert!(
                    (closed - quad).abs() < 1e-6,
                    "step c11={c11} c22={c22} rho={rho}: closed {closed} vs quad {quad}"
                );
            }
        }
    }
}

/// Independent 1D-reduction route for the ReLU expectation: condition `v` on
/// `u` and use the Gaussian mean of a rectified variable,
/// `E[relu(m + s Z)] = m Phi(m/s) + s phi(m/s)`.
#[test]
fn relu_pair_expectation_matches_conditional_reduction() {
    let std_cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    let std_pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    for &(c11, c22, rho) in &[(1.7, 0.6, 0.99), (1.0, 1.0, -0.5), (2.5, 0.3, 0.5)] {
        let c12 = rho * (c11 * f64::max(c22, 0.0)).sqrt();
        let s2: f64 = c22 - c12 * c12 / c11;
        let s = s2.max(0.0).sqrt();
        let su = c11.sqrt();
        let integrand = |t: f64| {
            // u = su * t with standard-normal t restricted to t > 0
            let u = su * t;
            let m = c12 / c11 * u;
            let inner = if s > 0.0 {
                m * std_cdf(m / s) + s * std_pdf(m / s)
            } else {
                m.max(0.0)
            };
            u * inner * std_pdf(t)
        };
        let reduced = simpson(0.0, 12.0, 4000, integrand);
        let closed = Activation::Relu.pair_expectation(c11, c22, c12, 0).unwrap();
        assert!(
            (closed - reduced).abs() < 1e-8,
            "relu reduction: closed {closed} vs reduced {reduced}"
        );
    }
}

/// Full-network cross-check: run the layer recursion with quadrature-based
/// expectations and compare against `nngp_gram`.
#[test]
fn nngp_recursion_matches_quadrature_recursion() {
    for act in [Activation::Erf, Activation::Relu] {
        let cfg = NetworkConfig::new(3, act, 1.8, 0.2, 2).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.4, -1.0, 1.2, 0.3, -0.6, 0.9]);
        let lib = nngp_gram(&x, &DMatrix::zeros(0, 2), &cfg).unwrap();

        // Quadrature-driven recursion over the same joint gram.
        let quad_pair = |c11: f64, c22: f64, c12: f64| -> f64 {
            match act {
                Activation::Erf => gaussian_pair_expectation_gh(
                    c11,
                    c22,
                    c12,
                    80,
                    statrs::function::erf::erf,
                    statrs::function::erf::erf,
                ),
                Activation::Relu => relu_pair_expectation_quadrature(c11, c22, c12, 200),
            }
        };
        let m = 3;
        let mut cov = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                cov[(i, j)] = cfg.weight_variance * x.row(i).dot(&x.row(j)) / 2.0
                    + cfg.bias_variance;
            }
        }
        for _layer in 1..cfg.depth {
            let mut next = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    next[(i, j)] = cfg.weight_variance
                        * quad_pair(cov[(i, i)], cov[(j, j)], cov[(i, j)])
                        + cfg.bias_variance;
                }
            }
            cov = next;
        }
        for i in 0..m {
            for j in 0..m {
                let kbar = quad_pair(cov[(i, i)], cov[(j, j)], cov[(i, j)]);
                assert!(
                    (kbar - lib.trtr()[(i, j)]).abs() < 1e-5,
                    "{act:?} entry ({i},{j}): quad {kbar} vs lib {}",
                    lib.trtr()[(i, j)]
                );
            }
        }
    }
}

/// Monte-Carlo oracle at the paper's experimental configuration: the variance
/// of the penultimate features of finite networks of width 8192.
#[test]
fn kernel_at_origin_matches_finite_width_feature_variance() {
    let cfg = NetworkConfig::new(3, Activation::Erf, 8.0, 0.05 * 0.05, 1).unwrap();
    let x = DMatrix::from_row_slice(1, 1, &[0.0]);
    let kbar = nngp_gram(&x, &DMatrix::zeros(0, 1), &cfg).unwrap().trtr()[(0, 0)];

    let mut rng = ChaCha12Rng::seed_from_u64(20240);
    let n_nets = 200;
    let mut acc = 0.0;
    for _ in 0..n_nets {
        acc += sample_feature_gram(&cfg, 8192, &x, &mut rng).unwrap()[(0, 0)];
    }
    let mc = acc / n_nets as f64;
    assert!(
        (mc - kbar).abs() < 0.02 * kbar,
        "MC {mc} vs closed form {kbar}"
    );
}
