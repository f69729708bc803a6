//! Distributional identities between the two constructions of the same law:
//! inverse-gamma scale mixtures of Gaussians versus direct multivariate-t
//! sampling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tpnngp::dist::{scale_mixture_sample, MvtParams, ScalePrior};
use tpnngp::stats::{ks_two_sample, student_t_cdf};

#[test]
fn invgamma_mixture_equals_mvt_in_distribution() {
    // sigma^2 ~ InvGamma(a, b), x | sigma^2 ~ N(mu, sigma^2 Sigma)
    // has marginal MVT(2a, mu, (b/a) Sigma). Two-sample KS at 1%.
    let sigma = DMatrix::from_row_slice(2, 2, &[1.4, 0.5, 0.5, 0.9]);
    let mu = DVector::from_row_slice(&[0.3, -0.7]);
    let (a, b) = (2.0, 1.5);
    let n = 100_000;

    let prior = ScalePrior::inv_gamma(a, b).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mixture = scale_mixture_sample(&prior, &mu, &sigma, n, &mut rng).unwrap();

    let mvt = MvtParams::new(2.0 * a, mu, &sigma * (b / a)).unwrap();
    let direct = mvt.sample(n, &mut rng).unwrap();

    for coord in 0..2 {
        let xs: Vec<f64> = mixture.column(coord).iter().cloned().collect();
        let ys: Vec<f64> = direct.column(coord).iter().cloned().collect();
        let report = ks_two_sample(&xs, &ys);
        assert!(
            report.passes(0.01),
            "coordinate {coord}: D = {}, p = {}",
            report.statistic,
            report.p_value
        );
    }
}

#[test]
fn invgamma_mixture_marginal_matches_t_cdf() {
    // One-sample version against the analytic scaled-t CDF; statistic < 0.01
    // at n = 1e5.
    let sigma = DMatrix::from_row_slice(1, 1, &[2.0]);
    let mu = DVector::from_row_slice(&[0.5]);
    let (a, b) = (3.0, 2.0);
    let prior = ScalePrior::inv_gamma(a, b).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let samples = scale_mixture_sample(&prior, &mu, &sigma, 100_000, &mut rng).unwrap();
    let xs: Vec<f64> = samples.column(0).iter().cloned().collect();
    let report = tpnngp::stats::ks_one_sample(&xs, |x| {
        student_t_cdf(x, 2.0 * a, 0.5, (b / a) * 2.0)
    });
    assert!(report.statistic < 0.01, "D = {}", report.statistic);
}

#[test]
fn point_mass_mixture_differs_from_heavy_tails() {
    // Sanity of the harness: a mismatched pair must fail the same test.
    let sigma = DMatrix::identity(1, 1);
    let mu = DVector::zeros(1);
    let n = 100_000;
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let heavy = scale_mixture_sample(
        &ScalePrior::inv_gamma(1.0, 1.0).unwrap(),
        &mu,
        &sigma,
        n,
        &mut rng,
    )
    .unwrap();
    let light = scale_mixture_sample(
        &ScalePrior::point_mass(1.0).unwrap(),
        &mu,
        &sigma,
        n,
        &mut rng,
    )
    .unwrap();
    let xs: Vec<f64> = heavy.column(0).iter().cloned().collect();
    let ys: Vec<f64> = light.column(0).iter().cloned().collect();
    assert!(!ks_two_sample(&xs, &ys).passes(0.01));
}
