//! Cross-oracles between the exact Student's t posterior and the
//! importance-sampling path, plus the classical point-mass reductions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tpnngp::dist::ScalePrior;
use tpnngp::impsampling;
use tpnngp::kernels::{nngp_gram, Activation, GramPair, NetworkConfig};
use tpnngp::posterior::{bayes_posterior, readout_train_limit, RegressionTask};

/// A synthetic task whose targets are drawn from the model itself (a unit
/// scale draw of the noisy NNGP), so the importance-sampling proposal sees a
/// posterior in its effective range.
fn synth_task(k: usize, l: usize, seed: u64) -> (RegressionTask, GramPair) {
    let cfg = NetworkConfig::new(2, Activation::Erf, 3.0, 0.2, 1).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x_tr = DMatrix::from_fn(k, 1, |i, _| {
        -2.0 + 4.0 * i as f64 / (k - 1) as f64 + 0.05 * (rng.random::<f64>() - 0.5)
    });
    let x_te = DMatrix::from_fn(l, 1, |i, _| -1.5 + 3.0 * i as f64 / (l - 1) as f64);
    let gram = nngp_gram(&x_tr, &x_te, &cfg).unwrap();
    let noise = 1e-4;
    let mut noisy = gram.trtr().clone();
    for i in 0..k {
        noisy[(i, i)] += noise;
    }
    let chol = nalgebra::Cholesky::new(noisy).unwrap();
    let z = DVector::from_fn(k, |_, _| {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
    });
    let y_tr = chol.l() * z;
    let task = RegressionTask::new(x_tr, y_tr, x_te, noise).unwrap();
    (task, gram)
}

#[test]
fn importance_sampling_recovers_exact_posterior_moments() {
    let (task, gram) = synth_task(20, 5, 11);
    let prior = ScalePrior::inv_gamma(2.0, 2.0).unwrap();
    let exact = bayes_posterior(&task, &gram, prior).unwrap();
    let nu = exact.dof();

    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let ens = impsampling::predict(&task, &gram, &prior, 100_000, &mut rng).unwrap();
    for j in 0..5 {
        let mean = impsampling::expectation(&ens, |y| y[j]);
        let var = impsampling::expectation(&ens, |y| (y[j] - mean) * (y[j] - mean));
        let exact_mean = exact.location()[j];
        let exact_var = nu / (nu - 2.0) * exact.scale()[(j, j)];
        assert!(
            (mean - exact_mean).abs() < 0.01 * exact_mean.abs().max(0.2),
            "mean at {j}: IS {mean} vs exact {exact_mean}"
        );
        assert!(
            (var - exact_var).abs() < 0.01 * exact_var,
            "variance at {j}: IS {var} vs exact {exact_var} (ess {})",
            ens.ess
        );
    }
}

#[test]
fn halfspace_indicator_through_posterior_median_gives_half() {
    let (task, gram) = synth_task(12, 3, 3);
    let prior = ScalePrior::inv_gamma(2.0, 2.0).unwrap();
    let exact = bayes_posterior(&task, &gram, prior).unwrap();
    let median0 = exact.location()[0]; // the t marginal is symmetric about its location
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let ens = impsampling::predict(&task, &gram, &prior, 100_000, &mut rng).unwrap();
    let frac = impsampling::expectation(&ens, |y| if y[0] > median0 { 1.0 } else { 0.0 });
    assert!((frac - 0.5).abs() < 0.01, "indicator mass {frac}");
}

#[test]
fn point_mass_readout_limit_is_classical_nngp_posterior() {
    let (task, gram) = synth_task(10, 4, 29);
    let s = 1.7;
    let pred = readout_train_limit(&task, &gram, ScalePrior::point_mass(s).unwrap()).unwrap();
    // Classical formulas computed directly with a dense inverse.
    let mut noisy = gram.trtr().clone();
    for i in 0..10 {
        noisy[(i, i)] += task.noise_variance;
    }
    let inv = noisy.try_inverse().unwrap();
    let mean = gram.tetr() * &inv * &task.y_tr;
    let cov = gram.tete() - gram.tetr() * &inv * gram.tetr().transpose();
    for i in 0..4 {
        assert!((pred.conditional_mean[i] - mean[i]).abs() < 1e-9);
        for j in 0..4 {
            // the mixture covariance is s * cov with a point mass at s
            let direct = s * cov[(i, j)];
            let mixture = s * pred.conditional_cov_factor[(i, j)];
            assert!((mixture - direct).abs() < 1e-9);
        }
    }
}

#[test]
fn predictive_nll_improves_with_ensemble_size() {
    // Median over 20 seeds of held-out NLL is non-increasing in N.
    let (task, gram) = synth_task(15, 4, 41);
    let prior = ScalePrior::inv_gamma(2.0, 2.0).unwrap();
    // Held-out targets: draw from the exact posterior predictive location
    // plus noise so the NLL is finite and stable.
    let exact = bayes_posterior(&task, &gram, prior).unwrap();
    let y_te: Vec<f64> = (0..4).map(|j| exact.location()[j] + 0.3).collect();

    let st = impsampling::precompute(&task, &gram).unwrap();
    let ns = [100usize, 1_000, 10_000, 100_000];
    let mut medians = Vec::new();
    for &n in &ns {
        let mut nlls: Vec<f64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
                let ens = impsampling::predict_with(&st, &prior, n, &mut rng).unwrap();
                let mut nll = 0.0;
                for (j, &y) in y_te.iter().enumerate() {
                    nll -= impsampling::log_predictive_1d(&st, &ens, j, y, 0.0);
                }
                nll / 4.0
            })
            .collect();
        nlls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(0.5 * (nlls[9] + nlls[10]));
    }
    // Exact posterior NLL is the large-N limit; medians should move toward it
    // monotonically (small slack for MC noise).
    for w in medians.windows(2) {
        assert!(
            w[1] <= w[0] + 5e-3,
            "median NLL not improving: {medians:?}"
        );
    }
}

#[test]
fn per_weight_cost_independent_of_training_size() {
    // Doubling the training set must not change the per-weight cost by more
    // than 20% after precompute.
    use std::hint::black_box;
    use std::time::Instant;

    let time_per_weight = |k: usize| -> f64 {
        let (task, gram) = synth_task(k, 2, 7);
        let st = impsampling::precompute(&task, &gram).unwrap();
        let reps = 3;
        let n = 2_000_000usize;
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let t0 = Instant::now();
            let mut acc = 0.0;
            for i in 0..n {
                let beta = 0.5 + (i % 1000) as f64 / 500.0;
                acc += impsampling::log_weight(&st, black_box(beta));
            }
            black_box(acc);
            best = best.min(t0.elapsed().as_secs_f64() / n as f64);
        }
        best
    };
    let t200 = time_per_weight(200);
    let t400 = time_per_weight(400);
    let ratio = t400 / t200;
    assert!(
        (0.8..=1.2).contains(&ratio),
        "per-weight time ratio {ratio} (t200 {t200:.3e}s, t400 {t400:.3e}s)"
    );
}
