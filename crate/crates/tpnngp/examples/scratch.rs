use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tpnngp::dist::{scale_mixture_sample, MvtParams, ScalePrior};
use tpnngp::stats::ks_two_sample;

fn main() {
    let sigma = DMatrix::from_row_slice(3, 3, &[1.5, 0.4, 0.2, 0.4, 1.1, 0.3, 0.2, 0.3, 0.8]);
    let mu = DVector::zeros(3);
    let (a, b) = (4.0, 1.0);
    let prior = ScalePrior::inv_gamma(a, b).unwrap();
    let n = 100_000;
    for seed in 0..8u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed * 31 + 7);
        let mixture = scale_mixture_sample(&prior, &mu, &sigma, n, &mut rng).unwrap();
        let mvt = MvtParams::new(2.0 * a, mu.clone(), &sigma * (b / a)).unwrap();
        let direct = mvt.sample(n, &mut rng).unwrap();
        let ds: Vec<String> = (0..3)
            .map(|c| {
                let xs: Vec<f64> = mixture.column(c).iter().cloned().collect();
                let ys: Vec<f64> = direct.column(c).iter().cloned().collect();
                format!("{:.4}", ks_two_sample(&xs, &ys).statistic)
            })
            .collect();
        println!("seed {seed}: D = {}", ds.join(", "));
    }
}
