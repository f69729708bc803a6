//! Training loop for the variational models: adaptive per-parameter steps on
//! the whitened parameters, the scale posterior (SVTP) and the inducing
//! inputs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::kernels::{nngp_blocks, NetworkConfig};

use super::{
    elbo_with_grads, predict, ElboGrads, GramPieces, Head, McDraws, Prediction, ScalePosterior,
    SviModel, VariationalState,
};

/// Knobs for [`fit`]. Defaults follow desk-scale training: 64 inducing
/// points, minibatches of 128, 8 Monte-Carlo samples and step size 1e-2.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub model: SviModel,
    pub n_inducing: usize,
    pub batch_size: usize,
    pub n_mc: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Inverse-gamma prior `(alpha, beta)` on the scale (SVTP).
    pub scale_prior: (f64, f64),
    /// Update the inducing inputs (numerically differentiated).
    pub train_inducing: bool,
    /// Update the scale posterior parameters (SVTP).
    pub train_scale: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model: SviModel::Svgp,
            n_inducing: 64,
            batch_size: 128,
            n_mc: 8,
            steps: 500,
            learning_rate: 1e-2,
            seed: 0,
            scale_prior: (2.0, 2.0),
            train_inducing: true,
            train_scale: true,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
    pub kl: f64,
    pub likelihood: f64,
}

/// K-means-style centroids of a training subsample, used to initialize the
/// inducing inputs.
pub fn kmeans_inducing<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    m: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let m = m.min(n);
    // Subsample for speed, then Lloyd iterations.
    let sub_n = n.min(512);
    let sub_idx = rand::seq::index::sample(rng, n, sub_n).into_vec();
    let mut centers = DMatrix::zeros(m, d);
    let init_idx = rand::seq::index::sample(rng, sub_n, m).into_vec();
    for (c, &i) in init_idx.iter().enumerate() {
        centers.set_row(c, &x.row(sub_idx[i]));
    }
    let mut assign = vec![0usize; sub_n];
    for _ in 0..10 {
        for (s, &i) in sub_idx.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..m {
                let dist = (x.row(i) - centers.row(c)).norm_squared();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assign[s] = best.1;
        }
        let mut counts = vec![0usize; m];
        let mut sums = DMatrix::<f64>::zeros(m, d);
        for (s, &i) in sub_idx.iter().enumerate() {
            counts[assign[s]] += 1;
            for j in 0..d {
                sums[(assign[s], j)] += x[(i, j)];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
    }
    centers
}

/// First/second-moment adaptive update (one state per parameter tensor).
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let t = self.t as f64;
        for (i, p) in params.iter_mut().enumerate() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let m_hat = self.m[i] / (1.0 - B1.powf(t));
            let v_hat = self.v[i] / (1.0 - B2.powf(t));
            *p += self.lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Raw optimization vector: mu entries, strict-lower sigma entries, log-diag
/// sigma entries per head; then (log a, log b); inducing inputs handled
/// separately.
struct PackedParams {
    n_classes: usize,
    m: usize,
}

impl PackedParams {
    fn len_per_head(&self) -> usize {
        self.m + self.m * (self.m + 1) / 2
    }

    fn pack(&self, state: &VariationalState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_classes * self.len_per_head() + 2);
        for head in &state.heads {
            out.extend(head.mu_u.iter());
            for j in 0..self.m {
                for k in 0..j {
                    out.push(head.sigma_u[(j, k)]);
                }
                out.push(head.sigma_u[(j, j)].ln());
            }
        }
        if let Some(s) = &state.scale {
            out.push(s.a.ln());
            out.push(s.b.ln());
        }
        out
    }

    fn unpack(&self, raw: &[f64], state: &mut VariationalState) {
        let mut idx = 0;
        for head in state.heads.iter_mut() {
            for j in 0..self.m {
                head.mu_u[j] = raw[idx];
                idx += 1;
            }
            for j in 0..self.m {
                for k in 0..j {
                    head.sigma_u[(j, k)] = raw[idx];
                    idx += 1;
                }
                head.sigma_u[(j, j)] = raw[idx].exp();
                idx += 1;
            }
        }
        if let Some(s) = state.scale.as_mut() {
            s.a = raw[idx].exp().clamp(1e-6, 1e12);
            s.b = raw[idx + 1].exp().clamp(1e-6, 1e12);
        }
    }

    /// Chain the analytic gradients into the raw parameterization.
    fn pack_grads(&self, state: &VariationalState, grads: &ElboGrads, train_scale: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_classes * self.len_per_head() + 2);
        for (ci, head) in state.heads.iter().enumerate() {
            out.extend(grads.d_mu[ci].iter());
            for j in 0..self.m {
                for k in 0..j {
                    out.push(grads.d_sigma[ci][(j, k)]);
                }
                // log-diagonal: d/d(log s) = s * d/ds
                out.push(grads.d_sigma[ci][(j, j)] * head.sigma_u[(j, j)]);
            }
        }
        if let Some(s) = &state.scale {
            if train_scale {
                out.push(grads.d_a * s.a);
                out.push(grads.d_b * s.b);
            } else {
                out.push(0.0);
                out.push(0.0);
            }
        }
        out
    }
}

/// Gradient-ascent training of the ELBO. Returns the fitted state and the
/// per-step trace.
pub fn fit(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    net_cfg: &NetworkConfig,
    cfg: &FitConfig,
) -> Result<(VariationalState, Vec<TraceRow>)> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::invalid("dataset is empty or labels mismatch"));
    }
    if y.iter().any(|&c| c >= n_classes) {
        return Err(Error::invalid("label out of range"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let m = cfg.n_inducing.min(n);
    let inducing = kmeans_inducing(x, m, &mut rng);
    let mut state = VariationalState {
        inducing,
        heads: (0..n_classes).map(|_| Head::identity(m)).collect(),
        scale: match cfg.model {
            SviModel::Svgp => None,
            SviModel::Svtp => Some(ScalePosterior {
                a: cfg.scale_prior.0,
                b: cfg.scale_prior.1,
                prior_a: cfg.scale_prior.0,
                prior_b: cfg.scale_prior.1,
            }),
        },
    };

    let packer = PackedParams { n_classes, m };
    let mut raw = packer.pack(&state);
    let mut opt = Adam::new(raw.len(), cfg.learning_rate);
    let mut z_opt = Adam::new(state.inducing.len(), cfg.learning_rate);
    let batch = cfg.batch_size.clamp(1, n);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        let x_b = DMatrix::from_fn(batch, x.ncols(), |i, j| x[(idx[i], j)]);
        let y_b: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let draws = McDraws::sample(&mut rng, cfg.n_mc, n_classes, m, batch);

        let pieces = build_pieces(&state.inducing, &x_b, net_cfg)?;
        let (est, grads) = elbo_with_grads(&state, &y_b, &pieces, n, &draws, cfg.model)?;
        if !est.total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "ELBO became non-finite (likelihood {}, kl {})",
                    est.likelihood_term, est.kl_term
                ),
            });
        }
        trace.push(TraceRow {
            step,
            elbo: est.total,
            kl: est.kl_term,
            likelihood: est.likelihood_term,
        });

        let g = packer.pack_grads(&state, &grads, cfg.train_scale);
        opt.step(&mut raw, &g);
        packer.unpack(&raw, &mut state);

        if cfg.train_inducing {
            let zg = inducing_grad_fd(&state, &y_b, &x_b, net_cfg, n, &draws, cfg.model)?;
            let mut z_raw: Vec<f64> = state.inducing.iter().cloned().collect();
            z_opt.step(&mut z_raw, &zg);
            let mut it = z_raw.into_iter();
            state.inducing = DMatrix::from_fn(m, x.ncols(), |_, _| it.next().unwrap());
        }
    }
    Ok((state, trace))
}

fn build_pieces(z: &DMatrix<f64>, x_b: &DMatrix<f64>, net_cfg: &NetworkConfig) -> Result<GramPieces> {
    let (k_zz, k_xz, k_xx) = nngp_blocks(z, x_b, net_cfg)?;
    Ok(GramPieces { k_zz, k_xz, k_xx })
}

/// Central finite differences of the ELBO in the inducing inputs, under
/// common random numbers. The kernel blocks are the only quantities that
/// depend on `Z`, so each probe recomputes them and re-evaluates the ELBO.
fn inducing_grad_fd(
    state: &VariationalState,
    y_b: &[usize],
    x_b: &DMatrix<f64>,
    net_cfg: &NetworkConfig,
    total_n: usize,
    draws: &McDraws,
    model: SviModel,
) -> Result<Vec<f64>> {
    let mut grads = vec![0.0; state.inducing.len()];
    let mut probe = state.clone();
    let (rows, cols) = state.inducing.shape();
    for j in 0..cols {
        for i in 0..rows {
            let base = state.inducing[(i, j)];
            let h = 1e-4 * (1.0 + base.abs());
            probe.inducing[(i, j)] = base + h;
            let up = {
                let pieces = build_pieces(&probe.inducing, x_b, net_cfg)?;
                elbo_with_grads(&probe, y_b, &pieces, total_n, draws, model)?.0.total
            };
            probe.inducing[(i, j)] = base - h;
            let down = {
                let pieces = build_pieces(&probe.inducing, x_b, net_cfg)?;
                elbo_with_grads(&probe, y_b, &pieces, total_n, draws, model)?.0.total
            };
            probe.inducing[(i, j)] = base;
            grads[j * rows + i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Predictive distribution at `x_star` using the NNGP kernel for the state's
/// inducing set.
pub fn predict_with_kernel<R: Rng + ?Sized>(
    state: &VariationalState,
    x_star: &DMatrix<f64>,
    net_cfg: &NetworkConfig,
    model: SviModel,
    n_mc: usize,
    rng: &mut R,
) -> Result<Prediction> {
    let pieces = build_pieces(&state.inducing, x_star, net_cfg)?;
    predict(state, &pieces, model, n_mc, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Activation;

    fn two_blob_data(n_per: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = 2 * n_per;
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -1.5 } else { 1.5 };
            x[(i, 0)] = center + 0.4 * rng.sample::<f64, _>(StandardNormal);
            x[(i, 1)] = center + 0.4 * rng.sample::<f64, _>(StandardNormal);
            y.push(class);
        }
        (x, y)
    }

    fn net_cfg() -> NetworkConfig {
        NetworkConfig::new(2, Activation::Erf, 2.0, 0.1, 2).unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (x, y) = two_blob_data(20, 0);
        let cfg = FitConfig {
            steps: 0,
            n_inducing: 8,
            batch_size: 16,
            ..Default::default()
        };
        let (state, trace) = fit(&x, &y, 2, &net_cfg(), &cfg).unwrap();
        assert!(trace.is_empty());
        for head in &state.heads {
            assert!(head.mu_u.iter().all(|&v| v == 0.0));
            assert_eq!(head.sigma_u, DMatrix::identity(8, 8));
        }
    }

    #[test]
    fn kmeans_centers_have_right_shape() {
        let (x, _) = two_blob_data(50, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let centers = kmeans_inducing(&x, 6, &mut rng);
        assert_eq!(centers.shape(), (6, 2));
        // centers should be within the data range
        for c in 0..6 {
            assert!(centers[(c, 0)].abs() < 4.0);
        }
    }

    #[test]
    fn svtp_with_frozen_point_like_scale_tracks_svgp() {
        // a = b = 1e6 frozen: the scale draws pin sigma ~ 1 and the
        // inverse-gamma KL vanishes, so the two models see the same
        // objective step by step (within MC noise).
        let (x, y) = two_blob_data(30, 5);
        let base = FitConfig {
            n_inducing: 6,
            batch_size: 60,
            n_mc: 32,
            steps: 40,
            learning_rate: 2e-2,
            seed: 21,
            train_inducing: false,
            ..Default::default()
        };
        let cfg_g = FitConfig {
            model: SviModel::Svgp,
            ..base.clone()
        };
        let cfg_t = FitConfig {
            model: SviModel::Svtp,
            scale_prior: (1e6, 1e6),
            train_scale: false,
            ..base
        };
        let (_, trace_g) = fit(&x, &y, 2, &net_cfg(), &cfg_g).unwrap();
        let (_, trace_t) = fit(&x, &y, 2, &net_cfg(), &cfg_t).unwrap();
        for (g, t) in trace_g.iter().zip(&trace_t) {
            let rel = (g.elbo - t.elbo).abs() / g.elbo.abs().max(1.0);
            assert!(
                rel < 0.01,
                "step {}: svgp {} vs svtp {}",
                g.step,
                g.elbo,
                t.elbo
            );
        }
    }

    #[test]
    fn svgp_training_separates_blobs() {
        let (x, y) = two_blob_data(40, 3);
        let cfg = FitConfig {
            model: SviModel::Svgp,
            n_inducing: 8,
            batch_size: 40,
            n_mc: 4,
            steps: 120,
            learning_rate: 5e-2,
            seed: 9,
            train_inducing: false,
            ..Default::default()
        };
        let (state, trace) = fit(&x, &y, 2, &net_cfg(), &cfg).unwrap();
        assert!(trace.last().unwrap().elbo > trace.first().unwrap().elbo);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pred =
            predict_with_kernel(&state, &x, &net_cfg(), SviModel::Svgp, 64, &mut rng).unwrap();
        let correct = (0..x.nrows())
            .filter(|&i| {
                let p1 = pred.probabilities[(i, 1)];
                (p1 > 0.5) == (y[i] == 1)
            })
            .count();
        assert!(
            correct as f64 / x.nrows() as f64 >= 0.95,
            "accuracy {}",
            correct as f64 / x.nrows() as f64
        );
    }
}
