//! Finite-width MLP simulator: the empirical side of the limit theorems.
//!
//! Networks follow the architecture described by a [`NetworkConfig`] with a
//! scale-mixed readout: `sigma_v^2` is drawn once per network from a scale
//! prior, and the output is `v^T phi(g(x)) / sqrt(n)`.
//!
//! Two parameterizations are supported. `Standard` stores the actual weights
//! (`N(0, sigma_w^2 / fan_in)` etc.); `Ntk` stores standardized `N(0, 1)`
//! parameters and applies the scale factors (`sigma_w / sqrt(fan_in)`,
//! `sigma_b`, `sigma_v / sqrt(n)`) explicitly in the forward pass, so that
//! gradients with respect to the stored parameters produce the neural tangent
//! kernel `sigma_v^2 * ThetaBar` in the wide limit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::dist::ScalePrior;
use crate::error::{Error, Result};
use crate::kernels::NetworkConfig;
use crate::linalg;
use crate::posterior::RegressionTask;

/// How parameters are stored and scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// Weights carry their variance; forward pass applies them as-is.
    Standard,
    /// Standardized parameters with explicit scale factors at forward time.
    Ntk,
}

/// A sampled finite-width network.
#[derive(Debug, Clone)]
pub struct FiniteNet {
    pub cfg: NetworkConfig,
    pub width: usize,
    /// Hidden-layer weight matrices, layer `l` mapping `fan_in -> width`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// Readout vector (`v` for `Standard`, standardized for `Ntk`).
    pub readout: DVector<f64>,
    /// The readout variance drawn from the scale prior.
    pub sigma_v2: f64,
    pub param: Parameterization,
}

/// Outputs of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Network output per batch row.
    pub outputs: DVector<f64>,
    /// Penultimate features `phi(g(x))`, one column per batch row.
    pub features: DMatrix<f64>,
}

/// Per-net RNG stream for reproducible ensembles.
pub fn net_rng(seed: u64, net_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(net_index);
    rng
}

fn fill_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

fn fill_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, sd: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Sample a network: hidden weights with variance `sigma_w^2 / fan_in`,
/// biases with variance `sigma_b^2`, readout `v ~ N(0, sigma_v^2)` with
/// `sigma_v^2` drawn from the prior.
pub fn sample_net<R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    width: usize,
    prior: &ScalePrior,
    param: Parameterization,
    rng: &mut R,
) -> Result<FiniteNet> {
    if width == 0 {
        return Err(Error::invalid("width must be positive"));
    }
    let sigma_v2 = prior.sample_one(rng);
    let sw = cfg.weight_variance.sqrt();
    let sb = cfg.bias_variance.sqrt();
    let mut weights = Vec::with_capacity(cfg.depth);
    let mut biases = Vec::with_capacity(cfg.depth);
    for layer in 0..cfg.depth {
        let fan_in = if layer == 0 { cfg.input_dim } else { width };
        let (w_sd, b_sd) = match param {
            Parameterization::Standard => (sw / (fan_in as f64).sqrt(), sb),
            Parameterization::Ntk => (1.0, 1.0),
        };
        weights.push(fill_normal(rng, width, fan_in, w_sd));
        biases.push(fill_normal_vec(rng, width, b_sd));
    }
    let v_sd = match param {
        Parameterization::Standard => sigma_v2.sqrt(),
        Parameterization::Ntk => 1.0,
    };
    let readout = fill_normal_vec(rng, width, v_sd);
    Ok(FiniteNet {
        cfg: cfg.clone(),
        width,
        weights,
        biases,
        readout,
        sigma_v2,
        param,
    })
}

struct LayerScales {
    w: f64,
    b: f64,
}

impl FiniteNet {
    fn scales(&self, layer: usize) -> LayerScales {
        match self.param {
            Parameterization::Standard => LayerScales { w: 1.0, b: 1.0 },
            Parameterization::Ntk => {
                let fan_in = if layer == 0 {
                    self.cfg.input_dim
                } else {
                    self.width
                };
                LayerScales {
                    w: self.cfg.weight_variance.sqrt() / (fan_in as f64).sqrt(),
                    b: self.cfg.bias_variance.sqrt(),
                }
            }
        }
    }

    fn readout_scale(&self) -> f64 {
        match self.param {
            Parameterization::Standard => 1.0 / (self.width as f64).sqrt(),
            Parameterization::Ntk => self.sigma_v2.sqrt() / (self.width as f64).sqrt(),
        }
    }

    /// The readout vector in output units: `f(x) = effective_readout^T phi / sqrt(n)`.
    pub fn effective_readout(&self) -> DVector<f64> {
        match self.param {
            Parameterization::Standard => self.readout.clone(),
            Parameterization::Ntk => &self.readout * self.sigma_v2.sqrt(),
        }
    }

    /// Pre-activations and activations for every layer; activations column-per-input.
    fn forward_full(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut pre = Vec::with_capacity(self.cfg.depth);
        let mut act = Vec::with_capacity(self.cfg.depth + 1);
        act.push(x.transpose()); // I x B
        for layer in 0..self.cfg.depth {
            let s = self.scales(layer);
            let mut g = (&self.weights[layer] * act.last().unwrap()) * s.w;
            for mut col in g.column_iter_mut() {
                col.axpy(s.b, &self.biases[layer], 1.0);
            }
            let a = g.map(|v| self.cfg.activation.apply(v));
            pre.push(g);
            act.push(a);
        }
        (pre, act)
    }

    /// Evaluate the network on a batch (rows of `x`), returning outputs and
    /// the penultimate features.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::dim(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.cfg.input_dim
            )));
        }
        let (_, act) = self.forward_full(x);
        let features = act.last().unwrap().clone();
        let outputs = (features.transpose() * &self.readout) * self.readout_scale();
        Ok(ForwardPass { outputs, features })
    }

    /// Feature rows scaled by `1/sqrt(n)`: the matrix `PhiBar` whose gram is
    /// the empirical kernel `Kbar[n]`.
    pub fn feature_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let fp = self.forward(x)?;
        Ok(fp.features.transpose() / (self.width as f64).sqrt())
    }
}

/// Time horizon for the closed-form readout training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainingTime {
    Finite(f64),
    Infinite,
}

/// Result of readout-only training.
#[derive(Debug, Clone)]
pub struct ReadoutTraining {
    /// Effective readout vector at the requested time.
    pub readout: DVector<f64>,
    pub train_outputs: DVector<f64>,
    pub test_outputs: DVector<f64>,
}

/// Exact solution of the readout-layer gradient flow under mean squared loss:
///
/// `v(t) = v0 + PhiBar^T (PhiBar PhiBar^T)^{-1} (exp(-(2/K) t PhiBar PhiBar^T) - I)(PhiBar v0 - Y)`
///
/// with the `t -> infinity` limit interpolating the training targets.
pub fn train_readout_closed_form(
    net: &FiniteNet,
    task: &RegressionTask,
    time: TrainingTime,
) -> Result<ReadoutTraining> {
    let phi_tr = net.feature_rows(&task.x_tr)?; // K x n
    let phi_te = net.feature_rows(&task.x_te)?; // L x n
    let v0 = net.effective_readout();
    let k = task.y_tr.len();
    let emp = &phi_tr * phi_tr.transpose(); // Kbar[n]_trtr
    let (chol, _) = linalg::cholesky_with_jitter(&emp, "empirical feature gram").map_err(|_| {
        Error::NotPositiveDefinite {
            context: "empirical feature gram is singular; increase the width".into(),
            max_jitter: 0.0,
        }
    })?;

    let resid0 = &phi_tr * &v0 - &task.y_tr; // PhiBar v0 - Y
    let delta = match time {
        TrainingTime::Infinite => {
            // (exp(...) - I) -> -I
            let mut sol = resid0.clone();
            chol.solve_mut(&mut sol);
            -(phi_tr.transpose() * sol)
        }
        TrainingTime::Finite(t) => {
            if !(t >= 0.0) {
                return Err(Error::invalid("training time must be non-negative"));
            }
            let eig = nalgebra::SymmetricEigen::new(emp.clone());
            // (exp(-(2/K) t emp) - I) resid0, then emp^{-1} applied via eig too.
            let coords = eig.eigenvectors.transpose() * &resid0;
            let mut scaled = DVector::zeros(k);
            for i in 0..k {
                let lam = eig.eigenvalues[i];
                let decay = (-2.0 / k as f64 * t * lam).exp() - 1.0;
                // emp^{-1} (exp(...) - I) has a finite lam -> 0 limit of -2t/K.
                scaled[i] = if lam.abs() > 1e-300 {
                    decay / lam * coords[i]
                } else {
                    -2.0 * t / k as f64 * coords[i]
                };
            }
            phi_tr.transpose() * (eig.eigenvectors * scaled)
        }
    };
    let v_t = &v0 + delta;
    Ok(ReadoutTraining {
        train_outputs: &phi_tr * &v_t,
        test_outputs: &phi_te * &v_t,
        readout: v_t,
    })
}

/// Training trace of full gradient descent.
#[derive(Debug, Clone)]
pub struct GdTrace {
    pub losses: Vec<f64>,
    pub steps_taken: usize,
}

fn mse(outputs: &DVector<f64>, targets: &DVector<f64>) -> f64 {
    (outputs - targets).norm_squared() / targets.len() as f64
}

/// Explicit-Euler gradient descent on the mean squared loss, training all
/// standardized parameters. Requires the NTK parameterization.
pub fn train_full_gd(
    net: &mut FiniteNet,
    task: &RegressionTask,
    steps: usize,
    step_size: f64,
) -> Result<GdTrace> {
    train_gd_internal(net, task, steps, step_size, None)
}

/// As [`train_full_gd`] but stopping once the training MSE drops below `tol`.
pub fn train_full_gd_to_convergence(
    net: &mut FiniteNet,
    task: &RegressionTask,
    max_steps: usize,
    step_size: f64,
    tol: f64,
) -> Result<GdTrace> {
    train_gd_internal(net, task, max_steps, step_size, Some(tol))
}

fn train_gd_internal(
    net: &mut FiniteNet,
    task: &RegressionTask,
    steps: usize,
    step_size: f64,
    tol: Option<f64>,
) -> Result<GdTrace> {
    if net.param != Parameterization::Ntk {
        return Err(Error::invalid(
            "full gradient-descent training requires the NTK parameterization",
        ));
    }
    if !(step_size >= 0.0) || !step_size.is_finite() {
        return Err(Error::invalid("step size must be finite and non-negative"));
    }
    let k = task.y_tr.len();
    let n = net.width;
    let depth = net.cfg.depth;
    let act_fn = net.cfg.activation;
    let rs = net.readout_scale();
    let a0 = task.x_tr.transpose(); // I x K, fixed

    // Preallocated workspaces; the inner loop runs on in-place gemm updates.
    let mut pre: Vec<DMatrix<f64>> = (0..depth).map(|_| DMatrix::zeros(n, k)).collect();
    let mut act: Vec<DMatrix<f64>> = (0..depth).map(|_| DMatrix::zeros(n, k)).collect();
    let mut delta = DMatrix::<f64>::zeros(n, k);
    let mut delta_next = DMatrix::<f64>::zeros(n, k);

    let mut losses = Vec::with_capacity(steps + 1);
    let mut steps_taken = 0;
    for step in 0..=steps {
        // Forward pass.
        for layer in 0..depth {
            let s = net.scales(layer);
            let g = &mut pre[layer];
            for mut col in g.column_iter_mut() {
                col.copy_from(&net.biases[layer]);
            }
            let input: &DMatrix<f64> = if layer == 0 { &a0 } else { &act[layer - 1] };
            g.gemm(s.w, &net.weights[layer], input, s.b);
            act[layer].zip_apply(g, |a, gv| *a = act_fn.apply(gv));
        }
        let feats = &act[depth - 1];
        let outputs = (feats.transpose() * &net.readout) * rs;
        let loss = mse(&outputs, &task.y_tr);
        losses.push(loss);
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Divergence {
                step,
                detail: format!("training loss {loss:e}; reduce the step size"),
            });
        }
        if step == steps || tol.is_some_and(|t| loss < t) {
            steps_taken = step;
            break;
        }
        if step_size == 0.0 {
            steps_taken = step + 1;
            continue;
        }

        // dL/df, factor 2/K from the mean squared loss.
        let grad_f = (&outputs - &task.y_tr) * (2.0 / k as f64);

        // delta^D = rs * (readout outer grad_f) .* phi'(G^D)
        for i in 0..k {
            let g = grad_f[i] * rs;
            for a in 0..n {
                delta[(a, i)] = g * net.readout[a] * act_fn.apply_deriv(pre[depth - 1][(a, i)]);
            }
        }
        // Readout update.
        let grad_v = (feats * &grad_f) * rs;
        net.readout.axpy(-step_size, &grad_v, 1.0);

        for layer in (0..depth).rev() {
            let s = net.scales(layer);
            if layer > 0 {
                // delta_next = (s.w W^T delta) .* phi'(G^{l-1}) before W changes.
                delta_next.gemm_tr(s.w, &net.weights[layer], &delta, 0.0);
                for i in 0..k {
                    for a in 0..n {
                        delta_next[(a, i)] *= act_fn.apply_deriv(pre[layer - 1][(a, i)]);
                    }
                }
            }
            let input_t = if layer == 0 {
                a0.transpose()
            } else {
                act[layer - 1].transpose()
            };
            net.weights[layer].gemm(-step_size * s.w, &delta, &input_t, 1.0);
            let grad_b = delta.column_sum() * s.b;
            net.biases[layer].axpy(-step_size, &grad_b, 1.0);
            if layer > 0 {
                std::mem::swap(&mut delta, &mut delta_next);
            }
        }
        steps_taken = step + 1;
    }
    Ok(GdTrace {
        losses,
        steps_taken,
    })
}

/// Empirical neural tangent kernel `<grad f(x_i), grad f(x_j)>` over the
/// stored (standardized) parameters, computed layerwise without materializing
/// per-parameter gradients. NTK parameterization only.
pub fn empirical_ntk(net: &FiniteNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if net.param != Parameterization::Ntk {
        return Err(Error::invalid(
            "empirical NTK is defined for the NTK parameterization",
        ));
    }
    let b = x.nrows();
    let (pre, act) = net.forward_full(x);
    let depth = net.cfg.depth;
    let rs = net.readout_scale();

    // gamma^l = df/dG^l for each input (columns).
    let mut gammas = vec![DMatrix::zeros(0, 0); depth];
    let mut gamma = DMatrix::zeros(net.width, b);
    for i in 0..b {
        for a in 0..net.width {
            gamma[(a, i)] =
                rs * net.readout[a] * net.cfg.activation.apply_deriv(pre[depth - 1][(a, i)]);
        }
    }
    gammas[depth - 1] = gamma;
    for layer in (0..depth.saturating_sub(1)).rev() {
        let s = net.scales(layer + 1);
        let mut g = (net.weights[layer + 1].transpose() * &gammas[layer + 1]) * s.w;
        for i in 0..b {
            for a in 0..net.width {
                g[(a, i)] *= net.cfg.activation.apply_deriv(pre[layer][(a, i)]);
            }
        }
        gammas[layer] = g;
    }

    let mut ntk = DMatrix::zeros(b, b);
    // readout contribution: (sigma_v^2 / n) <phi_i, phi_j>
    let feats = act.last().unwrap();
    let readout_factor = net.sigma_v2 / net.width as f64;
    for i in 0..b {
        for j in i..b {
            let mut total = readout_factor * feats.column(i).dot(&feats.column(j));
            for layer in 0..depth {
                let s = net.scales(layer);
                let gdot = gammas[layer].column(i).dot(&gammas[layer].column(j));
                let adot = act[layer].column(i).dot(&act[layer].column(j));
                total += s.w * s.w * gdot * adot + s.b * s.b * gdot;
            }
            ntk[(i, j)] = total;
            ntk[(j, i)] = total;
        }
    }
    Ok(ntk)
}

/// Ensemble outputs at a set of points plus summary statistics.
#[derive(Debug, Clone)]
pub struct EnsembleSummary {
    /// `members x points` raw outputs.
    pub member_outputs: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Population variance across members.
    pub variance: DVector<f64>,
}

/// Evaluate every ensemble member on `x` and summarize.
pub fn ensemble_predict(nets: &[FiniteNet], x: &DMatrix<f64>) -> Result<EnsembleSummary> {
    if nets.is_empty() {
        return Err(Error::invalid("ensemble must have at least one member"));
    }
    let m = nets.len();
    let b = x.nrows();
    let mut member_outputs = DMatrix::zeros(m, b);
    for (i, net) in nets.iter().enumerate() {
        let fp = net.forward(x)?;
        for j in 0..b {
            member_outputs[(i, j)] = fp.outputs[j];
        }
    }
    let mut mean = DVector::zeros(b);
    let mut variance = DVector::zeros(b);
    for j in 0..b {
        let col = member_outputs.column(j);
        let mu = col.sum() / m as f64;
        mean[j] = mu;
        variance[j] = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
    }
    Ok(EnsembleSummary {
        member_outputs,
        mean,
        variance,
    })
}

/// Two-class probabilities from scalar outputs: per member softmax over
/// `[f, -f]`, averaged across members. Returns `points x 2`.
pub fn averaged_binary_softmax(member_outputs: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, b) = member_outputs.shape();
    let mut probs = DMatrix::zeros(b, 2);
    for j in 0..b {
        let mut p0 = 0.0;
        for i in 0..m {
            let f = member_outputs[(i, j)];
            p0 += 1.0 / (1.0 + (-2.0 * f).exp());
        }
        probs[(j, 0)] = p0 / m as f64;
        probs[(j, 1)] = 1.0 - probs[(j, 0)];
    }
    probs
}

/// Sample the empirical feature gram `(1/n) phi^T phi` of a width-`n` network
/// on the given inputs without materializing the weight matrices.
///
/// Conditioned on the previous layer's activations, the pre-activation rows
/// are i.i.d. Gaussian with covariance `sigma_w^2/n A^T A + sigma_b^2`; the
/// layers are sampled from exactly that conditional law, so the returned gram
/// has the same distribution as one computed from explicit weights.
pub fn sample_feature_gram<R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    width: usize,
    x: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::invalid("need at least one input"));
    }
    if x.ncols() != cfg.input_dim {
        return Err(Error::dim("input dimension mismatch"));
    }
    let b = x.nrows();
    // Base conditional covariance from the raw inputs.
    let mut cond = DMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            cond[(i, j)] = cfg.weight_variance * x.row(i).dot(&x.row(j)) / cfg.input_dim as f64
                + cfg.bias_variance;
        }
    }
    let mut act = DMatrix::<f64>::zeros(width, b);
    for layer in 0..cfg.depth {
        if layer > 0 {
            let mut gram = act.transpose() * &act;
            gram *= cfg.weight_variance / width as f64;
            for i in 0..b {
                for j in 0..b {
                    gram[(i, j)] += cfg.bias_variance;
                }
            }
            cond = gram;
        }
        let (chol, _) = linalg::cholesky_with_jitter(&cond, "conditional layer covariance")?;
        let lt = chol.l().transpose();
        // rows of G are i.i.d. N(0, cond)
        let z = fill_normal(rng, width, b, 1.0);
        let g = z * &lt;
        act = g.map(|v| cfg.activation.apply(v));
    }
    Ok(act.transpose() * &act / width as f64)
}
