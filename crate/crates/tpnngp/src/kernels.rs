//! Closed-form NNGP and NTK kernels for fully-connected networks.
//!
//! The kernels are the scale-free factors `Kbar` and `ThetaBar`: the full
//! covariances of the limiting process are `sigma_v^2 * Kbar` and
//! `sigma_v^2 * ThetaBar`, with the readout variance supplied by the caller
//! (as a fixed value or a prior draw).
//!
//! Layerwise recursion over the joint gram of train and test inputs:
//!
//! * base: `c^1(x, x') = sigma_w^2 <x, x'> / I + sigma_b^2`
//! * hidden step: `c^{l+1} = sigma_w^2 E[phi(u) phi(v)] + sigma_b^2` with
//!   `(u, v)` centered Gaussian with covariance read from `c^l`
//! * readout: `Kbar = E[phi(u) phi(v)]` after the last activation, without
//!   any further variance factors
//!
//! and for the NTK, seeded with the base kernel,
//!
//! * hidden step: `t^{l+1} = c^{l+1} + sigma_w^2 E[phi'(u) phi'(v)] * t^l`
//! * readout: `ThetaBar = Kbar + E[phi'(u) phi'(v)] * t^D`
//!
//! so that the gradient inner products of a width-n network converge to
//! `sigma_v^2 * ThetaBar`. The Gaussian expectations use the arcsine closed
//! form for erf and the order-1 arc-cosine form for ReLU.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Activation function of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Erf,
    Relu,
}

/// Slack within which analytic-domain violations are attributed to roundoff
/// and clamped; larger violations are reported as errors.
const DOMAIN_SLACK: f64 = 1e-12;

impl Activation {
    /// Apply the activation pointwise.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Erf => crate::special::erf(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Pointwise derivative of the activation.
    #[inline]
    pub fn apply_deriv(self, x: f64) -> f64 {
        match self {
            Activation::Erf => crate::special::erf_prime(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `E[phi(u) phi(v)]` for `(u, v)` zero-mean Gaussian with variances
    /// `c_uu`, `c_vv` and covariance `c_uv`.
    ///
    /// Erf uses the arcsine formula
    /// `(2/pi) asin(2 c_uv / sqrt((1 + 2 c_uu)(1 + 2 c_vv)))`; ReLU uses the
    /// order-1 arc-cosine kernel. `layer` is only used in error reports.
    pub fn pair_expectation(self, c_uu: f64, c_vv: f64, c_uv: f64, layer: usize) -> Result<f64> {
        match self {
            Activation::Erf => {
                let denom = ((1.0 + 2.0 * c_uu) * (1.0 + 2.0 * c_vv)).sqrt();
                let arg = clamp_unit(2.0 * c_uv / denom, layer, "erf arcsine argument")?;
                Ok(std::f64::consts::FRAC_2_PI * arg.asin())
            }
            Activation::Relu => {
                let prod = c_uu * c_vv;
                if prod <= DOMAIN_SLACK * DOMAIN_SLACK {
                    // A degenerate marginal means phi(u) or phi(v) is 0 a.s.
                    return Ok(0.0);
                }
                let norm = prod.sqrt();
                let rho = clamp_unit(c_uv / norm, layer, "relu correlation")?;
                let theta = rho.acos();
                Ok(norm / (2.0 * std::f64::consts::PI)
                    * (theta.sin() + (std::f64::consts::PI - theta) * rho))
            }
        }
    }

    /// `E[phi'(u) phi'(v)]` under the same Gaussian.
    ///
    /// Erf: `(4/pi) / sqrt((1 + 2 c_uu)(1 + 2 c_vv) - 4 c_uv^2)`;
    /// ReLU: the orthant probability `(pi - theta) / (2 pi)`.
    pub fn deriv_pair_expectation(
        self,
        c_uu: f64,
        c_vv: f64,
        c_uv: f64,
        layer: usize,
    ) -> Result<f64> {
        match self {
            Activation::Erf => {
                let det = (1.0 + 2.0 * c_uu) * (1.0 + 2.0 * c_vv) - 4.0 * c_uv * c_uv;
                if det <= 0.0 {
                    if det > -DOMAIN_SLACK {
                        return Ok(4.0 / std::f64::consts::PI / DOMAIN_SLACK.sqrt());
                    }
                    return Err(Error::NumericalDomain {
                        layer,
                        detail: format!("erf derivative determinant {det:e} not positive"),
                    });
                }
                Ok(4.0 / std::f64::consts::PI / det.sqrt())
            }
            Activation::Relu => {
                let prod = c_uu * c_vv;
                let rho = if prod <= DOMAIN_SLACK * DOMAIN_SLACK {
                    0.0
                } else {
                    clamp_unit(c_uv / prod.sqrt(), layer, "relu correlation")?
                };
                Ok((std::f64::consts::PI - rho.acos()) / (2.0 * std::f64::consts::PI))
            }
        }
    }
}

fn clamp_unit(arg: f64, layer: usize, what: &str) -> Result<f64> {
    if !arg.is_finite() {
        return Err(Error::NumericalDomain {
            layer,
            detail: format!("{what} is non-finite"),
        });
    }
    if arg.abs() <= 1.0 {
        Ok(arg)
    } else if arg.abs() <= 1.0 + DOMAIN_SLACK {
        Ok(arg.signum())
    } else {
        Err(Error::NumericalDomain {
            layer,
            detail: format!("{what} = {arg} outside [-1, 1]"),
        })
    }
}

/// Architecture description from which the kernels are derived.
///
/// `depth` counts hidden layers; the same weight and bias variances apply to
/// every layer, with weights scaled by fan-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub depth: usize,
    pub activation: Activation,
    pub weight_variance: f64,
    pub bias_variance: f64,
    pub input_dim: usize,
}

impl NetworkConfig {
    pub fn new(
        depth: usize,
        activation: Activation,
        weight_variance: f64,
        bias_variance: f64,
        input_dim: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("depth must be at least 1"));
        }
        if !(weight_variance > 0.0) || !weight_variance.is_finite() {
            return Err(Error::invalid("weight_variance must be positive"));
        }
        if !(bias_variance >= 0.0) || !bias_variance.is_finite() {
            return Err(Error::invalid("bias_variance must be non-negative"));
        }
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        Ok(NetworkConfig {
            depth,
            activation,
            weight_variance,
            bias_variance,
            input_dim,
        })
    }

    /// Base-layer kernel `sigma_w^2 <x, x'> / I + sigma_b^2`.
    pub fn base_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        self.weight_variance * dot / self.input_dim as f64 + self.bias_variance
    }
}

/// Which kernel a [`GramPair`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramKind {
    Nngp,
    Ntk,
}

/// The kernel blocks shared by every inference path: train/train, test/train
/// and test/test restrictions of the joint gram over all inputs.
#[derive(Debug, Clone)]
pub struct GramPair {
    k_trtr: DMatrix<f64>,
    k_tetr: DMatrix<f64>,
    k_tete: DMatrix<f64>,
    kind: GramKind,
}

impl GramPair {
    /// Assemble from blocks, validating symmetry of the diagonal blocks and
    /// positive semi-definiteness of the joint matrix.
    pub fn new(
        k_trtr: DMatrix<f64>,
        k_tetr: DMatrix<f64>,
        k_tete: DMatrix<f64>,
        kind: GramKind,
    ) -> Result<Self> {
        if k_tetr.nrows() != k_tete.nrows() || k_tetr.ncols() != k_trtr.nrows() {
            return Err(Error::dim(format!(
                "gram blocks do not agree: trtr {}x{}, tetr {}x{}, tete {}x{}",
                k_trtr.nrows(),
                k_trtr.ncols(),
                k_tetr.nrows(),
                k_tetr.ncols(),
                k_tete.nrows(),
                k_tete.ncols()
            )));
        }
        linalg::check_symmetric(&k_trtr, "gram train block")?;
        linalg::check_symmetric(&k_tete, "gram test block")?;
        let pair = GramPair {
            k_trtr,
            k_tetr,
            k_tete,
            kind,
        };
        linalg::check_psd(&pair.joint(), "joint gram")?;
        Ok(pair)
    }

    pub fn kind(&self) -> GramKind {
        self.kind
    }

    pub fn n_train(&self) -> usize {
        self.k_trtr.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.k_tete.nrows()
    }

    pub fn trtr(&self) -> &DMatrix<f64> {
        &self.k_trtr
    }

    pub fn tetr(&self) -> &DMatrix<f64> {
        &self.k_tetr
    }

    pub fn tete(&self) -> &DMatrix<f64> {
        &self.k_tete
    }

    /// The full `(K+L) x (K+L)` kernel with the train block leading.
    pub fn joint(&self) -> DMatrix<f64> {
        let k = self.n_train();
        let l = self.n_test();
        let mut joint = DMatrix::zeros(k + l, k + l);
        joint.view_mut((0, 0), (k, k)).copy_from(&self.k_trtr);
        joint
            .view_mut((k, 0), (l, k))
            .copy_from(&self.k_tetr);
        joint
            .view_mut((0, k), (k, l))
            .copy_from(&self.k_tetr.transpose());
        joint.view_mut((k, k), (l, l)).copy_from(&self.k_tete);
        joint
    }
}

/// NNGP kernel `Kbar` over the joint input set, partitioned into blocks.
pub fn nngp_gram(
    x_tr: &DMatrix<f64>,
    x_te: &DMatrix<f64>,
    cfg: &NetworkConfig,
) -> Result<GramPair> {
    let joint = joint_recursion(x_tr, x_te, cfg, false)?.0;
    split_blocks(joint, x_tr.nrows(), x_te.nrows(), GramKind::Nngp)
}

/// NTK kernel `ThetaBar` over the joint input set.
pub fn ntk_gram(x_tr: &DMatrix<f64>, x_te: &DMatrix<f64>, cfg: &NetworkConfig) -> Result<GramPair> {
    let theta = joint_recursion(x_tr, x_te, cfg, true)?
        .1
        .expect("ntk requested");
    split_blocks(theta, x_tr.nrows(), x_te.nrows(), GramKind::Ntk)
}

/// Raw NNGP kernel blocks `(K_aa, K_ba, K_bb)` without the eigenvalue
/// validation of [`GramPair::new`]; used on hot paths that rebuild small
/// blocks every step (variational training).
pub fn nngp_blocks(
    x_a: &DMatrix<f64>,
    x_b: &DMatrix<f64>,
    cfg: &NetworkConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let joint = joint_recursion(x_a, x_b, cfg, false)?.0;
    let k = x_a.nrows();
    let l = x_b.nrows();
    Ok((
        joint.view((0, 0), (k, k)).into_owned(),
        joint.view((k, 0), (l, k)).into_owned(),
        joint.view((k, k), (l, l)).into_owned(),
    ))
}

/// Run the layer recursion on the joint input set. Returns `(Kbar, ThetaBar)`
/// with the NTK only populated when requested.
fn joint_recursion(
    x_tr: &DMatrix<f64>,
    x_te: &DMatrix<f64>,
    cfg: &NetworkConfig,
    want_ntk: bool,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let k = x_tr.nrows();
    if k == 0 {
        return Err(Error::invalid("need at least one training input"));
    }
    if x_tr.ncols() != cfg.input_dim || (x_te.nrows() > 0 && x_te.ncols() != cfg.input_dim) {
        return Err(Error::dim(format!(
            "inputs have {} / {} columns but config expects {}",
            x_tr.ncols(),
            x_te.ncols(),
            cfg.input_dim
        )));
    }
    linalg::check_finite(x_tr, "training inputs")?;
    linalg::check_finite(x_te, "test inputs")?;

    let m = k + x_te.nrows();
    let rows: Vec<&DMatrix<f64>> = vec![x_tr, x_te];
    let row_of = |i: usize| -> nalgebra::RowDVector<f64> {
        if i < k {
            rows[0].row(i).into_owned()
        } else {
            rows[1].row(i - k).into_owned()
        }
    };

    // Base layer: covariance of the first pre-activation.
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        let ri = row_of(i);
        for j in i..m {
            let rj = row_of(j);
            let val = cfg.base_kernel(ri.as_slice(), rj.as_slice());
            cov[(i, j)] = val;
            cov[(j, i)] = val;
        }
    }
    let mut theta = want_ntk.then(|| cov.clone());

    // Hidden-layer transitions: depth-1 propagation steps, then the readout
    // expectation after the last activation.
    for layer in 1..cfg.depth {
        let (next_cov, next_theta) =
            layer_step(&cov, theta.as_ref(), cfg, layer, LayerRole::Hidden)?;
        cov = next_cov;
        theta = next_theta;
    }
    let (kbar, thetabar) = layer_step(&cov, theta.as_ref(), cfg, cfg.depth, LayerRole::Readout)?;
    Ok((kbar, thetabar))
}

#[derive(Clone, Copy, PartialEq)]
enum LayerRole {
    Hidden,
    Readout,
}

/// One recursion step. For hidden layers the expectation is scaled by
/// `sigma_w^2` and shifted by `sigma_b^2`; the readout step returns the plain
/// expectations (the readout variance is not part of `Kbar`/`ThetaBar`).
fn layer_step(
    cov: &DMatrix<f64>,
    theta: Option<&DMatrix<f64>>,
    cfg: &NetworkConfig,
    layer: usize,
    role: LayerRole,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let m = cov.nrows();
    let act = cfg.activation;
    let diag: Vec<f64> = (0..m).map(|i| cov[(i, i)]).collect();

    let entry = |i: usize, j: usize| -> Result<(f64, f64)> {
        let e_phi = act.pair_expectation(diag[i], diag[j], cov[(i, j)], layer)?;
        let e_dphi = if theta.is_some() {
            act.deriv_pair_expectation(diag[i], diag[j], cov[(i, j)], layer)?
        } else {
            0.0
        };
        Ok((e_phi, e_dphi))
    };

    let upper: Vec<Vec<(f64, f64)>> = if m >= 128 {
        (0..m)
            .into_par_iter()
            .map(|i| (i..m).map(|j| entry(i, j)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..m)
            .map(|i| (i..m).map(|j| entry(i, j)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?
    };

    let mut next_cov = DMatrix::zeros(m, m);
    let mut next_theta = theta.map(|_| DMatrix::zeros(m, m));
    for i in 0..m {
        for j in i..m {
            let (e_phi, e_dphi) = upper[i][j - i];
            let c = match role {
                LayerRole::Hidden => cfg.weight_variance * e_phi + cfg.bias_variance,
                LayerRole::Readout => e_phi,
            };
            next_cov[(i, j)] = c;
            next_cov[(j, i)] = c;
            if let (Some(t_prev), Some(t_next)) = (theta, next_theta.as_mut()) {
                let chain = match role {
                    LayerRole::Hidden => cfg.weight_variance * e_dphi,
                    LayerRole::Readout => e_dphi,
                };
                let t = c + chain * t_prev[(i, j)];
                t_next[(i, j)] = t;
                t_next[(j, i)] = t;
            }
        }
    }
    Ok((next_cov, next_theta))
}

fn split_blocks(joint: DMatrix<f64>, k: usize, l: usize, kind: GramKind) -> Result<GramPair> {
    linalg::check_finite(&joint, "gram recursion output")?;
    let k_trtr = joint.view((0, 0), (k, k)).into_owned();
    let k_tetr = joint.view((k, 0), (l, k)).into_owned();
    let k_tete = joint.view((k, k), (l, l)).into_owned();
    GramPair::new(k_trtr, k_tetr, k_tete, kind)
}
