//! Scale mixtures of neural-network Gaussian processes.
//!
//! An infinitely wide network whose readout-layer variance `sigma_v^2` is drawn
//! from a prior `H` converges to a scale mixture of NNGPs: conditionally on the
//! scale it is a Gaussian process with covariance `sigma_v^2 * Kbar`, and for an
//! inverse-gamma prior the marginal process is a Student's t process. This crate
//! provides the pieces needed to work with such processes end to end:
//!
//! * [`kernels`] — closed-form NNGP (`Kbar`) and NTK (`ThetaBar`) kernels for
//!   fully-connected networks with erf or ReLU activations.
//! * [`dist`] — multivariate Student's t distributions (density, sampling,
//!   marginalization, conditioning) and scale priors (inverse gamma, Burr XII,
//!   point mass).
//! * [`posterior`] — exact limiting and posterior predictive distributions for
//!   Gaussian likelihoods: the prior limit, the readout-layer training limit,
//!   the full NTK training limit, and the Bayesian t-process posterior.
//! * [`impsampling`] — self-normalized importance sampling for generic scale
//!   priors with O(1) per-sample weight evaluation.
//! * [`svi`] — stochastic variational inference with inducing points for
//!   categorical likelihoods (SVGP and its t-process extension SVTP).
//! * [`finitenet`] — a finite-width MLP simulator used to validate the limit
//!   theorems empirically (prior sampling, closed-form readout training,
//!   full gradient descent).
//! * [`stats`] — Kolmogorov–Smirnov tests and small statistical helpers used
//!   by the verification workflows.

pub mod dist;
pub mod error;
pub mod finitenet;
pub mod impsampling;
pub mod kernels;
pub mod linalg;
pub mod posterior;
pub mod special;
pub mod stats;
pub mod svi;

pub use error::{Error, Result};
