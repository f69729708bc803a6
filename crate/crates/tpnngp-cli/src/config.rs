//! Experiment configuration: JSON schema, CLI flag overrides, and the
//! canonical hash recorded next to exported artifacts.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tpnngp::dist::ScalePrior;
use tpnngp::kernels::{Activation, NetworkConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default = "default_prior")]
    pub prior: ScalePrior,
    #[serde(default)]
    pub inference: Inference,
    /// Observation jitter; `null` selects `1e-6 * mean(diag Kbar_trtr)`.
    #[serde(default)]
    pub noise_variance: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub svi: SviSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkSection::default(),
            prior: default_prior(),
            inference: Inference::default(),
            noise_variance: None,
            seed: 0,
            split: SplitSection::default(),
            svi: SviSection::default(),
            verify: VerifySection::default(),
            grid: GridSection::default(),
        }
    }
}

fn default_prior() -> ScalePrior {
    ScalePrior::InvGamma {
        shape: 2.0,
        scale: 2.0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub activation: Activation,
    pub weight_variance: f64,
    pub bias_variance: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            depth: 3,
            activation: Activation::Erf,
            weight_variance: 8.0,
            bias_variance: 0.05 * 0.05,
        }
    }
}

impl NetworkSection {
    pub fn to_kernel_config(&self, input_dim: usize) -> Result<NetworkConfig> {
        NetworkConfig::new(
            self.depth,
            self.activation,
            self.weight_variance,
            self.bias_variance,
            input_dim,
        )
        .context("invalid network section")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Exact,
    Is { n_samples: usize },
    Svgp,
    Svtp,
}

impl Default for Inference {
    fn default() -> Self {
        Inference::Exact
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SviSection {
    pub n_inducing: usize,
    pub batch_size: usize,
    pub n_mc: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Inverse-gamma prior `(alpha, beta)` on the scale for SVTP.
    pub scale_prior: (f64, f64),
    pub train_inducing: bool,
    /// Monte-Carlo samples per point for predictive class probabilities.
    pub predict_mc: usize,
}

impl Default for SviSection {
    fn default() -> Self {
        SviSection {
            n_inducing: 64,
            batch_size: 128,
            n_mc: 8,
            steps: 500,
            learning_rate: 1e-2,
            scale_prior: (2.0, 2.0),
            train_inducing: true,
            predict_mc: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub n_nets: usize,
    pub width: usize,
    /// Samples for the distribution-level checks (Lemma B.3).
    pub n_samples: usize,
    /// Also run the deliberately mismatched-dof control.
    pub negative_control: bool,
    pub significance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            n_nets: 1000,
            width: 512,
            n_samples: 100_000,
            negative_control: true,
            significance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Hyperparameter grid for the prior parameters (a, b) or (c, k) or s.
    pub prior_grid: Vec<f64>,
    #[serde(default)]
    pub weight_variances: Option<Vec<f64>>,
    #[serde(default)]
    pub bias_variances: Option<Vec<f64>>,
    #[serde(default)]
    pub depths: Option<Vec<usize>>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            prior_grid: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            weight_variances: None,
            bias_variances: None,
            depths: None,
        }
    }
}

/// Parse `invgamma:a,b | burr:c,k | point:s`.
pub fn parse_prior(spec: &str) -> Result<ScalePrior> {
    let (kind, args) = spec
        .split_once(':')
        .with_context(|| format!("prior spec '{spec}' missing ':'"))?;
    let vals: Vec<f64> = args
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect::<Result<_>>()
        .with_context(|| format!("prior spec '{spec}'"))?;
    let prior = match (kind, vals.as_slice()) {
        ("invgamma", [a, b]) => ScalePrior::inv_gamma(*a, *b),
        ("burr", [c, k]) => ScalePrior::burr_xii(*c, *k),
        ("point", [s]) => ScalePrior::point_mass(*s),
        _ => bail!("prior spec '{spec}' not recognized (invgamma:a,b | burr:c,k | point:s)"),
    };
    prior.map_err(|e| anyhow::anyhow!("{e}"))
}

/// Parse `exact | is:N | svgp | svtp`.
pub fn parse_inference(spec: &str) -> Result<Inference> {
    Ok(match spec {
        "exact" => Inference::Exact,
        "svgp" => Inference::Svgp,
        "svtp" => Inference::Svtp,
        _ => {
            if let Some(rest) = spec.strip_prefix("is:") {
                Inference::Is {
                    n_samples: rest.parse().context("importance-sample count")?,
                }
            } else {
                bail!("inference spec '{spec}' not recognized (exact | is:N | svgp | svtp)")
            }
        }
    })
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.inference, Inference::Exact)
            && !matches!(
                self.prior,
                ScalePrior::InvGamma { .. } | ScalePrior::PointMass { .. }
            )
        {
            bail!("exact inference requires an inverse-gamma or point-mass prior");
        }
        let s = &self.split;
        if !(s.train > 0.0 && s.val >= 0.0 && s.test >= 0.0) {
            bail!("split ratios must be non-negative with a positive train share");
        }
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            bail!("split ratios must sum to 1");
        }
        Ok(())
    }

    /// Canonical JSON used both for records and for the sidecar hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
