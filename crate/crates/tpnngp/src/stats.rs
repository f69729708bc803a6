//! Kolmogorov–Smirnov goodness-of-fit machinery used by the verification
//! workflows and the test suites.

/// Outcome of a KS test.
#[derive(Debug, Clone, Copy)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size: `n` for one-sample, `n m / (n + m)` for
    /// two-sample tests.
    pub n_effective: f64,
}

impl KsReport {
    /// Whether the hypothesis survives at significance level `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Asymptotic critical value `c(alpha) / sqrt(n_eff)` with
/// `c(alpha) = sqrt(-ln(alpha/2) / 2)`.
pub fn ks_critical_value(alpha: f64, n_effective: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / n_effective.sqrt()
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn p_value(statistic: f64, n_effective: f64) -> f64 {
    // Stephens' small-sample correction of the asymptotic distribution.
    let sqrt_n = n_effective.sqrt();
    kolmogorov_sf(statistic * (sqrt_n + 0.12 + 0.11 / sqrt_n))
}

/// One-sample KS test of `samples` against the CDF `cdf`.
pub fn ks_one_sample<F>(samples: &[f64], cdf: F) -> KsReport
where
    F: Fn(f64) -> f64,
{
    assert!(!samples.is_empty(), "KS test needs samples");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS samples"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d
            .max((f - i as f64 / n).abs())
            .max(((i + 1) as f64 / n - f).abs());
    }
    KsReport {
        statistic: d,
        p_value: p_value(d, n),
        n_effective: n,
    }
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsReport {
    assert!(!a.is_empty() && !b.is_empty(), "KS test needs samples");
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("NaN in KS samples"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("NaN in KS samples"));
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d = 0.0f64;
    while i < n && j < m {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        d = d.max(diff);
    }
    let n_eff = (n as f64 * m as f64) / (n as f64 + m as f64);
    KsReport {
        statistic: d,
        p_value: p_value(d, n_eff),
        n_effective: n_eff,
    }
}

/// CDF of a scaled/located Student's t: the distribution of
/// `loc + sqrt(scale) * T_dof`. This is the one-dimensional marginal of a
/// multivariate t with scale-matrix entry `scale`.
pub fn student_t_cdf(x: f64, dof: f64, loc: f64, scale: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let t = StudentsT::new(loc, scale.sqrt(), dof).expect("valid t parameters");
    t.cdf(x)
}
