//! Thin wrappers over special functions so that every module (kernels,
//! finite networks, variational inference) evaluates the same definitions.

/// Error function, accurate to better than 1e-15 in absolute error.
#[inline]
pub fn erf(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

/// Derivative of [`erf`]: `2/sqrt(pi) * exp(-x^2)`.
#[inline]
pub fn erf_prime(x: f64) -> f64 {
    std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp()
}

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Digamma function `psi(x) = d/dx ln Gamma(x)`.
#[inline]
pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Trigamma function `psi'(x)`, via the recurrence `psi'(x) = psi'(x+1) + 1/x^2`
/// and the asymptotic series for large arguments.
pub fn trigamma(x: f64) -> f64 {
    assert!(x > 0.0, "trigamma requires x > 0");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // Asymptotic expansion with Bernoulli-number coefficients.
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = 1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)));
    acc + inv * (1.0 + inv * (0.5 + inv * tail))
}

/// Regularized lower incomplete gamma `P(a, x)`.
#[inline]
pub fn gamma_lr(a: f64, x: f64) -> f64 {
    statrs::function::gamma::gamma_lr(a, x)
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
