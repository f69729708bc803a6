//! Shared quadrature oracles for the integration suites. Everything here is
//! an independent numerical route: no closed-form kernel or density formulas
//! from the library are used.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Gauss–Hermite nodes and weights for the weight function `exp(-t^2)`
/// (Golub–Welsch on the Jacobi matrix).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / ((2.0 * kf - 1.0) * (2.0 * kf + 1.0)).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

/// `E[f(u) g(v)]` for `(u, v)` centered Gaussian with covariance
/// `[[c11, c12], [c12, c22]]`, by tensor Gauss–Hermite. Spectrally accurate
/// for smooth `f`, `g`.
pub fn gaussian_pair_expectation_gh(
    c11: f64,
    c22: f64,
    c12: f64,
    n: usize,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> f64 {
    let (t, w) = gauss_hermite(n);
    let l11 = c11.sqrt();
    let (l21, l22) = if l11 > 0.0 {
        let l21 = c12 / l11;
        (l21, (c22 - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, c22.sqrt())
    };
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut acc = 0.0;
    for i in 0..n {
        let u = sqrt2 * l11 * t[i];
        let fu = f(u);
        if fu == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for jj in 0..n {
            let v = sqrt2 * (l21 * t[i] + l22 * t[jj]);
            inner += w[jj] * g(v);
        }
        acc += w[i] * fu * inner;
    }
    acc / std::f64::consts::PI
}

fn bivariate_normal_pdf(u: f64, v: f64, c11: f64, c22: f64, c12: f64) -> f64 {
    let det = c11 * c22 - c12 * c12;
    let quad = (c22 * u * u - 2.0 * c12 * u * v + c11 * v * v) / det;
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

fn correlation_near_unit(c11: f64, c22: f64, c12: f64) -> Option<f64> {
    let rho = c12 / (c11 * c22).sqrt();
    (1.0 - rho.abs() < 1e-10).then_some(rho.signum())
}

/// `E[relu(u) relu(v)]` by restricting the expectation to the positive
/// quadrant (where the integrand `u v p(u, v)` is smooth) and integrating
/// with tensor Gauss–Legendre on a truncated box. Degenerate correlations
/// (|rho| = 1, e.g. diagonal kernel entries) fall back to the exact 1D
/// integral along the support line.
pub fn relu_pair_expectation_quadrature(c11: f64, c22: f64, c12: f64, n: usize) -> f64 {
    if c11 <= 0.0 || c22 <= 0.0 {
        return 0.0;
    }
    if let Some(sign) = correlation_near_unit(c11, c22, c12) {
        // v = sign * sqrt(c22/c11) u almost surely.
        let ratio = (c22 / c11).sqrt() * sign;
        let su = c11.sqrt();
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        return simpson(0.0, 12.0, 4 * n, |t| {
            let u = su * t;
            u.max(0.0) * (ratio * u).max(0.0) * pdf(t)
        });
    }
    let (t, w) = gauss_legendre(n);
    let (hu, hv) = (12.0 * c11.sqrt(), 12.0 * c22.sqrt());
    let mut acc = 0.0;
    for i in 0..n {
        let u = 0.5 * hu * (t[i] + 1.0);
        for j in 0..n {
            let v = 0.5 * hv * (t[j] + 1.0);
            acc += w[i] * w[j] * u * v * bivariate_normal_pdf(u, v, c11, c22, c12);
        }
    }
    acc * 0.25 * hu * hv
}

/// `E[step(u) step(v)] = P(u > 0, v > 0)`, same quadrant quadrature.
pub fn step_pair_expectation_quadrature(c11: f64, c22: f64, c12: f64, n: usize) -> f64 {
    if c11 <= 0.0 || c22 <= 0.0 {
        return 0.0;
    }
    if let Some(sign) = correlation_near_unit(c11, c22, c12) {
        return if sign > 0.0 { 0.5 } else { 0.0 };
    }
    let (t, w) = gauss_legendre(n);
    let (hu, hv) = (12.0 * c11.sqrt(), 12.0 * c22.sqrt());
    let mut acc = 0.0;
    for i in 0..n {
        let u = 0.5 * hu * (t[i] + 1.0);
        for j in 0..n {
            let v = 0.5 * hv * (t[j] + 1.0);
            acc += w[i] * w[j] * bivariate_normal_pdf(u, v, c11, c22, c12);
        }
    }
    acc * 0.25 * hu * hv
}

/// Composite-Simpson integral of `f` on `[a, b]` with `2m` panels.
pub fn simpson(a: f64, b: f64, m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = 2 * m;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let coeff = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += coeff * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
