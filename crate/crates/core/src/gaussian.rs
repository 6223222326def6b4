//! Univariate normal density primitives.

use std::f64::consts::PI;

use crate::model::ArStateParams;

/// A univariate normal distribution `N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1 {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian1 {
    pub fn new(mean: f64, var: f64) -> Self {
        debug_assert!(var > 0.0, "variance must be positive, got {var}");
        Self { mean, var }
    }

    /// Log-density at `x`.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (2.0 * PI * self.var).ln() - d * d / (2.0 * self.var)
    }
}

/// `phi(x; mu, sigma^2)`.
pub fn normal_pdf(x: f64, g: Gaussian1) -> f64 {
    let d = x - g.mean;
    (-d * d / (2.0 * g.var)).exp() / (2.0 * PI * g.var).sqrt()
}

/// `int phi(x; mu1, v1) phi(x; mu2, v2) dx = phi(mu1; mu2, v1 + v2)`.
///
/// The difference is squared, so swapping the arguments gives a bit-identical result.
pub fn product_integral(g1: Gaussian1, g2: Gaussian1) -> f64 {
    normal_pdf(g1.mean, Gaussian1::new(g2.mean, g1.var + g2.var))
}

/// Conditional Gaussian of `x_n` given the state and the last `p` observations.
///
/// `history` is ordered most recent first: `x_{n-1}, x_{n-2}, ..., x_{n-p}`.
pub fn emission_gaussian(history: &[f64], params: &ArStateParams) -> Gaussian1 {
    assert_eq!(
        history.len(),
        params.a.len(),
        "history length must equal the AR order"
    );
    let mean = params.mu
        + params
            .a
            .iter()
            .zip(history)
            .map(|(a, x)| a * (x - params.mu))
            .sum::<f64>();
    Gaussian1::new(mean, params.b * params.b)
}

/// `f_m(x_n)`: the emission density of state `m` at `x_n`.
pub fn emission_density(x_n: f64, history: &[f64], params: &ArStateParams) -> f64 {
    normal_pdf(x_n, emission_gaussian(history, params))
}

/// `ln f_m(x_n)`.
pub fn emission_ln_density(x_n: f64, history: &[f64], params: &ArStateParams) -> f64 {
    emission_gaussian(history, params).ln_pdf(x_n)
}
