//! Beta, diagonal Gaussian and logistic distributions.
//!
//! Beta variates are drawn as a ratio of two Gamma variates (Marsaglia–Tsang).
//! The ratio is formed in log space so that very small shape parameters, whose
//! Gamma draws underflow to zero, still produce a valid proportion.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::special::{digamma_unchecked, log_beta_unchecked};
use crate::autodiff::{sigmoid, softplus, Var};
use crate::error::{contract, domain, Result};

/// Draws are clamped to `[BETA_CLAMP, 1 − BETA_CLAMP]`.
pub const BETA_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaDist {
    alpha: f64,
    beta: f64,
}

impl BetaDist {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return domain(format!("Beta parameters must be positive, got ({alpha}, {beta})"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y < 1.0) {
            return domain(format!("Beta density evaluated outside (0,1): {y}"));
        }
        Ok((self.alpha - 1.0) * y.ln() + (self.beta - 1.0) * (-y).ln_1p()
            - log_beta_unchecked(self.alpha, self.beta))
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let lx = sample_log_gamma(self.alpha, rng);
        let ly = sample_log_gamma(self.beta, rng);
        // X / (X + Y) = σ(ln X − ln Y)
        sigmoid(lx - ly).clamp(BETA_CLAMP, 1.0 - BETA_CLAMP)
    }

    /// `KL(self ‖ other)`.
    pub fn kl(&self, other: &BetaDist) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let (c, d) = (other.alpha, other.beta);
        let psi_ab = digamma_unchecked(a + b);
        log_beta_unchecked(c, d) - log_beta_unchecked(a, b)
            + (a - c) * (digamma_unchecked(a) - psi_ab)
            + (b - d) * (digamma_unchecked(b) - psi_ab)
    }
}

/// `ln G` for `G ~ Gamma(shape, 1)`.
///
/// Marsaglia–Tsang squeeze for `shape ≥ 1`; below one the draw for `shape + 1`
/// is boosted by `U^{1/shape}`, applied additively in log space.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_log_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// Elementwise `KL(Beta(a, b) ‖ Beta(c, d))` recorded on a tape, for
/// differentiable `a`, `b` and constant prior parameters.
pub fn beta_kl_on_tape<'t>(a: Var<'t>, b: Var<'t>, c: f64, d: f64) -> Result<Var<'t>> {
    let tape = a.tape();
    let s = a.add(b)?;
    let psi_s = s.digamma()?;
    // −ln B(a,b) = ln Γ(a+b) − ln Γ(a) − ln Γ(b)
    let neg_lb = s.ln_gamma()?.sub(a.ln_gamma()?)?.sub(b.ln_gamma()?)?;
    let ta = a.add_scalar(-c).mul(a.digamma()?.sub(psi_s)?)?;
    let tb = b.add_scalar(-d).mul(b.digamma()?.sub(psi_s)?)?;
    let k = tape.scalar(log_beta_unchecked(c, d));
    neg_lb.add(ta)?.add(tb)?.add(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return contract(format!(
                "mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            ));
        }
        if let Some(v) = variance.iter().find(|&&v| !(v > 0.0)) {
            return domain(format!("variances must be positive, got {v}"));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            variance: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dims() {
            return contract(format!("point of dimension {} for a {}-D Gaussian", x.len(), self.dims()));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((&xi, &m), &v)| -0.5 * ((2.0 * PI * v).ln() + (xi - m) * (xi - m) / v))
            .sum())
    }

    /// `KL(self ‖ other)` for diagonal covariances.
    pub fn kl(&self, other: &DiagGaussian) -> Result<f64> {
        if self.dims() != other.dims() {
            return contract(format!(
                "KL between Gaussians of dimension {} and {}",
                self.dims(),
                other.dims()
            ));
        }
        let mut acc = -(self.dims() as f64);
        for i in 0..self.dims() {
            let (m1, v1) = (self.mean[i], self.variance[i]);
            let (m2, v2) = (other.mean[i], other.variance[i]);
            acc += (v2 / v1).ln() + v1 / v2 + (m2 - m1) * (m2 - m1) / v2;
        }
        Ok(0.5 * acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticDist {
    location: f64,
    scale: f64,
}

impl LogisticDist {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return domain(format!("logistic scale must be positive, got {scale}"));
        }
        Ok(Self { location, scale })
    }

    pub fn standard() -> Self {
        Self {
            location: 0.0,
            scale: 1.0,
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let t = (x - self.location) / self.scale;
        -t - 2.0 * softplus(-t) - self.scale.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
        self.location + self.scale * (u / (1.0 - u)).ln()
    }
}
