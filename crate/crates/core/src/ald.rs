//! Asymmetric Laplace primitives: the check loss, the log-density used as the
//! working likelihood, and the scale-to-standard-deviation conversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A quantile level, constrained to the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(q: f64) -> Result<Self> {
        if q.is_finite() && q > 0.0 && q < 1.0 {
            Ok(Self(q))
        } else {
            Err(Error::Validation(format!(
                "quantile level must lie in (0, 1), got {q}"
            )))
        }
    }

    /// The median.
    pub fn median() -> Self {
        Self(0.5)
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(q: f64) -> Result<Self> {
        Self::new(q)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Parameters of an asymmetric Laplace density: location, scale, skewness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AldParams {
    pub mu: f64,
    pub sigma: f64,
    pub q: QuantileLevel,
}

impl AldParams {
    pub fn new(mu: f64, sigma: f64, q: QuantileLevel) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Validation(format!(
                "ALD scale must be positive, got {sigma}"
            )));
        }
        Ok(Self { mu, sigma, q })
    }
}

/// Quantile asymmetric loss ρ_q(u) = u · (q − 1{u < 0}).
#[inline]
pub fn check_loss(u: f64, q: QuantileLevel) -> f64 {
    let q = q.value();
    if u < 0.0 {
        u * (q - 1.0)
    } else {
        u * q
    }
}

/// Log-density of the asymmetric Laplace distribution:
/// log[q(1−q)/σ] − ρ_q((y − μ)/σ).
pub fn ald_logdensity(y: f64, p: &AldParams) -> f64 {
    ald_logpdf_raw(y, p.mu, p.sigma, p.q.value())
}

/// Unchecked fast path used in the inner estimation loops; `sigma` must be
/// positive and `q` in (0, 1).
#[inline]
pub(crate) fn ald_logpdf_raw(y: f64, mu: f64, sigma: f64, q: f64) -> f64 {
    let u = (y - mu) / sigma;
    let loss = if u < 0.0 { u * (q - 1.0) } else { u * q };
    (q * (1.0 - q) / sigma).ln() - loss
}

/// Standard deviation of an ALD with the given scale and skewness:
/// σ · sqrt(1 − 2q + 2q²) / ((1 − q) · q).
pub fn ald_sd(sigma: f64, q: QuantileLevel) -> f64 {
    let q = q.value();
    sigma * (1.0 - 2.0 * q + 2.0 * q * q).sqrt() / ((1.0 - q) * q)
}

/// Inverse CDF of the ALD with location 0; the q-quantile is exactly 0.
pub(crate) fn ald_inv_cdf(u: f64, sigma: f64, q: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&u));
    if u < q {
        sigma / (1.0 - q) * (u / q).ln()
    } else {
        -sigma / q * ((1.0 - u) / (1.0 - q)).ln()
    }
}
