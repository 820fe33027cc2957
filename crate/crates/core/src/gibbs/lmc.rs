//! Maps between the bivariate covariance `(sigma1^2, sigma2^2, gamma)` and the
//! coregionalization form `(s1^2, s2^2, rho)` used by the sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaGamma {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub sigma12: f64,
    pub gamma: f64,
}

/// `sigma1^2 = s1^2`, `sigma12 = rho s1^2`, `sigma2^2 = rho^2 s1^2 + s2^2`,
/// `gamma = rho s1 / sqrt(rho^2 s1^2 + s2^2)`.
pub fn recover_sigma_gamma(s1_sq: f64, s2_sq: f64, rho: f64) -> Result<SigmaGamma> {
    if !(s1_sq > 0.0 && s1_sq.is_finite()) {
        return Err(Error::Parameter(format!("s1^2 must be positive, got {s1_sq}")));
    }
    if !(s2_sq >= 0.0 && s2_sq.is_finite()) || !rho.is_finite() {
        return Err(Error::Parameter(format!("invalid s2^2 = {s2_sq} or rho = {rho}")));
    }
    let sigma12 = rho * s1_sq;
    let sigma2_sq = rho * rho * s1_sq + s2_sq;
    let gamma = if sigma2_sq > 0.0 {
        (rho * s1_sq.sqrt() / sigma2_sq.sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(SigmaGamma {
        sigma1_sq: s1_sq,
        sigma2_sq,
        sigma12,
        gamma,
    })
}

/// Inverse of [`recover_sigma_gamma`]: returns `(s1^2, s2^2, rho)`.
pub fn to_lmc(sigma1_sq: f64, sigma2_sq: f64, gamma: f64) -> Result<(f64, f64, f64)> {
    if !(sigma1_sq > 0.0) || !(sigma2_sq >= 0.0) || !(gamma.abs() <= 1.0) {
        return Err(Error::Parameter(format!(
            "invalid covariance sigma1^2 = {sigma1_sq}, sigma2^2 = {sigma2_sq}, gamma = {gamma}"
        )));
    }
    let sigma12 = gamma * (sigma1_sq * sigma2_sq).sqrt();
    let rho = sigma12 / sigma1_sq;
    let s2_sq = (sigma2_sq * (1.0 - gamma * gamma)).max(0.0);
    Ok((sigma1_sq, s2_sq, rho))
}
