//! Closed-form measurement limits.

use crate::error::{Error, Result};
use crate::model::K_B;

/// Variance `2σ²/n` of a quadrature estimated from `n` samples of per-sample
/// variance `sigma_u_sq`.
pub fn quadrature_variance(sigma_u_sq: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be >= 1"));
    }
    if !(sigma_u_sq >= 0.0) {
        return Err(Error::invalid("sigma_u_sq", "must be >= 0"));
    }
    Ok(2.0 * sigma_u_sq / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoolingLimit {
    /// Minimal mode energy (J).
    pub e_min: f64,
    /// `e_min / k_B` (K).
    pub t_min: f64,
}

/// Energy-transfer cooling floor `½mΩ²S/τ` for detection noise `s_noise`
/// (m²/Hz) and measurement time `tau`.
pub fn cooling_limit(mass: f64, omega: f64, s_noise: f64, tau: f64) -> Result<CoolingLimit> {
    for (name, v) in [
        ("mass", mass),
        ("omega", omega),
        ("s_noise", s_noise),
        ("tau", tau),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(name, "must be > 0"));
        }
    }
    let e_min = 0.5 * mass * omega * omega * s_noise / tau;
    Ok(CoolingLimit {
        e_min,
        t_min: e_min / K_B,
    })
}
