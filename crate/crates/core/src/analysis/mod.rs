//! Spectral estimation, fitting, energy extraction and cooling-limit formulas.

pub mod energy;
pub mod limits;
pub mod lorentzian;
pub mod lsq;
pub mod psd;

pub use energy::{energy_timeseries, volts_scale_from_psd, EnergySeries};
pub use limits::{cooling_limit, quadrature_variance, CoolingLimit};
pub use lorentzian::{fit_lorentzian, LorentzianFit, LorentzianGuess};
pub use psd::{welch_psd, PsdEstimate};

/// Ordinary least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    pub residual_rms: f64,
}

/// Fits a line; `None` with fewer than three points or constant `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len().min(y.len());
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - intercept - slope * xi).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        slope_stderr: (rss / (nf - 2.0) / sxx).sqrt(),
        r_squared,
        residual_rms: (rss / nf).sqrt(),
    })
}
