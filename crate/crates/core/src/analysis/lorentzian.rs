//! Damped-oscillator line shape fit.
//!
//! One-sided displacement PSD (per Hz) of a thermally driven oscillator plus a
//! flat detection floor:
//!
//! ```text
//! S(f) = s₀ γ / ((Ω² − ω²)² + γ²ω²) + floor,   ω = 2πf
//! ```
//!
//! For thermal motion `s₀ = 4k_BT/m`, and the area of the peak is
//! `s₀/(4Ω²) = k_BT/(mΩ²)`.

use std::f64::consts::TAU;

use nalgebra::DMatrix;

use super::lsq::{levenberg_marquardt, LeastSquares, LmOptions};
use super::psd::PsdEstimate;
use crate::error::{Error, Result};
use crate::model::K_B;

#[derive(Debug, Clone, PartialEq)]
pub struct LorentzianFit {
    /// Resonance (rad/s).
    pub omega0: f64,
    /// Linewidth (rad/s).
    pub gamma: f64,
    /// Amplitude scale `s₀` (m²·s⁻⁴/Hz for a displacement PSD).
    pub s0: f64,
    /// Flat floor (m²/Hz).
    pub floor: f64,
    /// Covariance of `(omega0, gamma, s0, floor)`.
    pub covariance: DMatrix<f64>,
    /// RMS of the log residuals.
    pub log_residual_rms: f64,
    pub band: (f64, f64),
}

impl LorentzianFit {
    pub fn model(&self, f: f64) -> f64 {
        line(self.omega0, self.gamma, self.s0, TAU * f) + self.floor
    }

    /// Peak area without the floor, `s₀/(4Ω²)`.
    pub fn area(&self) -> f64 {
        self.s0 / (4.0 * self.omega0 * self.omega0)
    }

    /// Temperature implied by the peak area for a particle of mass `m`.
    pub fn temperature(&self, mass: f64) -> f64 {
        self.area() * mass * self.omega0 * self.omega0 / K_B
    }

    pub fn peak_height(&self) -> f64 {
        self.s0 / (self.gamma * self.omega0 * self.omega0)
    }

    pub fn stderr(&self, index: usize) -> f64 {
        self.covariance[(index, index)].max(0.0).sqrt()
    }
}

fn line(omega0: f64, gamma: f64, s0: f64, w: f64) -> f64 {
    let d = omega0 * omega0 - w * w;
    s0 * gamma / (d * d + gamma * gamma * w * w)
}

/// Starting point and fit band (Hz).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianGuess {
    pub omega0: f64,
    pub gamma: f64,
    pub band: (f64, f64),
}

impl LorentzianGuess {
    /// Guess from the highest bin in `[lo, hi]` (Hz), with a linewidth from the
    /// half-maximum crossing.
    pub fn from_peak(psd: &PsdEstimate, lo: f64, hi: f64) -> Option<Self> {
        let (f_pk, p_pk) = psd.peak(lo, hi)?;
        let k = psd.freqs.iter().position(|&f| f == f_pk)?;
        let mut right = k;
        while right + 1 < psd.len() && psd.freqs[right] <= hi && psd.psd[right] > 0.5 * p_pk {
            right += 1;
        }
        let mut left = k;
        while left > 0 && psd.freqs[left] >= lo && psd.psd[left] > 0.5 * p_pk {
            left -= 1;
        }
        let fwhm = (psd.freqs[right] - psd.freqs[left]).max(psd.resolution);
        Some(Self {
            omega0: TAU * f_pk,
            gamma: TAU * fwhm,
            band: (lo, hi),
        })
    }
}

struct LogModel<'a> {
    w: &'a [f64],
    y: &'a [f64],
}

impl LeastSquares for LogModel<'_> {
    fn residuals(&self, q: &[f64]) -> Vec<f64> {
        let (o, g, s, fl) = (q[0].exp(), q[1].exp(), q[2].exp(), q[3].exp());
        self.w
            .iter()
            .zip(self.y)
            .map(|(&w, &y)| (line(o, g, s, w) + fl).ln() - y.ln())
            .collect()
    }
}

/// Covariance with the floor held fixed, for spectra whose floor is far below
/// every bin and therefore undetermined. The floor variance is infinite.
fn peak_only_covariance(model: &LogModel, q: &[f64], rss: f64) -> Option<DMatrix<f64>> {
    let j = model.jacobian(q).columns(0, 3).into_owned();
    let n = j.nrows();
    if n <= 3 {
        return None;
    }
    let inv = (j.transpose() * &j).try_inverse()?;
    let mut cov = DMatrix::zeros(4, 4);
    cov.view_mut((0, 0), (3, 3))
        .copy_from(&(inv * (rss / (n - 3) as f64)));
    cov[(3, 3)] = f64::INFINITY;
    Some(cov)
}

/// Nonlinear least squares on the log of the PSD over `guess.band`.
pub fn fit_lorentzian(psd: &PsdEstimate, guess: &LorentzianGuess) -> Result<LorentzianFit> {
    let (lo, hi) = guess.band;
    let idx: Vec<usize> = psd.band(lo, hi).filter(|&k| psd.psd[k] > 0.0).collect();
    if idx.len() < 8 {
        return Err(Error::FitFailed(
            "fewer than 8 positive PSD bins in the fit band".into(),
        ));
    }
    if !(guess.omega0 > 0.0 && guess.gamma > 0.0) {
        return Err(Error::invalid("guess", "omega0 and gamma must be > 0"));
    }
    let w: Vec<f64> = idx.iter().map(|&k| TAU * psd.freqs[k]).collect();
    let y: Vec<f64> = idx.iter().map(|&k| psd.psd[k]).collect();

    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let floor0 = sorted[sorted.len() / 10].max(1e-300);
    let peak = y.iter().cloned().fold(0.0, f64::max);
    let s0 = ((peak - floor0).max(peak * 1e-3)) * guess.gamma * guess.omega0 * guess.omega0;
    let q0 = [
        guess.omega0.ln(),
        guess.gamma.ln(),
        s0.ln(),
        (0.5 * floor0).ln(),
    ];

    let model = LogModel { w: &w, y: &y };
    let opts = LmOptions {
        max_iter: 500,
        ..LmOptions::default()
    };
    let fit = levenberg_marquardt(&model, &q0, &opts);
    if !fit.converged || fit.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailed(format!(
            "Lorentzian fit did not converge in {} iterations",
            fit.iterations
        )));
    }
    let p: Vec<f64> = fit.params.iter().map(|q| q.exp()).collect();
    let (omega0, gamma, s0, floor) = (p[0], p[1], p[2], p[3]);
    let f0 = omega0 / TAU;
    if f0 < lo || f0 > hi {
        return Err(Error::FitFailed(format!(
            "fitted peak at {f0:.1} Hz lies outside the band"
        )));
    }
    if gamma / TAU < 0.5 * psd.resolution {
        return Err(Error::FitFailed(
            "no resolvable peak: linewidth below the resolution".into(),
        ));
    }
    let height = s0 / (gamma * omega0 * omega0);
    if height < floor {
        return Err(Error::FitFailed("no peak above the noise floor".into()));
    }
    let mut covariance = match fit.covariance {
        Some(c) => c,
        None => peak_only_covariance(&model, &fit.params, fit.rss)
            .ok_or_else(|| Error::FitFailed("singular fit covariance".into()))?,
    };
    for i in 0..4 {
        for j in 0..4 {
            covariance[(i, j)] *= p[i] * p[j];
        }
    }
    let log_residual_rms = (fit.rss / y.len() as f64).sqrt();
    Ok(LorentzianFit {
        omega0,
        gamma,
        s0,
        floor,
        covariance,
        log_residual_rms,
        band: (lo, hi),
    })
}
