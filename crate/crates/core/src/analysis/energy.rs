//! Mode energies from position records and the detector calibration.

use std::f64::consts::TAU;

use super::psd::PsdEstimate;
use crate::error::{Error, Result};
use crate::feedback::Mode;
use crate::fullsim::{demodulate_hann, MeasuredRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct EnergySeries {
    pub t: Vec<f64>,
    /// Energies (J).
    pub joules: Vec<f64>,
    /// Energies in units of `kbt`.
    pub kbt_units: Vec<f64>,
}

/// `E(t) = ½mΩ²|c(t)|²` from Hann-window demodulation of one channel at
/// `omega`, with windows of length `window` every `window/2`.
pub fn energy_timeseries(
    record: &MeasuredRecord,
    mode: Mode,
    omega: f64,
    mass: f64,
    window: f64,
    kbt: f64,
) -> Result<EnergySeries> {
    if !(window >= 4.0 * TAU / omega) {
        return Err(Error::Config(format!(
            "energy window {window:e} s must span at least 4 periods ({:e} s)",
            4.0 * TAU / omega
        )));
    }
    let samples = record.channel(mode);
    let n = (window * record.sample_rate).round() as usize;
    let hop = (n / 2).max(1);
    let mut out = EnergySeries {
        t: Vec::new(),
        joules: Vec::new(),
        kbt_units: Vec::new(),
    };
    let mut start = 0;
    while start + n <= samples.len() {
        let q = demodulate_hann(samples, record.t0, record.sample_rate, omega, start, n);
        let e = 0.5 * mass * omega * omega * q.c.norm_sqr();
        out.t.push(q.t);
        out.joules.push(e);
        out.kbt_units.push(e / kbt);
        start += hop;
    }
    Ok(out)
}

/// Detector gain (m per signal unit) from the equipartition area of a peak:
/// the PSD of the raw signal integrated over `band` (Hz) must equal
/// `k_BT/(mΩ²)` after conversion.
pub fn volts_scale_from_psd(
    psd: &PsdEstimate,
    band: (f64, f64),
    kbt: f64,
    mass: f64,
    omega: f64,
) -> Result<f64> {
    let area = psd.band_area(band.0, band.1);
    if !(area > 0.0) {
        return Err(Error::FitFailed("no power in the calibration band".into()));
    }
    Ok((kbt / (mass * omega * omega) / area).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::welch_psd;
    use approx::assert_relative_eq;

    #[test]
    fn flat_series_for_steady_oscillation() {
        let omega = TAU * 141e3;
        let rate = 2e6;
        let m = 2.9e-18;
        let e0 = 4.1e-21;
        let amp = (2.0 * e0 / (m * omega * omega)).sqrt();
        let y: Vec<f64> = (0..40_000)
            .map(|k| amp * (omega * k as f64 / rate + 0.3).cos())
            .collect();
        let rec = MeasuredRecord {
            t0: 0.0,
            sample_rate: rate,
            x: vec![0.0; y.len()],
            y,
            labels: ["x_m", "y_m"],
        };
        let s = energy_timeseries(&rec, Mode::Y, omega, m, 1e-4, 4.1e-21).unwrap();
        assert!(s.t.len() > 100);
        for e in &s.kbt_units {
            assert_relative_eq!(*e, 1.0, max_relative = 1e-2);
        }
        assert!(energy_timeseries(&rec, Mode::Y, omega, m, 1e-5, 4.1e-21).is_err());
    }

    #[test]
    fn recovers_detector_gain() {
        let omega = TAU * 115e3;
        let rate = 2e6;
        let (m, kbt) = (2.9e-18, 4.14e-21);
        let amp = (2.0 * kbt / (m * omega * omega)).sqrt();
        let gain = 3.7e7;
        let volts: Vec<f64> = (0..1 << 16)
            .map(|k| gain * amp * (omega * k as f64 / rate).cos())
            .collect();
        let psd = welch_psd(&volts, rate, 4096, 2048).unwrap();
        let scale = volts_scale_from_psd(&psd, (100e3, 130e3), kbt, m, omega).unwrap();
        assert_relative_eq!(scale * gain, 1.0, max_relative = 0.03);
    }
}
