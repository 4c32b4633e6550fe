//! Welch power spectral density.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One-sided PSD on a uniform frequency grid `k·resolution`, normalized so
/// that `Σ psd·Δf` is the variance of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    /// Frequencies (Hz).
    pub freqs: Vec<f64>,
    /// PSD (unit²/Hz).
    pub psd: Vec<f64>,
    pub segments: usize,
    /// Bin spacing (Hz).
    pub resolution: f64,
}

impl PsdEstimate {
    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    /// `Σ psd·Δf` over all bins.
    pub fn area(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution
    }

    /// `Σ psd·Δf` over bins with `lo ≤ f ≤ hi`.
    pub fn band_area(&self, lo: f64, hi: f64) -> f64 {
        self.band(lo, hi).map(|k| self.psd[k]).sum::<f64>() * self.resolution
    }

    /// Frequency and value of the largest bin in `[lo, hi]`.
    pub fn peak(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        self.band(lo, hi)
            .max_by(|&a, &b| self.psd[a].total_cmp(&self.psd[b]))
            .map(|k| (self.freqs[k], self.psd[k]))
    }

    /// Indices of bins with `lo ≤ f ≤ hi`.
    pub fn band(&self, lo: f64, hi: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.freqs.len()).filter(move |&k| self.freqs[k] >= lo && self.freqs[k] <= hi)
    }
}

/// Welch estimate with Hann-windowed, mean-detrended segments of
/// `segment_len` samples overlapping by `overlap` samples.
pub fn welch_psd(
    series: &[f64],
    sample_rate: f64,
    segment_len: usize,
    overlap: usize,
) -> Result<PsdEstimate> {
    if segment_len < 4 {
        return Err(Error::Config(
            "PSD segment must hold at least 4 samples".into(),
        ));
    }
    if overlap >= segment_len {
        return Err(Error::Config(
            "PSD overlap must be shorter than the segment".into(),
        ));
    }
    if series.len() < segment_len {
        return Err(Error::Config(format!(
            "series of {} samples is shorter than the PSD segment ({segment_len})",
            series.len()
        )));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample_rate", "must be > 0"));
    }
    let n = segment_len;
    let window: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / n as f64).cos())
        .collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let hop = n - overlap;
    let mut segments = 0;
    let mut start = 0;
    while start + n <= series.len() {
        let seg = &series[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for (b, (&x, &w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (sample_rate * wss * segments as f64);
    let psd = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            p * scale * if edge { 1.0 } else { 2.0 }
        })
        .collect();
    let resolution = sample_rate / n as f64;
    Ok(PsdEstimate {
        freqs: (0..bins).map(|k| k as f64 * resolution).collect(),
        psd,
        segments,
        resolution,
    })
}
