//! Short-time Fourier transform for externally supplied time series.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::spectrogram::{min_max_normalize, Modality, Spectrogram};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_length: 64,
            hop: 8,
        }
    }
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Magnitude STFT of a complex series. Rows are the `window_length` DFT bins
/// in natural order (bin 0 = DC), columns are frames.
pub fn stft_complex(series: &[Complex64], cfg: StftConfig, modality: Modality) -> Result<Spectrogram> {
    let mags = frames(series, cfg)?;
    let bins = cfg.window_length;
    to_spectrogram(&mags, bins, modality)
}

/// Magnitude STFT of a real series, keeping the one-sided
/// `window_length / 2 + 1` bins.
pub fn stft_real(series: &[f64], cfg: StftConfig, modality: Modality) -> Result<Spectrogram> {
    let cx: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mags = frames(&cx, cfg)?;
    to_spectrogram(&mags, cfg.window_length / 2 + 1, modality)
}

/// Frame count for a series of `len` samples.
pub fn frame_count(len: usize, cfg: StftConfig) -> Option<usize> {
    (len >= cfg.window_length && cfg.hop > 0).then(|| (len - cfg.window_length) / cfg.hop + 1)
}

fn frames(series: &[Complex64], cfg: StftConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.window_length == 0 || cfg.hop == 0 {
        return Err(Error::arg("window_length and hop must be positive"));
    }
    let n_frames = frame_count(series.len(), cfg).ok_or_else(|| {
        Error::arg(format!(
            "series of length {} is shorter than window {}",
            series.len(),
            cfg.window_length
        ))
    })?;
    let win = hann(cfg.window_length);
    let fft = FftPlanner::new().plan_fft_forward(cfg.window_length);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.window_length];
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = series[start + i] * win[i];
        }
        fft.process(&mut buf);
        out.push(buf.iter().map(|c| c.norm()).collect());
    }
    Ok(out)
}

fn to_spectrogram(frames: &[Vec<f64>], keep: usize, modality: Modality) -> Result<Spectrogram> {
    let w = frames.len();
    let mut raw = vec![0.0; keep * w];
    for (t, frame) in frames.iter().enumerate() {
        for k in 0..keep {
            raw[k * w + t] = frame[k];
        }
    }
    let values = min_max_normalize(&raw).into_iter().map(|v| v as f32).collect();
    Spectrogram::new(modality, keep, w, values)
}
