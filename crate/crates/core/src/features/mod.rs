//! Acoustic front-end (MFCC + Δ + ΔΔ) and image-feature ingestion.

pub mod io;

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_array, read_wav, write_array, write_wav, ArrayFile, Precision};

pub const MFCC_DIM: usize = 39;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_filters: usize,
    pub n_cepstra: usize,
    pub preemphasis: f64,
    pub energy_floor: f64,
    pub delta_window: usize,
    /// `None` picks the next power of two ≥ the window length.
    pub fft_size: Option<usize>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_filters: 26,
            n_cepstra: 12,
            preemphasis: 0.97,
            energy_floor: 1e-10,
            delta_window: 2,
            fft_size: None,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames for `n` samples, or `None` if shorter than one window.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        (n >= win).then(|| (n - win) / self.shift_samples(sample_rate) + 1)
    }
}

/// Triangular mel filters spanning 0 Hz to Nyquist, `[n_filters][fft/2+1]`.
pub fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let bins = fft_size / 2 + 1;
    let top = mel(sample_rate as f64 / 2.0);
    let centers: Vec<f64> = (0..n_filters + 2)
        .map(|i| inv(top * i as f64 / (n_filters + 1) as f64) * fft_size as f64 / sample_rate as f64)
        .collect();
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..bins)
                .map(|k| {
                    let k = k as f64;
                    if k <= lo || k >= hi {
                        0.0
                    } else if k <= mid {
                        (k - lo) / (mid - lo)
                    } else {
                        (hi - k) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// 12 cepstra + log energy, then Δ and ΔΔ: returns a `[T, 39]` matrix.
pub fn compute_mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<Tensor> {
    let base = static_features(wave, cfg)?;
    let d1 = delta_features(&base, cfg.delta_window)?;
    let d2 = delta_features(&d1, cfg.delta_window)?;
    let (t, w) = (base.rows(), base.cols());
    let mut out = Vec::with_capacity(t * 3 * w);
    for i in 0..t {
        out.extend_from_slice(base.row(i));
        out.extend_from_slice(d1.row(i));
        out.extend_from_slice(d2.row(i));
    }
    Tensor::matrix(t, 3 * w, out)
}

/// The `[T, n_cepstra + 1]` static part: cepstra c1..cN then log energy.
pub fn static_features(wave: &Waveform, cfg: &MfccConfig) -> Result<Tensor> {
    let sr = wave.sample_rate;
    let win = cfg.window_samples(sr);
    let shift = cfg.shift_samples(sr);
    let frames = cfg.frame_count(wave.samples.len(), sr).ok_or_else(|| {
        Error::invalid(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.samples.len()
        ))
    })?;
    let nfft = cfg.fft_size.unwrap_or_else(|| win.next_power_of_two());
    if nfft < win {
        return Err(Error::invalid(format!("fft size {nfft} smaller than window {win}")));
    }

    let x = &wave.samples;
    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0]);
    for n in 1..x.len() {
        emphasized.push(x[n] - cfg.preemphasis * x[n - 1]);
    }
    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1).max(1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_filters, nfft, sr);
    let nf = cfg.n_filters;
    let dct: Vec<Vec<f64>> = (1..=cfg.n_cepstra)
        .map(|k| {
            (0..nf)
                .map(|m| (2.0 / nf as f64).sqrt() * (PI * k as f64 * (m as f64 + 0.5) / nf as f64).cos())
                .collect()
        })
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let width = cfg.n_cepstra + 1;
    let mut out = Vec::with_capacity(frames * width);
    for f in 0..frames {
        let frame = &emphasized[f * shift..f * shift + win];
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < win { frame[i] * hamming[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(cfg.energy_floor).ln()
            })
            .collect();
        for basis in &dct {
            out.push(basis.iter().zip(&log_mel).map(|(a, b)| a * b).sum());
        }
        out.push(energy.max(cfg.energy_floor).ln());
    }
    Tensor::matrix(frames, width, out)
}

/// Regression deltas `Σ n (c[t+n] − c[t−n]) / (2 Σ n²)` with edge frames replicated.
pub fn delta_features(base: &Tensor, window: usize) -> Result<Tensor> {
    let (t, w) = (base.rows(), base.cols());
    if t == 0 {
        return Err(Error::invalid("delta of an empty feature matrix"));
    }
    if window == 0 {
        return Err(Error::invalid("delta window must be at least 1"));
    }
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let at = |i: isize| base.row(i.clamp(0, t as isize - 1) as usize);
    let mut out = vec![0.0; t * w];
    for i in 0..t {
        for n in 1..=window {
            let (fwd, back) = (at(i as isize + n as isize), at(i as isize - n as isize));
            for j in 0..w {
                out[i * w + j] += n as f64 * (fwd[j] - back[j]);
            }
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    Tensor::matrix(t, w, out)
}

/// Elementwise mean of per-crop image feature vectors.
pub fn mean_over_crops(crops: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = crops.first().ok_or_else(|| Error::invalid("no crops to average"))?;
    let mut acc = vec![0.0; first.len()];
    for c in crops {
        if c.len() != acc.len() {
            return Err(Error::shape(format!("crop dim {} differs from {}", c.len(), acc.len())));
        }
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let n = crops.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}
