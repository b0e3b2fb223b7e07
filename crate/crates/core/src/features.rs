//! Per-window time and frequency features.
//!
//! Every window yields 8 channels x 7 features, laid out channel-major:
//! `[MAV, RMS, MNF, BP 20-60, BP 60-100, BP 100-150, BP 150-250]`. The layout
//! is part of the saved-model format; see [`FEATURE_LAYOUT_TAG`].

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::preprocess::Window;
use crate::protocol::EMG_CHANNELS;

pub const FEATURES_PER_CHANNEL: usize = 7;
pub const FEATURE_DIM: usize = EMG_CHANNELS * FEATURES_PER_CHANNEL;
pub const MIN_PSD_LEN: usize = 64;

/// Band-power edges in Hz; the last band is closed at Nyquist.
pub const BANDS_HZ: [(f64, f64); 4] = [(20.0, 60.0), (60.0, 100.0), (100.0, 150.0), (150.0, 250.0)];

pub const FEATURE_NAMES: [&str; FEATURES_PER_CHANNEL] =
    ["mav", "rms", "mnf", "bp_20_60", "bp_60_100", "bp_100_150", "bp_150_250"];

/// Identifies the feature layout inside saved models.
pub const FEATURE_LAYOUT_TAG: &str = "emg8x7:mav,rms,mnf,bp20-60,bp60-100,bp100-150,bp150-250;hann-periodogram";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("need at least {MIN_PSD_LEN} samples for a PSD, got {0}")]
    TooShort(usize),
    #[error("expected {EMG_CHANNELS} channels, got {0}")]
    Channels(usize),
}

/// One-sided power spectral density in units^2/Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdEstimate {
    pub fn df(&self) -> f64 {
        self.freqs_hz.get(1).copied().unwrap_or(0.0)
    }

    /// Sum of power x df, i.e. the mean square of the windowed signal.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.df()
    }

    /// Spectral moment `sum PSD * f^order` over all bins.
    pub fn moment(&self, order: i32) -> f64 {
        self.freqs_hz.iter().zip(&self.power).map(|(f, p)| p * f.powi(order)).sum()
    }

    /// Power x df over bins with `lo <= f < hi` (`f <= hi` when `closed`).
    pub fn band_power(&self, lo: f64, hi: f64, closed: bool) -> f64 {
        self.freqs_hz
            .iter()
            .zip(&self.power)
            .filter(|(&f, _)| f >= lo && (f < hi || (closed && f <= hi)))
            .map(|(_, p)| p)
            .sum::<f64>()
            * self.df()
    }

    /// Mean frequency; 0 for an all-zero spectrum.
    pub fn mean_frequency(&self) -> f64 {
        let m0 = self.moment(0);
        if m0 > 0.0 {
            self.moment(1) / m0
        } else {
            0.0
        }
    }

    /// Index of the bin closest to `f`.
    pub fn bin_of(&self, f: f64) -> usize {
        let df = self.df();
        if df == 0.0 {
            return 0;
        }
        ((f / df).round() as usize).min(self.power.len() - 1)
    }
}

/// Hann-windowed periodogram with a cached FFT plan for one length.
pub struct Periodogram {
    n: usize,
    fs: f64,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    window_energy: f64,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Periodogram {
    pub fn new(n: usize, fs: f64) -> Result<Self, FeatureError> {
        if n < MIN_PSD_LEN {
            return Err(FeatureError::TooShort(n));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        // periodic Hann
        let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Ok(Self { n, fs, fft, window, window_energy, buf: vec![Complex64::default(); n], scratch })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn estimate(&mut self, x: &[f64]) -> PsdEstimate {
        assert_eq!(x.len(), self.n, "periodogram planned for {} samples", self.n);
        for ((b, &v), &w) in self.buf.iter_mut().zip(x).zip(&self.window) {
            *b = Complex64::new(v * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let bins = self.n / 2 + 1;
        let scale = 1.0 / (self.fs * self.window_energy);
        let nyquist_bin = (self.n % 2 == 0).then_some(self.n / 2);
        let power = (0..bins)
            .map(|k| {
                let p = self.buf[k].norm_sqr() * scale;
                if k == 0 || Some(k) == nyquist_bin {
                    p
                } else {
                    2.0 * p
                }
            })
            .collect();
        let df = self.fs / self.n as f64;
        PsdEstimate { freqs_hz: (0..bins).map(|k| k as f64 * df).collect(), power }
    }
}

pub fn psd(x: &[f64], fs: f64) -> Result<PsdEstimate, FeatureError> {
    Ok(Periodogram::new(x.len(), fs)?.estimate(x))
}

pub fn mav(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.values[ch * FEATURES_PER_CHANNEL..(ch + 1) * FEATURES_PER_CHANNEL]
    }

    pub fn mav(&self, ch: usize) -> f64 {
        self.channel(ch)[0]
    }

    pub fn rms(&self, ch: usize) -> f64 {
        self.channel(ch)[1]
    }

    pub fn mnf(&self, ch: usize) -> f64 {
        self.channel(ch)[2]
    }

    pub fn band_powers(&self, ch: usize) -> &[f64] {
        &self.channel(ch)[3..]
    }
}

/// Column names in layout order, e.g. `ch3_rms`.
pub fn feature_names() -> Vec<String> {
    (1..=EMG_CHANNELS).flat_map(|ch| FEATURE_NAMES.iter().map(move |n| format!("ch{ch}_{n}"))).collect()
}

/// Reusable extractor for a fixed window length.
pub struct FeatureExtractor {
    periodogram: Periodogram,
}

impl FeatureExtractor {
    pub fn new(window_len: usize, fs: f64) -> Result<Self, FeatureError> {
        Ok(Self { periodogram: Periodogram::new(window_len, fs)? })
    }

    pub fn window_len(&self) -> usize {
        self.periodogram.len()
    }

    pub fn extract_into(&mut self, channels: &[Vec<f64>], out: &mut Vec<f64>) -> Result<(), FeatureError> {
        if channels.len() != EMG_CHANNELS {
            return Err(FeatureError::Channels(channels.len()));
        }
        for x in channels {
            if x.len() != self.periodogram.len() {
                return Err(FeatureError::TooShort(x.len()));
            }
            let p = self.periodogram.estimate(x);
            out.push(mav(x));
            out.push(rms(x));
            out.push(p.mean_frequency());
            for (i, &(lo, hi)) in BANDS_HZ.iter().enumerate() {
                out.push(p.band_power(lo, hi, i == BANDS_HZ.len() - 1));
            }
        }
        Ok(())
    }

    pub fn extract(&mut self, channels: &[Vec<f64>]) -> Result<FeatureVector, FeatureError> {
        let mut values = Vec::with_capacity(FEATURE_DIM);
        self.extract_into(channels, &mut values)?;
        Ok(FeatureVector { values })
    }
}

pub fn extract_features(w: &Window, fs: f64) -> Result<FeatureVector, FeatureError> {
    FeatureExtractor::new(w.len(), fs)?.extract(&w.samples)
}
