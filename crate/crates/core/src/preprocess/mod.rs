//! Segmentation, zero-phase filtering, baseline correction and dataset
//! splits.
//!
//! The standard chain applied to every trial is: 20-150 Hz Butterworth
//! bandpass (order 4) plus a 50 Hz notch, both zero-phase; then subtraction
//! of the mean of the preceding rest slice; then sliding-window segmentation
//! of the active part.

pub mod filter;
pub mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{Recording, TrialSlice, COL_TIMESTAMP};

pub use filter::{FilterSpec, Sos};
pub use split::{make_split, split_indices, SplitKind, SplitManifest, SplitSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("filter design: {0}")]
    Design(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("split selects no {side} windows: {spec}")]
    EmptySplit { side: &'static str, spec: String },
}

/// Which force modes take part in a classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassSet {
    /// Rest plus the five single-finger modes (1..=6).
    Six,
    /// All twelve modes.
    Twelve,
}

impl ClassSet {
    pub fn count(self) -> u8 {
        match self {
            ClassSet::Six => 6,
            ClassSet::Twelve => 12,
        }
    }

    pub fn contains(self, mode: u8) -> bool {
        (1..=self.count()).contains(&mode)
    }

    pub fn from_count(n: u8) -> Option<Self> {
        match n {
            6 => Some(ClassSet::Six),
            12 => Some(ClassSet::Twelve),
            _ => None,
        }
    }
}

/// Provenance of one segmented window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowMeta {
    pub label: u8,
    pub block: u8,
    pub speed_kmh: u8,
    pub subject_id: u32,
    pub day_id: u32,
    pub t_start_ms: u64,
}

impl WindowMeta {
    pub fn sort_key(&self) -> (u32, u32, u8, u64) {
        (self.subject_id, self.day_id, self.block, self.t_start_ms)
    }
}

pub trait HasWindowMeta {
    fn window_meta(&self) -> &WindowMeta;
}

impl HasWindowMeta for WindowMeta {
    fn window_meta(&self) -> &WindowMeta {
        self
    }
}

/// An 8 x W slice of preprocessed sEMG.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Vec<Vec<f64>>,
    pub meta: WindowMeta,
}

impl Window {
    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl HasWindowMeta for Window {
    fn window_meta(&self) -> &WindowMeta {
        &self.meta
    }
}

/// Converts a duration to a whole number of samples.
pub fn ms_to_samples(ms: f64, fs: f64) -> Result<usize, PreprocessError> {
    let exact = ms * fs / 1000.0;
    let n = exact.round();
    if !(ms > 0.0) || (exact - n).abs() > 1e-9 || n < 1.0 {
        return Err(PreprocessError::Argument(format!("{ms} ms is not a whole number of samples at {fs} Hz")));
    }
    Ok(n as usize)
}

/// Window start offsets `0, step, 2 step, ...` with `start + window <= n`.
pub fn window_starts(n: usize, window: usize, step: usize) -> Result<impl Iterator<Item = usize>, PreprocessError> {
    if step == 0 {
        return Err(PreprocessError::Argument("step must be positive".into()));
    }
    if window == 0 {
        return Err(PreprocessError::Argument("window must be positive".into()));
    }
    let count = if n < window { 0 } else { (n - window) / step + 1 };
    Ok((0..count).map(move |i| i * step))
}

/// Slices a channels x N trial into channels x W windows.
pub fn segment_windows(trial: &[Vec<f64>], window: usize, step: usize) -> Result<Vec<Vec<Vec<f64>>>, PreprocessError> {
    let n = trial.first().map_or(0, Vec::len);
    Ok(window_starts(n, window, step)?
        .map(|s| trial.iter().map(|ch| ch[s..s + window].to_vec()).collect())
        .collect())
}

/// Subtracts each channel's mean over its first `baseline_len` samples.
pub fn baseline_correct(trial: &[Vec<f64>], baseline_len: usize) -> Result<Vec<Vec<f64>>, PreprocessError> {
    if baseline_len == 0 {
        return Err(PreprocessError::Argument("baseline length must be positive".into()));
    }
    trial
        .iter()
        .map(|ch| {
            if baseline_len > ch.len() {
                return Err(PreprocessError::Argument(format!(
                    "baseline of {baseline_len} samples exceeds trial length {}",
                    ch.len()
                )));
            }
            let mean = ch[..baseline_len].iter().sum::<f64>() / baseline_len as f64;
            Ok(ch.iter().map(|v| v - mean).collect())
        })
        .collect()
}

/// Settings of the fixed preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub fs: f64,
    pub filters: Vec<FilterSpec>,
    pub baseline_correction: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            fs: crate::protocol::SAMPLE_RATE_HZ,
            filters: vec![
                FilterSpec::Bandpass { low_hz: 20.0, high_hz: 150.0, order: 4 },
                FilterSpec::Notch { center_hz: 50.0, q: 30.0 },
            ],
            baseline_correction: true,
        }
    }
}

impl PreprocessConfig {
    pub fn design(&self) -> Result<Sos, PreprocessError> {
        self.filters
            .iter()
            .try_fold(Sos::default(), |acc, spec| Ok(acc.chain(Sos::design(spec, self.fs)?)))
    }
}

/// Filter bank shared across trials of one dataset build.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    sos: Sos,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self, PreprocessError> {
        let sos = config.design()?;
        Ok(Self { config, sos })
    }

    pub fn sos(&self) -> &Sos {
        &self.sos
    }

    pub fn filter_channels(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PreprocessError> {
        x.iter().map(|ch| self.sos.filtfilt(ch)).collect()
    }

    /// Filters baseline+active together, removes the baseline mean and
    /// returns only the active part (channels x active samples).
    pub fn trial_active(&self, rec: &Recording, trial: &TrialSlice) -> Result<Vec<Vec<f64>>, PreprocessError> {
        let raw = rec.emg(trial.baseline.start..trial.active.end);
        let filtered = self.filter_channels(&raw)?;
        let base = trial.baseline.len();
        let corrected = if self.config.baseline_correction && base > 0 {
            baseline_correct(&filtered, base)?
        } else {
            filtered
        };
        Ok(corrected.into_iter().map(|mut ch| ch.split_off(base)).collect())
    }

    /// Preprocesses one trial and cuts its active part into windows.
    pub fn trial_windows(
        &self,
        rec: &Recording,
        trial: &TrialSlice,
        window: usize,
        step: usize,
    ) -> Result<Vec<Window>, PreprocessError> {
        let active = self.trial_active(rec, trial)?;
        let n = active.first().map_or(0, Vec::len);
        Ok(window_starts(n, window, step)?
            .map(|s| Window {
                samples: active.iter().map(|ch| ch[s..s + window].to_vec()).collect(),
                meta: WindowMeta {
                    label: trial.trial_id,
                    block: trial.block,
                    speed_kmh: trial.speed_kmh,
                    subject_id: rec.meta.subject_id,
                    day_id: rec.meta.day_id,
                    t_start_ms: rec.value(trial.active.start + s, COL_TIMESTAMP) as u64,
                },
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        let count = |n, w, s| window_starts(n, w, s).unwrap().count();
        assert_eq!(count(4000, 125, 125), 32);
        assert_eq!(count(4000, 250, 125), 31);
        assert_eq!(count(100, 125, 125), 0);
        assert!(window_starts(100, 10, 0).is_err());
    }

    #[test]
    fn ms_conversion() {
        assert_eq!(ms_to_samples(250.0, 500.0).unwrap(), 125);
        assert_eq!(ms_to_samples(750.0, 500.0).unwrap(), 375);
        assert!(ms_to_samples(1.0, 500.0).is_err());
    }

    #[test]
    fn baseline_removes_offset() {
        let ch: Vec<f64> = (0..50).map(|i| 12.5 + if i >= 20 { (i as f64).sin() } else { 0.0 }).collect();
        let out = baseline_correct(&[ch.clone()], 20).unwrap();
        assert!(out[0][..20].iter().all(|v| *v == 0.0));
        for (a, b) in out[0].iter().zip(&ch) {
            assert_eq!(*a, b - 12.5);
        }
        assert!(baseline_correct(&[ch.clone()], 0).is_err());
        assert!(baseline_correct(&[ch], 51).is_err());
    }

    #[test]
    fn centered_baseline_is_untouched() {
        let ch = vec![1.0, -1.0, 2.0, -2.0, 7.0, 3.0];
        assert_eq!(baseline_correct(&[ch.clone()], 4).unwrap()[0], ch);
    }

    #[test]
    fn default_chain_designs() {
        let p = Preprocessor::new(PreprocessConfig::default()).unwrap();
        assert_eq!(p.sos().order(), 10);
    }
}
