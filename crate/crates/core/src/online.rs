//! Streaming decoder and cue/response-time sessions.
//!
//! Samples from a [`FrameSource`] go into a ring holding the last window.
//! Every `step` samples the window is filtered (zero-phase, per window),
//! featurized and classified. In a cued session the first non-rest
//! prediction after a cue ends the trial:
//!
//! ```text
//! Δt = t3 - t0 - reaction_const
//! ```
//!
//! All times are on the sample clock (sample index / fs), so sessions are
//! reproducible regardless of wall-clock pacing. Ingest and inference run
//! cooperatively on the calling thread.

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor, FEATURE_DIM};
use crate::models::{ModelError, TrainedModel};
use crate::preprocess::{ms_to_samples, window_starts, ClassSet, PreprocessConfig, PreprocessError, Sos};
use crate::protocol::{DecodeStats, EMG_CHANNELS};
use crate::recording::{extract_trials, Recording, COL_EMG};
use crate::source::{FrameSource, Poll};
use crate::stats::{mean, trimmed_mean};
use crate::synth::ForceMode;

pub const DEFAULT_REACTION_S: f64 = 0.4;
pub const MIN_CALIBRATION_SAMPLES: usize = 10;
const REST: u8 = 1;

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Trimmed mean of keypress latencies, dropping 10% at each end.
pub fn calibrate_reaction(latencies_s: &[f64]) -> Result<f64, OnlineError> {
    if latencies_s.len() < MIN_CALIBRATION_SAMPLES {
        return Err(OnlineError::Calibration(format!(
            "need at least {MIN_CALIBRATION_SAMPLES} latencies, got {}",
            latencies_s.len()
        )));
    }
    if latencies_s.iter().any(|v| !v.is_finite()) {
        return Err(OnlineError::Calibration("non-finite latency".into()));
    }
    Ok(trimmed_mean(latencies_s, 0.1))
}

/// Filter and featurize one raw window. There is no rest slice inside a
/// window, so no baseline correction is applied.
pub struct WindowPipeline {
    sos: Sos,
    extractor: FeatureExtractor,
}

impl WindowPipeline {
    pub fn new(window: usize, pre: &PreprocessConfig) -> Result<Self, OnlineError> {
        let sos = pre.design()?;
        if window <= sos.pad_len() {
            return Err(OnlineError::Argument(format!("window of {window} samples is shorter than the filter padding")));
        }
        Ok(Self { sos, extractor: FeatureExtractor::new(window, pre.fs)? })
    }

    pub fn window_len(&self) -> usize {
        self.extractor.window_len()
    }

    pub fn features_into(&mut self, raw: &[Vec<f64>], out: &mut Vec<f64>) -> Result<(), OnlineError> {
        let filtered: Vec<Vec<f64>> = raw.iter().map(|ch| self.sos.filtfilt(ch)).collect::<Result<_, _>>()?;
        self.extractor.extract_into(&filtered, out)?;
        Ok(())
    }
}

/// Fixed-capacity ring of the most recent multichannel samples.
#[derive(Debug, Clone)]
pub struct SampleRing {
    data: Vec<[f64; EMG_CHANNELS]>,
    head: usize,
    len: usize,
}

impl SampleRing {
    pub fn new(capacity: usize) -> Self {
        Self { data: vec![[0.0; EMG_CHANNELS]; capacity.max(1)], head: 0, len: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.data.len()
    }

    pub fn push(&mut self, s: [f64; EMG_CHANNELS]) {
        self.data[self.head] = s;
        self.head = (self.head + 1) % self.data.len();
        self.len = (self.len + 1).min(self.data.len());
    }

    /// Channels x len, oldest sample first.
    pub fn channels(&self) -> Vec<Vec<f64>> {
        let cap = self.data.len();
        let start = (self.head + cap - self.len) % cap;
        let mut out: Vec<Vec<f64>> = (0..EMG_CHANNELS).map(|_| Vec::with_capacity(self.len)).collect();
        for i in 0..self.len {
            let s = &self.data[(start + i) % cap];
            for (ch, v) in out.iter_mut().zip(s) {
                ch.push(*v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    /// Samples seen when the window closed (exclusive end of the window).
    pub end_sample: u64,
    pub t_s: f64,
    pub mode: u8,
    /// Wall time spent on filter + features + predict.
    pub latency_us: u64,
}

/// Sliding-window classifier over a sample stream.
pub struct OnlineDecoder<'m> {
    model: &'m TrainedModel,
    pipeline: WindowPipeline,
    ring: SampleRing,
    step: usize,
    fs: f64,
    seen: u64,
    buf: Vec<f64>,
}

impl<'m> OnlineDecoder<'m> {
    pub fn new(model: &'m TrainedModel, window_ms: f64, step_ms: f64, pre: &PreprocessConfig) -> Result<Self, OnlineError> {
        if model.feature_dim != FEATURE_DIM {
            return Err(ModelError::Dimension { expected: FEATURE_DIM, got: model.feature_dim }.into());
        }
        let window = ms_to_samples(window_ms, pre.fs)?;
        let step = ms_to_samples(step_ms, pre.fs)?;
        Ok(Self {
            model,
            pipeline: WindowPipeline::new(window, pre)?,
            ring: SampleRing::new(window),
            step,
            fs: pre.fs,
            seen: 0,
            buf: Vec::with_capacity(FEATURE_DIM),
        })
    }

    pub fn samples_seen(&self) -> u64 {
        self.seen
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Adds one sample; returns a prediction when a step boundary closes a
    /// full window.
    pub fn push(&mut self, emg_uv: [f64; EMG_CHANNELS]) -> Result<Option<WindowPrediction>, OnlineError> {
        self.ring.push(emg_uv);
        self.seen += 1;
        if !self.ring.is_full() || self.seen % self.step as u64 != 0 {
            return Ok(None);
        }
        let started = Instant::now();
        self.buf.clear();
        self.pipeline.features_into(&self.ring.channels(), &mut self.buf)?;
        let mode = self.model.predict_one(ArrayView1::from(&self.buf[..]))?;
        Ok(Some(WindowPrediction {
            end_sample: self.seen,
            t_s: self.seen as f64 / self.fs,
            mode,
            latency_us: started.elapsed().as_micros() as u64,
        }))
    }
}

/// Window-level predictions of a whole stream, with no cueing.
pub fn stream_predictions(
    source: &mut dyn FrameSource,
    decoder: &mut OnlineDecoder<'_>,
    underrun: Duration,
) -> Result<Vec<WindowPrediction>, OnlineError> {
    let mut out = Vec::new();
    let mut idle_since: Option<Instant> = None;
    loop {
        match source.poll(Duration::from_millis(50)) {
            Poll::Finished => break,
            Poll::Pending => {
                if idle_since.get_or_insert_with(Instant::now).elapsed() > underrun {
                    break;
                }
            }
            Poll::Frames(frames) => {
                idle_since = None;
                for f in frames {
                    if let Some(p) = decoder.push(f.to_physical().emg_uv)? {
                        out.push(p);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Predictions on the same windows as [`stream_predictions`], computed in
/// one batch straight from the recording matrix.
pub fn offline_window_predictions(
    rec: &Recording,
    model: &TrainedModel,
    window_ms: f64,
    step_ms: f64,
    pre: &PreprocessConfig,
) -> Result<Vec<(u64, u8)>, OnlineError> {
    let window = ms_to_samples(window_ms, pre.fs)?;
    let step = ms_to_samples(step_ms, pre.fs)?;
    let mut pipeline = WindowPipeline::new(window, pre)?;
    let ends: Vec<usize> = (1..=rec.rows() / step).map(|k| k * step).filter(|&e| e >= window).collect();
    let mut feats = Vec::with_capacity(ends.len() * FEATURE_DIM);
    for &end in &ends {
        pipeline.features_into(&rec.emg(end - window..end), &mut feats)?;
    }
    let x = Array2::from_shape_vec((ends.len(), FEATURE_DIM), feats).expect("feature matrix shape");
    let pred = model.predict(x.view())?;
    Ok(ends.into_iter().map(|e| e as u64).zip(pred).collect())
}

/// Features of raw windows taken from the active part of each trial, for
/// training a model on the same per-window chain the online path uses.
pub fn online_training_set(
    recs: &[Recording],
    window_ms: f64,
    step_ms: f64,
    classes: ClassSet,
    pre: &PreprocessConfig,
) -> Result<(Array2<f64>, Vec<u8>), OnlineError> {
    let window = ms_to_samples(window_ms, pre.fs)?;
    let step = ms_to_samples(step_ms, pre.fs)?;
    let mut pipeline = WindowPipeline::new(window, pre)?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for rec in recs {
        for t in extract_trials(rec).trials.iter().filter(|t| classes.contains(t.trial_id)) {
            for s in window_starts(t.active.len(), window, step)? {
                let start = t.active.start + s;
                pipeline.features_into(&rec.emg(start..start + window), &mut feats)?;
                labels.push(t.trial_id);
            }
        }
    }
    let x = Array2::from_shape_vec((labels.len(), FEATURE_DIM), feats).expect("feature matrix shape");
    Ok((x, labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub window_ms: f64,
    pub step_ms: f64,
    pub n_trials: usize,
    pub seed: u64,
    /// Modes that may be cued (rest excluded).
    pub classes: ClassSet,
    /// Rest between the end of one trial and the next cue.
    pub rest_s: f64,
    /// A cued trial without a non-rest prediction ends after this long.
    pub trial_timeout_s: f64,
    pub reaction_const_s: f64,
    /// Abort when the source delivers nothing for this long.
    pub underrun_timeout: Duration,
    pub preprocess: PreprocessConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            window_ms: 250.0,
            step_ms: 250.0,
            n_trials: 50,
            seed: 1,
            classes: ClassSet::Six,
            rest_s: 2.0,
            trial_timeout_s: 5.0,
            reaction_const_s: DEFAULT_REACTION_S,
            underrun_timeout: Duration::from_secs(1),
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrialResult {
    pub trial: usize,
    pub cued_mode: u8,
    pub predicted_mode: Option<u8>,
    /// Cue time.
    pub t0_s: f64,
    /// First non-rest prediction after the cue.
    pub t3_s: Option<f64>,
    pub reaction_const_s: f64,
    pub delta_t_s: Option<f64>,
    pub correct: bool,
    pub timed_out: bool,
    /// Δt came out negative, i.e. the reaction constant is too large.
    pub reaction_miscalibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub steps: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub budget_ms: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub n_trials: usize,
    pub completed: usize,
    pub correct: usize,
    pub timeouts: usize,
    /// Correct trials over cued trials; timeouts count as errors.
    pub accuracy: f64,
    pub mean_delta_t_s: Option<f64>,
    pub latency: LatencyStats,
    pub aborted: Option<String>,
    pub decode: DecodeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OnlineEvent {
    Prompt { trial: usize, mode_id: u8, text: String, t_s: f64 },
    Prediction { t_s: f64, mode_id: u8, latency_ms: f64 },
    TrialResult(OnlineTrialResult),
    Finished(OnlineSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSession {
    pub trials: Vec<OnlineTrialResult>,
    pub summary: OnlineSummary,
}

enum Phase {
    Resting { until: u64 },
    Cued { mode: u8, t0: u64, deadline: u64 },
}

/// Runs a cued session: rest, cue a random non-rest mode, wait for the first
/// non-rest prediction (or time out), repeat.
pub fn run_online_session(
    source: &mut dyn FrameSource,
    model: &TrainedModel,
    cfg: &OnlineConfig,
    on_event: &mut dyn FnMut(&OnlineEvent),
) -> Result<OnlineSession, OnlineError> {
    let mut decoder = OnlineDecoder::new(model, cfg.window_ms, cfg.step_ms, &cfg.preprocess)?;
    let fs = decoder.fs();
    let to_samples = |s: f64| (s * fs).round() as u64;
    let cue_pool: Vec<u8> = (2..=cfg.classes.count()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials: Vec<OnlineTrialResult> = Vec::new();
    let mut latencies: Vec<f64> = Vec::new();
    let mut phase = Phase::Resting { until: to_samples(cfg.rest_s) };
    let mut aborted = None;
    let mut idle_since: Option<Instant> = None;

    source.prompt(ForceMode::REST, 0);
    'ingest: loop {
        let frames = match source.poll(Duration::from_millis(50)) {
            Poll::Finished => {
                aborted = Some("source finished".to_string());
                break;
            }
            Poll::Pending => {
                if idle_since.get_or_insert_with(Instant::now).elapsed() > cfg.underrun_timeout {
                    aborted = Some(format!("stream underrun longer than {:?}", cfg.underrun_timeout));
                    break;
                }
                continue;
            }
            Poll::Frames(frames) => {
                idle_since = None;
                frames
            }
        };
        for f in frames {
            let Some(pred) = decoder.push(f.to_physical().emg_uv)? else {
                continue;
            };
            let now = pred.end_sample;
            latencies.push(pred.latency_us as f64 / 1000.0);
            on_event(&OnlineEvent::Prediction { t_s: pred.t_s, mode_id: pred.mode, latency_ms: pred.latency_us as f64 / 1000.0 });
            let t_of = |s: u64| s as f64 / fs;
            if let Phase::Cued { mode, t0, deadline } = phase {
                let hit = pred.mode != REST;
                if hit || now >= deadline {
                    let t3 = hit.then(|| t_of(now));
                    let delta = t3.map(|t| t - t_of(t0) - cfg.reaction_const_s);
                    let r = OnlineTrialResult {
                        trial: trials.len(),
                        cued_mode: mode,
                        predicted_mode: hit.then_some(pred.mode),
                        t0_s: t_of(t0),
                        t3_s: t3,
                        reaction_const_s: cfg.reaction_const_s,
                        delta_t_s: delta,
                        correct: hit && pred.mode == mode,
                        timed_out: !hit,
                        reaction_miscalibrated: delta.is_some_and(|d| d < 0.0),
                    };
                    on_event(&OnlineEvent::TrialResult(r.clone()));
                    trials.push(r);
                    source.prompt(ForceMode::REST, now);
                    on_event(&OnlineEvent::Prompt { trial: trials.len(), mode_id: REST, text: "rest".into(), t_s: t_of(now) });
                    phase = Phase::Resting { until: now + to_samples(cfg.rest_s) };
                }
            }
            if let Phase::Resting { until } = phase {
                if now >= until {
                    if trials.len() >= cfg.n_trials {
                        break 'ingest;
                    }
                    let mode = *cue_pool.choose(&mut rng).expect("class set has non-rest modes");
                    let fm = ForceMode::new(mode).expect("mode in 2..=12");
                    source.prompt(fm, now);
                    on_event(&OnlineEvent::Prompt { trial: trials.len(), mode_id: mode, text: fm.label(), t_s: t_of(now) });
                    phase = Phase::Cued { mode, t0: now, deadline: now + to_samples(cfg.trial_timeout_s) };
                }
            }
        }
    }

    let completed: Vec<&OnlineTrialResult> = trials.iter().filter(|t| !t.timed_out).collect();
    let deltas: Vec<f64> = completed.iter().filter_map(|t| t.delta_t_s).collect();
    let correct = trials.iter().filter(|t| t.correct).count();
    let budget_ms = decoder.step() as f64 * 1000.0 / fs;
    let max_ms = latencies.iter().copied().fold(0.0, f64::max);
    let summary = OnlineSummary {
        n_trials: trials.len(),
        completed: completed.len(),
        correct,
        timeouts: trials.len() - completed.len(),
        accuracy: if trials.is_empty() { 0.0 } else { correct as f64 / trials.len() as f64 },
        mean_delta_t_s: (!deltas.is_empty()).then(|| mean(&deltas)),
        latency: LatencyStats {
            steps: latencies.len(),
            mean_ms: if latencies.is_empty() { 0.0 } else { mean(&latencies) },
            max_ms,
            budget_ms,
            within_budget: max_ms < budget_ms,
        },
        aborted,
        decode: source.decode_stats(),
    };
    on_event(&OnlineEvent::Finished(summary.clone()));
    Ok(OnlineSession { trials, summary })
}

/// Raw EMG of recording rows `range`, samples as rows.
pub fn recording_samples(rec: &Recording, range: std::ops::Range<usize>) -> Vec<[f64; EMG_CHANNELS]> {
    range
        .map(|i| {
            let r = rec.row(i);
            let mut s = [0.0; EMG_CHANNELS];
            s.copy_from_slice(&r[COL_EMG..COL_EMG + EMG_CHANNELS]);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        assert!((calibrate_reaction(&[0.4; 10]).unwrap() - 0.4).abs() < 1e-12);
        let mixed: Vec<f64> = [0.35; 5].into_iter().chain([0.45; 5]).collect();
        assert!((calibrate_reaction(&mixed).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(calibrate_reaction(&[0.4; 9]), Err(OnlineError::Calibration(_))));
    }

    #[test]
    fn ring_keeps_latest_in_order() {
        let mut r = SampleRing::new(3);
        for i in 0..5 {
            r.push([i as f64; EMG_CHANNELS]);
        }
        assert!(r.is_full());
        assert_eq!(r.channels()[0], vec![2.0, 3.0, 4.0]);
    }
}
