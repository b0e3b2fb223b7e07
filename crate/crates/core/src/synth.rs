//! Synthetic wristband: sEMG-like signals per force mode, treadmill motion
//! artifacts, accelerometer gait, full paradigm sessions and a paced frame
//! stream.
//!
//! Signal model per channel `c`:
//!
//! ```text
//! emg[c] = sum over active fingers f of  effect(intensity) * A * G[f][c] * s_f(t)
//!        + artifact_gain(speed) * d_c(t)
//!        + noise_floor * n_c(t)
//! ```
//!
//! `s_f` is unit-variance Gaussian noise band-limited to finger `f`'s source
//! band (a sub-band of the sEMG band that differs between fingers and, a
//! little, between subjects),
//! `d_c` unit-variance drift band-limited below 20 Hz, `n_c` white, and
//! `effect(x) = 1 - exp(-3x)`.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::net::{TcpListener, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::filter::{FilterSpec, Sos, StreamingSos};
use crate::protocol::{
    counts_to_physical, physical_to_frame, Frame, FrameDecoder, ACCEL_AXES, EMG_CHANNELS, FRAME_LEN, SAMPLE_RATE_HZ,
};
use crate::recording::{paradigm_schedule, Recording, RecordingMeta, Row, Schedule, Segment, SPEEDS_KMH};
use crate::source::{FrameSource, Poll};

pub const N_FINGERS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown treadmill speed {0} km/h")]
    UnknownSpeed(u8),
    #[error("invalid force mode {0}, expected 1..=12")]
    Mode(u8),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Little,
}

impl Finger {
    pub const ALL: [Finger; N_FINGERS] = [Finger::Thumb, Finger::Index, Finger::Middle, Finger::Ring, Finger::Little];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One of the twelve prompted hand states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForceMode(u8);

impl ForceMode {
    pub const REST: ForceMode = ForceMode(1);

    pub fn new(id: u8) -> Result<Self, SynthError> {
        if (1..=12).contains(&id) {
            Ok(ForceMode(id))
        } else {
            Err(SynthError::Mode(id))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn is_rest(self) -> bool {
        self.0 == 1
    }

    pub fn fingers(self) -> &'static [Finger] {
        use Finger::*;
        match self.0 {
            1 => &[],
            2 => &[Thumb],
            3 => &[Index],
            4 => &[Middle],
            5 => &[Ring],
            6 => &[Little],
            7 => &[Thumb, Index],
            8 => &[Index, Middle],
            9 => &[Middle, Ring],
            10 => &[Ring, Little],
            11 => &[Thumb, Middle],
            12 => &[Index, Ring],
            _ => unreachable!("ForceMode is validated on construction"),
        }
    }

    pub fn label(self) -> String {
        match self.fingers() {
            [] => "rest".to_string(),
            fingers => fingers.iter().map(|f| format!("{f:?}").to_lowercase()).collect::<Vec<_>>().join("+"),
        }
    }
}

/// How strongly individual subjects deviate from the nominal gain matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectVariability {
    /// Std of each finger's fractional spatial shift, in channels.
    pub center_jitter_ch: f64,
    /// Std of the log of each gain entry's multiplicative factor.
    pub gain_log_std: f64,
    /// Std of the log of the subject's overall amplitude factor.
    pub amplitude_log_std: f64,
    /// Std of the shift applied to each finger's source band, Hz.
    pub band_shift_hz: f64,
}

impl Default for SubjectVariability {
    fn default() -> Self {
        Self { center_jitter_ch: 1.5, gain_log_std: 0.6, amplitude_log_std: 0.25, band_shift_hz: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub fs: f64,
    /// Finger (rows: thumb..little) to channel coupling.
    pub gain_matrix: [[f64; EMG_CHANNELS]; N_FINGERS],
    /// Envelope of all muscle activity.
    pub emg_band_hz: (f64, f64),
    /// Source band of each finger's muscles, inside `emg_band_hz`.
    pub finger_bands_hz: [(f64, f64); N_FINGERS],
    /// RMS of a finger source at unit gain and full effect, microvolts.
    pub activation_uv: f64,
    pub artifact_band_hz: (f64, f64),
    /// Motion-artifact RMS per channel in microvolts, keyed by km/h.
    pub artifact_gain_per_speed: BTreeMap<u8, f64>,
    pub intensity: f64,
    pub noise_floor_uv: f64,
    pub subject_variability: SubjectVariability,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            fs: SAMPLE_RATE_HZ,
            gain_matrix: default_gain_matrix(),
            emg_band_hz: (20.0, 150.0),
            finger_bands_hz: default_finger_bands(),
            activation_uv: 30.0,
            artifact_band_hz: (0.5, 10.0),
            artifact_gain_per_speed: BTreeMap::from([(0, 3.0), (4, 20.0), (6, 35.0), (8, 50.0)]),
            intensity: 1.0,
            noise_floor_uv: 4.0,
            subject_variability: SubjectVariability::default(),
        }
    }
}

/// Gaussian spatial bumps around the wrist; each finger peaks on its own
/// electrode (0, 2, 3, 5, 6).
pub fn default_gain_matrix() -> [[f64; EMG_CHANNELS]; N_FINGERS] {
    const CENTERS: [f64; N_FINGERS] = [0.0, 1.6, 3.2, 4.8, 6.4];
    const WIDTH: f64 = 1.0;
    let mut g = [[0.0; EMG_CHANNELS]; N_FINGERS];
    for (row, &c) in g.iter_mut().zip(&CENTERS) {
        for (ch, v) in row.iter_mut().enumerate() {
            let d = circular_distance(ch as f64, c);
            *v = 0.05 + (-d * d / (2.0 * WIDTH * WIDTH)).exp();
        }
    }
    g
}

/// 24 Hz wide source bands centered from 40 to 130 Hz, thumb lowest.
pub fn default_finger_bands() -> [(f64, f64); N_FINGERS] {
    std::array::from_fn(|f| {
        let center = 40.0 + 22.5 * f as f64;
        (center - 12.0, center + 12.0)
    })
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let n = EMG_CHANNELS as f64;
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, v)| if *v > xs[best] { i } else { best })
}

/// Saturating map from normalized intensity to amplitude factor.
pub fn intensity_effect(intensity: f64) -> f64 {
    1.0 - (-3.0 * intensity).exp()
}

impl SynthConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|e| SynthError::Config(format!("{}: {e}", path.display())))?;
        let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| SynthError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.fs != SAMPLE_RATE_HZ {
            return err(format!("fs must be {SAMPLE_RATE_HZ} Hz, got {}", self.fs));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return err(format!("intensity {} outside [0, 1]", self.intensity));
        }
        if self.gain_matrix.iter().flatten().any(|g| !(*g >= 0.0)) {
            return err("gain matrix entries must be non-negative".into());
        }
        let mut peaks: Vec<usize> = self.gain_matrix.iter().map(|r| argmax(r)).collect();
        peaks.sort_unstable();
        peaks.dedup();
        if peaks.len() != N_FINGERS {
            return err("every finger's gain row needs a distinct peak channel".into());
        }
        for s in SPEEDS_KMH {
            if !self.artifact_gain_per_speed.contains_key(&s) {
                return err(format!("missing artifact gain for {s} km/h"));
            }
        }
        let gains: Vec<f64> = self.artifact_gain_per_speed.values().copied().collect();
        if gains.windows(2).any(|w| w[1] < w[0]) || gains.iter().any(|g| *g < 0.0) {
            return err("artifact gain must be non-negative and non-decreasing in speed".into());
        }
        let (lo, hi) = self.emg_band_hz;
        if !(0.0 < lo && lo < hi && hi < self.fs / 2.0) {
            return err(format!("emg band {lo}..{hi} Hz invalid"));
        }
        if self.finger_bands_hz.iter().any(|&(a, b)| !(lo <= a && a < b && b <= hi)) {
            return err("finger bands must be increasing and inside the emg band".into());
        }
        if !(self.noise_floor_uv >= 0.0 && self.activation_uv >= 0.0) {
            return err("noise floor and activation amplitude must be non-negative".into());
        }
        Ok(())
    }

    pub fn artifact_gain(&self, speed_kmh: u8) -> Result<f64, SynthError> {
        self.artifact_gain_per_speed.get(&speed_kmh).copied().ok_or(SynthError::UnknownSpeed(speed_kmh))
    }

    /// Gain matrix of one subject's anatomy on a given wearing: per-subject
    /// perturbation (seeded by subject id) then a rotation of the columns by
    /// `wearing_shift` electrodes.
    pub fn subject_gains(&self, subject_id: u32, wearing_shift: usize) -> [[f64; EMG_CHANNELS]; N_FINGERS] {
        self.subject_anatomy(subject_id, wearing_shift).gains
    }

    /// Gains plus source bands of one subject; the bands do not depend on
    /// how the band is worn.
    pub fn subject_anatomy(&self, subject_id: u32, wearing_shift: usize) -> Anatomy {
        let (lo, hi) = self.emg_band_hz;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 0xBA_4D, u64::from(subject_id)]));
        let shift = Normal::new(0.0, self.subject_variability.band_shift_hz.max(0.0)).expect("finite std");
        let mut bands = self.finger_bands_hz;
        for b in bands.iter_mut() {
            let width = b.1 - b.0;
            let a = (b.0 + shift.sample(&mut rng)).clamp(lo, hi - width);
            *b = (a, a + width);
        }
        Anatomy { gains: self.perturbed_gains(subject_id, wearing_shift), bands }
    }

    fn perturbed_gains(&self, subject_id: u32, wearing_shift: usize) -> [[f64; EMG_CHANNELS]; N_FINGERS] {
        let v = self.subject_variability;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 0x5B7E_C7, u64::from(subject_id)]));
        let jitter = Normal::new(0.0, v.center_jitter_ch.max(0.0)).expect("finite std");
        let log_gain = Normal::new(0.0, v.gain_log_std.max(0.0)).expect("finite std");
        let amp = Normal::new(0.0, v.amplitude_log_std.max(0.0)).expect("finite std").sample(&mut rng).exp();
        let mut out = [[0.0; EMG_CHANNELS]; N_FINGERS];
        for (row_out, row) in out.iter_mut().zip(&self.gain_matrix) {
            let shift = jitter.sample(&mut rng);
            let shifted = fractional_rotate(row, shift);
            for (o, g) in row_out.iter_mut().zip(shifted) {
                *o = amp * g * log_gain.sample(&mut rng).exp();
            }
        }
        rotate_columns(&out, wearing_shift)
    }
}

/// `out[(c + shift) % 8] = g[c]` for each row.
pub fn rotate_columns(g: &[[f64; EMG_CHANNELS]; N_FINGERS], shift: usize) -> [[f64; EMG_CHANNELS]; N_FINGERS] {
    let mut out = [[0.0; EMG_CHANNELS]; N_FINGERS];
    for (o, row) in out.iter_mut().zip(g) {
        for (c, v) in row.iter().enumerate() {
            o[(c + shift) % EMG_CHANNELS] = *v;
        }
    }
    out
}

/// Circularly shifts a row by a real number of channels with linear
/// interpolation.
fn fractional_rotate(row: &[f64; EMG_CHANNELS], shift: f64) -> [f64; EMG_CHANNELS] {
    let n = EMG_CHANNELS as f64;
    let mut out = [0.0; EMG_CHANNELS];
    for (c, o) in out.iter_mut().enumerate() {
        let src = (c as f64 - shift).rem_euclid(n);
        let i0 = src.floor() as usize % EMG_CHANNELS;
        let i1 = (i0 + 1) % EMG_CHANNELS;
        let t = src - src.floor();
        *o = row[i0] * (1.0 - t) + row[i1] * t;
    }
    out
}

/// splitmix64 over a list of words; used to derive independent seeds.
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// What a generator needs to know about the wearer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub gains: [[f64; EMG_CHANNELS]; N_FINGERS],
    pub bands: [(f64, f64); N_FINGERS],
}

impl Anatomy {
    pub fn nominal(cfg: &SynthConfig) -> Self {
        Self { gains: cfg.gain_matrix, bands: cfg.finger_bands_hz }
    }
}

/// Sample-by-sample signal generator. Mode, speed and intensity may change at
/// any sample.
#[derive(Debug, Clone)]
pub struct EmgGenerator {
    fs: f64,
    gains: [[f64; EMG_CHANNELS]; N_FINGERS],
    activation_uv: f64,
    noise_floor_uv: f64,
    artifact_gain: BTreeMap<u8, f64>,
    rng: ChaCha8Rng,
    finger_src: Vec<StreamingSos>,
    finger_norm: [f64; N_FINGERS],
    drift_src: Vec<StreamingSos>,
    drift_norm: f64,
    mode: ForceMode,
    speed_kmh: u8,
    intensity: f64,
    n: u64,
}

impl EmgGenerator {
    pub fn new(cfg: &SynthConfig, anatomy: &Anatomy, seed: u64) -> Result<Self, SynthError> {
        cfg.validate()?;
        let design = |spec| Sos::design(&spec, cfg.fs).map_err(|e| SynthError::Config(e.to_string()));
        let mut finger_src = Vec::with_capacity(N_FINGERS);
        let mut finger_norm = [0.0; N_FINGERS];
        for (&(lo, hi), norm) in anatomy.bands.iter().zip(finger_norm.iter_mut()) {
            let sos = design(FilterSpec::Bandpass { low_hz: lo, high_hz: hi, order: 4 })?;
            *norm = 1.0 / StreamingSos::white_noise_gain(&sos).sqrt();
            finger_src.push(StreamingSos::new(sos));
        }
        let (alo, ahi) = cfg.artifact_band_hz;
        let drift_sos = design(FilterSpec::Bandpass { low_hz: alo, high_hz: ahi, order: 2 })?;
        let drift_norm = 1.0 / StreamingSos::white_noise_gain(&drift_sos).sqrt();
        let mut g = Self {
            fs: cfg.fs,
            gains: anatomy.gains,
            activation_uv: cfg.activation_uv,
            noise_floor_uv: cfg.noise_floor_uv,
            artifact_gain: cfg.artifact_gain_per_speed.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            finger_src,
            finger_norm,
            drift_src: vec![StreamingSos::new(drift_sos); EMG_CHANNELS],
            drift_norm,
            mode: ForceMode::REST,
            speed_kmh: 0,
            intensity: cfg.intensity,
            n: 0,
        };
        // let the band filters reach stationarity
        for _ in 0..(2.0 * cfg.fs) as usize {
            g.next_sample();
        }
        g.n = 0;
        Ok(g)
    }

    pub fn set_mode(&mut self, mode: ForceMode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> ForceMode {
        self.mode
    }

    pub fn set_speed(&mut self, speed_kmh: u8) -> Result<(), SynthError> {
        if !self.artifact_gain.contains_key(&speed_kmh) {
            return Err(SynthError::UnknownSpeed(speed_kmh));
        }
        self.speed_kmh = speed_kmh;
        Ok(())
    }

    pub fn set_intensity(&mut self, intensity: f64) {
        self.intensity = intensity.clamp(0.0, 1.0);
    }

    pub fn samples_generated(&self) -> u64 {
        self.n
    }

    pub fn next_sample(&mut self) -> ([f64; EMG_CHANNELS], [f64; ACCEL_AXES]) {
        let mut sources = [0.0; N_FINGERS];
        for ((s, f), norm) in sources.iter_mut().zip(self.finger_src.iter_mut()).zip(self.finger_norm) {
            let w: f64 = StandardNormal.sample(&mut self.rng);
            *s = f.process(w) * norm;
        }
        let artifact = self.artifact_gain[&self.speed_kmh];
        let amp = intensity_effect(self.intensity) * self.activation_uv;
        let mut emg = [0.0; EMG_CHANNELS];
        for (c, e) in emg.iter_mut().enumerate() {
            let w: f64 = StandardNormal.sample(&mut self.rng);
            let drift = self.drift_src[c].process(w) * self.drift_norm;
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            *e = artifact * drift + self.noise_floor_uv * noise;
        }
        for f in self.mode.fingers() {
            let i = f.index();
            for (c, e) in emg.iter_mut().enumerate() {
                *e += amp * self.gains[i][c] * sources[i];
            }
        }

        let t = self.n as f64 / self.fs;
        let speed = f64::from(self.speed_kmh);
        let gait_hz = 0.35 * speed;
        let sway = 0.04 * speed;
        let jitter: f64 = StandardNormal.sample(&mut self.rng);
        let phase = 2.0 * std::f64::consts::PI * gait_hz * t;
        let accel = [sway * phase.sin(), 0.5 * sway * (2.0 * phase).sin(), 1.0 + 0.2 * sway * phase.cos() + 0.002 * jitter];
        self.n += 1;
        (emg, accel)
    }
}

/// Generates one trial of constant mode and speed with the nominal gains.
/// Returns (8 x N microvolts, 3 x N g).
pub fn synth_trial(
    cfg: &SynthConfig,
    mode: ForceMode,
    speed_kmh: u8,
    duration_s: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SynthError> {
    if !(duration_s > 0.0) {
        return Err(SynthError::Argument(format!("duration must be positive, got {duration_s}")));
    }
    let mut g = EmgGenerator::new(cfg, &Anatomy::nominal(cfg), cfg.seed)?;
    g.set_speed(speed_kmh)?;
    g.set_mode(mode);
    let n = (duration_s * cfg.fs).round() as usize;
    let mut emg = vec![Vec::with_capacity(n); EMG_CHANNELS];
    let mut accel = vec![Vec::with_capacity(n); ACCEL_AXES];
    for _ in 0..n {
        let (e, a) = g.next_sample();
        for (dst, v) in emg.iter_mut().zip(e) {
            dst.push(v);
        }
        for (dst, v) in accel.iter_mut().zip(a) {
            dst.push(v);
        }
    }
    Ok((emg, accel))
}

/// Who is wearing the band and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionParams {
    pub subject_id: u32,
    pub day_id: u32,
    pub wearing_shift: usize,
}

impl SessionParams {
    pub fn noise_seed(&self, cfg: &SynthConfig) -> u64 {
        mix(&[cfg.seed, u64::from(self.subject_id), u64::from(self.day_id), self.wearing_shift as u64])
    }
}

/// Walks a schedule, emitting quantized dataset rows.
pub struct ScheduleRunner {
    generator: EmgGenerator,
    segments: Vec<Segment>,
    seg: usize,
    left_in_seg: usize,
    row: u64,
    seq: u8,
}

impl ScheduleRunner {
    pub fn new(generator: EmgGenerator, schedule: &Schedule, fs: f64) -> Self {
        let segments = schedule.segments(fs);
        let left_in_seg = segments.first().map_or(0, |s| s.samples);
        Self { generator, segments, seg: 0, left_in_seg, row: 0, seq: 0 }
    }

    pub fn for_session(cfg: &SynthConfig, schedule: &Schedule, p: SessionParams) -> Result<Self, SynthError> {
        if p.wearing_shift >= EMG_CHANNELS {
            return Err(SynthError::Argument(format!("wearing shift {} outside 0..8", p.wearing_shift)));
        }
        let anatomy = cfg.subject_anatomy(p.subject_id, p.wearing_shift);
        let generator = EmgGenerator::new(cfg, &anatomy, p.noise_seed(cfg))?;
        Ok(Self::new(generator, schedule, cfg.fs))
    }

    pub fn total_rows(&self) -> usize {
        self.segments.iter().map(|s| s.samples).sum()
    }

    pub fn rows_emitted(&self) -> u64 {
        self.row
    }

    pub fn current_segment(&self) -> Option<&Segment> {
        self.segments.get(self.seg)
    }

    /// Next sample as a device frame plus its dataset row, or `None` at the
    /// end of the schedule.
    pub fn next_row(&mut self) -> Option<(Frame, Row)> {
        while self.left_in_seg == 0 {
            self.seg += 1;
            self.left_in_seg = self.segments.get(self.seg)?.samples;
        }
        let seg = self.segments[self.seg];
        self.generator.set_mode(ForceMode(seg.mode));
        self.generator.set_speed(seg.speed_kmh).expect("schedule speeds are validated");
        let (emg, accel) = self.generator.next_sample();
        let frame = physical_to_frame(self.seq, &emg, &accel);
        let phys = counts_to_physical(&frame);
        let row = Row {
            emg_uv: phys.emg_uv,
            accel_g: phys.accel_g,
            timestamp_ms: self.row as f64 * 1000.0 / self.generator.fs,
            trigger: seg.trigger,
            block: seg.block,
            speed_kmh: seg.speed_kmh,
        };
        self.left_in_seg -= 1;
        self.row += 1;
        self.seq = self.seq.wrapping_add(1);
        Some((frame, row))
    }
}

/// Rejects unknown speeds or force modes.
pub fn validate_schedule(cfg: &SynthConfig, schedule: &Schedule) -> Result<(), SynthError> {
    for b in &schedule.blocks {
        cfg.artifact_gain(b.speed_kmh)?;
        for t in &b.trials {
            ForceMode::new(t.trial_id)?;
        }
    }
    Ok(())
}

/// Synthesizes a full paradigm session for one subject and day.
pub fn synth_session(cfg: &SynthConfig, subject_id: u32, day_id: u32, wearing_shift: usize) -> Result<Recording, SynthError> {
    synth_session_with(cfg, &paradigm_schedule(), SessionParams { subject_id, day_id, wearing_shift })
}

pub fn synth_session_with(cfg: &SynthConfig, schedule: &Schedule, p: SessionParams) -> Result<Recording, SynthError> {
    validate_schedule(cfg, schedule)?;
    let mut runner = ScheduleRunner::for_session(cfg, schedule, p)?;
    let mut rec = Recording::with_capacity(RecordingMeta::new(p.subject_id, p.day_id), runner.total_rows());
    while let Some((_, row)) = runner.next_row() {
        rec.push_row(&row);
    }
    Ok(rec)
}

/// Bounded queue that discards the oldest entry when full.
struct DropOldest<T> {
    inner: Mutex<(VecDeque<T>, bool)>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

impl<T> DropOldest<T> {
    fn new(capacity: usize) -> Self {
        Self { inner: Mutex::new((VecDeque::new(), false)), ready: Condvar::new(), capacity, dropped: AtomicU64::new(0) }
    }

    fn push_all(&self, items: impl IntoIterator<Item = T>) {
        let mut g = self.inner.lock().expect("queue lock");
        for item in items {
            if g.0.len() == self.capacity {
                g.0.pop_front();
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
            g.0.push_back(item);
        }
        self.ready.notify_all();
    }

    fn close(&self) {
        self.inner.lock().expect("queue lock").1 = true;
        self.ready.notify_all();
    }

    /// Drains everything queued, waiting up to `timeout` for the first item.
    /// `None` once closed and empty.
    fn drain(&self, timeout: Duration) -> Option<Vec<T>> {
        let g = self.inner.lock().expect("queue lock");
        let (mut g, _) = self.ready.wait_timeout_while(g, timeout, |(q, closed)| q.is_empty() && !*closed).expect("queue lock");
        if g.0.is_empty() && g.1 {
            return None;
        }
        Some(g.0.drain(..).collect())
    }
}

/// Encoded frames at `500 x rate_multiplier` frames/s from a producer thread.
pub struct DeviceStream {
    queue: Arc<DropOldest<[u8; FRAME_LEN]>>,
    stop: Arc<AtomicBool>,
    produced: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

pub const DEFAULT_DEVICE_QUEUE: usize = 4096;

impl DeviceStream {
    pub fn spawn(
        cfg: &SynthConfig,
        schedule: &Schedule,
        params: SessionParams,
        rate_multiplier: f64,
        capacity: usize,
    ) -> Result<Self, SynthError> {
        validate_schedule(cfg, schedule)?;
        let runner = ScheduleRunner::for_session(cfg, schedule, params)?;
        Self::spawn_runner(runner, cfg.fs, rate_multiplier, capacity)
    }

    /// Streams the nominal-gain generator seeded with `cfg.seed`, i.e. the
    /// same signal [`synth_trial`] returns for each segment.
    pub fn spawn_nominal(cfg: &SynthConfig, schedule: &Schedule, rate_multiplier: f64, capacity: usize) -> Result<Self, SynthError> {
        validate_schedule(cfg, schedule)?;
        let generator = EmgGenerator::new(cfg, &Anatomy::nominal(cfg), cfg.seed)?;
        Self::spawn_runner(ScheduleRunner::new(generator, schedule, cfg.fs), cfg.fs, rate_multiplier, capacity)
    }

    fn spawn_runner(mut runner: ScheduleRunner, fs: f64, rate_multiplier: f64, capacity: usize) -> Result<Self, SynthError> {
        if !(rate_multiplier > 0.0) {
            return Err(SynthError::Argument(format!("rate multiplier must be positive, got {rate_multiplier}")));
        }
        let queue = Arc::new(DropOldest::new(capacity.max(1)));
        let stop = Arc::new(AtomicBool::new(false));
        let produced = Arc::new(AtomicU64::new(0));
        let rate = fs * rate_multiplier;
        let handle = {
            let (queue, stop, produced) = (queue.clone(), stop.clone(), produced.clone());
            thread::Builder::new()
                .name("synth-device".into())
                .spawn(move || {
                    let start = Instant::now();
                    let mut sent: u64 = 0;
                    'outer: while !stop.load(Ordering::Relaxed) {
                        let due = (start.elapsed().as_secs_f64() * rate).floor() as u64;
                        let mut batch = Vec::new();
                        while sent < due {
                            match runner.next_row() {
                                Some((frame, _)) => batch.push(frame.encode().expect("quantized frames are in range")),
                                None => {
                                    queue.push_all(batch);
                                    break 'outer;
                                }
                            }
                            sent += 1;
                        }
                        if !batch.is_empty() {
                            queue.push_all(batch);
                            produced.store(sent, Ordering::Relaxed);
                        }
                        let next_at = (sent + 1) as f64 / rate;
                        let wait = next_at - start.elapsed().as_secs_f64();
                        if wait > 0.0 {
                            thread::sleep(Duration::from_secs_f64(wait.min(0.01)).max(Duration::from_micros(200)));
                        }
                    }
                    produced.store(sent, Ordering::Relaxed);
                    queue.close();
                })
                .map_err(|e| SynthError::Argument(format!("spawn device thread: {e}")))?
        };
        Ok(Self { queue, stop, produced, handle: Some(handle) })
    }

    /// Encoded frames available now (waiting up to `timeout`); `None` after
    /// the schedule ended and everything was consumed.
    pub fn recv(&self, timeout: Duration) -> Option<Vec<[u8; FRAME_LEN]>> {
        self.queue.drain(timeout)
    }

    /// Frames discarded because the consumer fell behind.
    pub fn dropped(&self) -> u64 {
        self.queue.dropped.load(Ordering::Relaxed)
    }

    pub fn produced(&self) -> u64 {
        self.produced.load(Ordering::Relaxed)
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DeviceStream {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Decodes a [`DeviceStream`] through the wire codec.
pub struct DeviceFrameSource {
    device: DeviceStream,
    decoder: FrameDecoder,
}

impl DeviceFrameSource {
    pub fn new(device: DeviceStream) -> Self {
        Self { device, decoder: FrameDecoder::new() }
    }
}

impl FrameSource for DeviceFrameSource {
    fn poll(&mut self, timeout: Duration) -> Poll {
        match self.device.recv(timeout) {
            None => Poll::Finished,
            Some(chunks) if chunks.is_empty() => Poll::Pending,
            Some(chunks) => Poll::Frames(self.decoder.push(&chunks.concat())),
        }
    }

    fn decode_stats(&self) -> crate::protocol::DecodeStats {
        self.decoder.stats()
    }
}

/// Accepts one client at a time and streams a fresh session to each, in the
/// device wire format. Blocks the calling thread.
pub fn serve_tcp(
    addr: impl ToSocketAddrs,
    cfg: &SynthConfig,
    schedule: &Schedule,
    params: SessionParams,
    rate_multiplier: f64,
    max_clients: Option<usize>,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    serve_tcp_on(listener, cfg, schedule, params, rate_multiplier, max_clients)
}

pub fn serve_tcp_on(
    listener: TcpListener,
    cfg: &SynthConfig,
    schedule: &Schedule,
    params: SessionParams,
    rate_multiplier: f64,
    max_clients: Option<usize>,
) -> std::io::Result<()> {
    for (served, conn) in listener.incoming().enumerate() {
        let mut sock = conn?;
        sock.set_nodelay(true)?;
        let device = DeviceStream::spawn(cfg, schedule, params, rate_multiplier, DEFAULT_DEVICE_QUEUE)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        while let Some(frames) = device.recv(Duration::from_millis(100)) {
            if sock.write_all(&frames.concat()).is_err() {
                break;
            }
        }
        if max_clients.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}

/// How a simulated person responds to prompts during online tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectBehavior {
    /// Delay between a prompt and the change in muscle activity.
    pub reaction_s: f64,
    /// When false the subject ignores non-rest prompts.
    pub responsive: bool,
}

impl Default for SubjectBehavior {
    fn default() -> Self {
        Self { reaction_s: 0.4, responsive: true }
    }
}

/// In-process wristband worn by a simulated subject who reacts to prompts.
/// Frames go through the wire encoder and decoder.
pub struct SimulatedWristband {
    generator: EmgGenerator,
    decoder: FrameDecoder,
    behavior: SubjectBehavior,
    pending: Option<(u64, ForceMode)>,
    batch: usize,
    rate_multiplier: f64,
    started: Option<Instant>,
    seq: u8,
    limit: Option<u64>,
}

impl SimulatedWristband {
    pub fn new(
        cfg: &SynthConfig,
        params: SessionParams,
        speed_kmh: u8,
        behavior: SubjectBehavior,
        rate_multiplier: f64,
    ) -> Result<Self, SynthError> {
        if !(rate_multiplier > 0.0) {
            return Err(SynthError::Argument(format!("rate multiplier must be positive, got {rate_multiplier}")));
        }
        let anatomy = cfg.subject_anatomy(params.subject_id, params.wearing_shift);
        let seed = mix(&[params.noise_seed(cfg), 0x0411_4E]);
        let mut generator = EmgGenerator::new(cfg, &anatomy, seed)?;
        generator.set_speed(speed_kmh)?;
        Ok(Self {
            generator,
            decoder: FrameDecoder::new(),
            behavior,
            pending: None,
            batch: 25,
            rate_multiplier,
            started: None,
            seq: 0,
            limit: None,
        })
    }

    /// Ends the stream after `samples` frames.
    pub fn with_limit(mut self, samples: u64) -> Self {
        self.limit = Some(samples);
        self
    }

    pub fn samples(&self) -> u64 {
        self.generator.samples_generated()
    }
}

impl FrameSource for SimulatedWristband {
    fn poll(&mut self, _timeout: Duration) -> Poll {
        let n = self.generator.samples_generated();
        if self.limit.is_some_and(|l| n >= l) {
            return Poll::Finished;
        }
        if self.rate_multiplier.is_finite() {
            let start = *self.started.get_or_insert_with(Instant::now);
            let due = (n + self.batch as u64) as f64 / (self.generator.fs * self.rate_multiplier);
            let wait = due - start.elapsed().as_secs_f64();
            if wait > 0.0 {
                thread::sleep(Duration::from_secs_f64(wait));
            }
        }
        let mut bytes = Vec::with_capacity(self.batch * FRAME_LEN);
        for _ in 0..self.batch {
            let now = self.generator.samples_generated();
            if self.limit.is_some_and(|l| now >= l) {
                break;
            }
            if let Some((at, mode)) = self.pending {
                if now >= at {
                    self.generator.set_mode(mode);
                    self.pending = None;
                }
            }
            let (emg, accel) = self.generator.next_sample();
            let frame = physical_to_frame(self.seq, &emg, &accel);
            self.seq = self.seq.wrapping_add(1);
            bytes.extend_from_slice(&frame.encode().expect("quantized frames are in range"));
        }
        Poll::Frames(self.decoder.push(&bytes))
    }

    fn prompt(&mut self, mode: ForceMode, at_sample: u64) {
        if !mode.is_rest() && !self.behavior.responsive {
            return;
        }
        let delay = (self.behavior.reaction_s * self.generator.fs).round() as u64;
        self.pending = Some((at_sample + delay, mode));
    }

    fn decode_stats(&self) -> crate::protocol::DecodeStats {
        self.decoder.stats()
    }
}
