//! Session state machine.
//!
//! `idle` may move to `recording`, `online_test` or `reaction_test`; every
//! phase returns to `idle` on stop or when its work is done. Each non-idle
//! phase runs on one worker thread that owns the device simulation and
//! publishes to the [`Hub`]. A recording also feeds a writer thread with the
//! undecimated rows, independent of what stream clients receive.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use myoband::features::FEATURE_LAYOUT_TAG;
use myoband::models::{train, Hyper, ModelKind, TrainedModel};
use myoband::online::{
    calibrate_reaction, online_training_set, run_online_session, OnlineConfig, OnlineEvent, OnlineSession, OnlineSummary,
    DEFAULT_REACTION_S, MIN_CALIBRATION_SAMPLES,
};
use myoband::preprocess::ClassSet;
use myoband::protocol::{counts_to_physical, DecodeStats, ACCEL_AXES, EMG_CHANNELS};
use myoband::recording::{
    paradigm_schedule, read_recording, session_path, write_recording, Recording, RecordingMeta, Row, Schedule, N_BLOCKS,
};
use myoband::source::{FrameSource, Poll};
use myoband::synth::{
    validate_schedule, ForceMode, ScheduleRunner, SessionParams, SimulatedWristband, SubjectBehavior, SynthConfig,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::display::Decimator;
use crate::hub::Hub;
use crate::messages::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Recording,
    OnlineTest,
    ReactionTest,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("cannot {action} while {phase:?}")]
    Conflict { action: &'static str, phase: Phase },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

/// Decoder settings used by the next online test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub window_ms: u32,
    pub step_ms: u32,
    pub model: ModelKind,
    pub reaction_const_s: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self { window_ms: 250, step_ms: 250, model: ModelKind::RandomForest, reaction_const_s: DEFAULT_REACTION_S }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsUpdate {
    pub window_ms: Option<u32>,
    pub step_ms: Option<u32>,
    pub model: Option<String>,
    pub reaction_const_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub name: String,
    pub fs: f64,
    pub emg_channels: usize,
    pub accel_axes: usize,
    pub rate_multiplier: f64,
    /// A worker is currently streaming from the device.
    pub streaming: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRecording {
    pub path: String,
    pub rows: usize,
    /// False when the session was stopped before the schedule ended.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub phase: Phase,
    pub subject: Option<SessionParams>,
    pub block: Option<u8>,
    /// Zero-based trial index within the running session.
    pub trial: Option<usize>,
    pub n_trials: usize,
    pub mode_id: Option<u8>,
    /// Fraction of the current trial elapsed.
    pub progress: f64,
    /// Fraction of the whole session elapsed.
    pub paradigm_progress: f64,
    pub params: Params,
    pub device: DeviceInfo,
    pub last_recording: Option<SavedRecording>,
    pub last_online: Option<OnlineSummary>,
    pub last_error: Option<String>,
    pub clients: usize,
    pub display_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSession {
    pub subject_id: u32,
    pub day_id: u32,
    #[serde(default)]
    pub wearing_shift: usize,
    /// Defaults to the full 12-block paradigm.
    #[serde(default)]
    pub schedule: Option<Schedule>,
    /// Keeps only the first `max_trials` trials of the schedule.
    #[serde(default)]
    pub max_trials: Option<usize>,
}

fn default_trials() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartOnline {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to the subject of the last recording, else subject 1 day 1.
    #[serde(default)]
    pub subject_id: Option<u32>,
    #[serde(default)]
    pub day_id: Option<u32>,
    #[serde(default)]
    pub wearing_shift: usize,
    /// 6 or 12.
    #[serde(default)]
    pub classes: Option<u8>,
    #[serde(default)]
    pub speed_kmh: u8,
    #[serde(default)]
    pub trial_timeout_s: Option<f64>,
}

fn default_gap() -> f64 {
    1.5
}

fn default_press_timeout() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReactionTest {
    pub n: usize,
    /// Mean pause before each cue; the actual pause is uniform in 0.5..1.5 times this.
    #[serde(default = "default_gap")]
    pub gap_s: f64,
    /// A cue without a press after this long is skipped.
    #[serde(default = "default_press_timeout")]
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Press {
    pub cue: usize,
}

struct Job {
    cancel: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct Inner {
    status: Status,
    job: Option<Job>,
    presses: Option<mpsc::Sender<(usize, Instant)>>,
}

pub struct Controller {
    cfg: ServiceConfig,
    synth: SynthConfig,
    pub hub: Arc<Hub>,
    inner: Mutex<Inner>,
}

/// One trial's position in the row stream.
struct TrialSpan {
    start: usize,
    len: usize,
    block: u8,
    mode: u8,
}

fn trial_spans(schedule: &Schedule, fs: f64) -> Vec<TrialSpan> {
    let mut out = Vec::new();
    let mut start = 0;
    for b in &schedule.blocks {
        for t in &b.trials {
            let len = (t.rest_s * fs).round() as usize + (t.active_s * fs).round() as usize;
            if len > 0 {
                out.push(TrialSpan { start, len, block: b.block_id, mode: t.trial_id });
            }
            start += len;
        }
    }
    out
}

fn truncate_trials(schedule: &mut Schedule, max_trials: usize) {
    let mut left = max_trials;
    for b in &mut schedule.blocks {
        b.trials.truncate(left);
        left -= b.trials.len();
    }
    schedule.blocks.retain(|b| !b.trials.is_empty());
}

fn mode_text(mode_id: u8) -> String {
    ForceMode::new(mode_id).map(|m| m.label()).unwrap_or_else(|_| format!("mode {mode_id}"))
}

impl Controller {
    pub fn new(cfg: ServiceConfig, synth: SynthConfig) -> Arc<Self> {
        let hub = Arc::new(Hub::new(cfg.client_queue));
        let status = Status {
            phase: Phase::Idle,
            subject: None,
            block: None,
            trial: None,
            n_trials: 0,
            mode_id: None,
            progress: 0.0,
            paradigm_progress: 0.0,
            params: Params::default(),
            device: DeviceInfo {
                name: "simulated wristband".into(),
                fs: synth.fs,
                emg_channels: EMG_CHANNELS,
                accel_axes: ACCEL_AXES,
                rate_multiplier: cfg.rate_multiplier,
                streaming: false,
            },
            last_recording: None,
            last_online: None,
            last_error: None,
            clients: 0,
            display_dropped: 0,
        };
        Arc::new(Self { cfg, synth, hub, inner: Mutex::new(Inner { status, job: None, presses: None }) })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("controller lock")
    }

    fn snapshot(&self, inner: &Inner) -> Status {
        let mut s = inner.status.clone();
        s.clients = self.hub.client_count();
        s.display_dropped = self.hub.total_dropped();
        s
    }

    pub fn status(&self) -> Status {
        self.snapshot(&self.lock())
    }

    pub fn hello(&self) -> Message {
        Message::Hello {
            decimation: self.cfg.decimation,
            display_hz: self.synth.fs / self.cfg.decimation as f64,
            status: Box::new(self.status()),
        }
    }

    /// Errors unless idle; reaps the worker of a phase that ended by itself.
    fn require_idle(&self, inner: &mut Inner, action: &'static str) -> Result<(), ControlError> {
        if inner.status.phase != Phase::Idle {
            return Err(ControlError::Conflict { action, phase: inner.status.phase });
        }
        if let Some(job) = inner.job.take() {
            // the worker sets idle as its last step
            let _ = job.handle.join();
        }
        Ok(())
    }

    fn enter(&self, inner: &mut Inner, phase: Phase, subject: Option<SessionParams>, n_trials: usize) {
        let s = &mut inner.status;
        s.phase = phase;
        s.subject = subject;
        s.block = None;
        s.trial = None;
        s.mode_id = None;
        s.n_trials = n_trials;
        s.progress = 0.0;
        s.paradigm_progress = 0.0;
        s.last_error = None;
        s.device.streaming = matches!(phase, Phase::Recording | Phase::OnlineTest);
        self.hub.publish(Message::Phase { phase });
    }

    fn spawn(
        self: &Arc<Self>,
        inner: &mut Inner,
        name: &str,
        work: impl FnOnce(Arc<Self>, Arc<AtomicBool>) + Send + 'static,
    ) -> Result<(), ControlError> {
        let cancel = Arc::new(AtomicBool::new(false));
        let (me, flag) = (self.clone(), cancel.clone());
        let handle = thread::Builder::new()
            .name(name.into())
            .spawn(move || work(me, flag))
            .map_err(|e| ControlError::Internal(format!("spawn worker: {e}")))?;
        inner.job = Some(Job { cancel, handle });
        Ok(())
    }

    /// Returns to idle after a worker finished, applying `update` first.
    fn finish(&self, update: impl FnOnce(&mut Status)) {
        let mut inner = self.lock();
        update(&mut inner.status);
        let s = &mut inner.status;
        s.phase = Phase::Idle;
        s.block = None;
        s.trial = None;
        s.mode_id = None;
        s.device.streaming = false;
        inner.presses = None;
        self.hub.publish(Message::Phase { phase: Phase::Idle });
    }

    fn fail(&self, message: String) {
        tracing::warn!("{message}");
        self.hub.publish(Message::Error { message: message.clone() });
        self.lock().status.last_error = Some(message);
    }

    pub fn start_session(self: &Arc<Self>, req: StartSession) -> Result<Status, ControlError> {
        let mut schedule = req.schedule.unwrap_or_else(paradigm_schedule);
        if let Some(n) = req.max_trials {
            truncate_trials(&mut schedule, n);
        }
        if schedule.n_trials() == 0 {
            return Err(ControlError::Invalid("schedule has no trials".into()));
        }
        if let Some(b) = schedule.blocks.iter().find(|b| !(1..=N_BLOCKS as u8).contains(&b.block_id)) {
            return Err(ControlError::Invalid(format!("block id {} outside 1..={N_BLOCKS}", b.block_id)));
        }
        validate_schedule(&self.synth, &schedule).map_err(|e| ControlError::Invalid(e.to_string()))?;
        let p = SessionParams { subject_id: req.subject_id, day_id: req.day_id, wearing_shift: req.wearing_shift };
        let runner = ScheduleRunner::for_session(&self.synth, &schedule, p).map_err(|e| ControlError::Invalid(e.to_string()))?;

        let mut inner = self.lock();
        self.require_idle(&mut inner, "start a recording")?;
        self.enter(&mut inner, Phase::Recording, Some(p), schedule.n_trials());
        self.spawn(&mut inner, "recording", move |me, cancel| me.record(runner, &schedule, p, &cancel))?;
        Ok(self.snapshot(&inner))
    }

    /// Cancels whatever runs and waits until its results are stored.
    pub fn stop_session(&self) -> Result<Status, ControlError> {
        let job = self.lock().job.take();
        if let Some(job) = job {
            job.cancel.store(true, Ordering::Relaxed);
            if job.handle.join().is_err() {
                self.finish(|s| s.last_error = Some("worker panicked".into()));
            }
        }
        Ok(self.status())
    }

    pub fn set_params(&self, update: ParamsUpdate) -> Result<Status, ControlError> {
        let mut inner = self.lock();
        self.require_idle(&mut inner, "change parameters")?;
        let mut p = inner.status.params.clone();
        if let Some(w) = update.window_ms {
            p.window_ms = w;
        }
        if let Some(s) = update.step_ms {
            p.step_ms = s;
        }
        if let Some(m) = &update.model {
            p.model = ModelKind::parse(m).ok_or_else(|| ControlError::Invalid(format!("unknown model {m:?}")))?;
        }
        if let Some(r) = update.reaction_const_s {
            p.reaction_const_s = r;
        }
        if !(50..=2000).contains(&p.window_ms) {
            return Err(ControlError::Invalid(format!("window_ms {} outside 50..=2000", p.window_ms)));
        }
        if !(10..=1000).contains(&p.step_ms) {
            return Err(ControlError::Invalid(format!("step_ms {} outside 10..=1000", p.step_ms)));
        }
        if !(0.0..=2.0).contains(&p.reaction_const_s) {
            return Err(ControlError::Invalid(format!("reaction_const_s {} outside 0..=2", p.reaction_const_s)));
        }
        inner.status.params = p;
        Ok(self.snapshot(&inner))
    }

    pub fn start_online(self: &Arc<Self>, req: StartOnline) -> Result<Status, ControlError> {
        if req.n_trials == 0 {
            return Err(ControlError::Invalid("n_trials must be at least 1".into()));
        }
        let classes = match req.classes {
            None => ClassSet::Six,
            Some(n) => ClassSet::from_count(n).ok_or_else(|| ControlError::Invalid(format!("classes must be 6 or 12, got {n}")))?,
        };
        self.synth.artifact_gain(req.speed_kmh).map_err(|e| ControlError::Invalid(e.to_string()))?;
        if req.wearing_shift >= EMG_CHANNELS {
            return Err(ControlError::Invalid(format!("wearing shift {} outside 0..8", req.wearing_shift)));
        }

        let mut inner = self.lock();
        self.require_idle(&mut inner, "start an online test")?;
        let last = inner.status.subject;
        let p = SessionParams {
            subject_id: req.subject_id.or(last.map(|s| s.subject_id)).unwrap_or(1),
            day_id: req.day_id.or(last.map(|s| s.day_id)).unwrap_or(1),
            wearing_shift: req.wearing_shift,
        };
        let defaults = OnlineConfig::default();
        let params = inner.status.params.clone();
        let cfg = OnlineConfig {
            window_ms: f64::from(params.window_ms),
            step_ms: f64::from(params.step_ms),
            n_trials: req.n_trials,
            seed: req.seed.unwrap_or(defaults.seed),
            classes,
            reaction_const_s: params.reaction_const_s,
            trial_timeout_s: req.trial_timeout_s.unwrap_or(defaults.trial_timeout_s),
            ..defaults
        };
        self.enter(&mut inner, Phase::OnlineTest, Some(p), req.n_trials);
        let speed = req.speed_kmh;
        self.spawn(&mut inner, "online-test", move |me, cancel| me.online(p, params.model, cfg, speed, &cancel))?;
        Ok(self.snapshot(&inner))
    }

    pub fn reaction_test(self: &Arc<Self>, req: ReactionTest) -> Result<Status, ControlError> {
        if req.n < MIN_CALIBRATION_SAMPLES {
            return Err(ControlError::Invalid(format!("need at least {MIN_CALIBRATION_SAMPLES} cues, got {}", req.n)));
        }
        if !(req.gap_s >= 0.0 && req.timeout_s > 0.0) {
            return Err(ControlError::Invalid("gap_s must be >= 0 and timeout_s > 0".into()));
        }
        let mut inner = self.lock();
        self.require_idle(&mut inner, "start a reaction test")?;
        let (tx, rx) = mpsc::channel();
        inner.presses = Some(tx);
        let subject = inner.status.subject;
        self.enter(&mut inner, Phase::ReactionTest, subject, req.n);
        self.spawn(&mut inner, "reaction-test", move |me, cancel| me.reaction(req, rx, &cancel))?;
        Ok(self.snapshot(&inner))
    }

    pub fn press(&self, press: Press) -> Result<Status, ControlError> {
        let at = Instant::now();
        let inner = self.lock();
        match (&inner.presses, inner.status.phase) {
            (Some(tx), Phase::ReactionTest) => {
                let _ = tx.send((press.cue, at));
                Ok(self.snapshot(&inner))
            }
            (_, phase) => Err(ControlError::Conflict { action: "register a key press", phase }),
        }
    }

    fn set_trial(&self, trial: usize, block: Option<u8>, mode: u8) {
        let mut inner = self.lock();
        let s = &mut inner.status;
        s.trial = Some(trial);
        s.block = block;
        s.mode_id = Some(mode);
        s.progress = 0.0;
    }

    fn set_progress(&self, progress: f64, paradigm: f64) {
        let mut inner = self.lock();
        inner.status.progress = progress;
        inner.status.paradigm_progress = paradigm;
    }

    fn record(&self, mut runner: ScheduleRunner, schedule: &Schedule, p: SessionParams, cancel: &AtomicBool) {
        let fs = self.synth.fs;
        let spans = trial_spans(schedule, fs);
        let total = runner.total_rows();
        let tick = ((self.cfg.progress_tick_ms / 1e3 * fs).round() as usize).max(1);
        let rate = fs * self.cfg.rate_multiplier;

        let (tx, rx) = mpsc::channel::<Vec<Row>>();
        let writer = thread::spawn(move || {
            let mut rec = Recording::with_capacity(RecordingMeta::new(p.subject_id, p.day_id), total);
            for batch in rx {
                batch.iter().for_each(|r| rec.push_row(r));
            }
            rec
        });

        let mut decimator = Decimator::new(self.cfg.decimation);
        let start = Instant::now();
        let (mut r, mut ti) = (0usize, 0usize);
        while r < total && !cancel.load(Ordering::Relaxed) {
            let due = ((start.elapsed().as_secs_f64() * rate) as usize).min(total);
            if due <= r {
                thread::sleep(Duration::from_secs_f64((1.0 / rate).clamp(0.000_2, 0.005)));
                continue;
            }
            let mut batch = Vec::with_capacity(due - r);
            while r < due {
                let span = &spans[ti];
                if r == span.start {
                    self.set_trial(ti, Some(span.block), span.mode);
                    self.hub.publish(Message::Prompt {
                        trial: ti,
                        block: span.block,
                        mode_id: span.mode,
                        text: mode_text(span.mode),
                        sound: format!("mode_{}", span.mode),
                        progress: 0.0,
                    });
                }
                let Some((_, row)) = runner.next_row() else { break };
                if let Some(m) = decimator.push(r as u64, &row.emg_uv, &row.accel_g, row.trigger, row.block, row.speed_kmh) {
                    self.hub.publish(m);
                }
                batch.push(row);
                r += 1;
                let into = r - span.start;
                if into % tick == 0 || into == span.len {
                    let progress = if into == span.len { 1.0 } else { into as f64 / span.len as f64 };
                    let paradigm = r as f64 / total as f64;
                    self.set_progress(progress, paradigm);
                    self.hub.publish(Message::Progress { trial: ti, mode_id: span.mode, progress, paradigm_progress: paradigm });
                }
                if into == span.len {
                    ti += 1;
                }
            }
            let _ = tx.send(batch);
        }
        drop(tx);
        let rec = writer.join().expect("recording writer");
        let path = session_path(&self.cfg.data_dir, p.subject_id, p.day_id);
        let saved = if rec.is_empty() {
            None
        } else {
            match write_recording(&rec, &path) {
                Ok(()) => {
                    let saved = SavedRecording { path: path.display().to_string(), rows: rec.rows(), complete: r == total };
                    self.hub.publish(Message::RecordingSaved { path: saved.path.clone(), rows: saved.rows });
                    Some(saved)
                }
                Err(e) => {
                    self.fail(format!("write {}: {e}", path.display()));
                    None
                }
            }
        };
        self.finish(|s| s.last_recording = saved.or(s.last_recording.take()));
    }

    /// The subject's stored recording if there is one, else a synthetic
    /// calibration session.
    fn training_data(&self, p: SessionParams) -> anyhow::Result<(Recording, String)> {
        let path: PathBuf = session_path(&self.cfg.data_dir, p.subject_id, p.day_id);
        if path.exists() {
            return Ok((read_recording(&path)?, path.display().to_string()));
        }
        let mut schedule = paradigm_schedule();
        schedule.blocks.truncate(self.cfg.training_blocks);
        let rec = myoband::synth::synth_session_with(&self.synth, &schedule, p)?;
        Ok((rec, format!("synthetic calibration session, {} blocks", schedule.blocks.len())))
    }

    fn online_model(&self, p: SessionParams, kind: ModelKind, cfg: &OnlineConfig) -> anyhow::Result<TrainedModel> {
        let (rec, source) = self.training_data(p)?;
        let (x, y) = online_training_set(std::slice::from_ref(&rec), cfg.window_ms, cfg.step_ms, cfg.classes, &cfg.preprocess)?;
        let model = train(kind, x.view(), &y, &Hyper::default(), cfg.seed)?.with_layout_tag(FEATURE_LAYOUT_TAG);
        self.hub.publish(Message::ModelReady { model: kind.to_string(), trained_on: source, windows: y.len() });
        Ok(model)
    }

    fn on_online_event(&self, e: &OnlineEvent, n_trials: usize) {
        match e {
            OnlineEvent::Prompt { trial, mode_id, text, .. } => {
                if *mode_id != ForceMode::REST.id() {
                    self.set_trial(*trial, None, *mode_id);
                }
                self.hub.publish(Message::Prompt {
                    trial: *trial,
                    block: 0,
                    mode_id: *mode_id,
                    text: text.clone(),
                    sound: format!("mode_{mode_id}"),
                    progress: 0.0,
                });
            }
            OnlineEvent::Prediction { t_s, mode_id, latency_ms } => {
                self.hub.publish(Message::Prediction { t_s: *t_s, mode_id: *mode_id, latency_ms: *latency_ms });
            }
            OnlineEvent::TrialResult(t) => {
                let paradigm = (t.trial + 1) as f64 / n_trials as f64;
                self.set_progress(1.0, paradigm);
                self.hub.publish(Message::TrialResult(t.clone()));
                self.hub.publish(Message::Progress { trial: t.trial, mode_id: t.cued_mode, progress: 1.0, paradigm_progress: paradigm });
            }
            // published by the worker once the summary is final
            OnlineEvent::Finished(_) => {}
        }
    }

    fn online(&self, p: SessionParams, kind: ModelKind, cfg: OnlineConfig, speed_kmh: u8, cancel: &AtomicBool) {
        let run = || -> anyhow::Result<OnlineSession> {
            let model = self.online_model(p, kind, &cfg)?;
            let band = SimulatedWristband::new(&self.synth, p, speed_kmh, SubjectBehavior::default(), self.cfg.rate_multiplier)?;
            let mut tap = Tap {
                inner: band,
                hub: &self.hub,
                decimator: Decimator::new(self.cfg.decimation),
                cancel,
                trigger: 0,
                speed_kmh,
                sample: 0,
            };
            Ok(run_online_session(&mut tap, &model, &cfg, &mut |e| self.on_online_event(e, cfg.n_trials))?)
        };
        match run() {
            Ok(mut session) => {
                if cancel.load(Ordering::Relaxed) {
                    session.summary.aborted = Some("stopped by operator".into());
                }
                self.hub.publish(Message::OnlineFinished(session.summary.clone()));
                self.finish(|s| s.last_online = Some(session.summary));
            }
            Err(e) => {
                self.fail(format!("online test: {e}"));
                self.finish(|_| {});
            }
        }
    }

    fn reaction(&self, req: ReactionTest, presses: mpsc::Receiver<(usize, Instant)>, cancel: &AtomicBool) {
        let mut rng = rand::thread_rng();
        let mut latencies = Vec::with_capacity(req.n);
        let timeout = Duration::from_secs_f64(req.timeout_s);
        'cues: for cue in 0..req.n {
            let pause = Instant::now() + Duration::from_secs_f64(req.gap_s * rng.gen_range(0.5..1.5));
            while Instant::now() < pause {
                if cancel.load(Ordering::Relaxed) {
                    break 'cues;
                }
                thread::sleep((pause - Instant::now()).min(Duration::from_millis(20)));
            }
            while presses.try_recv().is_ok() {}
            let shown = Instant::now();
            self.set_trial(cue, None, 0);
            self.hub.publish(Message::ReactionCue { cue, of: req.n });
            loop {
                if cancel.load(Ordering::Relaxed) {
                    break 'cues;
                }
                let left = timeout.saturating_sub(shown.elapsed());
                match presses.recv_timeout(left.min(Duration::from_millis(50))) {
                    Ok((c, at)) if c == cue => {
                        latencies.push(at.saturating_duration_since(shown).as_secs_f64());
                        break;
                    }
                    Ok(_) => {}
                    Err(mpsc::RecvTimeoutError::Timeout) if left.is_zero() => break,
                    Err(mpsc::RecvTimeoutError::Timeout) => {}
                    Err(mpsc::RecvTimeoutError::Disconnected) => break 'cues,
                }
            }
            self.set_progress(1.0, (cue + 1) as f64 / req.n as f64);
        }
        if cancel.load(Ordering::Relaxed) {
            self.finish(|_| {});
            return;
        }
        match calibrate_reaction(&latencies) {
            Ok(r) => {
                self.hub.publish(Message::ReactionCalibrated { reaction_const_s: r, latencies_s: latencies });
                self.finish(|s| s.params.reaction_const_s = r);
            }
            Err(e) => {
                self.fail(format!("reaction test: {e}"));
                self.finish(|_| {});
            }
        }
    }
}

/// Passes frames from the wristband to the online decoder and copies a
/// decimated view to the stream.
struct Tap<'a, S> {
    inner: S,
    hub: &'a Hub,
    decimator: Decimator,
    cancel: &'a AtomicBool,
    /// Mode currently cued, 0 while resting.
    trigger: u8,
    speed_kmh: u8,
    sample: u64,
}

impl<S: FrameSource> FrameSource for Tap<'_, S> {
    fn poll(&mut self, timeout: Duration) -> Poll {
        if self.cancel.load(Ordering::Relaxed) {
            return Poll::Finished;
        }
        let polled = self.inner.poll(timeout);
        if let Poll::Frames(frames) = &polled {
            for f in frames {
                let ph = counts_to_physical(f);
                if let Some(m) = self.decimator.push(self.sample, &ph.emg_uv, &ph.accel_g, self.trigger, 0, self.speed_kmh) {
                    self.hub.publish(m);
                }
                self.sample += 1;
            }
        }
        polled
    }

    fn prompt(&mut self, mode: ForceMode, at_sample: u64) {
        self.trigger = if mode.is_rest() { 0 } else { mode.id() };
        self.inner.prompt(mode, at_sample);
    }

    fn decode_stats(&self) -> DecodeStats {
        self.inner.decode_stats()
    }
}
