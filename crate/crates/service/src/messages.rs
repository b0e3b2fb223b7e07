//! JSON messages on the `/stream` socket. Every message is an object with
//! `seq`, `t_ms` and a `type` tag; see `API.md` for the field reference.

use myoband::online::{OnlineSummary, OnlineTrialResult};
use myoband::protocol::{ACCEL_AXES, EMG_CHANNELS};
use serde::{Deserialize, Serialize};

use crate::session::{Phase, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// First message on every connection.
    Hello { decimation: usize, display_hz: f64, status: Box<Status> },
    /// One display sample: the mean of `decimation` raw samples starting at
    /// raw index `sample`. The only message kind that may be dropped.
    Signal {
        sample: u64,
        emg_uv: [f64; EMG_CHANNELS],
        accel_g: [f64; ACCEL_AXES],
        trigger: u8,
        block: u8,
        speed_kmh: u8,
        /// Signal messages this client has lost so far.
        dropped: u64,
    },
    Phase { phase: Phase },
    /// A new trial: the mode to hold, its label and the sound cue to play.
    Prompt { trial: usize, block: u8, mode_id: u8, text: String, sound: String, progress: f64 },
    /// Fraction of the current trial elapsed; the last tick of a trial is 1.0.
    Progress { trial: usize, mode_id: u8, progress: f64, paradigm_progress: f64 },
    ModelReady { model: String, trained_on: String, windows: usize },
    Prediction { t_s: f64, mode_id: u8, latency_ms: f64 },
    TrialResult(OnlineTrialResult),
    OnlineFinished(OnlineSummary),
    ReactionCue { cue: usize, of: usize },
    ReactionCalibrated { reaction_const_s: f64, latencies_s: Vec<f64> },
    RecordingSaved { path: String, rows: usize },
    Error { message: String },
}

impl Message {
    /// Display-plane messages may be dropped for slow clients.
    pub fn is_display(&self) -> bool {
        matches!(self, Message::Signal { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// Strictly increasing across all messages of a server.
    pub seq: u64,
    /// Server time since start.
    pub t_ms: f64,
    #[serde(flatten)]
    pub message: Message,
}
