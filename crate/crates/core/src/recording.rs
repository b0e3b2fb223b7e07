//! Paradigm schedule and the 15-channel `.dat` session format.
//!
//! Column layout (1-based, as operators refer to it):
//!
//! | cols  | content                          |
//! |-------|----------------------------------|
//! | 1-8   | sEMG, microvolts                 |
//! | 9-11  | accelerometer x/y/z, g           |
//! | 12    | timestamp, ms since session start|
//! | 13    | trigger: force mode id, 0 = rest |
//! | 14    | block id 1..12                   |
//! | 15    | treadmill speed, km/h            |
//!
//! On disk the matrix is row-major little-endian `f32`, 15 values per row,
//! without a header. Metadata lives in a `<name>.meta.json` sidecar.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ACCEL_AXES, EMG_CHANNELS, SAMPLE_RATE_HZ};

pub const COLUMNS: usize = 15;
pub const ROW_BYTES: usize = COLUMNS * 4;

pub const COL_EMG: usize = 0;
pub const COL_ACCEL: usize = 8;
pub const COL_TIMESTAMP: usize = 11;
pub const COL_TRIGGER: usize = 12;
pub const COL_BLOCK: usize = 13;
pub const COL_SPEED: usize = 14;

pub const SPEEDS_KMH: [u8; 4] = [0, 4, 6, 8];
pub const N_BLOCKS: usize = 12;
pub const N_MODES: u8 = 12;
pub const TRIAL_REST_S: f64 = 2.0;
pub const TRIAL_ACTIVE_S: f64 = 8.0;

/// Trigger runs shorter than this are reported as malformed.
pub const MIN_TRIAL_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed .dat: {len} bytes is not a multiple of {ROW_BYTES}; trailing partial row starts at byte offset {offset}")]
    Format { len: u64, offset: u64 },
    #[error("bad metadata sidecar {path}: {message}")]
    Meta { path: PathBuf, message: String },
    #[error("{} invalid value(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),
    #[error("row has {0} columns, expected {COLUMNS}")]
    RowWidth(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub row: usize,
    pub column: usize,
    pub value: f64,
    pub reason: &'static str,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {} col {}: {} ({})", self.row, self.column + 1, self.value, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Force mode prompted during the active part.
    pub trial_id: u8,
    pub rest_s: f64,
    pub active_s: f64,
}

impl TrialSpec {
    pub fn duration_s(&self) -> f64 {
        self.rest_s + self.active_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_id: u8,
    pub speed_kmh: u8,
    pub trials: Vec<TrialSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub blocks: Vec<BlockSpec>,
}

/// The 12 x 12 acquisition paradigm: three rounds of (0, 4, 6, 8) km/h, each
/// block prompting modes 1..12 in order with 2 s rest + 8 s hold.
pub fn paradigm_schedule() -> Schedule {
    let blocks = (0..N_BLOCKS)
        .map(|b| BlockSpec {
            block_id: b as u8 + 1,
            speed_kmh: SPEEDS_KMH[b % SPEEDS_KMH.len()],
            trials: (1..=N_MODES)
                .map(|m| TrialSpec { trial_id: m, rest_s: TRIAL_REST_S, active_s: TRIAL_ACTIVE_S })
                .collect(),
        })
        .collect();
    Schedule { blocks }
}

/// One contiguous stretch of constant mode/trigger inside a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub block: u8,
    pub speed_kmh: u8,
    pub trial_index: usize,
    /// Force mode the subject holds (1 during rest).
    pub mode: u8,
    pub trigger: u8,
    pub samples: usize,
}

impl Schedule {
    pub fn n_trials(&self) -> usize {
        self.blocks.iter().map(|b| b.trials.len()).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.blocks.iter().flat_map(|b| &b.trials).map(TrialSpec::duration_s).sum()
    }

    pub fn total_samples(&self, fs: f64) -> usize {
        self.segments(fs).iter().map(|s| s.samples).sum()
    }

    /// Flattens the schedule into rest/active segments in time order. Empty
    /// segments are omitted.
    pub fn segments(&self, fs: f64) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut trial_index = 0;
        for block in &self.blocks {
            for trial in &block.trials {
                let rest = (trial.rest_s * fs).round() as usize;
                let active = (trial.active_s * fs).round() as usize;
                let base = Segment {
                    block: block.block_id,
                    speed_kmh: block.speed_kmh,
                    trial_index,
                    mode: 1,
                    trigger: 0,
                    samples: rest,
                };
                if rest > 0 {
                    out.push(base);
                }
                if active > 0 {
                    out.push(Segment { mode: trial.trial_id, trigger: trial.trial_id, samples: active, ..base });
                }
                trial_index += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub subject_id: u32,
    pub day_id: u32,
    pub fs: f64,
    pub created_at: Option<DateTime<Utc>>,
}

impl RecordingMeta {
    pub fn new(subject_id: u32, day_id: u32) -> Self {
        Self { subject_id, day_id, fs: SAMPLE_RATE_HZ, created_at: None }
    }
}

/// A T x 15 session matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    data: Vec<f64>,
    pub meta: RecordingMeta,
}

/// One full-rate sample row in the dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Row {
    pub emg_uv: [f64; EMG_CHANNELS],
    pub accel_g: [f64; ACCEL_AXES],
    pub timestamp_ms: f64,
    pub trigger: u8,
    pub block: u8,
    pub speed_kmh: u8,
}

impl Row {
    pub fn to_array(&self) -> [f64; COLUMNS] {
        let mut a = [0.0; COLUMNS];
        a[..8].copy_from_slice(&self.emg_uv);
        a[8..11].copy_from_slice(&self.accel_g);
        a[COL_TIMESTAMP] = self.timestamp_ms;
        a[COL_TRIGGER] = f64::from(self.trigger);
        a[COL_BLOCK] = f64::from(self.block);
        a[COL_SPEED] = f64::from(self.speed_kmh);
        a
    }
}

impl Recording {
    pub fn new(meta: RecordingMeta) -> Self {
        Self { data: Vec::new(), meta }
    }

    pub fn with_capacity(meta: RecordingMeta, rows: usize) -> Self {
        Self { data: Vec::with_capacity(rows * COLUMNS), meta }
    }

    pub fn from_data(data: Vec<f64>, meta: RecordingMeta) -> Result<Self, RecordingError> {
        if data.len() % COLUMNS != 0 {
            return Err(RecordingError::RowWidth(data.len() % COLUMNS));
        }
        let r = Self { data, meta };
        r.validate()?;
        Ok(r)
    }

    pub fn push_row(&mut self, row: &Row) {
        self.data.extend_from_slice(&row.to_array());
    }

    pub fn rows(&self) -> usize {
        self.data.len() / COLUMNS
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * COLUMNS..(i + 1) * COLUMNS]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.data[row * COLUMNS + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.data.iter().skip(col).step_by(COLUMNS).copied().collect()
    }

    /// sEMG of the given sample range as channels x samples.
    pub fn emg(&self, range: Range<usize>) -> Vec<Vec<f64>> {
        (0..EMG_CHANNELS)
            .map(|ch| range.clone().map(|i| self.data[i * COLUMNS + COL_EMG + ch]).collect())
            .collect()
    }

    pub fn trigger(&self, i: usize) -> u8 {
        self.value(i, COL_TRIGGER) as u8
    }

    pub fn block(&self, i: usize) -> u8 {
        self.value(i, COL_BLOCK) as u8
    }

    pub fn speed(&self, i: usize) -> u8 {
        self.value(i, COL_SPEED) as u8
    }

    /// Lists every out-of-range trigger/block/speed value and timestamp
    /// regression.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut prev_ts = f64::NEG_INFINITY;
        for (i, row) in self.data.chunks_exact(COLUMNS).enumerate() {
            let mut flag = |column: usize, reason: &'static str| {
                out.push(Violation { row: i, column, value: row[column], reason })
            };
            let trig = row[COL_TRIGGER];
            if trig.fract() != 0.0 || !(0.0..=f64::from(N_MODES)).contains(&trig) {
                flag(COL_TRIGGER, "trigger must be an integer in 0..=12");
            }
            let block = row[COL_BLOCK];
            if block.fract() != 0.0 || !(1.0..=N_BLOCKS as f64).contains(&block) {
                flag(COL_BLOCK, "block must be an integer in 1..=12");
            }
            if !SPEEDS_KMH.iter().any(|&s| f64::from(s) == row[COL_SPEED]) {
                flag(COL_SPEED, "speed must be one of 0, 4, 6, 8 km/h");
            }
            let ts = row[COL_TIMESTAMP];
            if !(ts > prev_ts) {
                flag(COL_TIMESTAMP, "timestamp must increase monotonically");
            }
            prev_ts = ts;
        }
        out
    }

    pub fn validate(&self) -> Result<(), RecordingError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(RecordingError::Validation(v))
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.rows() as f64 / self.meta.fs
    }
}

/// Sidecar path for a `.dat` file: `session.dat` -> `session.meta.json`.
pub fn meta_path(dat: &Path) -> PathBuf {
    dat.with_extension("meta.json")
}

/// Conventional location of a session inside a data directory.
pub fn session_path(data_dir: &Path, subject_id: u32, day_id: u32) -> PathBuf {
    data_dir.join(format!("S{subject_id:02}")).join(format!("D{day_id}")).join("session.dat")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordingError + '_ {
    move |source| RecordingError::Io { path: path.to_path_buf(), source }
}

pub fn write_recording(r: &Recording, path: &Path) -> Result<(), RecordingError> {
    r.validate()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for &v in &r.data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(&r.meta).expect("meta serializes");
    fs::write(&mp, json).map_err(io_err(&mp))?;
    Ok(())
}

pub fn read_recording(path: &Path) -> Result<Recording, RecordingError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let len = bytes.len() as u64;
    if bytes.len() % ROW_BYTES != 0 {
        return Err(RecordingError::Format { len, offset: len - len % ROW_BYTES as u64 });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();

    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    let meta: RecordingMeta =
        serde_json::from_str(&text).map_err(|e| RecordingError::Meta { path: mp, message: e.to_string() })?;
    let r = Recording { data, meta };
    r.validate()?;
    Ok(r)
}

/// One prompted trial located in a recording by its trigger run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialSlice {
    pub trial_id: u8,
    pub block: u8,
    pub speed_kmh: u8,
    /// Rest samples immediately before the run (at most the rest length).
    pub baseline: Range<usize>,
    pub active: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedTrial {
    pub trial_id: u8,
    pub block: u8,
    pub active: Range<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TrialExtraction {
    pub trials: Vec<TrialSlice>,
    pub warnings: Vec<MalformedTrial>,
}

/// Finds every maximal run of a non-zero trigger.
pub fn extract_trials(r: &Recording) -> TrialExtraction {
    let fs = r.meta.fs;
    let max_baseline = (TRIAL_REST_S * fs).round() as usize;
    let min_run = (MIN_TRIAL_S * fs).round() as usize;
    let n = r.rows();
    let mut out = TrialExtraction::default();
    let mut i = 0;
    while i < n {
        let k = r.trigger(i);
        if k == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && r.trigger(i) == k {
            i += 1;
        }
        let block = r.block(start);
        if i - start < min_run {
            out.warnings.push(MalformedTrial {
                trial_id: k,
                block,
                active: start..i,
                reason: format!("trigger run of {} samples is shorter than {MIN_TRIAL_S} s", i - start),
            });
            continue;
        }
        let mut b = start;
        while b > 0 && start - b < max_baseline && r.trigger(b - 1) == 0 && r.block(b - 1) == block {
            b -= 1;
        }
        out.trials.push(TrialSlice {
            trial_id: k,
            block,
            speed_kmh: r.speed(start),
            baseline: b..start,
            active: start..i,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(triggers: &[u8]) -> Recording {
        let mut r = Recording::new(RecordingMeta::new(1, 1));
        for (i, &t) in triggers.iter().enumerate() {
            r.push_row(&Row { timestamp_ms: 2.0 * i as f64, trigger: t, block: 1, ..Row::default() });
        }
        r
    }

    #[test]
    fn schedule_shape() {
        let s = paradigm_schedule();
        assert_eq!(s.n_trials(), 144);
        assert_eq!(s.blocks[4].speed_kmh, 0);
        assert_eq!(s.blocks[3].speed_kmh, 8);
        let speeds: Vec<u8> = s.blocks.iter().map(|b| b.speed_kmh).collect();
        assert_eq!(speeds, [0, 4, 6, 8, 0, 4, 6, 8, 0, 4, 6, 8]);
        for b in &s.blocks {
            let ids: Vec<u8> = b.trials.iter().map(|t| t.trial_id).collect();
            assert_eq!(ids, (1..=12).collect::<Vec<u8>>());
            assert!(b.trials.iter().all(|t| t.duration_s() == 10.0));
        }
        assert_eq!(s.total_samples(500.0), 720_000);
    }

    #[test]
    fn empty_trigger_yields_nothing() {
        let r = tiny(&[0; 1000]);
        assert_eq!(extract_trials(&r), TrialExtraction::default());
    }

    #[test]
    fn short_run_is_flagged() {
        let mut trig = vec![0u8; 100];
        trig.extend(vec![3u8; 499]);
        trig.extend(vec![0u8; 10]);
        let ex = extract_trials(&tiny(&trig));
        assert!(ex.trials.is_empty());
        assert_eq!(ex.warnings.len(), 1);
        assert_eq!(ex.warnings[0].active, 100..599);
    }

    #[test]
    fn baseline_is_capped_at_rest_length() {
        let mut trig = vec![0u8; 3000];
        trig.extend(vec![5u8; 600]);
        let ex = extract_trials(&tiny(&trig));
        assert_eq!(ex.trials[0].baseline, 2000..3000);
        assert_eq!(ex.trials[0].active, 3000..3600);
    }

    #[test]
    fn bad_values_are_listed() {
        let mut r = tiny(&[0, 0, 0]);
        r.data[COLUMNS + COL_TRIGGER] = 13.0;
        r.data[2 * COLUMNS + COL_SPEED] = 5.0;
        match r.validate() {
            Err(RecordingError::Validation(v)) => {
                assert_eq!(v.len(), 2);
                assert_eq!((v[0].row, v[0].column), (1, COL_TRIGGER));
                assert_eq!((v[1].row, v[1].column), (2, COL_SPEED));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
