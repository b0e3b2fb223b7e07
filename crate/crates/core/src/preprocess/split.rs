//! Train/test partitioning for the three evaluation protocols.

use serde::{Deserialize, Serialize};

use super::{HasWindowMeta, PreprocessError, WindowMeta};

/// Blocks 1..=8 train, 9..=12 test in single-day evaluation.
pub const SINGLE_DAY_TRAIN_BLOCKS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    SingleDay,
    CrossDay,
    CrossSubject,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::SingleDay, SplitKind::CrossDay, SplitKind::CrossSubject];

    pub fn abbrev(self) -> &'static str {
        match self {
            SplitKind::SingleDay => "SD",
            SplitKind::CrossDay => "CD",
            SplitKind::CrossSubject => "CS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd" | "single_day" => Some(SplitKind::SingleDay),
            "cd" | "cross_day" => Some(SplitKind::CrossDay),
            "cs" | "cross_subject" => Some(SplitKind::CrossSubject),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    SingleDay { subject: u32, day: u32 },
    CrossDay { subject: u32, train_day: u32, test_day: u32 },
    /// Leave one subject out; `day` restricts both sides to one session day.
    CrossSubject { held_out: u32, day: Option<u32> },
}

impl SplitSpec {
    pub fn kind(&self) -> SplitKind {
        match self {
            SplitSpec::SingleDay { .. } => SplitKind::SingleDay,
            SplitSpec::CrossDay { .. } => SplitKind::CrossDay,
            SplitSpec::CrossSubject { .. } => SplitKind::CrossSubject,
        }
    }

    /// `Some(true)` for train, `Some(false)` for test, `None` if unused.
    pub fn side(&self, m: &WindowMeta) -> Option<bool> {
        match *self {
            SplitSpec::SingleDay { subject, day } => {
                (m.subject_id == subject && m.day_id == day).then_some(m.block <= SINGLE_DAY_TRAIN_BLOCKS)
            }
            SplitSpec::CrossDay { subject, train_day, test_day } => {
                if m.subject_id != subject {
                    None
                } else if m.day_id == train_day {
                    Some(true)
                } else if m.day_id == test_day {
                    Some(false)
                } else {
                    None
                }
            }
            SplitSpec::CrossSubject { held_out, day } => {
                if day.is_some_and(|d| d != m.day_id) {
                    None
                } else {
                    Some(m.subject_id != held_out)
                }
            }
        }
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", serde_json::to_string(self).unwrap_or_default())
    }
}

/// Train and test indices into `data`, each sorted by
/// (subject, day, block, t_start).
pub fn split_indices<T: HasWindowMeta>(data: &[T], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), PreprocessError> {
    if data.is_empty() {
        return Err(PreprocessError::Argument("dataset is empty".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, item) in data.iter().enumerate() {
        match spec.side(item.window_meta()) {
            Some(true) => train.push(i),
            Some(false) => test.push(i),
            None => {}
        }
    }
    for (side, idx) in [("train", &mut train), ("test", &mut test)] {
        if idx.is_empty() {
            return Err(PreprocessError::EmptySplit { side, spec: spec.to_string() });
        }
        idx.sort_by_key(|&i| (data[i].window_meta().sort_key(), i));
    }
    Ok((train, test))
}

pub fn make_split<T: HasWindowMeta + Clone>(data: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>), PreprocessError> {
    let (train, test) = split_indices(data, spec)?;
    Ok((
        train.into_iter().map(|i| data[i].clone()).collect(),
        test.into_iter().map(|i| data[i].clone()).collect(),
    ))
}

/// Audit record of a split, exportable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<WindowMeta>,
    pub test: Vec<WindowMeta>,
}

impl SplitManifest {
    pub fn build<T: HasWindowMeta>(data: &[T], spec: &SplitSpec) -> Result<Self, PreprocessError> {
        let (train, test) = split_indices(data, spec)?;
        Ok(Self {
            spec: *spec,
            train: train.iter().map(|&i| *data[i].window_meta()).collect(),
            test: test.iter().map(|&i| *data[i].window_meta()).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
