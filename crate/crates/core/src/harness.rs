//! Benchmark experiments on synthetic corpora: the model x split x window x
//! class-count accuracy grid, confusion matrices, per-speed breakdown and the
//! intensity sweep.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor, FEATURE_DIM, FEATURE_LAYOUT_TAG};
use crate::models::{train, ConfusionMatrix, Evaluation, Hyper, ModelError, ModelKind};
use crate::preprocess::{
    ms_to_samples, split_indices, ClassSet, PreprocessConfig, PreprocessError, Preprocessor, SplitKind, SplitSpec, WindowMeta,
};
use crate::recording::{
    extract_trials, paradigm_schedule, session_path, write_recording, Recording, RecordingError, Schedule,
};
use crate::stats::{polyder, polyfit, polyval, spearman, Summary};
use crate::synth::{mix, synth_session_with, SessionParams, SynthConfig, SynthError};

pub const STEP_MS: f64 = 250.0;
pub const WINDOWS_MS: [u32; 3] = [250, 500, 750];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Recording(#[from] RecordingError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Feature rows of many windows plus their provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    /// Row-major, `FEATURE_DIM` values per window.
    pub x: Vec<f64>,
    pub meta: Vec<WindowMeta>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn extend(&mut self, other: FeatureTable) {
        self.x.extend(other.x);
        self.meta.extend(other.meta);
    }

    pub fn gather(&self, rows: &[usize]) -> (Array2<f64>, Vec<u8>) {
        let mut x = Vec::with_capacity(rows.len() * FEATURE_DIM);
        for &i in rows {
            x.extend_from_slice(self.row(i));
        }
        let y = rows.iter().map(|&i| self.meta[i].label).collect();
        (Array2::from_shape_vec((rows.len(), FEATURE_DIM), x).expect("feature matrix shape"), y)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), FEATURE_DIM), &self.x).expect("feature matrix shape")
    }
}

/// Windows the active part of every trial and extracts features, once per
/// window length. Filtering and baseline correction run once per trial.
pub fn recording_features(
    rec: &Recording,
    pre: &Preprocessor,
    windows_ms: &[u32],
    step_ms: f64,
) -> Result<BTreeMap<u32, FeatureTable>, HarnessError> {
    let fs = pre.config.fs;
    let step = ms_to_samples(step_ms, fs)?;
    let mut out: BTreeMap<u32, FeatureTable> = BTreeMap::new();
    let mut extractors: Vec<(u32, usize, FeatureExtractor)> = windows_ms
        .iter()
        .map(|&w| {
            let n = ms_to_samples(f64::from(w), fs)?;
            Ok((w, n, FeatureExtractor::new(n, fs)?))
        })
        .collect::<Result<_, HarnessError>>()?;
    for trial in extract_trials(rec).trials {
        let active = pre.trial_active(rec, &trial)?;
        let n = active.first().map_or(0, Vec::len);
        for (w_ms, w, ex) in extractors.iter_mut() {
            let table = out.entry(*w_ms).or_default();
            for s in crate::preprocess::window_starts(n, *w, step)? {
                let win: Vec<Vec<f64>> = active.iter().map(|ch| ch[s..s + *w].to_vec()).collect();
                ex.extract_into(&win, &mut table.x)?;
                table.meta.push(WindowMeta {
                    label: trial.trial_id,
                    block: trial.block,
                    speed_kmh: trial.speed_kmh,
                    subject_id: rec.meta.subject_id,
                    day_id: rec.meta.day_id,
                    t_start_ms: rec.value(trial.active.start + s, crate::recording::COL_TIMESTAMP) as u64,
                });
            }
        }
    }
    Ok(out)
}

/// The synthetic cohort: subjects 1..=n, day 1 worn at shift 0 and day 2
/// at `day2_shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_subjects: u32,
    pub days: u32,
    pub day2_shift: usize,
    pub synth: SynthConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { n_subjects: 10, days: 2, day2_shift: 1, synth: SynthConfig::default() }
    }
}

impl CorpusSpec {
    pub fn sessions(&self) -> Vec<SessionParams> {
        (1..=self.n_subjects)
            .flat_map(|s| {
                (1..=self.days).map(move |d| SessionParams {
                    subject_id: s,
                    day_id: d,
                    wearing_shift: if d == 1 { 0 } else { self.day2_shift * (d as usize - 1) % 8 },
                })
            })
            .collect()
    }
}

/// Features of every session in the corpus, keyed by window length.
#[derive(Debug, Clone, Default)]
pub struct CorpusFeatures {
    pub tables: BTreeMap<u32, FeatureTable>,
}

/// Synthesizes each session, optionally writes it under `data_dir`, and
/// keeps only its features.
pub fn build_corpus_features(
    spec: &CorpusSpec,
    schedule: &Schedule,
    pre: &Preprocessor,
    windows_ms: &[u32],
    data_dir: Option<&Path>,
) -> Result<CorpusFeatures, HarnessError> {
    let per_session: Vec<BTreeMap<u32, FeatureTable>> = spec
        .sessions()
        .par_iter()
        .map(|p| {
            let rec = synth_session_with(&spec.synth, schedule, *p)?;
            if let Some(dir) = data_dir {
                write_recording(&rec, &session_path(dir, p.subject_id, p.day_id))?;
            }
            recording_features(&rec, pre, windows_ms, STEP_MS)
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut tables: BTreeMap<u32, FeatureTable> = BTreeMap::new();
    for t in per_session {
        for (w, table) in t {
            tables.entry(w).or_default().extend(table);
        }
    }
    Ok(CorpusFeatures { tables })
}

/// Features of recordings already on disk.
pub fn corpus_features_from_recordings(
    recs: &[Recording],
    pre: &Preprocessor,
    windows_ms: &[u32],
) -> Result<CorpusFeatures, HarnessError> {
    let mut tables: BTreeMap<u32, FeatureTable> = BTreeMap::new();
    for rec in recs {
        for (w, table) in recording_features(rec, pre, windows_ms, STEP_MS)? {
            tables.entry(w).or_default().extend(table);
        }
    }
    Ok(CorpusFeatures { tables })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub models: Vec<ModelKind>,
    pub splits: Vec<SplitKind>,
    pub windows_ms: Vec<u32>,
    pub classes: Vec<ClassSet>,
    pub seeds: Vec<u64>,
    pub hyper: Hyper,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            splits: SplitKind::ALL.to_vec(),
            windows_ms: WINDOWS_MS.to_vec(),
            classes: vec![ClassSet::Six, ClassSet::Twelve],
            seeds: vec![0],
            hyper: Hyper::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: ModelKind,
    pub split: SplitKind,
    pub window_ms: u32,
    pub classes: ClassSet,
}

/// One train/test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Test subject.
    pub subject: u32,
    pub seed: u64,
    pub accuracy: f64,
    /// speed -> (correct, total) over test windows.
    pub per_speed: BTreeMap<u8, (u64, u64)>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub folds: Vec<FoldResult>,
    /// Over subjects; each subject's value is its mean over seeds.
    pub summary: Option<Summary>,
    /// Summed over folds.
    pub confusion: Option<ConfusionMatrix>,
    pub absent: Option<String>,
}

impl CellResult {
    pub fn per_subject(&self) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for f in &self.folds {
            acc.entry(f.subject).or_default().push(f.accuracy);
        }
        acc.into_iter().map(|(s, v)| (s, crate::stats::mean(&v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: BenchmarkSpec,
    pub corpus: Option<CorpusSpec>,
    pub preprocess: PreprocessConfig,
    pub step_ms: f64,
    pub feature_layout: String,
    pub subjects: Vec<u32>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultGrid {
    pub cells: Vec<CellResult>,
    pub manifest: RunManifest,
}

fn folds_for(split: SplitKind, subjects: &[u32]) -> Vec<SplitSpec> {
    subjects
        .iter()
        .map(|&s| match split {
            SplitKind::SingleDay => SplitSpec::SingleDay { subject: s, day: 1 },
            SplitKind::CrossDay => SplitSpec::CrossDay { subject: s, train_day: 1, test_day: 2 },
            SplitKind::CrossSubject => SplitSpec::CrossSubject { held_out: s, day: Some(1) },
        })
        .collect()
}

fn fold_subject(spec: &SplitSpec) -> u32 {
    match *spec {
        SplitSpec::SingleDay { subject, .. } | SplitSpec::CrossDay { subject, .. } => subject,
        SplitSpec::CrossSubject { held_out, .. } => held_out,
    }
}

/// Trains and tests one fold; `Ok(None)` when the split selects nothing.
pub fn run_fold(
    table: &FeatureTable,
    model: ModelKind,
    classes: ClassSet,
    split: &SplitSpec,
    hyper: &Hyper,
    seed: u64,
) -> Result<Option<(FoldResult, Vec<(WindowMeta, u8)>)>, HarnessError> {
    let rows: Vec<usize> = (0..table.len()).filter(|&i| classes.contains(table.meta[i].label)).collect();
    let metas: Vec<WindowMeta> = rows.iter().map(|&i| table.meta[i]).collect();
    let (train_idx, test_idx) = match split_indices(&metas, split) {
        Ok(v) => v,
        Err(PreprocessError::EmptySplit { .. }) | Err(PreprocessError::Argument(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let map = |idx: Vec<usize>| idx.into_iter().map(|i| rows[i]).collect::<Vec<_>>();
    let (train_rows, test_rows) = (map(train_idx), map(test_idx));
    let (xtr, ytr) = table.gather(&train_rows);
    let (xte, yte) = table.gather(&test_rows);
    let fold_seed = mix(&[seed, u64::from(fold_subject(split))]);
    let m = train(model, xtr.view(), &ytr, hyper, fold_seed)?;
    let pred = m.predict(xte.view())?;
    let eval = Evaluation::from_predictions(&yte, &pred);
    let mut per_speed: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    let mut detail = Vec::with_capacity(test_rows.len());
    for ((&r, &t), &p) in test_rows.iter().zip(&yte).zip(&pred) {
        let e = per_speed.entry(table.meta[r].speed_kmh).or_default();
        e.0 += u64::from(t == p);
        e.1 += 1;
        detail.push((table.meta[r], p));
    }
    let confusion = ConfusionMatrix::with_classes((1..=classes.count()).collect(), &yte, &pred);
    Ok(Some((FoldResult { subject: fold_subject(split), seed, accuracy: eval.accuracy, per_speed, confusion }, detail)))
}

fn sum_confusion(folds: &[FoldResult]) -> Option<ConfusionMatrix> {
    let first = folds.first()?;
    let mut total = first.confusion.clone();
    for f in &folds[1..] {
        for (a, b) in total.counts.iter_mut().flatten().zip(f.confusion.counts.iter().flatten()) {
            *a += b;
        }
    }
    Some(total)
}

/// Evaluates the full grid. Cells run in parallel and are reported in
/// sorted key order.
pub fn run_benchmark(
    corpus: &CorpusFeatures,
    spec: &BenchmarkSpec,
    preprocess: &PreprocessConfig,
    corpus_spec: Option<&CorpusSpec>,
) -> Result<ResultGrid, HarnessError> {
    let started = Instant::now();
    let mut subjects: Vec<u32> =
        corpus.tables.values().flat_map(|t| t.meta.iter().map(|m| m.subject_id)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    subjects.sort_unstable();
    let mut keys = Vec::new();
    for &model in &spec.models {
        for &split in &spec.splits {
            for &window_ms in &spec.windows_ms {
                for &classes in &spec.classes {
                    keys.push(CellKey { model, split, window_ms, classes });
                }
            }
        }
    }
    keys.sort();
    let mut tasks = Vec::new();
    for (ci, key) in keys.iter().enumerate() {
        for fold in folds_for(key.split, &subjects) {
            for &seed in &spec.seeds {
                tasks.push((ci, fold, seed));
            }
        }
    }
    let outcomes: Vec<(usize, Result<Option<FoldResult>, String>)> = tasks
        .par_iter()
        .map(|(ci, fold, seed)| {
            let key = keys[*ci];
            let res = match corpus.tables.get(&key.window_ms) {
                None => Err(format!("no features for {} ms windows", key.window_ms)),
                Some(table) => run_fold(table, key.model, key.classes, fold, &spec.hyper, *seed)
                    .map(|o| o.map(|(f, _)| f))
                    .map_err(|e| e.to_string()),
            };
            (*ci, res)
        })
        .collect();
    let mut per_cell: Vec<(Vec<FoldResult>, Vec<String>)> = vec![(Vec::new(), Vec::new()); keys.len()];
    for (ci, res) in outcomes {
        match res {
            Ok(Some(f)) => per_cell[ci].0.push(f),
            Ok(None) => {}
            Err(e) => per_cell[ci].1.push(e),
        }
    }
    let cells = keys
        .iter()
        .zip(per_cell)
        .map(|(key, (mut folds, errors))| {
            folds.sort_by_key(|f| (f.subject, f.seed));
            let mut cell = CellResult { key: *key, folds, summary: None, confusion: None, absent: None };
            if cell.folds.is_empty() {
                cell.absent = Some(errors.first().cloned().unwrap_or_else(|| "split selects no data".into()));
            } else {
                cell.summary = Some(Summary::of(cell.per_subject().into_values().collect()));
                cell.confusion = sum_confusion(&cell.folds);
            }
            cell
        })
        .collect();
    Ok(ResultGrid {
        cells,
        manifest: RunManifest {
            spec: spec.clone(),
            corpus: corpus_spec.cloned(),
            preprocess: preprocess.clone(),
            step_ms: STEP_MS,
            feature_layout: FEATURE_LAYOUT_TAG.to_string(),
            subjects,
            elapsed_s: started.elapsed().as_secs_f64(),
        },
    })
}

impl ResultGrid {
    pub fn cell(&self, model: ModelKind, split: SplitKind, window_ms: u32, classes: ClassSet) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.key == CellKey { model, split, window_ms, classes })
    }

    pub fn mean(&self, model: ModelKind, split: SplitKind, window_ms: u32, classes: ClassSet) -> Option<f64> {
        self.cell(model, split, window_ms, classes)?.summary.as_ref().map(|s| s.mean)
    }

    /// Table layout: one row per (method, type), columns per class count and
    /// window, cells `mean ± std`.
    pub fn to_table_csv(&self) -> String {
        let spec = &self.manifest.spec;
        let mut out = String::from("Method,Type");
        for c in &spec.classes {
            for w in &spec.windows_ms {
                out.push_str(&format!(",{}-classes {w}ms", c.count()));
            }
        }
        out.push('\n');
        for &m in &spec.models {
            for &s in &spec.splits {
                out.push_str(&format!("{},{}", m.name(), s.abbrev()));
                for &c in &spec.classes {
                    for &w in &spec.windows_ms {
                        let cell = match self.cell(m, s, w, c).and_then(|c| c.summary.as_ref()) {
                            Some(sum) => format!("{:.4} ± {:.4}", sum.mean, sum.std),
                            None => "absent".to_string(),
                        };
                        out.push_str(&format!(",{cell}"));
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// One row per cell and subject.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("model,split,window_ms,classes,subject,accuracy\n");
        for c in &self.cells {
            for (s, a) in c.per_subject() {
                out.push_str(&format!(
                    "{},{},{},{},{s},{a:.6}\n",
                    c.key.model.name(),
                    c.key.split.abbrev(),
                    c.key.window_ms,
                    c.key.classes.count()
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    /// Writes the table, long-form CSV, JSON, manifest and one confusion
    /// matrix CSV per cell.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir.join("confusion"))?;
        std::fs::write(dir.join("results_table.csv"), self.to_table_csv())?;
        std::fs::write(dir.join("results_long.csv"), self.to_long_csv())?;
        std::fs::write(dir.join("results.json"), self.to_json())?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest).expect("manifest serializes"))?;
        for c in &self.cells {
            if let Some(cm) = &c.confusion {
                let name = format!(
                    "{}_{}_{}ms_{}c.csv",
                    c.key.model.name(),
                    c.key.split.abbrev(),
                    c.key.window_ms,
                    c.key.classes.count()
                );
                std::fs::write(dir.join("confusion").join(name), cm.to_csv())?;
            }
        }
        Ok(())
    }
}

/// Per-speed accuracy of one cell, plus all speeds pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedBreakdown {
    pub per_speed: BTreeMap<u8, Summary>,
    pub mixed: Summary,
}

impl SpeedBreakdown {
    /// Largest difference between two speeds' mean accuracies.
    pub fn max_gap(&self) -> f64 {
        let means: Vec<f64> = self.per_speed.values().map(|s| s.mean).collect();
        let hi = means.iter().copied().fold(f64::MIN, f64::max);
        let lo = means.iter().copied().fold(f64::MAX, f64::min);
        hi - lo
    }

    /// Root mean of the per-speed variances.
    pub fn pooled_std(&self) -> f64 {
        let v: Vec<f64> = self.per_speed.values().map(|s| s.std * s.std).collect();
        crate::stats::mean(&v).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("speed,accuracy\n");
        for (s, sum) in &self.per_speed {
            out.push_str(&format!("{s} km/h,{:.4} ± {:.4}\n", sum.mean, sum.std));
        }
        out.push_str(&format!("mixed,{:.4} ± {:.4}\n", self.mixed.mean, self.mixed.std));
        out
    }
}

pub fn breakdown_by_speed(cell: &CellResult) -> SpeedBreakdown {
    let mut subj: BTreeMap<u8, BTreeMap<u32, (u64, u64)>> = BTreeMap::new();
    let mut mixed: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for f in &cell.folds {
        for (&speed, &(c, n)) in &f.per_speed {
            let e = subj.entry(speed).or_default().entry(f.subject).or_default();
            e.0 += c;
            e.1 += n;
            let m = mixed.entry(f.subject).or_default();
            m.0 += c;
            m.1 += n;
        }
    }
    let ratio = |m: &BTreeMap<u32, (u64, u64)>| Summary::of(m.values().map(|&(c, n)| c as f64 / n as f64).collect());
    SpeedBreakdown { per_speed: subj.iter().map(|(s, m)| (*s, ratio(m))).collect(), mixed: ratio(&mixed) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySweep {
    pub levels: Vec<f64>,
    /// Mean over subjects per level, `None` when a level had no test data.
    pub accuracy: Vec<Option<Summary>>,
    pub spearman_rho: f64,
    /// Degree-5 least-squares fit, lowest order first.
    pub poly5: Vec<f64>,
    /// Slope of the fit at the last level minus slope at the first.
    pub slope_change: f64,
}

impl IntensitySweep {
    pub fn is_concave(&self) -> bool {
        self.slope_change < 0.0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("intensity,accuracy_mean,accuracy_std,fit\n");
        for (l, a) in self.levels.iter().zip(&self.accuracy) {
            match a {
                Some(s) => out.push_str(&format!("{l},{:.4},{:.4},{:.4}\n", s.mean, s.std, polyval(&self.poly5, *l))),
                None => out.push_str(&format!("{l},absent,absent,{:.4}\n", polyval(&self.poly5, *l))),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub levels: Vec<f64>,
    pub subjects: Vec<u32>,
    pub model: ModelKind,
    pub window_ms: u32,
    pub classes: ClassSet,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            levels: (0..6).map(|i| f64::from(i) / 5.0).collect(),
            subjects: (1..=10).collect(),
            model: ModelKind::Lda,
            window_ms: 250,
            classes: ClassSet::Twelve,
            seed: 0,
        }
    }
}

/// Paradigm schedule restricted to the modes of a class set.
pub fn class_schedule(classes: ClassSet) -> Schedule {
    let mut s = paradigm_schedule();
    for b in &mut s.blocks {
        b.trials.retain(|t| classes.contains(t.trial_id));
    }
    s
}

/// Accuracy against contraction intensity. Per subject, sessions are
/// synthesized at every level; the model trains on the training blocks of
/// all levels together and is tested on each level's test blocks.
pub fn sweep_intensity(corpus: &SynthConfig, sweep: &SweepSpec, pre: &Preprocessor, hyper: &Hyper) -> Result<IntensitySweep, HarnessError> {
    if sweep.levels.len() < 2 {
        return Err(HarnessError::Argument("sweep needs at least two levels".into()));
    }
    let schedule = class_schedule(sweep.classes);
    let per_subject: Vec<Vec<Option<f64>>> = sweep
        .subjects
        .par_iter()
        .map(|&subject| {
            let mut table = FeatureTable::default();
            let mut level_of = Vec::new();
            for (li, &level) in sweep.levels.iter().enumerate() {
                let mut cfg = corpus.clone();
                cfg.intensity = level;
                let rec = synth_session_with(&cfg, &schedule, SessionParams { subject_id: subject, day_id: 1, wearing_shift: 0 })?;
                let t = recording_features(&rec, pre, &[sweep.window_ms], STEP_MS)?.remove(&sweep.window_ms).unwrap_or_default();
                level_of.extend(std::iter::repeat(li).take(t.len()));
                table.extend(t);
            }
            let split = SplitSpec::SingleDay { subject, day: 1 };
            let (train_idx, test_idx) = split_indices(&table.meta, &split)?;
            let (xtr, ytr) = table.gather(&train_idx);
            let m = train(sweep.model, xtr.view(), &ytr, hyper, mix(&[sweep.seed, u64::from(subject)]))?;
            let (xte, yte) = table.gather(&test_idx);
            let pred = m.predict(xte.view())?;
            let mut hits = vec![(0u64, 0u64); sweep.levels.len()];
            for ((&i, t), p) in test_idx.iter().zip(&yte).zip(&pred) {
                hits[level_of[i]].0 += u64::from(t == p);
                hits[level_of[i]].1 += 1;
            }
            Ok(hits.into_iter().map(|(c, n)| (n > 0).then(|| c as f64 / n as f64)).collect())
        })
        .collect::<Result<_, HarnessError>>()?;
    let accuracy: Vec<Option<Summary>> = (0..sweep.levels.len())
        .map(|li| {
            let v: Vec<f64> = per_subject.iter().filter_map(|s| s[li]).collect();
            (!v.is_empty()).then(|| Summary::of(v))
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        sweep.levels.iter().zip(&accuracy).filter_map(|(l, a)| a.as_ref().map(|s| (*l, s.mean))).unzip();
    let poly5 = polyfit(&xs, &ys, 5);
    let d = polyder(&poly5);
    let (lo, hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    Ok(IntensitySweep {
        levels: sweep.levels.clone(),
        accuracy,
        spearman_rho: spearman(&xs, &ys),
        poly5,
        slope_change: polyval(&d, hi) - polyval(&d, lo),
    })
}
