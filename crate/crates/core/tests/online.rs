use std::time::Duration;

use myoband::models::{train, Hyper, ModelKind, TrainedModel};
use myoband::online::*;
use myoband::preprocess::ClassSet;
use myoband::protocol::DecodeStats;
use myoband::recording::{paradigm_schedule, Recording};
use myoband::source::{FrameSource, Poll, ReplaySource};
use myoband::synth::*;

const SUBJECT: SessionParams = SessionParams { subject_id: 1, day_id: 1, wearing_shift: 0 };

fn session(blocks: usize) -> Recording {
    let mut s = paradigm_schedule();
    s.blocks.truncate(blocks);
    synth_session_with(&SynthConfig::default(), &s, SUBJECT).unwrap()
}

fn model(rec: &Recording, kind: ModelKind) -> TrainedModel {
    let c = OnlineConfig::default();
    let (x, y) = online_training_set(std::slice::from_ref(rec), c.window_ms, c.step_ms, ClassSet::Six, &c.preprocess).unwrap();
    train(kind, x.view(), &y, &Hyper::default(), 0).unwrap()
}

fn band(behavior: SubjectBehavior) -> SimulatedWristband {
    SimulatedWristband::new(&SynthConfig::default(), SUBJECT, 0, behavior, f64::INFINITY).unwrap()
}

#[test]
fn calibration_trims_outliers() {
    let mut v = vec![0.4; 20];
    v[7] = 5.0;
    assert!((calibrate_reaction(&v).unwrap() - 0.4).abs() <= 0.01);
    let mixed: Vec<f64> = [0.35; 5].into_iter().chain([0.45; 5]).collect();
    assert!((calibrate_reaction(&mixed).unwrap() - 0.40).abs() < 1e-12);
    assert!(matches!(calibrate_reaction(&[0.4; 3]), Err(OnlineError::Calibration(_))));
}

#[test]
fn replay_matches_offline_windows() {
    let rec = session(1);
    let m = model(&rec, ModelKind::Lda);
    let cfg = OnlineConfig::default();
    let mut decoder = OnlineDecoder::new(&m, cfg.window_ms, cfg.step_ms, &cfg.preprocess).unwrap();
    let mut src = ReplaySource::new(&rec, 100.0);
    let online: Vec<(u64, u8)> = stream_predictions(&mut src, &mut decoder, Duration::from_secs(1))
        .unwrap()
        .iter()
        .map(|p| (p.end_sample, p.mode))
        .collect();
    let offline = offline_window_predictions(&rec, &m, cfg.window_ms, cfg.step_ms, &cfg.preprocess).unwrap();
    assert_eq!(online.len(), rec.rows() / 125);
    assert_eq!(online, offline);
}

#[test]
fn cued_session_timing_is_step_quantized() {
    let m = model(&session(4), ModelKind::RandomForest);
    let cfg = OnlineConfig { n_trials: 20, ..OnlineConfig::default() };
    let mut prompts = 0;
    let s = run_online_session(&mut band(SubjectBehavior::default()), &m, &cfg, &mut |e| {
        if matches!(e, OnlineEvent::Prompt { mode_id, .. } if *mode_id != 1) {
            prompts += 1;
        }
    })
    .unwrap();
    assert_eq!(prompts, 20);
    assert_eq!(s.trials.len(), 20);
    assert!(s.summary.aborted.is_none());
    let step = cfg.step_ms / 1000.0;
    let window = cfg.window_ms / 1000.0;
    for t in &s.trials {
        let t3 = t.t3_s.expect("responsive subject");
        let dt = t.delta_t_s.unwrap();
        assert!((dt - (t3 - t.t0_s - 0.4)).abs() < 1e-12);
        // the detecting window ends on the step grid, after the switch and
        // no later than the first window lying wholly after it
        let k = (t3 - t.t0_s) / step;
        assert!((k - k.round()).abs() < 1e-9, "{t:?}");
        assert!(dt > 0.0 && dt <= window + step, "{t:?}");
        assert!(t.t0_s >= 0.0 && t3 >= t.t0_s);
    }
    assert!(s.summary.latency.within_budget, "{:?}", s.summary.latency);
    assert_eq!(s.summary.latency.budget_ms, 250.0);
}

#[test]
fn rest_only_stream_times_out() {
    let m = model(&session(1), ModelKind::Lda);
    let cfg = OnlineConfig { n_trials: 3, trial_timeout_s: 2.0, ..OnlineConfig::default() };
    let quiet = SubjectBehavior { responsive: false, ..SubjectBehavior::default() };
    let s = run_online_session(&mut band(quiet), &m, &cfg, &mut |_| {}).unwrap();
    assert_eq!(s.summary.completed, 0);
    assert_eq!(s.summary.timeouts, 3);
    assert!(s.trials.iter().all(|t| t.timed_out && t.t3_s.is_none() && !t.correct));
    assert_eq!(s.summary.accuracy, 0.0);
}

/// Delivers some frames, then nothing.
struct Stalls<'a> {
    inner: ReplaySource<'a>,
    left: usize,
}

impl FrameSource for Stalls<'_> {
    fn poll(&mut self, timeout: Duration) -> Poll {
        if self.left == 0 {
            std::thread::sleep(timeout.min(Duration::from_millis(10)));
            return Poll::Pending;
        }
        self.left -= 1;
        self.inner.poll(timeout)
    }

    fn decode_stats(&self) -> DecodeStats {
        self.inner.decode_stats()
    }
}

#[test]
fn underrun_aborts_with_partial_results() {
    let rec = session(1);
    let m = model(&rec, ModelKind::Lda);
    let cfg = OnlineConfig { underrun_timeout: Duration::from_millis(200), ..OnlineConfig::default() };
    let mut src = Stalls { inner: ReplaySource::new(&rec, f64::INFINITY), left: 100 };
    let s = run_online_session(&mut src, &m, &cfg, &mut |_| {}).unwrap();
    assert!(s.summary.aborted.as_deref().is_some_and(|a| a.contains("underrun")));
    assert!(s.summary.latency.steps > 0);
    assert!(s.trials.len() < cfg.n_trials);
}
