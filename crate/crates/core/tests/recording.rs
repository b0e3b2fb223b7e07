use myoband::recording::*;
use myoband::synth::{synth_session, synth_session_with, SessionParams, SynthConfig};
use proptest::prelude::*;

fn short_schedule(blocks: usize) -> Schedule {
    let mut s = paradigm_schedule();
    s.blocks.truncate(blocks);
    s
}

fn row(t: usize, trigger: u8) -> Row {
    Row { timestamp_ms: 2.0 * t as f64, trigger, block: 1, speed_kmh: 0, ..Row::default() }
}

#[test]
fn schedule_shape() {
    let s = paradigm_schedule();
    assert_eq!(s.blocks.len(), 12);
    assert_eq!(s.n_trials(), 144);
    for (i, b) in s.blocks.iter().enumerate() {
        assert_eq!(b.block_id as usize, i + 1);
        assert_eq!(b.speed_kmh, [0, 4, 6, 8][i % 4]);
        let ids: Vec<u8> = b.trials.iter().map(|t| t.trial_id).collect();
        assert_eq!(ids, (1..=12).collect::<Vec<u8>>());
        assert!(b.trials.iter().all(|t| t.rest_s == 2.0 && t.active_s == 8.0));
    }
    assert_eq!(s.blocks[4].speed_kmh, 0);
    assert_eq!(s.blocks[3].speed_kmh, 8);
    assert_eq!(s.total_samples(500.0), 720_000);
}

#[test]
fn full_session_file_size_and_round_trip() {
    let rec = synth_session(&SynthConfig::default(), 2, 1, 0).unwrap();
    assert_eq!(rec.rows(), 720_000);
    let dir = tempfile::tempdir().unwrap();
    let path = session_path(dir.path(), 2, 1);
    assert!(path.ends_with("S02/D1/session.dat"));
    write_recording(&rec, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 43_200_000);

    let back = read_recording(&path).unwrap();
    assert_eq!(back.meta, rec.meta);
    assert_eq!(back.rows(), rec.rows());
    for (a, b) in back.data().iter().zip(rec.data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }

    let again = dir.path().join("again.dat");
    write_recording(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let ex = extract_trials(&back);
    assert_eq!(ex.trials.len(), 144);
    assert!(ex.warnings.is_empty());
    let sched = paradigm_schedule();
    for b in &sched.blocks {
        let in_block: Vec<_> = ex.trials.iter().filter(|t| t.block == b.block_id).collect();
        assert_eq!(in_block.len(), 12);
        assert!(in_block.iter().all(|t| t.speed_kmh == b.speed_kmh));
    }
    assert!(ex.trials.iter().all(|t| t.active.len() == 4000 && t.baseline.len() == 1000));
}

#[test]
fn truncated_file_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let rec = synth_session_with(&SynthConfig::default(), &short_schedule(1), SessionParams { subject_id: 1, day_id: 1, wearing_shift: 0 })
        .unwrap();
    let path = dir.path().join("s.dat");
    write_recording(&rec, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    match read_recording(&path) {
        Err(RecordingError::Format { offset, len }) => {
            assert_eq!(len as usize, bytes.len() - 7);
            assert_eq!(offset as usize, bytes.len() - ROW_BYTES);
            let msg = RecordingError::Format { offset, len }.to_string();
            assert!(msg.contains(&offset.to_string()));
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn out_of_range_values_are_listed() {
    let mut rec = Recording::new(RecordingMeta::new(1, 1));
    rec.push_row(&row(0, 0));
    rec.push_row(&Row { trigger: 13, ..row(1, 0) });
    rec.push_row(&Row { block: 0, speed_kmh: 5, ..row(2, 0) });
    let v = rec.violations();
    let cols: Vec<usize> = v.iter().map(|x| x.column).collect();
    assert_eq!(cols, vec![COL_TRIGGER, COL_BLOCK, COL_SPEED]);
    assert_eq!(v[0].row, 1);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(write_recording(&rec, &dir.path().join("x.dat")), Err(RecordingError::Validation(list)) if list.len() == 3));
}

#[test]
fn silent_trigger_has_no_trials() {
    let mut rec = Recording::new(RecordingMeta::new(1, 1));
    for t in 0..2000 {
        rec.push_row(&row(t, 0));
    }
    assert!(extract_trials(&rec).trials.is_empty());
}

#[test]
fn short_run_is_flagged() {
    let mut rec = Recording::new(RecordingMeta::new(1, 1));
    for t in 0..3000 {
        let trig = if (1000..1200).contains(&t) { 3 } else if (1500..2500).contains(&t) { 4 } else { 0 };
        rec.push_row(&row(t, trig));
    }
    let ex = extract_trials(&rec);
    assert_eq!(ex.trials.len(), 1);
    assert_eq!(ex.trials[0].trial_id, 4);
    assert_eq!(ex.trials[0].baseline, 1200..1500);
    assert_eq!(ex.warnings.len(), 1);
    assert_eq!(ex.warnings[0].trial_id, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn padding_does_not_change_trials(runs in prop::collection::vec((0usize..1500, 400usize..1200, 1u8..=12), 1..5), pre in 0usize..700, post in 0usize..700) {
        let mut triggers = Vec::new();
        for (gap, len, id) in &runs {
            triggers.extend(std::iter::repeat(0u8).take(*gap + 1));
            triggers.extend(std::iter::repeat(*id).take(*len));
        }
        let build = |lead: usize, tail: usize| {
            let mut rec = Recording::new(RecordingMeta::new(1, 1));
            let all = std::iter::repeat(0u8).take(lead).chain(triggers.iter().copied()).chain(std::iter::repeat(0u8).take(tail));
            for (t, trig) in all.enumerate() {
                rec.push_row(&row(t, trig));
            }
            extract_trials(&rec)
        };
        let base = build(0, 0);
        let padded = build(pre, post);
        prop_assert_eq!(base.trials.len(), padded.trials.len());
        prop_assert_eq!(base.warnings.len(), padded.warnings.len());
        for (a, b) in base.trials.iter().zip(&padded.trials) {
            prop_assert_eq!(a.trial_id, b.trial_id);
            prop_assert_eq!(a.active.start + pre, b.active.start);
            prop_assert_eq!(a.active.len(), b.active.len());
            prop_assert!(b.baseline.end == b.active.start && b.baseline.len() >= a.baseline.len());
        }
    }
}
