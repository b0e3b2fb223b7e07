use std::f64::consts::PI;

use myoband::preprocess::filter::{FilterSpec, Sos};
use myoband::preprocess::*;
use myoband::recording::{extract_trials, paradigm_schedule};
use myoband::synth::{synth_session_with, SessionParams, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 500.0;

fn tone(f: f64, amp: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / FS).sin()).collect()
}

/// Amplitude of the `f` Hz component by direct projection over a span
/// holding a whole number of cycles.
fn amplitude_at(x: &[f64], f: f64) -> f64 {
    let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, v)| {
        let ph = 2.0 * PI * f * i as f64 / FS;
        (re + v * ph.cos(), im + v * ph.sin())
    });
    2.0 * (re * re + im * im).sqrt() / x.len() as f64
}

fn all_kinds() -> Vec<FilterSpec> {
    vec![
        FilterSpec::Lowpass { cutoff_hz: 40.0, order: 4 },
        FilterSpec::Highpass { cutoff_hz: 20.0, order: 4 },
        FilterSpec::Bandpass { low_hz: 20.0, high_hz: 150.0, order: 4 },
        FilterSpec::Notch { center_hz: 50.0, q: 30.0 },
    ]
}

#[test]
fn zero_phase_commutes_with_time_reversal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..2000).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let mut xr = x.clone();
    xr.reverse();
    for spec in all_kinds() {
        let sos = Sos::design(&spec, FS).unwrap();
        let mut y = sos.filtfilt(&x).unwrap();
        y.reverse();
        let yr = sos.filtfilt(&xr).unwrap();
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = y.iter().zip(&yr).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev <= 1e-9 * scale, "{spec:?}: {dev}");
    }
}

#[test]
fn lowpass_passes_dc() {
    let order = 4;
    let sos = Sos::design(&FilterSpec::Lowpass { cutoff_hz: 30.0, order }, FS).unwrap();
    let y = sos.filtfilt(&vec![7.25; 600]).unwrap();
    for v in &y[2 * order..y.len() - 2 * order] {
        assert!((v - 7.25).abs() <= 1e-6 * 7.25, "{v}");
    }
}

#[test]
fn bandpass_tone_attenuation() {
    let n = 5000;
    let x: Vec<f64> = tone(5.0, 1.0, n).iter().zip(tone(100.0, 1.0, n)).map(|(a, b)| a + b).collect();
    let sos = Sos::design(&FilterSpec::Bandpass { low_hz: 20.0, high_hz: 150.0, order: 4 }, FS).unwrap();
    let y = sos.filtfilt(&x).unwrap();
    // 4000 central samples hold whole cycles of both tones
    let mid = &y[500..4500];
    let low_db = 20.0 * amplitude_at(mid, 5.0).log10();
    let pass_db = 20.0 * amplitude_at(mid, 100.0).log10();
    assert!(low_db <= -20.0, "5 Hz at {low_db} dB");
    assert!(pass_db.abs() <= 1.0, "100 Hz at {pass_db} dB");
}

#[test]
fn notch_rejects_mains() {
    let sos = Sos::design(&FilterSpec::Notch { center_hz: 50.0, q: 30.0 }, FS).unwrap();
    let y = sos.filtfilt(&tone(50.0, 1.0, 6000)).unwrap();
    let db = 20.0 * amplitude_at(&y[1000..5000], 50.0).log10();
    assert!(db <= -30.0, "{db}");
}

#[test]
fn design_rejects_cutoff_at_nyquist() {
    assert!(matches!(
        Sos::design(&FilterSpec::Lowpass { cutoff_hz: 250.0, order: 4 }, FS),
        Err(PreprocessError::Design(_))
    ));
    let sos = Sos::design(&FilterSpec::Bandpass { low_hz: 20.0, high_hz: 150.0, order: 4 }, FS).unwrap();
    assert!(sos.filtfilt(&[0.0; 10]).is_err());
}

#[test]
fn segmentation_counts() {
    for (n, w, s) in [(4000, 125, 125), (4000, 250, 125), (4000, 375, 125), (100, 125, 125), (125, 125, 7)] {
        let expected = if n < w { 0 } else { (n - w) / s + 1 };
        assert_eq!(window_starts(n, w, s).unwrap().count(), expected);
    }
    assert!(matches!(window_starts(10, 5, 0), Err(PreprocessError::Argument(_))));
    assert_eq!(ms_to_samples(250.0, FS).unwrap(), 125);
    assert!(ms_to_samples(1.0, FS).is_err());
}

#[test]
fn baseline_correction() {
    let trial = vec![vec![12.5; 100], (0..100).map(|i| i as f64).collect()];
    let out = baseline_correct(&trial, 40).unwrap();
    assert!(out[0].iter().all(|&v| v == 0.0));
    let m: f64 = out[1][..40].iter().sum::<f64>() / 40.0;
    assert!(m.abs() < 1e-9);
    assert_eq!(baseline_correct(&out, 40).unwrap(), out);
    assert!(baseline_correct(&trial, 0).is_err());
}

#[test]
fn single_day_split_window_counts() {
    let cfg = SynthConfig::default();
    let rec = synth_session_with(&cfg, &paradigm_schedule(), SessionParams { subject_id: 1, day_id: 1, wearing_shift: 0 })
        .unwrap();
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let mut windows = Vec::new();
    for trial in extract_trials(&rec).trials.iter().filter(|t| ClassSet::Six.contains(t.trial_id)) {
        windows.extend(pre.trial_windows(&rec, trial, 125, 125).unwrap());
    }
    assert!(windows.iter().all(|w| w.len() == 125 && w.samples.len() == 8));
    let (train, test) = make_split(&windows, &SplitSpec::SingleDay { subject: 1, day: 1 }).unwrap();
    assert_eq!(train.len(), 8 * 6 * 32);
    assert_eq!(test.len(), 4 * 6 * 32);
    let last_train = train.iter().map(|w| w.meta.block).max().unwrap();
    let first_test = test.iter().map(|w| w.meta.block).min().unwrap();
    assert!(last_train < first_test);
}

fn meta_strategy() -> impl Strategy<Value = WindowMeta> {
    (1u8..=12, 1u8..=12, 1u32..=4, 1u32..=2, 0u64..10_000).prop_map(|(label, block, subject_id, day_id, t)| WindowMeta {
        label,
        block,
        speed_kmh: [0, 4, 6, 8][(block as usize - 1) % 4],
        subject_id,
        day_id,
        t_start_ms: t,
    })
}

fn spec_strategy() -> impl Strategy<Value = SplitSpec> {
    prop_oneof![
        (1u32..=4, 1u32..=2).prop_map(|(subject, day)| SplitSpec::SingleDay { subject, day }),
        (1u32..=4).prop_map(|subject| SplitSpec::CrossDay { subject, train_day: 1, test_day: 2 }),
        (1u32..=4, prop::option::of(1u32..=2)).prop_map(|(held_out, day)| SplitSpec::CrossSubject { held_out, day }),
    ]
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_sorted(data in prop::collection::vec(meta_strategy(), 1..200), spec in spec_strategy()) {
        match split_indices(&data, &spec) {
            Err(PreprocessError::EmptySplit { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
            Ok((train, test)) => {
                prop_assert!(train.iter().all(|i| !test.contains(i)));
                for side in [&train, &test] {
                    prop_assert!(side.windows(2).all(|w| data[w[0]].sort_key() <= data[w[1]].sort_key()));
                }
                match spec {
                    SplitSpec::SingleDay { .. } => {
                        let max_train = train.iter().map(|&i| data[i].block).max().unwrap();
                        let min_test = test.iter().map(|&i| data[i].block).min().unwrap();
                        prop_assert!(max_train < min_test);
                    }
                    SplitSpec::CrossSubject { held_out, .. } => {
                        prop_assert!(test.iter().all(|&i| data[i].subject_id == held_out));
                        prop_assert!(train.iter().all(|&i| data[i].subject_id != held_out));
                    }
                    SplitSpec::CrossDay { .. } => {
                        prop_assert!(train.iter().all(|&i| data[i].day_id == 1));
                        prop_assert!(test.iter().all(|&i| data[i].day_id == 2));
                    }
                }
            }
        }
    }

    #[test]
    fn segmentation_is_translation_consistent(n in 0usize..600, w in 1usize..80, s in 1usize..60) {
        let x = vec![(0..n).map(|i| i as f64).collect::<Vec<f64>>()];
        let all = segment_windows(&x, w, s).unwrap();
        let shifted = segment_windows(&[x[0][s.min(n)..].to_vec()], w, s).unwrap();
        let rest: Vec<_> = all.iter().skip(1).cloned().collect();
        prop_assert_eq!(rest, shifted);
    }
}
