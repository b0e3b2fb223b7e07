use std::f64::consts::PI;

use myoband::features::psd;
use myoband::preprocess::{PreprocessConfig, Preprocessor};
use myoband::quality::*;
use myoband::recording::{paradigm_schedule, Schedule};
use myoband::stats;
use myoband::synth::{synth_session_with, synth_trial, ForceMode, SessionParams, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FS: f64 = 500.0;

fn sine(f: f64, amp: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / FS).sin()).collect()
}

fn white(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn snr_is_additive_in_db() {
    let rest: Vec<Vec<f64>> = (0..8).map(|c| white(300, c)).collect();
    for k in [0.5, 2.0, 10.0, 31.6] {
        let active: Vec<Vec<f64>> = rest.iter().map(|ch| ch.iter().map(|v| k * v).collect()).collect();
        assert!((snr(&active, &rest).unwrap() - 20.0 * f64::log10(k)).abs() < 1e-9);
    }
}

#[test]
fn smr_of_equal_power_tone_is_zero_db() {
    let n = 2000;
    let filtered: Vec<Vec<f64>> = (0..8).map(|c| sine(80.0 + 5.0 * c as f64, 2.0 + c as f64, n)).collect();
    let raw: Vec<Vec<f64>> = filtered
        .iter()
        .map(|ch| {
            // tone amplitude set from the measured power of this channel
            let p = psd(ch, FS).unwrap().total_power();
            let drift = sine(5.0, (2.0 * p).sqrt(), n);
            ch.iter().zip(drift).map(|(a, b)| a + b).collect()
        })
        .collect();
    let v = smr(&raw, &filtered, FS).unwrap();
    assert!(v.abs() <= 0.5, "{v}");
}

#[test]
fn clean_raw_is_capped() {
    let x = vec![sine(100.0, 1.0, 1024)];
    let v = smr(&x, &x, FS).unwrap();
    assert!((v - 120.0).abs() < 1e-9);
    assert!(is_clean(v));
    assert!(matches!(smr(&[vec![0.0; 100]], &[vec![0.0; 100]], FS), Err(QualityError::TooShort(100))));
}

#[test]
fn omega_of_tone_is_zero() {
    for f0 in [30.0, 77.0, 100.0, 180.0] {
        let w = omega(&sine(f0, 1.0, 2000), FS).unwrap();
        assert!(w.abs() <= 0.1, "{f0}: {w}");
    }
}

#[test]
fn omega_of_flat_spectrum() {
    // continuous limit: sqrt(F^2/3) / (F/2) = 2/sqrt(3)
    let expected = 10.0 * (2.0 / 3f64.sqrt()).log10();
    let vals: Vec<f64> = (0..20).map(|s| omega(&white(4096, s), FS).unwrap()).collect();
    let m = stats::mean(&vals);
    assert!((m - expected).abs() <= 0.1, "{m} vs {expected}");
}

#[test]
fn omega_rejects_silence() {
    assert!(matches!(omega(&[0.0; 600], FS), Err(QualityError::Degenerate(_))));
}

#[test]
fn synthetic_smr_falls_with_speed() {
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let mode = ForceMode::new(2).unwrap();
    let mean_smr: Vec<f64> = [0u8, 4, 6, 8]
        .iter()
        .map(|&speed| {
            let vals: Vec<f64> = (0..20)
                .map(|seed| {
                    let cfg = SynthConfig { seed, ..SynthConfig::default() };
                    let (raw, _) = synth_trial(&cfg, mode, speed, 4.0).unwrap();
                    smr(&raw, &pre.filter_channels(&raw).unwrap(), FS).unwrap()
                })
                .collect();
            stats::mean(&vals)
        })
        .collect();
    assert!(mean_smr.windows(2).all(|w| w[1] < w[0]), "{mean_smr:?}");
}

fn short_schedule() -> Schedule {
    let mut s = paradigm_schedule();
    s.blocks.truncate(2);
    s
}

#[test]
fn report_is_recomputable_per_subject() {
    let cfg = SynthConfig::default();
    let recs: Vec<_> = (1..=3)
        .map(|s| synth_session_with(&cfg, &short_schedule(), SessionParams { subject_id: s, day_id: 1, wearing_shift: 0 }).unwrap())
        .collect();
    let pre = Preprocessor::new(PreprocessConfig::default()).unwrap();
    let report = quality_report(&recs, &pre).unwrap();
    assert_eq!(report.len(), 12);
    for r in &report {
        for s in [&r.snr_db, &r.smr_db, &r.omega_db] {
            assert_eq!(s.values.len(), 3);
            assert!(s.values.iter().all(|v| v.is_finite()));
            assert!((s.mean - stats::mean(&s.values)).abs() < 1e-12);
            let m = stats::mean(&s.values);
            let var = s.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0;
            assert!((s.std - var.sqrt()).abs() < 1e-12);
        }
        assert!(r.omega_db.values.iter().all(|&v| v >= 0.0));
    }
    assert!(report[0].snr_db.values.iter().all(|v| v.abs() < 1e-12), "rest is its own reference");
    let csv = report_csv(&report);
    assert!(csv.starts_with("mode,SNR,SMR,Omega\n"));
    assert_eq!(csv.lines().count(), 13);
}

proptest! {
    #[test]
    fn omega_scale_invariant_and_nonnegative(seed in any::<u64>(), k in 1e-3f64..1e3) {
        let x = white(512, seed);
        let y: Vec<f64> = x.iter().map(|v| k * v).collect();
        let a = omega(&x, FS).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - omega(&y, FS).unwrap()).abs() <= 1e-9);
    }
}
