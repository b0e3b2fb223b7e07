//! Signal-quality metrics: SNR, signal-to-motion-artifact ratio and the
//! spectral deformation Ω, plus per-mode reports.
//!
//! ```text
//! SNR = 20 log10(rms_active / rms_rest)
//! SMR = 10 log10(sum PSD_filtered / sum_{f <= 20 Hz} AboveLine(PSD_raw))
//! Ω   = 10 log10(sqrt(M2 / M0) / (M1 / M0)),   M_i = sum PSD(f) f^i
//! ```
//!
//! AboveLine is the excess of the raw PSD over its own level at 20 Hz, held
//! constant across 0..20 Hz. Moments run up to Nyquist.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{psd, FeatureError, PsdEstimate};
use crate::preprocess::{PreprocessError, Preprocessor};
use crate::recording::{extract_trials, Recording};
use crate::stats::Summary;

/// Minimum samples for SMR and Ω.
pub const MIN_QUALITY_LEN: usize = 512;
pub const ARTIFACT_EDGE_HZ: f64 = 20.0;
/// Floor of the SMR denominator relative to the filtered power.
pub const SMR_EPS_REL: f64 = 1e-12;
/// SMR returned when no low-frequency excess exists.
pub const SMR_CLEAN_DB: f64 = 120.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("need at least {MIN_QUALITY_LEN} samples, got {0}")]
    TooShort(usize),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

fn pooled_rms(x: &[Vec<f64>]) -> f64 {
    let (sum, n) = x.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// RMS pooled over all channels of `active` against that of `rest`.
pub fn snr(active: &[Vec<f64>], rest: &[Vec<f64>]) -> Result<f64, QualityError> {
    if active.iter().all(Vec::is_empty) || rest.iter().all(Vec::is_empty) {
        return Err(QualityError::Shape("active and rest must be non-empty".into()));
    }
    let r = pooled_rms(rest);
    if r == 0.0 {
        return Err(QualityError::Degenerate("rest RMS is zero".into()));
    }
    Ok(20.0 * (pooled_rms(active) / r).log10())
}

fn summed_psd(x: &[Vec<f64>], fs: f64) -> Result<PsdEstimate, QualityError> {
    let mut total: Option<PsdEstimate> = None;
    for ch in x {
        if ch.len() < MIN_QUALITY_LEN {
            return Err(QualityError::TooShort(ch.len()));
        }
        let p = psd(ch, fs)?;
        match &mut total {
            None => total = Some(p),
            Some(t) => {
                if t.power.len() != p.power.len() {
                    return Err(QualityError::Shape("channels differ in length".into()));
                }
                t.power.iter_mut().zip(&p.power).for_each(|(a, b)| *a += b);
            }
        }
    }
    total.ok_or_else(|| QualityError::Shape("no channels".into()))
}

/// Low-frequency power of `p` above the constant line at its 20 Hz level.
pub fn above_line_power(p: &PsdEstimate) -> f64 {
    let line = p.power[p.bin_of(ARTIFACT_EDGE_HZ)];
    p.freqs_hz
        .iter()
        .zip(&p.power)
        .take_while(|(f, _)| **f <= ARTIFACT_EDGE_HZ)
        .map(|(_, v)| (v - line).max(0.0))
        .sum::<f64>()
        * p.df()
}

/// Channel-summed filtered power over channel-summed low-frequency excess of
/// the raw signal. Capped at [`SMR_CLEAN_DB`] when there is no excess.
pub fn smr(raw: &[Vec<f64>], filtered: &[Vec<f64>], fs: f64) -> Result<f64, QualityError> {
    if raw.len() != filtered.len() {
        return Err(QualityError::Shape(format!("{} raw vs {} filtered channels", raw.len(), filtered.len())));
    }
    let signal = summed_psd(filtered, fs)?.total_power();
    let artifact = above_line_power(&summed_psd(raw, fs)?);
    if signal <= 0.0 {
        return Err(QualityError::Degenerate("filtered signal has no power".into()));
    }
    let denom = artifact.max(SMR_EPS_REL * signal);
    Ok(10.0 * (signal / denom).log10())
}

pub fn is_clean(smr_db: f64) -> bool {
    smr_db >= SMR_CLEAN_DB - 1e-9
}

/// Ω of a precomputed spectrum.
pub fn omega_of(p: &PsdEstimate) -> Result<f64, QualityError> {
    let m0 = p.moment(0);
    let m1 = p.moment(1);
    if !(m0 > 0.0) || !(m1 > 0.0) {
        return Err(QualityError::Degenerate("spectrum has no power above DC".into()));
    }
    let m2 = p.moment(2);
    Ok(10.0 * ((m2 / m0).sqrt() / (m1 / m0)).log10())
}

pub fn omega(x: &[f64], fs: f64) -> Result<f64, QualityError> {
    if x.len() < MIN_QUALITY_LEN {
        return Err(QualityError::TooShort(x.len()));
    }
    omega_of(&psd(x, fs)?)
}

/// One row of the per-mode quality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mode_id: u8,
    pub snr_db: Summary,
    pub smr_db: Summary,
    pub omega_db: Summary,
}

/// Per-trial measurements of one subject.
#[derive(Debug, Clone, Default)]
struct SubjectAccum {
    active: BTreeMap<u8, Vec<Vec<f64>>>,
    smr: BTreeMap<u8, Vec<f64>>,
    omega: BTreeMap<u8, Vec<f64>>,
}

/// Builds the per-mode table over all recordings, one value per subject.
/// SNR compares each mode's filtered active signal with that of mode 1.
pub fn quality_report(recordings: &[Recording], pre: &Preprocessor) -> Result<Vec<QualityReport>, QualityError> {
    let fs = pre.config.fs;
    let mut subjects: BTreeMap<u32, SubjectAccum> = BTreeMap::new();
    for rec in recordings {
        let acc = subjects.entry(rec.meta.subject_id).or_default();
        for trial in extract_trials(rec).trials {
            let raw = rec.emg(trial.active.clone());
            let filtered = pre.trial_active(rec, &trial)?;
            acc.smr.entry(trial.trial_id).or_default().push(smr(&raw, &filtered, fs)?);
            let om: Vec<f64> = filtered.iter().map(|ch| omega(ch, fs)).collect::<Result<_, _>>()?;
            acc.omega.entry(trial.trial_id).or_default().push(crate::stats::mean(&om));
            let pooled = acc.active.entry(trial.trial_id).or_insert_with(|| vec![Vec::new(); filtered.len()]);
            for (dst, src) in pooled.iter_mut().zip(filtered) {
                dst.extend(src);
            }
        }
    }
    let modes: Vec<u8> = subjects.values().flat_map(|s| s.active.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut out = Vec::new();
    for mode in modes {
        let (mut snrs, mut smrs, mut omegas) = (Vec::new(), Vec::new(), Vec::new());
        for acc in subjects.values() {
            let (Some(active), Some(rest)) = (acc.active.get(&mode), acc.active.get(&1)) else {
                continue;
            };
            snrs.push(snr(active, rest)?);
            smrs.push(crate::stats::mean(&acc.smr[&mode]));
            omegas.push(crate::stats::mean(&acc.omega[&mode]));
        }
        out.push(QualityReport {
            mode_id: mode,
            snr_db: Summary::of(snrs),
            smr_db: Summary::of(smrs),
            omega_db: Summary::of(omegas),
        });
    }
    Ok(out)
}

/// `mode,SNR,SMR,Omega` with `mean (std)` cells.
pub fn report_csv(reports: &[QualityReport]) -> String {
    let mut out = String::from("mode,SNR,SMR,Omega\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.mode_id,
            r.snr_db.paper_format(1),
            r.smr_db.paper_format(1),
            r.omega_db.paper_format(2)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_ratio_ten() {
        let rest = vec![vec![1.0, -2.0, 0.5]; 8];
        let active: Vec<Vec<f64>> = rest.iter().map(|c| c.iter().map(|v| 10.0 * v).collect()).collect();
        assert!((snr(&active, &rest).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr(&rest, &rest).unwrap(), 0.0);
        assert!(matches!(snr(&rest, &[vec![0.0; 3]]), Err(QualityError::Degenerate(_))));
    }

    #[test]
    fn short_and_zero_inputs() {
        assert_eq!(omega(&[1.0; 100], 500.0), Err(QualityError::TooShort(100)));
        assert!(matches!(omega(&[0.0; 512], 500.0), Err(QualityError::Degenerate(_))));
    }

    #[test]
    fn clean_raw_hits_cap() {
        let x: Vec<f64> = (0..1024).map(|i| (2.0 * std::f64::consts::PI * 80.0 * i as f64 / 500.0).sin()).collect();
        let v = smr(&[x.clone()], &[x], 500.0).unwrap();
        assert!(is_clean(v), "{v}");
    }
}
