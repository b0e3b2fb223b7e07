//! IIR design (Butterworth via bilinear transform, biquad notch) and
//! zero-phase application.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::PreprocessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    Lowpass { cutoff_hz: f64, order: usize },
    Highpass { cutoff_hz: f64, order: usize },
    Bandpass { low_hz: f64, high_hz: f64, order: usize },
    Notch { center_hz: f64, q: f64 },
}

/// Second-order section in transposed direct form II, `a0 == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[1] + self.a[2])
    }

    /// State for a unit-amplitude constant input already at steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[2] * g]
    }

    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[1] * z1 + self.a[2] * z2)
    }

    fn is_stable(&self) -> bool {
        // Jury conditions for z^2 + a1 z + a2, with a small margin.
        const MARGIN: f64 = 1e-9;
        let (a1, a2) = (self.a[1], self.a[2]);
        a2.abs() < 1.0 - MARGIN && a1.abs() < 1.0 + a2 - MARGIN
    }
}

/// A cascade of biquads.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn design(spec: &FilterSpec, fs: f64) -> Result<Sos, PreprocessError> {
        let nyq = fs / 2.0;
        let check = |f: f64| {
            if f > 0.0 && f < nyq && f.is_finite() {
                Ok(())
            } else {
                Err(PreprocessError::Design(format!("cutoff {f} Hz outside (0, {nyq}) Hz")))
            }
        };
        let sos = match *spec {
            FilterSpec::Lowpass { cutoff_hz, order } => {
                check(cutoff_hz)?;
                butterworth(Band::Low(cutoff_hz), order, fs)?
            }
            FilterSpec::Highpass { cutoff_hz, order } => {
                check(cutoff_hz)?;
                butterworth(Band::High(cutoff_hz), order, fs)?
            }
            FilterSpec::Bandpass { low_hz, high_hz, order } => {
                check(low_hz)?;
                check(high_hz)?;
                if low_hz >= high_hz {
                    return Err(PreprocessError::Design(format!(
                        "band edges must satisfy low < high, got {low_hz}..{high_hz} Hz"
                    )));
                }
                butterworth(Band::Pass(low_hz, high_hz), order, fs)?
            }
            FilterSpec::Notch { center_hz, q } => {
                check(center_hz)?;
                if !(q > 0.0) {
                    return Err(PreprocessError::Design(format!("notch Q must be positive, got {q}")));
                }
                notch(center_hz, q, fs)
            }
        };
        if let Some(bad) = sos.sections.iter().find(|s| !s.is_stable() || s.b.iter().any(|c| !c.is_finite())) {
            return Err(PreprocessError::Design(format!("unstable section {bad:?} for {spec:?}")));
        }
        Ok(sos)
    }

    pub fn chain(mut self, other: Sos) -> Sos {
        self.sections.extend(other.sections);
        self
    }

    /// Number of poles of the cascade.
    pub fn order(&self) -> usize {
        self.sections.iter().map(|s| if s.a[2] == 0.0 { 1 } else { 2 }).sum()
    }

    /// Complex frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / fs;
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// Causal filtering with zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut state = vec![[0.0; 2]; self.sections.len()];
        self.run(&mut y, &mut state);
        y
    }

    /// Causal filtering starting from the steady state for a constant input
    /// equal to `x[0]`.
    pub fn filter_steady(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if let Some(&x0) = x.first() {
            let mut state = self.steady_state(x0);
            self.run(&mut y, &mut state);
        }
        y
    }

    fn steady_state(&self, x0: f64) -> Vec<[f64; 2]> {
        let mut scale = x0;
        self.sections
            .iter()
            .map(|s| {
                let z = s.step_state();
                let out = [z[0] * scale, z[1] * scale];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    fn run(&self, y: &mut [f64], state: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let (mut z1, mut z2) = (z[0], z[1]);
            for v in y.iter_mut() {
                let x = *v;
                let out = b0 * x + z1;
                z1 = b1 * x - a1 * out + z2;
                z2 = b2 * x - a2 * out;
                *v = out;
            }
            *z = [z1, z2];
        }
    }

    /// Edge padding used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.order()
    }

    /// Zero-phase filtering.
    ///
    /// The input is extended at both ends by odd reflection, run forward and
    /// backward with steady-state initial conditions, and the result is
    /// averaged with the backward-forward pass so that filtering commutes
    /// exactly with time reversal.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        let n = x.len();
        let pad = self.pad_len();
        if n <= pad {
            return Err(PreprocessError::Argument(format!(
                "signal of {n} samples too short for zero-phase filtering with {pad} samples of padding"
            )));
        }
        if self.sections.is_empty() {
            return Ok(x.to_vec());
        }
        let mut ext = odd_extend(x, pad);
        let forward = self.forward_backward(&ext);
        ext.reverse();
        let mut backward = self.forward_backward(&ext);
        backward.reverse();
        Ok(forward[pad..pad + n]
            .iter()
            .zip(&backward[pad..pad + n])
            .map(|(a, b)| 0.5 * (a + b))
            .collect())
    }

    fn forward_backward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.filter_steady(x);
        y.reverse();
        let mut y = self.filter_steady(&y);
        y.reverse();
        y
    }
}

/// Sample-at-a-time causal filter with persistent state.
#[derive(Debug, Clone)]
pub struct StreamingSos {
    sos: Sos,
    state: Vec<[f64; 2]>,
}

impl StreamingSos {
    pub fn new(sos: Sos) -> Self {
        let state = vec![[0.0; 2]; sos.sections.len()];
        Self { sos, state }
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let mut v = x;
        for (s, z) in self.sos.sections.iter().zip(self.state.iter_mut()) {
            let out = s.b[0] * v + z[0];
            z[0] = s.b[1] * v - s.a[1] * out + z[1];
            z[1] = s.b[2] * v - s.a[2] * out;
            v = out;
        }
        v
    }

    /// Output variance for unit-variance white input (sum of squared impulse
    /// response, truncated once the tail is negligible).
    pub fn white_noise_gain(sos: &Sos) -> f64 {
        let mut f = StreamingSos::new(sos.clone());
        let mut energy = f.process(1.0).powi(2);
        let mut quiet = 0;
        for _ in 0..1_000_000 {
            let e = f.process(0.0).powi(2);
            energy += e;
            quiet = if e < 1e-20 * energy { quiet + 1 } else { 0 };
            if quiet > 64 {
                break;
            }
        }
        energy
    }
}

fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let (first, last) = (x[0], x[n - 1]);
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
    out
}

enum Band {
    Low(f64),
    High(f64),
    Pass(f64, f64),
}

fn butterworth(band: Band, order: usize, fs: f64) -> Result<Sos, PreprocessError> {
    if order == 0 {
        return Err(PreprocessError::Design("filter order must be at least 1".into()));
    }
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (PI * f / fs).tan();
    let proto: Vec<Complex64> = (0..order)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64))
        .collect();

    // Analog poles, digital zeros, and the frequency (rad/sample) where the
    // passband gain is pinned to 1.
    let (poles, zeros, w_ref): (Vec<Complex64>, Vec<f64>, f64) = match band {
        Band::Low(fc) => {
            let wc = warp(fc);
            (proto.iter().map(|p| p * wc).collect(), vec![-1.0; order], 0.0)
        }
        Band::High(fc) => {
            let wc = warp(fc);
            (proto.iter().map(|p| wc / p).collect(), vec![1.0; order], PI)
        }
        Band::Pass(lo, hi) => {
            let (w1, w2) = (warp(lo), warp(hi));
            let bw = w2 - w1;
            let w0 = (w1 * w2).sqrt();
            let mut poles = Vec::with_capacity(2 * order);
            for p in &proto {
                let half = p * (bw / 2.0);
                let root = (half * half - w0 * w0).sqrt();
                poles.push(half + root);
                poles.push(half - root);
            }
            let zeros = (0..2 * order).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            (poles, zeros, 2.0 * (w0 / fs2).atan())
        }
    };

    let zpoles: Vec<Complex64> = poles.iter().map(|s| (fs2 + s) / (fs2 - s)).collect();
    let mut sections = pair_sections(&zpoles, &zeros);
    let gain: f64 = sections.iter().map(|s| s.response(w_ref)).product::<Complex64>().norm();
    if !(gain.is_finite() && gain > 0.0) {
        return Err(PreprocessError::Design("degenerate passband gain".into()));
    }
    for c in sections[0].b.iter_mut() {
        *c /= gain;
    }
    Ok(Sos { sections })
}

fn pair_sections(poles: &[Complex64], zeros: &[f64]) -> Vec<Biquad> {
    const IM_EPS: f64 = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().filter(|p| p.im > IM_EPS).copied().collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= IM_EPS).map(|p| p.re).collect();
    // poles closest to the unit circle last, as is customary for SOS ordering
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

    let mut denominators: Vec<[f64; 3]> = complex.iter().map(|p| [1.0, -2.0 * p.re, p.norm_sqr()]).collect();
    for pair in real.chunks(2) {
        denominators.push(match *pair {
            [p, q] => [1.0, -(p + q), p * q],
            [p] => [1.0, -p, 0.0],
            _ => unreachable!(),
        });
    }

    let mut zi = zeros.iter();
    denominators
        .into_iter()
        .map(|a| {
            let degree = if a[2] == 0.0 { 1 } else { 2 };
            let b = match (degree, zi.next(), if degree == 2 { zi.next() } else { None }) {
                (_, Some(&z1), Some(&z2)) => [1.0, -(z1 + z2), z1 * z2],
                (_, Some(&z1), None) => [1.0, -z1, 0.0],
                _ => [1.0, 0.0, 0.0],
            };
            Biquad { b, a }
        })
        .collect()
}

/// Second-order IIR notch with -3 dB bandwidth `center / q`.
fn notch(center_hz: f64, q: f64, fs: f64) -> Sos {
    let w0 = 2.0 * PI * center_hz / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Sos {
        sections: vec![Biquad {
            b: [gain, -2.0 * gain * c, gain],
            a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
        }],
    }
}
