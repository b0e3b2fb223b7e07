use myoband::protocol::{ACCEL_AXES, EMG_CHANNELS};

use crate::messages::Message;

/// Averages consecutive groups of `factor` raw samples into display samples.
/// Trigger, block and speed are taken from the group's last sample.
#[derive(Debug, Clone)]
pub struct Decimator {
    factor: usize,
    n: usize,
    first: u64,
    emg: [f64; EMG_CHANNELS],
    accel: [f64; ACCEL_AXES],
}

impl Decimator {
    pub fn new(factor: usize) -> Self {
        Self { factor: factor.max(1), n: 0, first: 0, emg: [0.0; EMG_CHANNELS], accel: [0.0; ACCEL_AXES] }
    }

    pub fn push(
        &mut self,
        sample: u64,
        emg_uv: &[f64; EMG_CHANNELS],
        accel_g: &[f64; ACCEL_AXES],
        trigger: u8,
        block: u8,
        speed_kmh: u8,
    ) -> Option<Message> {
        if self.n == 0 {
            self.first = sample;
        }
        self.emg.iter_mut().zip(emg_uv).for_each(|(a, v)| *a += v);
        self.accel.iter_mut().zip(accel_g).for_each(|(a, v)| *a += v);
        self.n += 1;
        if self.n < self.factor {
            return None;
        }
        let k = self.n as f64;
        let msg = Message::Signal {
            sample: self.first,
            emg_uv: self.emg.map(|v| v / k),
            accel_g: self.accel.map(|v| v / k),
            trigger,
            block,
            speed_kmh,
            dropped: 0,
        };
        self.n = 0;
        self.emg = [0.0; EMG_CHANNELS];
        self.accel = [0.0; ACCEL_AXES];
        Some(msg)
    }
}
