//! Wire framing for the wristband byte stream.
//!
//! Every sample travels as a fixed 35-byte frame:
//!
//! ```text
//! offset  size  field
//!      0     2  sync word 0xAA 0x55
//!      2     1  seq (wrapping u8)
//!      3    24  8 x EMG counts, 24-bit big-endian two's complement
//!     27     6  3 x accel counts (x, y, z), 16-bit big-endian
//!     33     2  CRC-16/CCITT-FALSE over bytes 2..33, big-endian
//! ```
//!
//! [`FrameDecoder`] reassembles frames from arbitrarily chunked input. It never
//! fails: corrupt bytes are skipped and counted.

use thiserror::Error;

pub const SYNC: [u8; 2] = [0xAA, 0x55];
pub const FRAME_LEN: usize = 35;
pub const EMG_CHANNELS: usize = 8;
pub const ACCEL_AXES: usize = 3;
/// Nominal device sample rate, frames per second.
pub const SAMPLE_RATE_HZ: f64 = 500.0;

pub const EMG_COUNT_MIN: i32 = -(1 << 23);
pub const EMG_COUNT_MAX: i32 = (1 << 23) - 1;

/// Microvolts per EMG count: Vref 4.5 V, PGA gain 24, 24-bit bipolar.
pub const EMG_UV_PER_COUNT: f64 = 4.5e6 / (24.0 * 8_388_607.0);
/// Counts per g on each accelerometer axis.
pub const ACCEL_COUNTS_PER_G: f64 = 4096.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("emg channel {channel}: count {value} outside 24-bit range")]
    EmgOutOfRange { channel: usize, value: i32 },
}

/// One device sample. The CRC is not stored; it is a property of the wire
/// encoding and is recomputed by [`Frame::crc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Frame {
    pub seq: u8,
    pub emg_counts: [i32; EMG_CHANNELS],
    pub accel_counts: [i16; ACCEL_AXES],
}

/// Table-driven CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection).
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    const TABLE: [u16; 256] = build_crc_table();
    data.iter().fold(0xFFFF_u16, |crc, &b| {
        (crc << 8) ^ TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

impl Frame {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        for (channel, &value) in self.emg_counts.iter().enumerate() {
            if !(EMG_COUNT_MIN..=EMG_COUNT_MAX).contains(&value) {
                return Err(ProtocolError::EmgOutOfRange { channel, value });
            }
        }
        Ok(())
    }

    /// Seq byte followed by the 30 payload bytes (the CRC-covered region).
    fn body(&self) -> [u8; FRAME_LEN - 4] {
        let mut body = [0u8; FRAME_LEN - 4];
        body[0] = self.seq;
        for (i, &c) in self.emg_counts.iter().enumerate() {
            let b = c.to_be_bytes();
            body[1 + 3 * i..4 + 3 * i].copy_from_slice(&b[1..4]);
        }
        for (i, &a) in self.accel_counts.iter().enumerate() {
            body[25 + 2 * i..27 + 2 * i].copy_from_slice(&a.to_be_bytes());
        }
        body
    }

    pub fn crc(&self) -> u16 {
        crc16_ccitt_false(&self.body())
    }

    pub fn encode(&self) -> Result<[u8; FRAME_LEN], ProtocolError> {
        self.validate()?;
        let body = self.body();
        let mut out = [0u8; FRAME_LEN];
        out[..2].copy_from_slice(&SYNC);
        out[2..33].copy_from_slice(&body);
        out[33..].copy_from_slice(&crc16_ccitt_false(&body).to_be_bytes());
        Ok(out)
    }

    /// Parses one frame whose sync word starts at `bytes[0]`. Returns `None` on
    /// a bad sync or CRC mismatch.
    pub fn decode(bytes: &[u8; FRAME_LEN]) -> Option<Frame> {
        if bytes[..2] != SYNC {
            return None;
        }
        let body = &bytes[2..33];
        let wire_crc = u16::from_be_bytes([bytes[33], bytes[34]]);
        if crc16_ccitt_false(body) != wire_crc {
            return None;
        }
        let mut frame = Frame { seq: body[0], ..Frame::default() };
        for i in 0..EMG_CHANNELS {
            let b = &body[1 + 3 * i..4 + 3 * i];
            // sign-extend via the top byte of an i32
            frame.emg_counts[i] = i32::from_be_bytes([b[0], b[1], b[2], 0]) >> 8;
        }
        for i in 0..ACCEL_AXES {
            frame.accel_counts[i] = i16::from_be_bytes([body[25 + 2 * i], body[26 + 2 * i]]);
        }
        Some(frame)
    }

    pub fn to_physical(&self) -> PhysicalSample {
        counts_to_physical(self)
    }
}

/// A frame converted to engineering units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhysicalSample {
    pub emg_uv: [f64; EMG_CHANNELS],
    pub accel_g: [f64; ACCEL_AXES],
}

pub fn counts_to_physical(frame: &Frame) -> PhysicalSample {
    PhysicalSample {
        emg_uv: frame.emg_counts.map(|c| f64::from(c) * EMG_UV_PER_COUNT),
        accel_g: frame.accel_counts.map(|c| f64::from(c) / ACCEL_COUNTS_PER_G),
    }
}

/// Nearest EMG count for a microvolt value, saturating at the ADC rails.
pub fn emg_uv_to_counts(uv: f64) -> i32 {
    let c = (uv / EMG_UV_PER_COUNT).round();
    c.clamp(f64::from(EMG_COUNT_MIN), f64::from(EMG_COUNT_MAX)) as i32
}

pub fn accel_g_to_counts(g: f64) -> i16 {
    (g * ACCEL_COUNTS_PER_G).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}

/// Quantizes a physical sample onto the ADC grid, as the device would.
pub fn physical_to_frame(seq: u8, emg_uv: &[f64; EMG_CHANNELS], accel_g: &[f64; ACCEL_AXES]) -> Frame {
    Frame {
        seq,
        emg_counts: emg_uv.map(emg_uv_to_counts),
        accel_counts: accel_g.map(accel_g_to_counts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct DecodeStats {
    pub frames_ok: u64,
    pub frames_dropped: u64,
    pub resyncs: u64,
    /// Bytes discarded while hunting for a sync word.
    pub bytes_skipped: u64,
}

/// Streaming decoder state for one connection.
#[derive(Debug, Clone, Default)]
pub struct FrameDecoder {
    buffer: Vec<u8>,
    last_seq: Option<u8>,
    stats: DecodeStats,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }

    pub fn last_seq(&self) -> Option<u8> {
        self.last_seq
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Feeds a chunk and returns every complete, CRC-valid frame it finishes.
    pub fn push(&mut self, chunk: &[u8]) -> Vec<Frame> {
        self.buffer.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut pos = 0;
        let buf = &self.buffer;
        while pos < buf.len() {
            if buf[pos] != SYNC[0] {
                pos += 1;
                self.stats.bytes_skipped += 1;
                continue;
            }
            if pos + 1 >= buf.len() {
                break;
            }
            if buf[pos + 1] != SYNC[1] {
                pos += 1;
                self.stats.bytes_skipped += 1;
                continue;
            }
            if pos + FRAME_LEN > buf.len() {
                break;
            }
            let raw: &[u8; FRAME_LEN] = buf[pos..pos + FRAME_LEN].try_into().expect("slice length");
            match Frame::decode(raw) {
                Some(frame) => {
                    if let Some(prev) = self.last_seq {
                        let gap = frame.seq.wrapping_sub(prev).wrapping_sub(1);
                        self.stats.frames_dropped += u64::from(gap);
                    }
                    self.last_seq = Some(frame.seq);
                    self.stats.frames_ok += 1;
                    out.push(frame);
                    pos += FRAME_LEN;
                }
                None => {
                    self.stats.resyncs += 1;
                    pos += 1;
                }
            }
        }
        self.buffer.drain(..pos);
        out
    }
}
