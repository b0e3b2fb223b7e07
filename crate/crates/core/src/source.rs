//! Live frame sources consumed by the online decoder and the service.

use std::io::{ErrorKind, Read};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::protocol::{emg_uv_to_counts, accel_g_to_counts, DecodeStats, Frame, FrameDecoder, FRAME_LEN, EMG_CHANNELS, ACCEL_AXES};
use crate::recording::{Recording, COL_ACCEL, COL_EMG};
use crate::synth::ForceMode;

#[derive(Debug)]
pub enum Poll {
    Frames(Vec<Frame>),
    /// Nothing arrived within the timeout.
    Pending,
    Finished,
}

pub trait FrameSource {
    fn poll(&mut self, timeout: Duration) -> Poll;

    /// Tells whoever produces the signal that `mode` was cued when the
    /// consumer had seen `at_sample` samples. Sources without a subject
    /// ignore it.
    fn prompt(&mut self, _mode: ForceMode, _at_sample: u64) {}

    fn decode_stats(&self) -> DecodeStats {
        DecodeStats::default()
    }
}

/// Plays a stored recording back through the wire codec.
pub struct ReplaySource<'a> {
    rec: &'a Recording,
    next: usize,
    batch: usize,
    rate_multiplier: f64,
    started: Option<Instant>,
    decoder: FrameDecoder,
}

impl<'a> ReplaySource<'a> {
    /// `rate_multiplier = f64::INFINITY` replays as fast as possible.
    pub fn new(rec: &'a Recording, rate_multiplier: f64) -> Self {
        Self { rec, next: 0, batch: 50, rate_multiplier, started: None, decoder: FrameDecoder::new() }
    }

    pub fn position(&self) -> usize {
        self.next
    }
}

/// Re-quantizes one recording row. Exact for rows that hold ADC-quantized
/// values, including after a float32 round trip.
pub fn row_to_frame(rec: &Recording, row: usize, seq: u8) -> Frame {
    let r = rec.row(row);
    let mut emg_counts = [0i32; EMG_CHANNELS];
    for (c, v) in emg_counts.iter_mut().enumerate() {
        *v = emg_uv_to_counts(r[COL_EMG + c]);
    }
    let mut accel_counts = [0i16; ACCEL_AXES];
    for (a, v) in accel_counts.iter_mut().enumerate() {
        *v = accel_g_to_counts(r[COL_ACCEL + a]);
    }
    Frame { seq, emg_counts, accel_counts }
}

impl FrameSource for ReplaySource<'_> {
    fn poll(&mut self, _timeout: Duration) -> Poll {
        if self.next >= self.rec.rows() {
            return Poll::Finished;
        }
        let end = (self.next + self.batch).min(self.rec.rows());
        if self.rate_multiplier.is_finite() {
            let start = *self.started.get_or_insert_with(Instant::now);
            let due = end as f64 / (self.rec.meta.fs * self.rate_multiplier);
            let wait = due - start.elapsed().as_secs_f64();
            if wait > 0.0 {
                thread::sleep(Duration::from_secs_f64(wait));
            }
        }
        let mut bytes = Vec::with_capacity((end - self.next) * FRAME_LEN);
        for i in self.next..end {
            let frame = row_to_frame(self.rec, i, i as u8);
            bytes.extend_from_slice(&frame.encode().expect("recorded values are in ADC range"));
        }
        self.next = end;
        Poll::Frames(self.decoder.push(&bytes))
    }

    fn decode_stats(&self) -> DecodeStats {
        self.decoder.stats()
    }
}

/// Reads the wire format from a TCP peer.
pub struct TcpFrameSource {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl TcpFrameSource {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, decoder: FrameDecoder::new(), buf: vec![0; 64 * FRAME_LEN] })
    }
}

impl FrameSource for TcpFrameSource {
    fn poll(&mut self, timeout: Duration) -> Poll {
        if self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1)))).is_err() {
            return Poll::Finished;
        }
        match self.stream.read(&mut self.buf) {
            Ok(0) => Poll::Finished,
            Ok(n) => Poll::Frames(self.decoder.push(&self.buf[..n])),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                Poll::Pending
            }
            Err(_) => Poll::Finished,
        }
    }

    fn decode_stats(&self) -> DecodeStats {
        self.decoder.stats()
    }
}
