use crc::{Crc, CRC_16_IBM_3740};
use myoband::protocol::*;
use proptest::prelude::*;

// CRC-16/CCITT-FALSE is catalogued as CRC-16/IBM-3740.
const REFERENCE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

fn frame_strategy() -> impl Strategy<Value = Frame> {
    (
        any::<u8>(),
        prop::array::uniform8(EMG_COUNT_MIN..=EMG_COUNT_MAX),
        prop::array::uniform3(any::<i16>()),
    )
        .prop_map(|(seq, emg_counts, accel_counts)| Frame { seq, emg_counts, accel_counts })
}

fn stream_of(frames: &[Frame]) -> Vec<u8> {
    frames.iter().flat_map(|f| f.encode().unwrap()).collect()
}

#[test]
fn zero_frame_matches_reference_crc() {
    let bytes = Frame::default().encode().unwrap();
    assert_eq!(&bytes[..3], &[0xAA, 0x55, 0x00]);
    assert!(bytes[3..33].iter().all(|&b| b == 0));
    let crc = REFERENCE.checksum(&[0u8; 31]);
    assert_eq!(u16::from_be_bytes([bytes[33], bytes[34]]), crc);
    assert_eq!(crc16_ccitt_false(b"123456789"), REFERENCE.checksum(b"123456789"));
}

#[test]
fn minus_one_encodes_as_ones() {
    let mut f = Frame { seq: 1, ..Frame::default() };
    f.emg_counts[0] = -1;
    let bytes = f.encode().unwrap();
    assert_eq!(&bytes[3..6], &[0xFF, 0xFF, 0xFF]);
    assert!(bytes[6..33].iter().all(|&b| b == 0));
}

#[test]
fn field_corners_round_trip() {
    for emg in [EMG_COUNT_MIN, -1, 0, 1, EMG_COUNT_MAX] {
        for acc in [i16::MIN, -1, 0, 1, i16::MAX] {
            for seq in [0u8, 127, 255] {
                let f = Frame { seq, emg_counts: [emg; 8], accel_counts: [acc; 3] };
                assert_eq!(Frame::decode(&f.encode().unwrap()), Some(f));
            }
        }
    }
}

#[test]
fn out_of_range_count_is_rejected() {
    let mut f = Frame::default();
    f.emg_counts[7] = EMG_COUNT_MAX + 1;
    assert!(matches!(f.encode(), Err(ProtocolError::EmgOutOfRange { channel: 7, .. })));
}

#[test]
fn scale_constants() {
    let mut f = Frame::default();
    f.emg_counts[0] = EMG_COUNT_MAX;
    f.accel_counts[2] = 4096;
    let p = counts_to_physical(&f);
    assert!((p.emg_uv[0] - 187_500.0).abs() < 1e-6);
    assert_eq!(p.accel_g[2], 1.0);
    assert_eq!(counts_to_physical(&Frame::default()), PhysicalSample::default());
}

#[test]
fn two_frames_over_three_chunks() {
    let frames = [Frame { seq: 3, ..Frame::default() }, Frame { seq: 4, emg_counts: [9; 8], ..Frame::default() }];
    let bytes = stream_of(&frames);
    let mut dec = FrameDecoder::new();
    let mut got = dec.push(&bytes[..10]);
    got.extend(dec.push(&bytes[10..50]));
    got.extend(dec.push(&bytes[50..]));
    assert_eq!(got, frames);
    assert_eq!(dec.stats().frames_ok, 2);
    assert_eq!(dec.pending(), 0);
}

#[test]
fn seq_gap_counts_missing_frames() {
    let frames = [Frame { seq: 5, ..Frame::default() }, Frame { seq: 8, ..Frame::default() }];
    let mut dec = FrameDecoder::new();
    dec.push(&stream_of(&frames));
    assert_eq!(dec.stats().frames_dropped, 2);

    let wrap = [Frame { seq: 254, ..Frame::default() }, Frame { seq: 1, ..Frame::default() }];
    let mut dec = FrameDecoder::new();
    dec.push(&stream_of(&wrap));
    assert_eq!(dec.stats().frames_dropped, 2);
}

proptest! {
    #[test]
    fn codec_round_trip(f in frame_strategy()) {
        let bytes = f.encode().unwrap();
        prop_assert_eq!(REFERENCE.checksum(&bytes[2..33]), u16::from_be_bytes([bytes[33], bytes[34]]));
        prop_assert_eq!(Frame::decode(&bytes), Some(f));
    }

    #[test]
    fn chunking_does_not_matter(
        frames in prop::collection::vec(frame_strategy(), 1..12),
        noise in prop::collection::vec(any::<u8>(), 0..40),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..8),
    ) {
        let mut bytes = noise;
        bytes.extend(stream_of(&frames));
        let mut whole = FrameDecoder::new();
        let expected = whole.push(&bytes);

        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(bytes.len() + 1)).collect();
        points.push(0);
        points.push(bytes.len());
        points.sort_unstable();
        let mut parts = FrameDecoder::new();
        let mut got = Vec::new();
        for w in points.windows(2) {
            got.extend(parts.push(&bytes[w[0]..w[1]]));
        }
        prop_assert_eq!(&got, &expected);
        prop_assert_eq!(parts.stats(), whole.stats());
        // frames after random leading bytes still all arrive
        prop_assert!(expected.ends_with(&frames));
    }

    #[test]
    fn single_bit_flip_never_decodes(f in frame_strategy(), bit in 16usize..(FRAME_LEN * 8)) {
        let mut bytes = f.encode().unwrap();
        bytes[bit / 8] ^= 1 << (bit % 8);
        let mut dec = FrameDecoder::new();
        let got = dec.push(&bytes);
        prop_assert!(got.is_empty());
        prop_assert!(dec.stats().resyncs >= 1);
    }
}
