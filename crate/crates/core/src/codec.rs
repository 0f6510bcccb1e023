//! 40-bit event records as used by N-Caltech101-style `.bin` files.
//!
//! Each record is five bytes: `x`, `y`, then a big-endian 24-bit word whose
//! top bit is the polarity (1 = positive) and whose low 23 bits are the
//! timestamp in microseconds.

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity, TimeState};

pub const RECORD_LEN: usize = 5;
pub const MAX_TIMESTAMP_US: u32 = (1 << 23) - 1;

pub fn decode_stream(bytes: &[u8], width: u16, height: u16) -> Result<EventStream> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::TruncatedRecord(bytes.len()));
    }
    let mut events = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for rec in bytes.chunks_exact(RECORD_LEN) {
        let x = u16::from(rec[0]);
        let y = u16::from(rec[1]);
        if x >= width || y >= height {
            return Err(Error::CoordOutOfRange {
                x: x.into(),
                y: y.into(),
                width,
                height,
            });
        }
        let p = if rec[2] & 0x80 != 0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        let t = (u32::from(rec[2] & 0x7f) << 16) | (u32::from(rec[3]) << 8) | u32::from(rec[4]);
        events.push(Event::new(x, y, f64::from(t), p));
    }
    Ok(EventStream::new(width, height, events, TimeState::Raw))
}

pub fn encode_stream(stream: &EventStream) -> Result<Vec<u8>> {
    stream.require_raw()?;
    let mut out = Vec::with_capacity(stream.len() * RECORD_LEN);
    for e in &stream.events {
        if e.x > 0xff || e.y > 0xff || e.x >= stream.width || e.y >= stream.height {
            return Err(Error::CoordOutOfRange {
                x: e.x.into(),
                y: e.y.into(),
                width: stream.width,
                height: stream.height,
            });
        }
        if !(e.t >= 0.0 && e.t <= f64::from(MAX_TIMESTAMP_US) && e.t.fract() == 0.0) {
            return Err(Error::TimestampOverflow(e.t));
        }
        let t = e.t as u32;
        let pol = if e.p == Polarity::Positive { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((t >> 16) as u8 & 0x7f),
            (t >> 8) as u8,
            t as u8,
        ]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_reference_record() {
        let s = decode_stream(&[0x12, 0x34, 0x80, 0x00, 0x64], 64, 64).unwrap();
        assert_eq!(s.events, vec![Event::new(18, 52, 100.0, Polarity::Positive)]);
        assert_eq!(s.time_state, TimeState::Raw);
    }

    #[test]
    fn encodes_reference_record() {
        let s = EventStream::new(
            64,
            64,
            vec![Event::new(18, 52, 100.0, Polarity::Positive)],
            TimeState::Raw,
        );
        assert_eq!(encode_stream(&s).unwrap(), vec![0x12, 0x34, 0x80, 0x00, 0x64]);
    }

    #[test]
    fn empty_round_trip() {
        let s = decode_stream(&[], 4, 4).unwrap();
        assert!(s.is_empty());
        assert!(encode_stream(&s).unwrap().is_empty());
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_stream(&[1, 2, 3], 4, 4), Err(Error::TruncatedRecord(3))));
        assert!(matches!(
            decode_stream(&[9, 0, 0, 0, 1], 4, 4),
            Err(Error::CoordOutOfRange { x: 9, .. })
        ));
    }

    #[test]
    fn encode_errors() {
        let big = EventStream::new(
            4,
            4,
            vec![Event::new(0, 0, f64::from(1u32 << 23), Polarity::Negative)],
            TimeState::Raw,
        );
        assert!(matches!(encode_stream(&big), Err(Error::TimestampOverflow(_))));
        let norm = EventStream::new(
            4,
            4,
            vec![Event::new(0, 0, 0.5, Polarity::Negative)],
            TimeState::Normalized { scale: 2.0 },
        );
        assert!(matches!(encode_stream(&norm), Err(Error::TimeState { .. })));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(records in prop::collection::vec(
            (0u8..=255, 0u8..=255, any::<bool>(), 0u32..=MAX_TIMESTAMP_US), 0..200)
        ) {
            let mut bytes = Vec::new();
            for (x, y, pos, t) in &records {
                bytes.extend_from_slice(&[*x, *y, (u8::from(*pos) << 7) | (t >> 16) as u8, (t >> 8) as u8, *t as u8]);
            }
            let stream = decode_stream(&bytes, 256, 256).unwrap();
            let again = decode_stream(&encode_stream(&stream).unwrap(), 256, 256).unwrap();
            prop_assert_eq!(&again, &stream);
            // Decoding sorts, so compare as multisets of records.
            let mut a: Vec<_> = bytes.chunks(5).map(|c| c.to_vec()).collect();
            let mut b: Vec<_> = encode_stream(&stream).unwrap().chunks(5).map(|c| c.to_vec()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
