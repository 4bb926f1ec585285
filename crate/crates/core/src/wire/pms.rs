//! PMS-family 32-byte binary frame codec.
//!
//! ```text
//! Offset  Size  Field
//!  0       2    start marker 0x42 0x4D
//!  2       2    frame length (big-endian, always 28)
//!  4       6    PM1.0 / PM2.5 / PM10 mass, CF=1 ("standard")
//! 10       6    PM1.0 / PM2.5 / PM10 mass, atmospheric
//! 16      12    particle counts per 0.1 L: >0.3 >0.5 >1.0 >2.5 >5.0 >10 um
//! 28       2    version / error status
//! 30       2    checksum: 16-bit sum of bytes 0..30
//! ```
//!
//! All data words are big-endian `u16`.

use serde::{Deserialize, Serialize};

use super::{FrameError, FrameErrorKind};

pub const FRAME_LEN: usize = 32;
pub const START_BYTES: [u8; 2] = [0x42, 0x4D];
pub const LENGTH_WORD: u16 = 28;

/// One decoded sensor report. Masses in ug/m3, counts per 0.1 L of air.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensorFrame {
    pub pm1_std: u16,
    pub pm25_std: u16,
    pub pm10_std: u16,
    pub pm1_atm: u16,
    pub pm25_atm: u16,
    pub pm10_atm: u16,
    /// Cumulative exceedance counts for diameters >0.3, >0.5, >1.0, >2.5, >5.0, >10 um.
    pub counts: [u16; 6],
    pub status: u16,
}

/// Ordering anomalies found in a decoded frame. Flagged, never rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameQuality {
    pub std_mass_disordered: bool,
    pub atm_mass_disordered: bool,
    pub counts_disordered: bool,
}

impl FrameQuality {
    pub fn is_clean(&self) -> bool {
        !(self.std_mass_disordered || self.atm_mass_disordered || self.counts_disordered)
    }
}

impl SensorFrame {
    pub fn quality(&self) -> FrameQuality {
        let ordered = |a: u16, b: u16, c: u16| a <= b && b <= c;
        FrameQuality {
            std_mass_disordered: !ordered(self.pm1_std, self.pm25_std, self.pm10_std),
            atm_mass_disordered: !ordered(self.pm1_atm, self.pm25_atm, self.pm10_atm),
            counts_disordered: self.counts.windows(2).any(|w| w[0] < w[1]),
        }
    }

    fn words(&self) -> [u16; 13] {
        let c = self.counts;
        [
            self.pm1_std,
            self.pm25_std,
            self.pm10_std,
            self.pm1_atm,
            self.pm25_atm,
            self.pm10_atm,
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            self.status,
        ]
    }

    fn from_words(w: [u16; 13]) -> Self {
        SensorFrame {
            pm1_std: w[0],
            pm25_std: w[1],
            pm10_std: w[2],
            pm1_atm: w[3],
            pm25_atm: w[4],
            pm10_atm: w[5],
            counts: [w[6], w[7], w[8], w[9], w[10], w[11]],
            status: w[12],
        }
    }
}

/// Arithmetic sum of the bytes, truncated to 16 bits.
///
/// Frames are checked with the sum over their first 30 bytes.
pub fn checksum(bytes: &[u8]) -> u16 {
    bytes
        .iter()
        .fold(0u16, |acc, &b| acc.wrapping_add(u16::from(b)))
}

fn be16(bytes: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([bytes[at], bytes[at + 1]])
}

/// Decodes one frame. Offsets in returned errors are relative to `bytes`.
pub fn parse_pms_frame(bytes: &[u8]) -> Result<SensorFrame, FrameError> {
    let err = |kind| Err(FrameError::new(kind, 0));
    if bytes.len() < FRAME_LEN {
        return err(FrameErrorKind::Truncated);
    }
    if bytes.len() > FRAME_LEN {
        return err(FrameErrorKind::BadLength);
    }
    if bytes[0..2] != START_BYTES {
        return err(FrameErrorKind::BadStartBytes);
    }
    if be16(bytes, 2) != LENGTH_WORD {
        return err(FrameErrorKind::BadLength);
    }
    if checksum(&bytes[..30]) != be16(bytes, 30) {
        return err(FrameErrorKind::BadChecksum);
    }
    let mut words = [0u16; 13];
    for (i, w) in words.iter_mut().enumerate() {
        *w = be16(bytes, 4 + 2 * i);
    }
    Ok(SensorFrame::from_words(words))
}

/// Serializes a frame with a freshly computed checksum.
pub fn encode_pms_frame(frame: &SensorFrame) -> [u8; FRAME_LEN] {
    let mut out = [0u8; FRAME_LEN];
    out[0..2].copy_from_slice(&START_BYTES);
    out[2..4].copy_from_slice(&LENGTH_WORD.to_be_bytes());
    for (i, w) in frame.words().iter().enumerate() {
        out[4 + 2 * i..6 + 2 * i].copy_from_slice(&w.to_be_bytes());
    }
    let sum = checksum(&out[..30]);
    out[30..32].copy_from_slice(&sum.to_be_bytes());
    out
}

/// Streaming scanner that recovers frames from an arbitrary byte sequence.
///
/// Every marker position is tried as a frame candidate. A failed candidate
/// consumes exactly one byte, so a scan is linear in the stream length. Bytes
/// that belong to no candidate are reported as one `BadStartBytes` error per
/// contiguous run; bytes inside the 32-byte span of an already-reported failed
/// candidate are absorbed into that error.
#[derive(Debug, Clone)]
pub struct FrameScanner<'a> {
    stream: &'a [u8],
    pos: usize,
    garbage_start: Option<usize>,
    absorbed_until: usize,
    pending: Option<Result<(usize, SensorFrame), FrameError>>,
}

impl<'a> FrameScanner<'a> {
    pub fn new(stream: &'a [u8]) -> Self {
        FrameScanner {
            stream,
            pos: 0,
            garbage_start: None,
            absorbed_until: 0,
            pending: None,
        }
    }

    fn flush_garbage(&mut self) -> Option<FrameError> {
        self.garbage_start
            .take()
            .map(|start| FrameError::new(FrameErrorKind::BadStartBytes, start))
    }

    fn at_marker(&self) -> bool {
        self.stream[self.pos] == START_BYTES[0]
            && self.stream.get(self.pos + 1) == Some(&START_BYTES[1])
    }

    /// Queues `item` behind any open garbage run and returns whichever comes first.
    fn emit(
        &mut self,
        item: Result<(usize, SensorFrame), FrameError>,
    ) -> Result<(usize, SensorFrame), FrameError> {
        match self.flush_garbage() {
            Some(garbage) => {
                self.pending = Some(item);
                Err(garbage)
            }
            None => item,
        }
    }
}

impl Iterator for FrameScanner<'_> {
    type Item = Result<(usize, SensorFrame), FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(item) = self.pending.take() {
            return Some(item);
        }
        while self.pos < self.stream.len() {
            let start = self.pos;
            if !self.at_marker() {
                if start >= self.absorbed_until && self.garbage_start.is_none() {
                    self.garbage_start = Some(start);
                }
                self.pos += 1;
                continue;
            }
            let end = start + FRAME_LEN;
            if end > self.stream.len() {
                self.pos = self.stream.len();
                if start < self.absorbed_until && self.garbage_start.is_none() {
                    return None;
                }
                let item = Err(FrameError::new(FrameErrorKind::Truncated, start));
                return Some(self.emit(item));
            }
            match parse_pms_frame(&self.stream[start..end]) {
                Ok(frame) => {
                    self.pos = end;
                    self.absorbed_until = end;
                    return Some(self.emit(Ok((start, frame))));
                }
                Err(e) => {
                    self.pos += 1;
                    if start < self.absorbed_until && self.garbage_start.is_none() {
                        continue;
                    }
                    self.absorbed_until = end;
                    let item = Err(FrameError::new(e.kind, start));
                    return Some(self.emit(item));
                }
            }
        }
        self.flush_garbage().map(Err)
    }
}

/// Decodes every frame in `stream`, interleaving errors for corrupt regions.
pub fn resync_and_parse(stream: &[u8]) -> Vec<Result<SensorFrame, FrameError>> {
    FrameScanner::new(stream)
        .map(|item| item.map(|(_, frame)| frame))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_frame() -> Vec<u8> {
        let mut f = vec![0x42, 0x4D, 0x00, 0x1C];
        f.extend([0u8; 26]);
        f.extend([0x00, 0xAB]);
        f
    }

    #[test]
    fn checksum_examples() {
        assert_eq!(checksum(&[0u8; 30]), 0);
        assert_eq!(checksum(&zero_frame()[..30]), 0x00AB);
        assert_eq!(checksum(&[0xFFu8; 30]), 0x1DE2);
    }

    #[test]
    fn checksum_wraps_at_16_bits() {
        assert_eq!(checksum(&[0xFFu8; 300]), (300u32 * 255 % 65536) as u16);
    }

    #[test]
    fn all_zero_frame() {
        let frame = parse_pms_frame(&zero_frame()).unwrap();
        assert_eq!(frame, SensorFrame::default());
        assert!(frame.quality().is_clean());
    }

    #[test]
    fn off_by_one_checksum_rejected() {
        let mut f = zero_frame();
        f[31] = 0xAC;
        assert_eq!(
            parse_pms_frame(&f).unwrap_err().kind,
            FrameErrorKind::BadChecksum
        );
    }

    #[test]
    fn pm25_atm_word_decoded() {
        let mut f = zero_frame();
        f[12] = 0x00;
        f[13] = 0x66;
        let sum: u32 = f[..30].iter().map(|&b| u32::from(b)).sum();
        f[30] = (sum >> 8) as u8;
        f[31] = sum as u8;
        let frame = parse_pms_frame(&f).unwrap();
        assert_eq!(frame.pm25_atm, 102);
        assert_eq!(frame.pm25_std, 0);
    }

    #[test]
    fn header_errors() {
        let mut f = zero_frame();
        f[0] = 0x41;
        assert_eq!(
            parse_pms_frame(&f).unwrap_err().kind,
            FrameErrorKind::BadStartBytes
        );
        let mut f = zero_frame();
        f[3] = 0x1D;
        assert_eq!(
            parse_pms_frame(&f).unwrap_err().kind,
            FrameErrorKind::BadLength
        );
        assert_eq!(
            parse_pms_frame(&zero_frame()[..31]).unwrap_err().kind,
            FrameErrorKind::Truncated
        );
    }

    #[test]
    fn disorder_is_flagged_not_rejected() {
        let frame = SensorFrame {
            pm1_atm: 30,
            pm25_atm: 20,
            pm10_atm: 40,
            counts: [10, 20, 5, 4, 3, 2],
            ..Default::default()
        };
        let decoded = parse_pms_frame(&encode_pms_frame(&frame)).unwrap();
        let q = decoded.quality();
        assert!(q.atm_mass_disordered);
        assert!(q.counts_disordered);
        assert!(!q.std_mass_disordered);
    }

    #[test]
    fn garbage_prefix_then_frame() {
        let mut s = vec![1, 2, 3, 4, 5];
        s.extend(zero_frame());
        let out = resync_and_parse(&s);
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].as_ref().unwrap_err(),
            &FrameError::new(FrameErrorKind::BadStartBytes, 0)
        );
        assert_eq!(out[1].as_ref().unwrap(), &SensorFrame::default());
    }

    #[test]
    fn back_to_back_frames() {
        let a = SensorFrame {
            pm25_atm: 7,
            ..Default::default()
        };
        let b = SensorFrame {
            pm25_atm: 9,
            ..Default::default()
        };
        let mut s = encode_pms_frame(&a).to_vec();
        s.extend(encode_pms_frame(&b));
        let out: Vec<_> = resync_and_parse(&s).into_iter().map(Result::unwrap).collect();
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn corrupt_frame_then_valid_frame() {
        let mut s = zero_frame();
        s[17] ^= 0x01;
        s.extend(zero_frame());
        let out = resync_and_parse(&s);
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].as_ref().unwrap_err(),
            &FrameError::new(FrameErrorKind::BadChecksum, 0)
        );
        assert!(out[1].is_ok());
    }

    #[test]
    fn partial_trailing_frame_is_truncated() {
        let mut s = zero_frame();
        s.extend(&zero_frame()[..20]);
        let out = resync_and_parse(&s);
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[1].as_ref().unwrap_err(),
            &FrameError::new(FrameErrorKind::Truncated, 32)
        );
    }

    #[test]
    fn trailing_garbage_reported_once() {
        let mut s = zero_frame();
        s.extend([9u8; 7]);
        let out = resync_and_parse(&s);
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[1].as_ref().unwrap_err(),
            &FrameError::new(FrameErrorKind::BadStartBytes, 32)
        );
    }

    #[test]
    fn scanner_reports_frame_offsets() {
        let mut s = vec![0u8; 3];
        s.extend(zero_frame());
        let offsets: Vec<usize> = FrameScanner::new(&s)
            .filter_map(|r| r.ok().map(|(at, _)| at))
            .collect();
        assert_eq!(offsets, vec![3]);
    }

    #[test]
    fn empty_stream() {
        assert!(resync_and_parse(&[]).is_empty());
    }
}
