//! Wire formats: PMS-family binary frames and NMEA-0183 GPS sentences.

mod nmea;
mod pms;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nmea::{encode_gga, parse_gps_sentence, GpsFix, NmeaLog, NmeaSentence};
pub use pms::{
    checksum, encode_pms_frame, parse_pms_frame, resync_and_parse, FrameQuality, FrameScanner,
    SensorFrame, FRAME_LEN, LENGTH_WORD, START_BYTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameErrorKind {
    BadStartBytes,
    BadLength,
    BadChecksum,
    Truncated,
    BadSentence,
}

impl fmt::Display for FrameErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FrameErrorKind::BadStartBytes => "bad start bytes",
            FrameErrorKind::BadLength => "bad length",
            FrameErrorKind::BadChecksum => "bad checksum",
            FrameErrorKind::Truncated => "truncated frame",
            FrameErrorKind::BadSentence => "bad sentence",
        };
        f.write_str(s)
    }
}

/// A parse failure located at a byte offset in its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind} at byte {offset}")]
pub struct FrameError {
    pub kind: FrameErrorKind,
    pub offset: usize,
}

impl FrameError {
    pub fn new(kind: FrameErrorKind, offset: usize) -> Self {
        FrameError { kind, offset }
    }
}
