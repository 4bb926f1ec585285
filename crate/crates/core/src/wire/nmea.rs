//! NMEA-0183 RMC/GGA decoding.

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use super::{FrameError, FrameErrorKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub timestamp: DateTime<Utc>,
    /// Decimal degrees, north positive. 0 when the receiver reported no position.
    pub latitude: f64,
    /// Decimal degrees, east positive. 0 when the receiver reported no position.
    pub longitude: f64,
    pub valid: bool,
    /// Horizontal dilution of precision (GGA only).
    pub hdop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NmeaSentence {
    Fix(GpsFix),
    /// Well-formed sentence of a type we do not decode, e.g. `GPGSV`.
    Unsupported(String),
}

fn bad(offset: usize) -> FrameError {
    FrameError::new(FrameErrorKind::BadSentence, offset)
}

/// Verifies the `*hh` XOR checksum and returns the body between `$` and `*`.
fn checked_body(line: &str) -> Result<&str, FrameError> {
    let rest = line.strip_prefix('$').ok_or(bad(0))?;
    let star = rest.rfind('*').ok_or(bad(line.len()))?;
    let (body, tail) = (&rest[..star], &rest[star + 1..]);
    if tail.len() != 2 || !tail.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(bad(star + 2));
    }
    let expected = u8::from_str_radix(tail, 16).map_err(|_| bad(star + 2))?;
    let actual = body.bytes().fold(0u8, |acc, b| acc ^ b);
    if actual != expected {
        return Err(bad(star + 2));
    }
    Ok(body)
}

struct Fields<'a> {
    fields: Vec<&'a str>,
    offsets: Vec<usize>,
}

impl<'a> Fields<'a> {
    fn split(body: &'a str) -> Self {
        let mut offsets = Vec::new();
        let mut at = 1; // past '$'
        let fields: Vec<&str> = body
            .split(',')
            .inspect(|f| {
                offsets.push(at);
                at += f.len() + 1;
            })
            .collect();
        Fields { fields, offsets }
    }

    fn get(&self, i: usize) -> Result<&'a str, FrameError> {
        self.fields
            .get(i)
            .copied()
            .ok_or_else(|| bad(self.offsets.last().copied().unwrap_or(0)))
    }

    fn offset(&self, i: usize) -> usize {
        self.offsets.get(i).copied().unwrap_or(0)
    }
}

fn parse_time(s: &str) -> Option<NaiveTime> {
    if s.len() < 6 || !s.is_char_boundary(6) {
        return None;
    }
    let (hms, frac) = s.split_at(6);
    if !hms.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let h: u32 = hms[0..2].parse().ok()?;
    let m: u32 = hms[2..4].parse().ok()?;
    let sec: u32 = hms[4..6].parse().ok()?;
    let nanos = match frac.strip_prefix('.') {
        Some(f) if !f.is_empty() && f.len() <= 9 && f.bytes().all(|b| b.is_ascii_digit()) => {
            let digits: u32 = f.parse().ok()?;
            digits * 10u32.pow(9 - f.len() as u32)
        }
        None if frac.is_empty() => 0,
        _ => return None,
    };
    NaiveTime::from_hms_nano_opt(h, m, sec, nanos)
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    if s.len() != 6 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let d: u32 = s[0..2].parse().ok()?;
    let m: u32 = s[2..4].parse().ok()?;
    let y: i32 = s[4..6].parse().ok()?;
    // Two-digit years: 80..99 -> 19xx, else 20xx.
    let year = if y >= 80 { 1900 + y } else { 2000 + y };
    NaiveDate::from_ymd_opt(year, m, d)
}

/// Converts `ddmm.mmmm` / `dddmm.mmmm` plus hemisphere to signed decimal degrees.
fn parse_coord(value: &str, hemi: &str, deg_digits: usize, limit: f64) -> Option<f64> {
    let dot = value.find('.').unwrap_or(value.len());
    if dot != deg_digits + 2 || !value[..dot].bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let frac = &value[dot..];
    if !(frac.is_empty() || frac[1..].bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let degrees: f64 = value[..deg_digits].parse().ok()?;
    let minutes: f64 = value[deg_digits..].parse().ok()?;
    if minutes >= 60.0 {
        return None;
    }
    let magnitude = degrees + minutes / 60.0;
    if magnitude > limit {
        return None;
    }
    match (hemi, deg_digits) {
        ("N", 2) | ("E", 3) => Some(magnitude),
        ("S", 2) | ("W", 3) => Some(-magnitude),
        _ => None,
    }
}

/// Reads the lat/lon field quartet starting at `first`. Empty fields give `None`.
fn position(fields: &Fields<'_>, first: usize) -> Result<Option<(f64, f64)>, FrameError> {
    let (lat, ns, lon, ew) = (
        fields.get(first)?,
        fields.get(first + 1)?,
        fields.get(first + 2)?,
        fields.get(first + 3)?,
    );
    if [lat, ns, lon, ew].iter().all(|f| f.is_empty()) {
        return Ok(None);
    }
    let lat = parse_coord(lat, ns, 2, 90.0).ok_or(bad(fields.offset(first)))?;
    let lon = parse_coord(lon, ew, 3, 180.0).ok_or(bad(fields.offset(first + 2)))?;
    Ok(Some((lat, lon)))
}

/// Decodes one RMC or GGA sentence.
///
/// GGA carries only a time of day; it is placed on `date`. RMC carries its own
/// date and uses `date` only when the field is empty. Other well-formed
/// sentence types return [`NmeaSentence::Unsupported`].
pub fn parse_gps_sentence(line: &str, date: NaiveDate) -> Result<NmeaSentence, FrameError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let body = checked_body(line)?;
    let fields = Fields::split(body);
    let tag = fields.get(0)?;
    if tag.len() != 5 || !tag.bytes().all(|b| b.is_ascii_alphanumeric()) {
        return Err(bad(1));
    }
    let kind = &tag[2..];
    let fix = match kind {
        "RMC" => {
            let time = parse_time(fields.get(1)?).ok_or(bad(fields.offset(1)))?;
            let valid = match fields.get(2)? {
                "A" => true,
                "V" => false,
                _ => return Err(bad(fields.offset(2))),
            };
            let pos = position(&fields, 3)?;
            let date = match fields.get(9)? {
                "" => date,
                d => parse_date(d).ok_or(bad(fields.offset(9)))?,
            };
            build_fix(date, time, valid, pos, None, fields.offset(3))?
        }
        "GGA" => {
            let time = parse_time(fields.get(1)?).ok_or(bad(fields.offset(1)))?;
            let pos = position(&fields, 2)?;
            let quality: u8 = fields
                .get(6)?
                .parse()
                .map_err(|_| bad(fields.offset(6)))?;
            let hdop = match fields.get(8)? {
                "" => None,
                h => Some(
                    h.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite() && *v >= 0.0)
                        .ok_or(bad(fields.offset(8)))?,
                ),
            };
            build_fix(date, time, quality > 0, pos, hdop, fields.offset(2))?
        }
        _ => return Ok(NmeaSentence::Unsupported(tag.to_string())),
    };
    Ok(NmeaSentence::Fix(fix))
}

fn build_fix(
    date: NaiveDate,
    time: NaiveTime,
    valid: bool,
    pos: Option<(f64, f64)>,
    hdop: Option<f64>,
    pos_offset: usize,
) -> Result<GpsFix, FrameError> {
    let (latitude, longitude) = match pos {
        Some(p) => p,
        // A receiver claiming a fix must report where.
        None if valid => return Err(bad(pos_offset)),
        None => (0.0, 0.0),
    };
    Ok(GpsFix {
        timestamp: date.and_time(time).and_utc(),
        latitude,
        longitude,
        valid,
        hdop,
    })
}

/// Decodes a multi-line NMEA log, carrying the RMC date forward to GGA lines.
#[derive(Debug, Clone)]
pub struct NmeaLog {
    date: NaiveDate,
}

impl NmeaLog {
    pub fn new(start_date: NaiveDate) -> Self {
        NmeaLog { date: start_date }
    }

    /// Returns decoded fixes (in log order) and one error per bad line, with
    /// offsets relative to the start of `text`. Unsupported sentences and
    /// blank lines are skipped.
    pub fn parse(&mut self, text: &str) -> (Vec<GpsFix>, Vec<FrameError>) {
        let mut fixes = Vec::new();
        let mut errors = Vec::new();
        let mut line_start = 0;
        for raw in text.split_inclusive('\n') {
            let line = raw.trim_end_matches(['\r', '\n']);
            if !line.trim().is_empty() {
                match parse_gps_sentence(line, self.date) {
                    Ok(NmeaSentence::Fix(fix)) => {
                        self.date = fix.timestamp.date_naive();
                        fixes.push(fix);
                    }
                    Ok(NmeaSentence::Unsupported(_)) => {}
                    Err(e) => errors.push(FrameError::new(e.kind, line_start + e.offset)),
                }
            }
            line_start += raw.len();
        }
        (fixes, errors)
    }
}

/// Appends `*hh` to a sentence body given without `$`. Used by encoders and tests.
pub(crate) fn with_checksum(body: &str) -> String {
    let sum = body.bytes().fold(0u8, |acc, b| acc ^ b);
    format!("${body}*{sum:02X}")
}

/// Formats a fix as a GGA sentence.
pub fn encode_gga(fix: &GpsFix) -> String {
    fn coord(v: f64, deg_digits: usize, pos: char, neg: char) -> (String, char) {
        let a = v.abs();
        let mut deg = a.trunc();
        let mut min = (a - deg) * 60.0;
        if format!("{min:07.4}") == "60.0000" {
            deg += 1.0;
            min = 0.0;
        }
        let hemi = if v < 0.0 { neg } else { pos };
        (
            format!("{:0width$}{:07.4}", deg as u32, min, width = deg_digits),
            hemi,
        )
    }
    let (lat, ns) = coord(fix.latitude, 2, 'N', 'S');
    let (lon, ew) = coord(fix.longitude, 3, 'E', 'W');
    let t = fix.timestamp.format("%H%M%S%.3f").to_string();
    let q = u8::from(fix.valid);
    let hdop = fix.hdop.map(|h| format!("{h:.1}")).unwrap_or_default();
    with_checksum(&format!(
        "GPGGA,{t},{lat},{ns},{lon},{ew},{q},08,{hdop},50.0,M,-17.0,M,,"
    ))
}
