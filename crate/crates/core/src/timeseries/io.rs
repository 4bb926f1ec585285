//! CSV schemas for samples, reference monitors and windowed series.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EnvReading, LocationClass, Sample, TimeSeries, Window, WindowLen};
use crate::wire::GpsFix;

pub const SAMPLE_HEADER: [&str; 10] = [
    "timestamp_utc",
    "node_id",
    "location_class",
    "pm25_atm",
    "pm25_std",
    "lat",
    "lon",
    "gps_valid",
    "temp_c",
    "rh_pct",
];
pub const REFERENCE_HEADER: [&str; 3] = ["timestamp_utc", "monitor_id", "pm25"];
pub const WINDOW_HEADER: [&str; 7] = [
    "window_start",
    "node_id",
    "window_s",
    "mean_pm25",
    "coverage",
    "n_samples",
    "valid",
];

#[derive(Debug, Error)]
pub enum CsvError {
    /// `row` is 1-based and counts the header line.
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn row_err(row: u64, message: impl Into<String>) -> CsvError {
    CsvError::Row {
        row,
        message: message.into(),
    }
}

pub(crate) fn fmt_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub(crate) fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

fn opt_f64(s: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("not a number: {s:?}"))
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), CsvError> {
    let found = rdr.headers()?;
    if found.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(CsvError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(r)
}

fn row_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn write_samples_csv<W: Write>(w: W, samples: &[Sample]) -> Result<(), CsvError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SAMPLE_HEADER)?;
    for s in samples {
        let (lat, lon, valid) = match &s.fix {
            Some(f) => (
                f.latitude.to_string(),
                f.longitude.to_string(),
                u8::from(f.valid).to_string(),
            ),
            None => Default::default(),
        };
        let env = s.env.unwrap_or_default();
        wtr.write_record([
            fmt_time(s.timestamp),
            s.node_id.clone(),
            s.location_class.to_string(),
            s.pm25.to_string(),
            opt_str(s.pm25_std),
            lat,
            lon,
            valid,
            opt_str(env.temp_c),
            opt_str(env.rh_pct),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<Sample>, CsvError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &SAMPLE_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let row = row_of(&rec);
        let f = |i: usize| rec.get(i).unwrap_or("").trim();
        let timestamp = parse_time(f(0)).ok_or_else(|| row_err(row, "bad timestamp_utc"))?;
        let node_id = f(1).to_string();
        if node_id.is_empty() {
            return Err(row_err(row, "empty node_id"));
        }
        let location_class: LocationClass =
            serde_json::from_value(serde_json::Value::String(f(2).to_string()))
                .map_err(|_| row_err(row, format!("bad location_class {:?}", f(2))))?;
        let pm25 = opt_f64(f(3))
            .map_err(|m| row_err(row, m))?
            .ok_or_else(|| row_err(row, "missing pm25_atm"))?;
        let pm25_std = opt_f64(f(4)).map_err(|m| row_err(row, m))?;
        let lat = opt_f64(f(5)).map_err(|m| row_err(row, m))?;
        let lon = opt_f64(f(6)).map_err(|m| row_err(row, m))?;
        let fix = match (lat, lon) {
            (Some(latitude), Some(longitude)) => {
                if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
                    return Err(row_err(row, "coordinates out of range"));
                }
                let valid = match f(7) {
                    "1" | "true" => true,
                    "0" | "false" | "" => false,
                    other => return Err(row_err(row, format!("bad gps_valid {other:?}"))),
                };
                Some(GpsFix {
                    timestamp,
                    latitude,
                    longitude,
                    valid,
                    hdop: None,
                })
            }
            (None, None) => None,
            _ => return Err(row_err(row, "lat and lon must both be present or both empty")),
        };
        let temp_c = opt_f64(f(8)).map_err(|m| row_err(row, m))?;
        let rh_pct = opt_f64(f(9)).map_err(|m| row_err(row, m))?;
        let env = (temp_c.is_some() || rh_pct.is_some()).then_some(EnvReading {
            temp_c,
            rh_pct,
            pressure_hpa: None,
        });
        out.push(Sample {
            timestamp,
            node_id,
            location_class,
            pm25,
            pm25_std,
            fix,
            env,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub timestamp: DateTime<Utc>,
    pub monitor_id: String,
    pub pm25: f64,
}

pub fn write_reference_csv<W: Write>(w: W, records: &[ReferenceRecord]) -> Result<(), CsvError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REFERENCE_HEADER)?;
    for r in records {
        wtr.write_record([fmt_time(r.timestamp), r.monitor_id.clone(), r.pm25.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_reference_csv<R: Read>(r: R) -> Result<Vec<ReferenceRecord>, CsvError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &REFERENCE_HEADER)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let row = row_of(&rec);
        let timestamp = parse_time(&rec[0]).ok_or_else(|| row_err(row, "bad timestamp_utc"))?;
        let monitor_id = rec[1].trim().to_string();
        let pm25 = opt_f64(&rec[2])
            .map_err(|m| row_err(row, m))?
            .ok_or_else(|| row_err(row, "missing pm25"))?;
        out.push(ReferenceRecord {
            timestamp,
            monitor_id,
            pm25,
        });
    }
    Ok(out)
}

/// One hourly series per monitor. Records sharing an hour are averaged;
/// negative or non-finite readings are skipped.
pub fn reference_series(records: &[ReferenceRecord]) -> Vec<TimeSeries> {
    let mut by_monitor: BTreeMap<&str, BTreeMap<DateTime<Utc>, Vec<f64>>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.pm25.is_finite() && r.pm25 >= 0.0)
    {
        by_monitor
            .entry(&r.monitor_id)
            .or_default()
            .entry(WindowLen::Hour.floor(r.timestamp))
            .or_default()
            .push(r.pm25);
    }
    by_monitor
        .into_iter()
        .map(|(id, hours)| TimeSeries {
            node_id: id.to_string(),
            window_len: WindowLen::Hour,
            windows: hours
                .into_iter()
                .map(|(start, v)| Window {
                    start,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    coverage: 1.0,
                    n_samples: v.len(),
                    valid: true,
                })
                .collect(),
        })
        .collect()
}

pub fn write_windows_csv<'a, W: Write>(
    w: W,
    series: impl IntoIterator<Item = &'a TimeSeries>,
) -> Result<(), CsvError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(WINDOW_HEADER)?;
    for s in series {
        let len = s.window_len.seconds().unwrap_or(0).to_string();
        for win in &s.windows {
            wtr.write_record([
                fmt_time(win.start),
                s.node_id.clone(),
                len.clone(),
                win.mean.to_string(),
                win.coverage.to_string(),
                win.n_samples.to_string(),
                u8::from(win.valid).to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a windows file back into one series per node, keyed by node id.
pub fn read_windows_csv<R: Read>(r: R) -> Result<BTreeMap<String, TimeSeries>, CsvError> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &WINDOW_HEADER)?;
    let mut out: BTreeMap<String, TimeSeries> = BTreeMap::new();
    for record in rdr.records() {
        let rec = record?;
        let row = row_of(&rec);
        let start = parse_time(&rec[0]).ok_or_else(|| row_err(row, "bad window_start"))?;
        let node = rec[1].trim().to_string();
        let window_len = rec[2]
            .trim()
            .parse::<i64>()
            .ok()
            .and_then(WindowLen::from_seconds)
            .ok_or_else(|| row_err(row, "bad window_s"))?;
        let num = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| row_err(row, format!("bad {}", WINDOW_HEADER[i])))
        };
        let mean = num(3)?;
        let coverage = num(4)?;
        let n_samples = rec[5]
            .trim()
            .parse::<usize>()
            .map_err(|_| row_err(row, "bad n_samples"))?;
        let valid = match rec[6].trim() {
            "1" => true,
            "0" => false,
            _ => return Err(row_err(row, "bad valid flag")),
        };
        let series = out.entry(node.clone()).or_insert_with(|| TimeSeries {
            node_id: node,
            window_len,
            windows: Vec::new(),
        });
        if series.window_len != window_len {
            return Err(row_err(row, "mixed window lengths for one node"));
        }
        if series.windows.last().is_some_and(|w| w.start >= start) {
            return Err(row_err(row, "windows out of order"));
        }
        series.windows.push(Window {
            start,
            mean,
            coverage,
            n_samples,
            valid,
        });
    }
    Ok(out)
}
