//! File-based analysis pipeline.
//!
//! Stages run in order `parse -> ingest -> calibrate -> analyze -> attribute -> report`.
//! Each stage reads only files in the input directory, the output directory and
//! the run configuration, so any stage can be re-run on its own. Every stage
//! records its inputs, outputs and counters in `manifest.json`.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{
    io_ratio, network_average, pearson, summarize_table, wilcoxon_signed_rank, SiteStreams,
    SiteSummaryRow, WilcoxonResult,
};
use crate::calibration::{
    accuracy_of, apply, pairs_from_alignment, Accuracy, ModelComparison, ModelDocument, ModelForm,
};
use crate::config::{ConfigError, RunConfig, Span};
use crate::exposure::{
    attribute_all, exposure_share, label_series, write_attribution_csv, LabelConfig,
    MicroenvLabel,
};
use crate::scenario::{REFERENCE_FILE, SAMPLES_FILE};
use crate::timeseries::io::{fmt_time, parse_time};
use crate::timeseries::{
    aggregate, align_pairs, check_sample, read_reference_csv, read_samples_csv, read_windows_csv,
    reference_mean, reference_series, write_samples_csv, write_windows_csv, CsvError, Rejection,
    Sample, TimeSeries, WindowLen,
};
use crate::wire::{FrameErrorKind, FrameScanner, GpsFix, NmeaLog};

pub const STAGE_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARSE_ERRORS_FILE: &str = "parse_errors.csv";
pub const WINDOWS_10MIN_FILE: &str = "windows_10min.csv";
pub const WINDOWS_HOURLY_FILE: &str = "windows_hourly.csv";
pub const REFERENCE_HOURLY_FILE: &str = "reference_hourly.csv";
pub const FIXES_FILE: &str = "fixes.csv";
pub const MODEL_FILE: &str = "model.json";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const CALIBRATED_HOURLY_FILE: &str = "calibrated_hourly.csv";
pub const CALIBRATED_10MIN_FILE: &str = "calibrated_10min.csv";
pub const TABLE2_FILE: &str = "table2.csv";
pub const IO_HOURLY_FILE: &str = "io_hourly.csv";
pub const NETWORK_AVG_FILE: &str = "network_avg.csv";
pub const WILCOXON_FILE: &str = "wilcoxon.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const ATTRIBUTION_FILE: &str = "attribution.csv";
pub const LABELS_FILE: &str = "personal_labels.csv";
pub const EXPOSURE_SHARES_FILE: &str = "exposure_shares.json";

/// Node id of the cross-monitor reference mean in `reference_hourly.csv`.
pub const REFERENCE_MEAN_ID: &str = "reference_mean";

const PARSE_ERRORS_HEADER: [&str; 3] = ["source", "offset", "kind"];
const FIX_HEADER: [&str; 6] = ["timestamp_utc", "node_id", "lat", "lon", "gps_valid", "hdop"];
const IO_HEADER: [&str; 5] = ["location_id", "window_start", "indoor", "outdoor", "io_ratio"];
const NETWORK_HEADER: [&str; 5] = ["group", "window_start", "mean", "sigma", "n"];
const LABELS_HEADER: [&str; 4] = ["window_start", "pm25", "label", "carried"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Parse,
    Ingest,
    Calibrate,
    Analyze,
    Attribute,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 6] = [
        Stage::Parse,
        Stage::Ingest,
        Stage::Calibrate,
        Stage::Analyze,
        Stage::Attribute,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Parse => "parse",
            Stage::Ingest => "ingest",
            Stage::Calibrate => "calibrate",
            Stage::Analyze => "analyze",
            Stage::Attribute => "attribute",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Config,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Config => 3,
            ErrorKind::Numerical => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Input => "input",
            ErrorKind::Config => "config",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Row(u64),
    Offset(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub file: Option<PathBuf>,
    pub location: Option<Location>,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed ({} error)", self.stage, self.kind.as_str())?;
        if let Some(file) = &self.file {
            write!(f, " in {}", file.display())?;
        }
        match self.location {
            Some(Location::Row(r)) => write!(f, " at row {r}")?,
            Some(Location::Offset(o)) => write!(f, " at byte {o}")?,
            None => {}
        }
        write!(f, ": {}", self.message)
    }
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        PipelineError {
            stage,
            kind,
            file: None,
            location: None,
            message: message.into(),
        }
    }

    fn in_file(mut self, file: impl Into<PathBuf>) -> Self {
        self.file = Some(file.into());
        self
    }

    fn at(mut self, location: Location) -> Self {
        self.location = Some(location);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

fn csv_error(stage: Stage, file: &str, e: CsvError) -> PipelineError {
    let (location, message) = match &e {
        CsvError::Row { row, message } => (Some(Location::Row(*row)), message.clone()),
        CsvError::Csv(c) => (c.position().map(|p| Location::Row(p.line())), c.to_string()),
        _ => (None, e.to_string()),
    };
    let mut err = PipelineError::new(stage, ErrorKind::Input, message).in_file(file);
    err.location = location;
    err
}

fn numerical(stage: Stage, e: impl fmt::Display) -> PipelineError {
    PipelineError::new(stage, ErrorKind::Numerical, e.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded run: configuration plus the input and output directories.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub config_sha256: String,
    /// Relative log paths in the configuration resolve against this directory.
    pub config_dir: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
}

impl Context {
    pub fn load(config_path: &Path, input: &Path, out: &Path) -> Result<Self, PipelineError> {
        let cfg_err = |msg: String| {
            PipelineError::new(Stage::Config, ErrorKind::Config, msg).in_file(config_path)
        };
        let bytes = fs::read(config_path).map_err(|e| cfg_err(e.to_string()))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| cfg_err(e.to_string()))?;
        let config = RunConfig::from_toml(text).map_err(|e| {
            let offset = match &e {
                ConfigError::Syntax(s) => s.span().map(|r| r.start),
                _ => None,
            };
            let err = cfg_err(e.to_string());
            match offset {
                Some(o) => err.at(Location::Offset(o)),
                None => err,
            }
        })?;
        Ok(Context {
            config,
            config_sha256: sha256_hex(&bytes),
            config_dir: config_path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default(),
            input: input.to_path_buf(),
            out: out.to_path_buf(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileRoot {
    Input,
    Output,
    Config,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub root: FileRoot,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    /// Data rows, excluding the header, for CSV outputs.
    pub rows: Option<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub version: u32,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<OutputRecord>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    fn empty(ctx: &Context) -> Self {
        Manifest {
            tool: "smokenet".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: ctx.config_sha256.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn counter(&self, stage: Stage, name: &str) -> Option<u64> {
        self.stages.get(&stage)?.counters.get(name).copied()
    }
}

/// Reads, writes and bookkeeping for one stage. Files written are removed if
/// the stage fails.
struct StageIo<'a> {
    ctx: &'a Context,
    stage: Stage,
    written: Vec<PathBuf>,
    record: StageRecord,
}

impl<'a> StageIo<'a> {
    fn new(ctx: &'a Context, stage: Stage) -> Self {
        StageIo {
            ctx,
            stage,
            written: Vec::new(),
            record: StageRecord {
                version: STAGE_VERSION,
                inputs: Vec::new(),
                outputs: Vec::new(),
                counters: BTreeMap::new(),
            },
        }
    }

    fn read(&mut self, root: FileRoot, name: &str) -> Result<Vec<u8>, PipelineError> {
        let path = match root {
            FileRoot::Input => self.ctx.input.join(name),
            FileRoot::Output => self.ctx.out.join(name),
            FileRoot::Config => self.ctx.config_dir.join(name),
        };
        let bytes = fs::read(&path).map_err(|e| {
            PipelineError::new(self.stage, ErrorKind::Input, e.to_string()).in_file(&path)
        })?;
        self.record.inputs.push(InputRecord {
            root,
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), PipelineError> {
        let path = self.ctx.out.join(name);
        let io_err = |e: std::io::Error| {
            PipelineError::new(self.stage, ErrorKind::Input, e.to_string()).in_file(&path)
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        self.written.push(path.clone());
        fs::write(&path, &bytes).map_err(io_err)?;
        let rows = name
            .ends_with(".csv")
            .then(|| bytes.iter().filter(|&&b| b == b'\n').count().saturating_sub(1));
        self.record.outputs.push(OutputRecord {
            file: name.to_string(),
            rows,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| numerical(self.stage, e))?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    fn count(&mut self, name: &str, value: u64) {
        *self.record.counters.entry(name.to_string()).or_default() += value;
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }

    fn csv_err(&self, file: &str) -> impl Fn(CsvError) -> PipelineError + '_ {
        let stage = self.stage;
        let file = file.to_string();
        move |e| csv_error(stage, &file, e)
    }
}

fn write_csv<F>(stage: Stage, header: &[&str], fill: F) -> Result<Vec<u8>, PipelineError>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)
            .and_then(|_| fill(&mut w))
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| numerical(stage, e))?;
    }
    Ok(buf)
}

/// Rows of a CSV whose header must equal `header`.
fn read_table(
    stage: Stage,
    file: &str,
    bytes: &[u8],
    header: &[&str],
) -> Result<Vec<csv::StringRecord>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let found = rdr
        .headers()
        .map_err(|e| csv_error(stage, file, e.into()))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(csv_error(
            stage,
            file,
            CsvError::Header {
                expected: header.join(","),
                found: found.iter().collect::<Vec<_>>().join(","),
            },
        ));
    }
    rdr.records()
        .map(|r| r.map_err(|e| csv_error(stage, file, e.into())))
        .collect()
}

fn cell_f64(stage: Stage, file: &str, rec: &csv::StringRecord, i: usize) -> Result<Option<f64>, PipelineError> {
    let s = rec[i].trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| {
        let row = rec.position().map_or(0, |p| p.line());
        PipelineError::new(stage, ErrorKind::Input, format!("bad number {s:?}"))
            .in_file(file)
            .at(Location::Row(row))
    })
}

fn cell_time(stage: Stage, file: &str, rec: &csv::StringRecord, i: usize) -> Result<DateTime<Utc>, PipelineError> {
    parse_time(&rec[i]).ok_or_else(|| {
        let row = rec.position().map_or(0, |p| p.line());
        PipelineError::new(stage, ErrorKind::Input, format!("bad timestamp {:?}", &rec[i]))
            .in_file(file)
            .at(Location::Row(row))
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn manifest_path(ctx: &Context) -> PathBuf {
    ctx.out.join(MANIFEST_FILE)
}

/// Current manifest for this configuration; a manifest for a different
/// configuration is discarded.
pub fn load_manifest(out: &Path) -> Option<Manifest> {
    let bytes = fs::read(out.join(MANIFEST_FILE)).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn store_record(ctx: &Context, stage: Stage, record: StageRecord) -> Result<(), PipelineError> {
    let mut manifest = load_manifest(&ctx.out)
        .filter(|m| m.config_sha256 == ctx.config_sha256)
        .unwrap_or_else(|| Manifest::empty(ctx));
    manifest.stages.insert(stage, record);
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| numerical(stage, e))?;
    bytes.push(b'\n');
    let path = manifest_path(ctx);
    fs::write(&path, bytes)
        .map_err(|e| PipelineError::new(stage, ErrorKind::Input, e.to_string()).in_file(path))
}

fn run_stage<F>(ctx: &Context, stage: Stage, body: F) -> Result<StageRecord, PipelineError>
where
    F: FnOnce(&mut StageIo<'_>) -> Result<(), PipelineError>,
{
    fs::create_dir_all(&ctx.out).map_err(|e| {
        PipelineError::new(stage, ErrorKind::Input, e.to_string()).in_file(&ctx.out)
    })?;
    let mut io = StageIo::new(ctx, stage);
    match body(&mut io) {
        Ok(()) => {
            let record = io.record.clone();
            if let Err(e) = store_record(ctx, stage, record.clone()) {
                io.cleanup();
                return Err(e);
            }
            Ok(record)
        }
        Err(e) => {
            io.cleanup();
            Err(e)
        }
    }
}

/// Decodes configured binary frame logs and NMEA logs and merges them with
/// any `samples.csv` in the input directory into the output `samples.csv`.
pub fn parse(ctx: &Context) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Parse, |io| {
        let stage = Stage::Parse;
        let cfg = &ctx.config;
        let mut samples: Vec<Sample> = Vec::new();
        let mut sources = 0;
        if ctx.input.join(SAMPLES_FILE).is_file() {
            let bytes = io.read(FileRoot::Input, SAMPLES_FILE)?;
            samples = read_samples_csv(&bytes[..]).map_err(io.csv_err(SAMPLES_FILE))?;
            io.count("samples_from_csv", samples.len() as u64);
            sources += 1;
        }
        let mut errors: Vec<(String, usize, FrameErrorKind)> = Vec::new();
        for log in &cfg.frame_logs {
            let name = log.path.to_string_lossy().into_owned();
            let period = log.period_s.unwrap_or(cfg.study.sample_period_s);
            if !(period > 0.0 && period.is_finite()) {
                return Err(PipelineError::new(stage, ErrorKind::Config, "frame log period_s must be positive")
                    .in_file(&name));
            }
            let bytes = io.read(FileRoot::Config, &name)?;
            sources += 1;
            let mut slot: u64 = 0;
            for item in FrameScanner::new(&bytes) {
                match item {
                    Ok((_, frame)) => {
                        let t = log.start
                            + Duration::milliseconds((slot as f64 * period * 1000.0).round() as i64);
                        slot += 1;
                        if !frame.quality().is_clean() {
                            io.count("frames_flagged", 1);
                        }
                        io.count("frames_decoded", 1);
                        samples.push(Sample {
                            timestamp: t,
                            node_id: log.node_id.clone(),
                            location_class: log.location_class,
                            pm25: f64::from(frame.pm25_atm),
                            pm25_std: Some(f64::from(frame.pm25_std)),
                            fix: None,
                            env: None,
                        });
                    }
                    Err(e) => {
                        if e.kind != FrameErrorKind::BadStartBytes {
                            slot += 1;
                        }
                        io.count("frame_errors", 1);
                        errors.push((name.clone(), e.offset, e.kind));
                    }
                }
            }
        }
        samples.sort_by_key(|s| s.timestamp);
        for log in &cfg.nmea_logs {
            let name = log.path.to_string_lossy().into_owned();
            let bytes = io.read(FileRoot::Config, &name)?;
            let text = String::from_utf8_lossy(&bytes);
            let (fixes, errs) = NmeaLog::new(cfg.study.start.date_naive()).parse(&text);
            io.count("nmea_fixes", fixes.len() as u64);
            io.count("nmea_errors", errs.len() as u64);
            errors.extend(errs.iter().map(|e| (name.clone(), e.offset, e.kind)));
            let unmatched = attach_fixes(&mut samples, &log.node_id, fixes, cfg.study.sample_period_s);
            io.count("nmea_fixes_unmatched", unmatched);
        }
        if sources == 0 {
            return Err(PipelineError::new(
                stage,
                ErrorKind::Input,
                format!("no {SAMPLES_FILE} in the input directory and no frame logs configured"),
            )
            .in_file(&ctx.input));
        }
        io.count("samples_out", samples.len() as u64);
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).map_err(|e| numerical(stage, e))?;
        io.write(SAMPLES_FILE, buf)?;
        let buf = write_csv(stage, &PARSE_ERRORS_HEADER, |w| {
            for (src, off, kind) in &errors {
                w.write_record([src.clone(), off.to_string(), format!("{kind:?}")])?;
            }
            Ok(())
        })?;
        io.write(PARSE_ERRORS_FILE, buf)
    })
}

/// Attaches each fix to the nearest sample of `node` within half a sample
/// period. Returns the number of fixes left unattached.
fn attach_fixes(samples: &mut [Sample], node: &str, fixes: Vec<GpsFix>, period_s: f64) -> u64 {
    let mut index: BTreeMap<DateTime<Utc>, usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.node_id == node {
            index.entry(s.timestamp).or_insert(i);
        }
    }
    let half = Duration::milliseconds((period_s * 500.0).round() as i64);
    let mut unmatched = 0;
    for fix in fixes {
        let t = fix.timestamp;
        let nearest = index
            .range(t - half..=t + half)
            .min_by_key(|(ts, _)| (**ts - t).num_milliseconds().abs())
            .map(|(_, &i)| i);
        match nearest {
            Some(i) => samples[i].fix = Some(fix),
            None => unmatched += 1,
        }
    }
    unmatched
}

/// Validates samples, writes 10-minute and hourly windows per node, the
/// accepted GPS fixes, and the hourly reference series.
pub fn ingest(ctx: &Context) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Ingest, |io| {
        let stage = Stage::Ingest;
        let cfg = &ctx.config;
        let span = cfg
            .study_window()
            .map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
        let registry = cfg.node_registry();
        let bytes = io.read(FileRoot::Output, SAMPLES_FILE)?;
        let samples = read_samples_csv(&bytes[..]).map_err(io.csv_err(SAMPLES_FILE))?;
        drop(bytes);
        io.count("samples_read", samples.len() as u64);
        let mut by_node: BTreeMap<String, Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
        let mut fixes: Vec<(String, GpsFix)> = Vec::new();
        for s in samples {
            match check_sample(&s, &span, &registry) {
                Ok(()) => {
                    if let Some(fix) = s.fix {
                        fixes.push((s.node_id.clone(), fix));
                    }
                    by_node.entry(s.node_id).or_default().push((s.timestamp, s.pm25));
                }
                Err(r) => {
                    let name = match r {
                        Rejection::NegativeOrNonFinite => "rejected_negative_or_nonfinite",
                        Rejection::OutsideStudyWindow => "rejected_outside_window",
                        Rejection::UnknownNode => "rejected_unknown_node",
                    };
                    io.count(name, 1);
                }
            }
        }
        for name in [
            "rejected_negative_or_nonfinite",
            "rejected_outside_window",
            "rejected_unknown_node",
        ] {
            io.count(name, 0);
        }
        io.count("samples_accepted", by_node.values().map(|v| v.len() as u64).sum());

        let rule = cfg.coverage_rule();
        let mut tens = Vec::new();
        let mut hours = Vec::new();
        for (node, points) in by_node {
            let raw = TimeSeries::raw(node, points);
            tens.push(aggregate(&raw, WindowLen::TenMin, &rule).map_err(|e| numerical(stage, e))?);
            hours.push(aggregate(&raw, WindowLen::Hour, &rule).map_err(|e| numerical(stage, e))?);
        }
        for (name, series) in [("10min", &tens), ("hourly", &hours)] {
            let all: usize = series.iter().map(|s| s.windows.len()).sum();
            let valid: usize = series.iter().map(|s| s.valid_windows().count()).sum();
            io.count(&format!("windows_{name}"), all as u64);
            io.count(&format!("invalid_windows_{name}"), (all - valid) as u64);
        }
        let mut buf = Vec::new();
        write_windows_csv(&mut buf, &tens).map_err(|e| numerical(stage, e))?;
        io.write(WINDOWS_10MIN_FILE, buf)?;
        let mut buf = Vec::new();
        write_windows_csv(&mut buf, &hours).map_err(|e| numerical(stage, e))?;
        io.write(WINDOWS_HOURLY_FILE, buf)?;

        io.count("fixes", fixes.len() as u64);
        let buf = write_csv(stage, &FIX_HEADER, |w| {
            for (node, f) in &fixes {
                w.write_record([
                    fmt_time(f.timestamp),
                    node.clone(),
                    f.latitude.to_string(),
                    f.longitude.to_string(),
                    u8::from(f.valid).to_string(),
                    opt_cell(f.hdop),
                ])?;
            }
            Ok(())
        })?;
        io.write(FIXES_FILE, buf)?;

        let bytes = io.read(FileRoot::Input, REFERENCE_FILE)?;
        let records = read_reference_csv(&bytes[..]).map_err(io.csv_err(REFERENCE_FILE))?;
        io.count("reference_records", records.len() as u64);
        let mut kept = Vec::with_capacity(records.len());
        let (mut outside, mut bad) = (0, 0);
        for r in records {
            if !span.contains(r.timestamp) {
                outside += 1;
            } else if !(r.pm25.is_finite() && r.pm25 >= 0.0) {
                bad += 1;
            } else {
                kept.push(r);
            }
        }
        io.count("reference_outside_window", outside);
        io.count("reference_negative_or_nonfinite", bad);
        if kept.is_empty() {
            return Err(PipelineError::new(stage, ErrorKind::Input, "no usable reference records inside the study window")
                .in_file(REFERENCE_FILE));
        }
        let mut series = reference_series(&kept);
        let mean = reference_mean(&series, cfg.study.min_monitors).map_err(|e| numerical(stage, e))?;
        io.count(
            "reference_hours_below_min_monitors",
            mean.windows.iter().filter(|w| !w.valid).count() as u64,
        );
        series.push(mean);
        let mut buf = Vec::new();
        write_windows_csv(&mut buf, &series).map_err(|e| numerical(stage, e))?;
        io.write(REFERENCE_HOURLY_FILE, buf)
    })
}

fn read_fixes(stage: Stage, bytes: &[u8]) -> Result<Vec<(String, GpsFix)>, PipelineError> {
    read_table(stage, FIXES_FILE, bytes, &FIX_HEADER)?
        .iter()
        .map(|rec| {
            let lat = cell_f64(stage, FIXES_FILE, rec, 2)?.unwrap_or(0.0);
            let lon = cell_f64(stage, FIXES_FILE, rec, 3)?.unwrap_or(0.0);
            Ok((
                rec[1].to_string(),
                GpsFix {
                    timestamp: cell_time(stage, FIXES_FILE, rec, 0)?,
                    latitude: lat,
                    longitude: lon,
                    valid: &rec[4] == "1",
                    hdop: cell_f64(stage, FIXES_FILE, rec, 5)?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub form: ModelForm,
    pub fitted: bool,
    pub beta0: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    pub bic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub training_node: String,
    pub n_pairs: usize,
    pub dropped_unpaired: usize,
    pub candidates: Vec<CandidateReport>,
    pub selected: ModelForm,
    /// Raw sensor against reference.
    pub pre_calibration: Accuracy,
    /// Calibrated (clamped) sensor against reference.
    pub post_calibration: Accuracy,
}

/// Fits every candidate on `node` (default: the configured calibration node)
/// against the reference mean, keeps the BIC winner, and applies it to all
/// sensor windows.
pub fn calibrate(ctx: &Context, node: Option<&str>) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Calibrate, |io| {
        let stage = Stage::Calibrate;
        let cfg = &ctx.config;
        let node = node.unwrap_or(&cfg.study.calibration_node);
        if !cfg.node_registry().contains(node) {
            return Err(PipelineError::new(stage, ErrorKind::Config, format!("node {node} is not registered")));
        }
        let bytes = io.read(FileRoot::Output, WINDOWS_HOURLY_FILE)?;
        let hourly = read_windows_csv(&bytes[..]).map_err(io.csv_err(WINDOWS_HOURLY_FILE))?;
        let bytes = io.read(FileRoot::Output, REFERENCE_HOURLY_FILE)?;
        let refs = read_windows_csv(&bytes[..]).map_err(io.csv_err(REFERENCE_HOURLY_FILE))?;
        let reference = refs.get(REFERENCE_MEAN_ID).ok_or_else(|| {
            PipelineError::new(stage, ErrorKind::Input, format!("no {REFERENCE_MEAN_ID} series"))
                .in_file(REFERENCE_HOURLY_FILE)
        })?;
        let sensor = hourly
            .get(node)
            .filter(|s| s.valid_windows().next().is_some())
            .ok_or_else(|| {
                PipelineError::new(
                    stage,
                    ErrorKind::Input,
                    format!("calibration node {node} has no valid hourly windows"),
                )
                .in_file(WINDOWS_HOURLY_FILE)
            })?;
        let alignment = align_pairs(sensor, reference).map_err(|e| numerical(stage, e))?;
        let pairs = pairs_from_alignment(&alignment.pairs);
        io.count("pairs", pairs.len() as u64);
        io.count("dropped_unpaired", alignment.dropped as u64);
        let comparison = ModelComparison::run(&pairs);
        let model = comparison.best().map_err(|e| {
            numerical(stage, format!("calibration of {node} failed: {e}"))
        })?;
        let candidates = comparison
            .candidates
            .iter()
            .map(|(form, r)| match r {
                Ok(m) => CandidateReport {
                    form: *form,
                    fitted: true,
                    beta0: Some(m.beta0),
                    beta1: Some(m.beta1),
                    beta2: m.beta2,
                    r2: m.metrics.r2,
                    rmse: Some(m.metrics.rmse),
                    bic: Some(m.metrics.bic),
                    error: None,
                },
                Err(e) => CandidateReport {
                    form: *form,
                    fitted: false,
                    beta0: None,
                    beta1: None,
                    beta2: None,
                    r2: None,
                    rmse: None,
                    bic: None,
                    error: Some(e.to_string()),
                },
            })
            .collect();
        let report = FitReport {
            training_node: node.to_string(),
            n_pairs: pairs.len(),
            dropped_unpaired: alignment.dropped,
            candidates,
            selected: model.form,
            pre_calibration: accuracy_of(|x| x, &pairs),
            post_calibration: accuracy_of(|x| model.predict(x).max(0.0), &pairs),
        };
        io.write_json(MODEL_FILE, &ModelDocument::new(&model, node, &alignment.pairs))?;
        io.write_json(FIT_REPORT_FILE, &report)?;

        let bytes = io.read(FileRoot::Output, WINDOWS_10MIN_FILE)?;
        let tens = read_windows_csv(&bytes[..]).map_err(io.csv_err(WINDOWS_10MIN_FILE))?;
        for (name, file, series) in [
            ("clamped_hourly", CALIBRATED_HOURLY_FILE, &hourly),
            ("clamped_10min", CALIBRATED_10MIN_FILE, &tens),
        ] {
            let mut out = Vec::with_capacity(series.len());
            let mut clamped = 0;
            for s in series.values() {
                let applied = apply(&model, s);
                clamped += applied.clamped;
                out.push(applied.series);
            }
            io.count(name, clamped as u64);
            let mut buf = Vec::new();
            write_windows_csv(&mut buf, &out).map_err(|e| numerical(stage, e))?;
            io.write(file, buf)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonSite {
    pub location_id: String,
    pub during_mean_io: f64,
    pub post_mean_io: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonReport {
    pub during: Option<Span>,
    pub post: Option<Span>,
    /// Sites with I/O ratios in both windows; the test pairs (during, post).
    pub sites: Vec<WilcoxonSite>,
    pub result: Option<WilcoxonResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCorrelation {
    pub id: String,
    pub r: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    /// Calibrated outdoor sensors against the reference mean.
    pub outdoor_vs_reference: Vec<NodeCorrelation>,
    /// Indoor against outdoor, per site.
    pub indoor_vs_outdoor: Vec<NodeCorrelation>,
}

fn correlate(id: &str, a: &TimeSeries, b: &TimeSeries, stage: Stage) -> Result<NodeCorrelation, PipelineError> {
    let aligned = align_pairs(a, b).map_err(|e| numerical(stage, e))?;
    let pairs: Vec<(f64, f64)> = aligned.pairs.iter().map(|p| (p.a, p.b)).collect();
    Ok(NodeCorrelation {
        id: id.to_string(),
        r: pearson(&pairs),
        n_pairs: pairs.len(),
    })
}

/// Network groups for the network-average output: HEPA indoor, non-HEPA
/// indoor, outdoor sensors.
pub fn network_groups(cfg: &RunConfig) -> Vec<(&'static str, Vec<String>)> {
    let mut hepa = BTreeSet::new();
    let mut non_hepa = BTreeSet::new();
    let mut outdoor = BTreeSet::new();
    for s in &cfg.sites {
        if let Some(n) = &s.indoor_node {
            if s.hepa {
                hepa.insert(n.clone());
            } else {
                non_hepa.insert(n.clone());
            }
        }
        outdoor.extend(s.outdoor_node.iter().cloned());
    }
    vec![
        ("hepa", hepa.into_iter().collect()),
        ("non_hepa", non_hepa.into_iter().collect()),
        ("outdoor", outdoor.into_iter().collect()),
    ]
}

/// Site summary table, hourly I/O ratios, network averages, the paired
/// during/post test and correlations, all from calibrated hourly windows.
pub fn analyze(ctx: &Context) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Analyze, |io| {
        let stage = Stage::Analyze;
        let cfg = &ctx.config;
        let span = cfg
            .study_window()
            .map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
        let bytes = io.read(FileRoot::Output, CALIBRATED_HOURLY_FILE)?;
        let cal = read_windows_csv(&bytes[..]).map_err(io.csv_err(CALIBRATED_HOURLY_FILE))?;
        let bytes = io.read(FileRoot::Output, REFERENCE_HOURLY_FILE)?;
        let refs = read_windows_csv(&bytes[..]).map_err(io.csv_err(REFERENCE_HOURLY_FILE))?;
        let restricted: BTreeMap<&str, TimeSeries> =
            cal.iter().map(|(k, v)| (k.as_str(), v.restrict(&span))).collect();
        let get = |n: &Option<String>| n.as_deref().and_then(|n| restricted.get(n));

        let streams: Vec<SiteStreams<'_>> = cfg
            .sites
            .iter()
            .map(|s| SiteStreams {
                location_id: &s.location_id,
                indoor: get(&s.indoor_node),
                outdoor: get(&s.outdoor_node),
            })
            .collect();
        let rows = summarize_table(&streams, &span).map_err(|e| numerical(stage, e))?;
        io.count("table2_rows", rows.len() as u64);
        let buf = write_csv(stage, &SiteSummaryRow::HEADER, |w| {
            rows.iter().try_for_each(|r| w.write_record(r.cells()))
        })?;
        io.write(TABLE2_FILE, buf)?;

        let mut ratios = Vec::new();
        let mut skipped = 0;
        for s in &streams {
            if let (Some(i), Some(o)) = (s.indoor, s.outdoor) {
                let r = io_ratio(s.location_id, i, o).map_err(|e| numerical(stage, e))?;
                skipped += r.skipped_nonpositive;
                let aligned = align_pairs(i, o).map_err(|e| numerical(stage, e))?;
                let values: BTreeMap<_, _> = aligned.pairs.iter().map(|p| (p.start, (p.a, p.b))).collect();
                ratios.push((r, values));
            }
        }
        io.count("io_skipped_nonpositive_outdoor", skipped as u64);
        let buf = write_csv(stage, &IO_HEADER, |w| {
            for (r, values) in &ratios {
                for (t, ratio) in &r.ratios {
                    let (a, b) = values[t];
                    w.write_record([
                        r.location_id.clone(),
                        fmt_time(*t),
                        a.to_string(),
                        b.to_string(),
                        ratio.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        io.write(IO_HOURLY_FILE, buf)?;

        let reference = refs.get(REFERENCE_MEAN_ID).map(|r| r.restrict(&span));
        let mut groups: Vec<(&str, Vec<&TimeSeries>)> = network_groups(cfg)
            .into_iter()
            .map(|(g, nodes)| (g, nodes.iter().filter_map(|n| restricted.get(n.as_str())).collect()))
            .collect();
        if let Some(r) = &reference {
            groups.push(("reference", vec![r]));
        }
        let mut network = Vec::new();
        for (g, members) in &groups {
            network.push((*g, network_average(members).map_err(|e| numerical(stage, e))?));
        }
        let buf = write_csv(stage, &NETWORK_HEADER, |w| {
            for (g, points) in &network {
                for p in points {
                    w.write_record([
                        g.to_string(),
                        fmt_time(p.start),
                        p.mean.to_string(),
                        opt_cell(p.sigma),
                        p.n.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        io.write(NETWORK_AVG_FILE, buf)?;

        let mut report = WilcoxonReport {
            during: cfg.wilcoxon.map(|w| w.during),
            post: cfg.wilcoxon.map(|w| w.post),
            sites: Vec::new(),
            result: None,
        };
        if let Some(windows) = &cfg.wilcoxon {
            let during = windows.during.study_window().map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
            let post = windows.post.study_window().map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
            let mean_in = |r: &[(DateTime<Utc>, f64)], w: &crate::timeseries::StudyWindow| {
                let v: Vec<f64> = r.iter().filter(|(t, _)| w.contains(*t)).map(|x| x.1).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            for (r, _) in &ratios {
                if let (Some(d), Some(p)) = (mean_in(&r.ratios, &during), mean_in(&r.ratios, &post)) {
                    report.sites.push(WilcoxonSite {
                        location_id: r.location_id.clone(),
                        during_mean_io: d,
                        post_mean_io: p,
                    });
                }
            }
            if !report.sites.is_empty() {
                let pairs: Vec<(f64, f64)> = report.sites.iter().map(|s| (s.during_mean_io, s.post_mean_io)).collect();
                report.result = Some(wilcoxon_signed_rank(&pairs));
            }
        }
        io.count("wilcoxon_pairs", report.sites.len() as u64);
        io.write_json(WILCOXON_FILE, &report)?;

        let mut summary = AnalysisSummary {
            outdoor_vs_reference: Vec::new(),
            indoor_vs_outdoor: Vec::new(),
        };
        if let Some(r) = &reference {
            for (_, nodes) in network_groups(cfg).into_iter().filter(|(g, _)| *g == "outdoor") {
                for n in nodes {
                    if let Some(s) = restricted.get(n.as_str()) {
                        summary.outdoor_vs_reference.push(correlate(&n, s, r, stage)?);
                    }
                }
            }
        }
        for s in &streams {
            if let (Some(i), Some(o)) = (s.indoor, s.outdoor) {
                summary.indoor_vs_outdoor.push(correlate(s.location_id, i, o, stage)?);
            }
        }
        io.write_json(ANALYSIS_FILE, &summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub labels: Vec<MicroenvLabel>,
    pub exposure_pct: f64,
    pub time_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub node_id: Option<String>,
    pub days: usize,
    pub shares: Vec<LabelShare>,
    pub classified_windows: usize,
    pub unclassified_windows: usize,
    pub carried_windows: usize,
    pub invalid_fixes: usize,
}

/// Labels the personal 10-minute series by geofence and attributes daily
/// exposure to home, office and other.
pub fn attribute(ctx: &Context) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Attribute, |io| {
        let stage = Stage::Attribute;
        let cfg = &ctx.config;
        let mut summary = ExposureSummary {
            node_id: None,
            days: 0,
            shares: Vec::new(),
            classified_windows: 0,
            unclassified_windows: 0,
            carried_windows: 0,
            invalid_fixes: 0,
        };
        let Some(personal) = &cfg.personal else {
            io.write(ATTRIBUTION_FILE, write_csv(stage, &crate::exposure::ATTRIBUTION_HEADER, |_| Ok(()))?)?;
            io.write(LABELS_FILE, write_csv(stage, &LABELS_HEADER, |_| Ok(()))?)?;
            return io.write_json(EXPOSURE_SHARES_FILE, &summary);
        };
        let span = cfg
            .study_window()
            .map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
        let offset = cfg
            .offset()
            .map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
        let bytes = io.read(FileRoot::Output, CALIBRATED_10MIN_FILE)?;
        let tens = read_windows_csv(&bytes[..]).map_err(io.csv_err(CALIBRATED_10MIN_FILE))?;
        let series = tens.get(&personal.node_id).ok_or_else(|| {
            PipelineError::new(
                stage,
                ErrorKind::Input,
                format!("personal node {} has no 10-minute windows", personal.node_id),
            )
            .in_file(CALIBRATED_10MIN_FILE)
        })?;
        let bytes = io.read(FileRoot::Output, FIXES_FILE)?;
        let fixes: Vec<GpsFix> = read_fixes(stage, &bytes)?
            .into_iter()
            .filter(|(n, _)| *n == personal.node_id)
            .map(|(_, f)| f)
            .collect();
        let labeled = label_series(
            &series.restrict(&span),
            &fixes,
            &cfg.geofences,
            &LabelConfig {
                carry_forward: cfg.carry_forward(),
            },
        )
        .map_err(|e| PipelineError::new(stage, ErrorKind::Config, e.to_string()))?;
        let attrs = attribute_all(&labeled, offset);

        summary.node_id = Some(personal.node_id.clone());
        summary.days = attrs.len();
        summary.classified_windows = labeled.windows.len() - labeled.unclassified;
        summary.unclassified_windows = labeled.unclassified;
        summary.carried_windows = labeled.windows.iter().filter(|w| w.carried).count();
        summary.invalid_fixes = labeled.invalid_fixes;
        let mut selections: Vec<Vec<MicroenvLabel>> = MicroenvLabel::ALL.iter().map(|&l| vec![l]).collect();
        selections.push(vec![MicroenvLabel::Office, MicroenvLabel::Other]);
        for labels in selections {
            if let Some(s) = exposure_share(&attrs, &labels) {
                summary.shares.push(LabelShare {
                    labels,
                    exposure_pct: s.exposure_pct,
                    time_pct: s.time_pct,
                });
            }
        }
        io.count("labeled_windows", labeled.windows.len() as u64);
        io.count("unclassified_windows", summary.unclassified_windows as u64);
        io.count("carried_windows", summary.carried_windows as u64);
        io.count("invalid_fixes", summary.invalid_fixes as u64);
        io.count("days", attrs.len() as u64);

        let mut buf = Vec::new();
        write_attribution_csv(&mut buf, &attrs).map_err(|e| numerical(stage, e))?;
        io.write(ATTRIBUTION_FILE, buf)?;
        let buf = write_csv(stage, &LABELS_HEADER, |w| {
            for lw in &labeled.windows {
                w.write_record([
                    fmt_time(lw.start),
                    lw.pm25.to_string(),
                    lw.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
                    u8::from(lw.carried).to_string(),
                ])?;
            }
            Ok(())
        })?;
        io.write(LABELS_FILE, buf)?;
        io.write_json(EXPOSURE_SHARES_FILE, &summary)
    })
}

/// Writes figure-shaped CSV bundles under `report/`.
pub fn report(ctx: &Context) -> Result<StageRecord, PipelineError> {
    run_stage(ctx, Stage::Report, |io| report::write_bundles(io))
}

/// Runs every stage in order. On failure, every file this run produced is
/// removed, including the manifest.
pub fn run(ctx: &Context) -> Result<Manifest, PipelineError> {
    let _ = fs::remove_file(manifest_path(ctx));
    let mut produced: Vec<String> = Vec::new();
    let result = (|| {
        for stage in Stage::PIPELINE {
            let record = match stage {
                Stage::Parse => parse(ctx),
                Stage::Ingest => ingest(ctx),
                Stage::Calibrate => calibrate(ctx, None),
                Stage::Analyze => analyze(ctx),
                Stage::Attribute => attribute(ctx),
                Stage::Report => report(ctx),
                Stage::Config => unreachable!("not a pipeline stage"),
            }?;
            produced.extend(record.outputs.into_iter().map(|o| o.file));
        }
        load_manifest(&ctx.out).ok_or_else(|| {
            PipelineError::new(Stage::Report, ErrorKind::Input, "manifest missing after run")
                .in_file(manifest_path(ctx))
        })
    })();
    if result.is_err() {
        for f in &produced {
            let _ = fs::remove_file(ctx.out.join(f));
        }
        let _ = fs::remove_file(manifest_path(ctx));
    }
    result
}

pub use report::REPORT_DIR;

fn label_from_str(s: &str) -> Option<MicroenvLabel> {
    MicroenvLabel::ALL.into_iter().find(|l| l.as_str() == s)
}
