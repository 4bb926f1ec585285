//! Run configuration: study window, site metadata, geofences and input logs.
//!
//! The on-disk format is TOML. Instants are RFC 3339 strings
//! (`start = "2020-09-10T00:00:00Z"`) and local clock times are `"HH:MM"`
//! strings (`"24:00"` is allowed as an interval end).

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Duration, FixedOffset, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::exposure::{validate_fences, ExposureError, Geofence};
use crate::timeseries::{CoverageRule, LocationClass, StudyWindow};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Fence(#[from] ExposureError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// A local clock interval repeating daily. Wraps midnight when `from > to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DailyInterval {
    pub from_min: u32,
    pub to_min: u32,
}

fn parse_hhmm(s: &str) -> Option<u32> {
    let (h, m) = s.trim().split_once(':')?;
    if h.len() != 2 || m.len() != 2 {
        return None;
    }
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    match (h, m) {
        (24, 0) => Some(1440),
        (0..=23, 0..=59) => Some(h * 60 + m),
        _ => None,
    }
}

fn fmt_hhmm(min: u32) -> String {
    format!("{:02}:{:02}", min / 60, min % 60)
}

impl DailyInterval {
    pub fn new(from: &str, to: &str) -> Option<Self> {
        Some(DailyInterval {
            from_min: parse_hhmm(from)?,
            to_min: parse_hhmm(to)?,
        })
    }

    /// Length in minutes.
    pub fn len_min(&self) -> u32 {
        if self.from_min <= self.to_min {
            self.to_min - self.from_min
        } else {
            1440 - self.from_min + self.to_min
        }
    }

    pub fn contains_minute(&self, minute_of_day: f64) -> bool {
        let (f, t) = (f64::from(self.from_min), f64::from(self.to_min));
        if self.from_min <= self.to_min {
            f <= minute_of_day && minute_of_day < t
        } else {
            minute_of_day >= f || minute_of_day < t
        }
    }

    pub fn contains(&self, t: DateTime<Utc>, offset: FixedOffset) -> bool {
        self.contains_minute(minute_of_day(t, offset))
    }
}

/// Local minutes since midnight, with sub-minute precision.
pub fn minute_of_day(t: DateTime<Utc>, offset: FixedOffset) -> f64 {
    let local = t.with_timezone(&offset);
    f64::from(local.hour() * 60 + local.minute())
        + (f64::from(local.second()) + f64::from(local.nanosecond()) / 1e9) / 60.0
}

#[derive(Serialize, Deserialize)]
struct IntervalRepr {
    from: String,
    to: String,
}

impl Serialize for DailyInterval {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        IntervalRepr {
            from: fmt_hhmm(self.from_min),
            to: fmt_hhmm(self.to_min),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DailyInterval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = IntervalRepr::deserialize(d)?;
        DailyInterval::new(&r.from, &r.to).ok_or_else(|| {
            serde::de::Error::custom(format!("bad clock interval {}..{}", r.from, r.to))
        })
    }
}

impl fmt::Display for DailyInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", fmt_hhmm(self.from_min), fmt_hhmm(self.to_min))
    }
}

/// One sampling location, mirroring the site-characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetadata {
    pub location_id: String,
    #[serde(default)]
    pub building_type: String,
    #[serde(default)]
    pub size_sqft: Option<f64>,
    #[serde(default)]
    pub hvac: bool,
    /// Drives the HEPA / non-HEPA grouping.
    #[serde(default)]
    pub hepa: bool,
    #[serde(default)]
    pub window_opening: String,
    #[serde(default)]
    pub indoor_sources: String,
    #[serde(default)]
    pub indoor_node: Option<String>,
    /// May name another site's outdoor node when two indoor monitors share one.
    #[serde(default)]
    pub outdoor_node: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Span {
    pub fn study_window(&self) -> Result<StudyWindow, ConfigError> {
        StudyWindow::new(self.start, self.end)
            .map_err(|_| invalid(format!("window {} .. {} is not well ordered", self.start, self.end)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonWindows {
    pub during: Span,
    pub post: Span,
}

fn default_offset() -> f64 {
    -7.0
}
fn default_period() -> f64 {
    10.0
}
fn default_coverage() -> f64 {
    0.75
}
fn default_monitors() -> usize {
    1
}
fn default_night() -> DailyInterval {
    DailyInterval {
        from_min: 22 * 60,
        to_min: 6 * 60,
    }
}
fn default_carry() -> i64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Local reporting offset; used for day boundaries and the night band only.
    #[serde(default = "default_offset")]
    pub utc_offset_hours: f64,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    #[serde(default = "default_coverage")]
    pub min_coverage: f64,
    #[serde(default = "default_monitors")]
    pub min_monitors: usize,
    pub calibration_node: String,
    #[serde(default = "default_night")]
    pub nighttime: DailyInterval,
    #[serde(default = "default_carry")]
    pub carry_forward_min: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalConfig {
    pub node_id: String,
    /// Fixed monitors at the wearer's residence, shown alongside the personal trace.
    #[serde(default)]
    pub home_nodes: Vec<String>,
    /// Outdoor node used for the personal reduction figure.
    #[serde(default)]
    pub outdoor_node: Option<String>,
}

/// A binary frame log: consecutive frame slots `period_s` apart from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLogConfig {
    pub path: PathBuf,
    pub node_id: String,
    pub location_class: LocationClass,
    pub start: DateTime<Utc>,
    #[serde(default)]
    pub period_s: Option<f64>,
}

/// An NMEA log whose fixes are attached to the samples of `node_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmeaLogConfig {
    pub path: PathBuf,
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub study: StudyConfig,
    #[serde(default)]
    pub wilcoxon: Option<WilcoxonWindows>,
    #[serde(default)]
    pub sites: Vec<SiteMetadata>,
    #[serde(default)]
    pub personal: Option<PersonalConfig>,
    #[serde(default)]
    pub geofences: Vec<Geofence>,
    #[serde(default)]
    pub frame_logs: Vec<FrameLogConfig>,
    #[serde(default)]
    pub nmea_logs: Vec<NmeaLogConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.study;
        self.study_window()?;
        if !(s.sample_period_s > 0.0 && s.sample_period_s.is_finite()) {
            return Err(invalid("sample_period_s must be positive"));
        }
        if !(0.0..=1.0).contains(&s.min_coverage) {
            return Err(invalid("min_coverage must lie in [0, 1]"));
        }
        if s.min_monitors == 0 {
            return Err(invalid("min_monitors must be at least 1"));
        }
        if s.carry_forward_min < 0 {
            return Err(invalid("carry_forward_min must be non-negative"));
        }
        self.offset()?;
        if let Some(w) = &self.wilcoxon {
            w.during.study_window()?;
            w.post.study_window()?;
        }
        let mut ids = BTreeSet::new();
        for site in &self.sites {
            if !ids.insert(site.location_id.as_str()) {
                return Err(invalid(format!("duplicate location_id {}", site.location_id)));
            }
        }
        let nodes = self.node_registry();
        if !nodes.contains(&s.calibration_node) {
            return Err(invalid(format!(
                "calibration node {} is not registered to any site",
                s.calibration_node
            )));
        }
        if let Some(p) = &self.personal {
            for n in p.home_nodes.iter().chain(&p.outdoor_node) {
                if !nodes.contains(n) {
                    return Err(invalid(format!("personal reference node {n} is not registered")));
                }
            }
        }
        validate_fences(&self.geofences)?;
        Ok(())
    }

    pub fn study_window(&self) -> Result<StudyWindow, ConfigError> {
        Span {
            start: self.study.start,
            end: self.study.end,
        }
        .study_window()
    }

    pub fn offset(&self) -> Result<FixedOffset, ConfigError> {
        let secs = (self.study.utc_offset_hours * 3600.0).round();
        FixedOffset::east_opt(secs as i32)
            .filter(|_| secs.abs() < 86_400.0)
            .ok_or_else(|| invalid("utc_offset_hours out of range"))
    }

    pub fn coverage_rule(&self) -> CoverageRule {
        CoverageRule {
            sample_period_s: self.study.sample_period_s,
            min_coverage: self.study.min_coverage,
        }
    }

    pub fn carry_forward(&self) -> Duration {
        Duration::minutes(self.study.carry_forward_min)
    }

    /// Every node id a sample may carry.
    pub fn node_registry(&self) -> BTreeSet<String> {
        let mut nodes: BTreeSet<String> = self
            .sites
            .iter()
            .flat_map(|s| s.indoor_node.iter().chain(&s.outdoor_node))
            .cloned()
            .collect();
        if let Some(p) = &self.personal {
            nodes.insert(p.node_id.clone());
        }
        nodes
    }

    pub fn site(&self, location_id: &str) -> Option<&SiteMetadata> {
        self.sites.iter().find(|s| s.location_id == location_id)
    }
}
