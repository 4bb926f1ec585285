//! Personal exposure attribution to home / office / other microenvironments.
//!
//! GPS fixes are classified against circular geofences, 10-minute personal
//! windows take the majority label of their fixes, and each local day's
//! exposure is split as `AC_k = C_k * F_k / sum(F)` where `C_k` is the mean
//! concentration in environment `k` and `F_k` its share of classified time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{TimeSeries, WindowLen};
use crate::wire::GpsFix;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub const DEFAULT_RADIUS_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FenceLabel {
    Home,
    Office,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MicroenvLabel {
    Home,
    Office,
    Other,
}

impl MicroenvLabel {
    pub const ALL: [MicroenvLabel; 3] = [MicroenvLabel::Home, MicroenvLabel::Office, MicroenvLabel::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            MicroenvLabel::Home => "home",
            MicroenvLabel::Office => "office",
            MicroenvLabel::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MicroenvLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<FenceLabel> for MicroenvLabel {
    fn from(l: FenceLabel) -> Self {
        match l {
            FenceLabel::Home => MicroenvLabel::Home,
            FenceLabel::Office => MicroenvLabel::Office,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geofence {
    pub label: FenceLabel,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
}

fn default_radius() -> f64 {
    DEFAULT_RADIUS_M
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("geofence {0:?} has non-positive radius")]
    BadRadius(FenceLabel),
    #[error("geofence label {0:?} used more than once")]
    DuplicateLabel(FenceLabel),
    #[error("geofence {0:?} center is out of range")]
    BadCenter(FenceLabel),
    #[error("personal series must use 10-minute windows, got {0:?}")]
    NotTenMinute(WindowLen),
}

pub fn validate_fences(fences: &[Geofence]) -> Result<(), ExposureError> {
    let mut seen = BTreeSet::new();
    for f in fences {
        if !(f.radius_m > 0.0) {
            return Err(ExposureError::BadRadius(f.label));
        }
        if !(-90.0..=90.0).contains(&f.lat) || !(-180.0..=180.0).contains(&f.lon) {
            return Err(ExposureError::BadCenter(f.label));
        }
        if !seen.insert(f.label) {
            return Err(ExposureError::DuplicateLabel(f.label));
        }
    }
    Ok(())
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Label for a fix; `None` for an invalid fix. The fence boundary counts as
/// inside, and home wins over office where fences overlap.
pub fn classify_fix(fix: &GpsFix, fences: &[Geofence]) -> Option<MicroenvLabel> {
    if !fix.valid {
        return None;
    }
    let inside = |label: FenceLabel| {
        fences.iter().any(|f| {
            f.label == label && haversine_m(fix.latitude, fix.longitude, f.lat, f.lon) <= f.radius_m
        })
    };
    Some(if inside(FenceLabel::Home) {
        MicroenvLabel::Home
    } else if inside(FenceLabel::Office) {
        MicroenvLabel::Office
    } else {
        MicroenvLabel::Other
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// A window without valid fixes inherits the label of the most recent
    /// window with fixes if that window started at most this long before.
    pub carry_forward: Duration,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            carry_forward: Duration::minutes(30),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub start: DateTime<Utc>,
    pub pm25: f64,
    pub label: Option<MicroenvLabel>,
    /// Label inherited from an earlier window.
    pub carried: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub windows: Vec<LabeledWindow>,
    pub unclassified: usize,
    pub invalid_fixes: usize,
}

/// Majority label per 10-minute bin of fixes. Ties go to home, then office.
fn bin_labels(fixes: &[GpsFix], fences: &[Geofence]) -> (BTreeMap<DateTime<Utc>, MicroenvLabel>, usize) {
    let mut tallies: BTreeMap<DateTime<Utc>, [usize; 3]> = BTreeMap::new();
    let mut invalid = 0;
    for fix in fixes {
        match classify_fix(fix, fences) {
            Some(label) => {
                tallies.entry(WindowLen::TenMin.floor(fix.timestamp)).or_default()[label.index()] += 1;
            }
            None => invalid += 1,
        }
    }
    let labels = tallies
        .into_iter()
        .map(|(start, t)| {
            let best = MicroenvLabel::ALL
                .into_iter()
                .max_by(|a, b| t[a.index()].cmp(&t[b.index()]).then(b.cmp(a)))
                .expect("three labels");
            (start, best)
        })
        .collect();
    (labels, invalid)
}

/// Labels the valid windows of a 10-minute personal series from its GPS fixes.
pub fn label_series(
    personal: &TimeSeries,
    fixes: &[GpsFix],
    fences: &[Geofence],
    cfg: &LabelConfig,
) -> Result<LabeledSeries, ExposureError> {
    if personal.window_len != WindowLen::TenMin {
        return Err(ExposureError::NotTenMinute(personal.window_len));
    }
    let (bins, invalid_fixes) = bin_labels(fixes, fences);
    let mut unclassified = 0;
    let windows = personal
        .valid_windows()
        .map(|w| {
            let (label, carried) = match bins.get(&w.start) {
                Some(&l) => (Some(l), false),
                None => match bins.range(..w.start).next_back() {
                    Some((&prev, &l)) if w.start - prev <= cfg.carry_forward => (Some(l), true),
                    _ => (None, false),
                },
            };
            if label.is_none() {
                unclassified += 1;
            }
            LabeledWindow {
                start: w.start,
                pm25: w.mean,
                label,
                carried,
            }
        })
        .collect();
    Ok(LabeledSeries {
        windows,
        unclassified,
        invalid_fixes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvShare {
    pub label: MicroenvLabel,
    /// Mean PM2.5 over windows with this label; absent if none.
    pub c_mean: Option<f64>,
    pub f_fraction: f64,
    pub ac: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyAttribution {
    pub day: NaiveDate,
    /// Home, office, other.
    pub entries: [EnvShare; 3],
    pub total: f64,
    pub classified_windows: usize,
    pub unclassified_windows: usize,
}

impl DailyAttribution {
    pub fn entry(&self, label: MicroenvLabel) -> &EnvShare {
        &self.entries[label.index()]
    }

    pub fn unclassified_fraction(&self) -> f64 {
        let all = self.classified_windows + self.unclassified_windows;
        if all == 0 {
            0.0
        } else {
            self.unclassified_windows as f64 / all as f64
        }
    }
}

fn local_day(t: DateTime<Utc>, offset: FixedOffset) -> NaiveDate {
    t.with_timezone(&offset).date_naive()
}

fn attribute_windows<'a>(
    day: NaiveDate,
    windows: impl Iterator<Item = &'a LabeledWindow>,
) -> Option<DailyAttribution> {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut unclassified = 0;
    for w in windows {
        match w.label {
            Some(l) => {
                sums[l.index()] += w.pm25;
                counts[l.index()] += 1;
            }
            None => unclassified += 1,
        }
    }
    let classified: usize = counts.iter().sum();
    if classified == 0 {
        return None;
    }
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / classified as f64).collect();
    let f_total: f64 = f.iter().sum();
    let entries = MicroenvLabel::ALL.map(|label| {
        let i = label.index();
        let c_mean = (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
        EnvShare {
            label,
            c_mean,
            f_fraction: f[i],
            ac: c_mean.map_or(0.0, |c| c * f[i] / f_total),
            windows: counts[i],
        }
    });
    Some(DailyAttribution {
        day,
        total: entries.iter().map(|e| e.ac).sum(),
        entries,
        classified_windows: classified,
        unclassified_windows: unclassified,
    })
}

/// Attribution for local calendar day `day`; absent with no classified windows.
pub fn attribute_daily(
    labeled: &LabeledSeries,
    day: NaiveDate,
    offset: FixedOffset,
) -> Option<DailyAttribution> {
    attribute_windows(
        day,
        labeled
            .windows
            .iter()
            .filter(|w| local_day(w.start, offset) == day),
    )
}

/// Attribution for every local day that has at least one classified window.
pub fn attribute_all(labeled: &LabeledSeries, offset: FixedOffset) -> Vec<DailyAttribution> {
    let mut by_day: BTreeMap<NaiveDate, Vec<&LabeledWindow>> = BTreeMap::new();
    for w in &labeled.windows {
        by_day.entry(local_day(w.start, offset)).or_default().push(w);
    }
    by_day
        .into_iter()
        .filter_map(|(day, ws)| attribute_windows(day, ws.into_iter()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureShare {
    /// Percent of summed daily exposure attributed to the selected labels.
    pub exposure_pct: f64,
    /// Percent of classified time spent in the selected labels.
    pub time_pct: f64,
}

pub fn exposure_share(attrs: &[DailyAttribution], labels: &[MicroenvLabel]) -> Option<ExposureShare> {
    let total: f64 = attrs.iter().map(|a| a.total).sum();
    if !(total > 0.0) {
        return None;
    }
    let selected: f64 = attrs
        .iter()
        .flat_map(|a| labels.iter().map(move |&l| a.entry(l).ac))
        .sum();
    let weight: f64 = attrs.iter().map(|a| a.classified_windows as f64).sum();
    let time: f64 = attrs
        .iter()
        .map(|a| {
            a.classified_windows as f64 * labels.iter().map(|&l| a.entry(l).f_fraction).sum::<f64>()
        })
        .sum();
    Some(ExposureShare {
        exposure_pct: 100.0 * selected / total,
        time_pct: 100.0 * time / weight,
    })
}

pub const ATTRIBUTION_HEADER: [&str; 6] = ["date", "label", "c_mean", "f_fraction", "ac", "total_day"];

pub fn write_attribution_csv<W: Write>(w: W, attrs: &[DailyAttribution]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(ATTRIBUTION_HEADER)?;
    for a in attrs {
        for e in &a.entries {
            wtr.write_record([
                a.day.to_string(),
                e.label.to_string(),
                e.c_mean.map(|c| c.to_string()).unwrap_or_default(),
                e.f_fraction.to_string(),
                e.ac.to_string(),
                a.total.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
