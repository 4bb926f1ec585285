//! Timestamped PM2.5 samples and their block-averaged windows.
//!
//! All instants are UTC. Windows are aligned to multiples of their length
//! since the Unix epoch, so hourly windows start on the hour and daily
//! windows at UTC midnight.

pub(crate) mod io;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::GpsFix;

pub use io::{
    read_reference_csv, read_samples_csv, read_windows_csv, reference_series, write_reference_csv,
    write_samples_csv, write_windows_csv, CsvError, ReferenceRecord,
};
pub use store::{NodeWriter, SampleStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationClass {
    Indoor,
    Outdoor,
    Personal,
    Reference,
}

impl LocationClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocationClass::Indoor => "indoor",
            LocationClass::Outdoor => "outdoor",
            LocationClass::Personal => "personal",
            LocationClass::Reference => "reference",
        }
    }
}

impl fmt::Display for LocationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvReading {
    pub temp_c: Option<f64>,
    pub rh_pct: Option<f64>,
    pub pressure_hpa: Option<f64>,
}

/// One raw observation from a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp: DateTime<Utc>,
    pub node_id: String,
    pub location_class: LocationClass,
    /// Atmospheric ("ATM") PM2.5, ug/m3.
    pub pm25: f64,
    /// CF=1 ("standard") PM2.5, kept for reference only.
    pub pm25_std: Option<f64>,
    pub fix: Option<GpsFix>,
    pub env: Option<EnvReading>,
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl StudyWindow {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self, TsError> {
        if end <= start {
            return Err(TsError::EmptyStudyWindow);
        }
        Ok(StudyWindow { start, end })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WindowLen {
    Raw,
    TenMin,
    Hour,
    Day,
}

impl WindowLen {
    /// Window length in seconds; `None` for raw samples.
    pub fn seconds(self) -> Option<i64> {
        match self {
            WindowLen::Raw => None,
            WindowLen::TenMin => Some(600),
            WindowLen::Hour => Some(3600),
            WindowLen::Day => Some(86_400),
        }
    }

    pub fn from_seconds(s: i64) -> Option<Self> {
        match s {
            0 => Some(WindowLen::Raw),
            600 => Some(WindowLen::TenMin),
            3600 => Some(WindowLen::Hour),
            86_400 => Some(WindowLen::Day),
            _ => None,
        }
    }

    /// Start of the window containing `t`.
    pub fn floor(self, t: DateTime<Utc>) -> DateTime<Utc> {
        match self.seconds() {
            None => t,
            Some(len) => {
                let secs = t.timestamp().div_euclid(len) * len;
                Utc.timestamp_opt(secs, 0).single().expect("in-range instant")
            }
        }
    }
}

/// One block average. Raw series carry one window per sample with `n_samples = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: DateTime<Utc>,
    pub mean: f64,
    /// `n_samples / expected_samples`; may slightly exceed 1 under clock jitter.
    pub coverage: f64,
    pub n_samples: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub node_id: String,
    pub window_len: WindowLen,
    /// Sorted by `start`, no duplicates.
    pub windows: Vec<Window>,
}

impl TimeSeries {
    /// Builds a raw series from one node's PM2.5 values.
    pub fn raw<I>(node_id: impl Into<String>, points: I) -> Self
    where
        I: IntoIterator<Item = (DateTime<Utc>, f64)>,
    {
        let mut windows: Vec<Window> = points
            .into_iter()
            .map(|(start, mean)| Window {
                start,
                mean,
                coverage: 1.0,
                n_samples: 1,
                valid: true,
            })
            .collect();
        windows.sort_by(|a, b| a.start.cmp(&b.start).then(a.mean.total_cmp(&b.mean)));
        TimeSeries {
            node_id: node_id.into(),
            window_len: WindowLen::Raw,
            windows,
        }
    }

    pub fn from_samples<'a>(node_id: &str, samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        TimeSeries::raw(
            node_id,
            samples
                .into_iter()
                .filter(|s| s.node_id == node_id)
                .map(|s| (s.timestamp, s.pm25)),
        )
    }

    pub fn valid_windows(&self) -> impl Iterator<Item = &Window> + '_ {
        self.windows.iter().filter(|w| w.valid)
    }

    /// Arithmetic mean and maximum of valid window means inside `span`.
    pub fn mean_max_within(&self, span: &StudyWindow) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .valid_windows()
            .filter(|w| span.contains(w.start))
            .map(|w| w.mean)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, max))
    }

    pub fn restrict(&self, span: &StudyWindow) -> TimeSeries {
        TimeSeries {
            node_id: self.node_id.clone(),
            window_len: self.window_len,
            windows: self
                .windows
                .iter()
                .filter(|w| span.contains(w.start))
                .copied()
                .collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsError {
    #[error("cannot aggregate {from:?} windows into {to:?} windows")]
    BadAggregation { from: WindowLen, to: WindowLen },
    #[error("window lengths differ: {a:?} vs {b:?}")]
    WindowMismatch { a: WindowLen, b: WindowLen },
    #[error("reference series must be hourly, got {0:?}")]
    NotHourly(WindowLen),
    #[error("no reference monitors supplied")]
    NoMonitors,
    #[error("study window end must follow its start")]
    EmptyStudyWindow,
    #[error("sample period must be positive, got {0}")]
    BadSamplePeriod(f64),
}

/// Completeness rule for aggregated windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRule {
    /// Nominal raw sampling interval in seconds.
    pub sample_period_s: f64,
    /// Windows below this coverage are kept but flagged invalid.
    pub min_coverage: f64,
}

impl Default for CoverageRule {
    fn default() -> Self {
        CoverageRule {
            sample_period_s: 10.0,
            min_coverage: 0.75,
        }
    }
}

/// Block-averages `series` into `window`-length bins.
///
/// Input windows are weighted by their sample counts, so raw samples and
/// already-aggregated windows combine consistently. Bins with no input are
/// absent from the output.
pub fn aggregate(
    series: &TimeSeries,
    window: WindowLen,
    rule: &CoverageRule,
) -> Result<TimeSeries, TsError> {
    let target = window.seconds().ok_or(TsError::BadAggregation {
        from: series.window_len,
        to: window,
    })?;
    if let Some(src) = series.window_len.seconds() {
        if target <= src || target % src != 0 {
            return Err(TsError::BadAggregation {
                from: series.window_len,
                to: window,
            });
        }
    }
    if !(rule.sample_period_s > 0.0) {
        return Err(TsError::BadSamplePeriod(rule.sample_period_s));
    }
    let expected = target as f64 / rule.sample_period_s;

    let mut bins: BTreeMap<DateTime<Utc>, Vec<(DateTime<Utc>, f64, usize)>> = BTreeMap::new();
    for w in &series.windows {
        bins.entry(window.floor(w.start))
            .or_default()
            .push((w.start, w.mean, w.n_samples));
    }
    let windows = bins
        .into_iter()
        .map(|(start, mut parts)| {
            // Fixed summation order regardless of input order.
            parts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
            let n: usize = parts.iter().map(|p| p.2).sum();
            let sum: f64 = parts.iter().map(|p| p.1 * p.2 as f64).sum();
            let coverage = n as f64 / expected;
            Window {
                start,
                mean: if n > 0 { sum / n as f64 } else { f64::NAN },
                coverage,
                n_samples: n,
                valid: n > 0 && coverage >= rule.min_coverage,
            }
        })
        .collect();
    Ok(TimeSeries {
        node_id: series.node_id.clone(),
        window_len: window,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub start: DateTime<Utc>,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
    /// Valid windows present in only one of the two series.
    pub dropped: usize,
}

/// Inner join of the valid windows of two equally-windowed series.
pub fn align_pairs(a: &TimeSeries, b: &TimeSeries) -> Result<Alignment, TsError> {
    if a.window_len != b.window_len {
        return Err(TsError::WindowMismatch {
            a: a.window_len,
            b: b.window_len,
        });
    }
    let a_map: BTreeMap<_, _> = a.valid_windows().map(|w| (w.start, w.mean)).collect();
    let b_map: BTreeMap<_, _> = b.valid_windows().map(|w| (w.start, w.mean)).collect();
    let pairs: Vec<AlignedPair> = a_map
        .iter()
        .filter_map(|(start, &av)| {
            b_map.get(start).map(|&bv| AlignedPair {
                start: *start,
                a: av,
                b: bv,
            })
        })
        .collect();
    let dropped = a_map.len() + b_map.len() - 2 * pairs.len();
    Ok(Alignment { pairs, dropped })
}

/// Per-hour mean across reference monitors.
///
/// `n_samples` of each output window is the number of monitors reporting and
/// `coverage` is that count over the number of monitors. Hours with fewer than
/// `min_monitors` reporters are flagged invalid.
pub fn reference_mean(refs: &[TimeSeries], min_monitors: usize) -> Result<TimeSeries, TsError> {
    if refs.is_empty() {
        return Err(TsError::NoMonitors);
    }
    if let Some(r) = refs.iter().find(|r| r.window_len != WindowLen::Hour) {
        return Err(TsError::NotHourly(r.window_len));
    }
    let mut by_hour: BTreeMap<DateTime<Utc>, Vec<f64>> = BTreeMap::new();
    for r in refs {
        for w in r.valid_windows() {
            by_hour.entry(w.start).or_default().push(w.mean);
        }
    }
    let total = refs.len() as f64;
    let windows = by_hour
        .into_iter()
        .map(|(start, vals)| Window {
            start,
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            coverage: vals.len() as f64 / total,
            n_samples: vals.len(),
            valid: vals.len() >= min_monitors.max(1),
        })
        .collect();
    Ok(TimeSeries {
        node_id: "reference_mean".into(),
        window_len: WindowLen::Hour,
        windows,
    })
}

/// Why a sample was refused at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NegativeOrNonFinite,
    OutsideStudyWindow,
    UnknownNode,
}

pub fn check_sample(
    sample: &Sample,
    span: &StudyWindow,
    registry: &BTreeSet<String>,
) -> Result<(), Rejection> {
    if !(sample.pm25.is_finite() && sample.pm25 >= 0.0) {
        return Err(Rejection::NegativeOrNonFinite);
    }
    if !span.contains(sample.timestamp) {
        return Err(Rejection::OutsideStudyWindow);
    }
    if !registry.contains(&sample.node_id) {
        return Err(Rejection::UnknownNode);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 9, 10, 0, 0, 0).unwrap()
    }

    fn hourly(node: &str, hours: impl IntoIterator<Item = i64>, value: impl Fn(i64) -> f64) -> TimeSeries {
        TimeSeries {
            node_id: node.into(),
            window_len: WindowLen::Hour,
            windows: hours
                .into_iter()
                .map(|h| Window {
                    start: t0() + Duration::hours(h),
                    mean: value(h),
                    coverage: 1.0,
                    n_samples: 360,
                    valid: true,
                })
                .collect(),
        }
    }

    #[test]
    fn mean_of_three_in_one_window() {
        let s = TimeSeries::raw(
            "n",
            [10.0, 20.0, 30.0]
                .iter()
                .enumerate()
                .map(|(i, &v)| (t0() + Duration::seconds(10 * i as i64), v)),
        );
        let out = aggregate(&s, WindowLen::TenMin, &CoverageRule::default()).unwrap();
        assert_eq!(out.windows.len(), 1);
        assert_eq!(out.windows[0].mean, 20.0);
        assert_eq!(out.windows[0].n_samples, 3);
    }

    #[test]
    fn single_sample_window_is_invalid() {
        let s = TimeSeries::raw("n", [(t0(), 42.0)]);
        let out = aggregate(&s, WindowLen::TenMin, &CoverageRule::default()).unwrap();
        let w = out.windows[0];
        assert!(!w.valid);
        assert_eq!(w.coverage, 1.0 / 60.0);
        assert_eq!(w.mean, 42.0);
    }

    #[test]
    fn hour_with_deletions_matches_streaming_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts: Vec<(DateTime<Utc>, f64)> = (0..360)
            .map(|i| (t0() + Duration::seconds(10 * i), rng.random_range(5.0..250.0)))
            .collect();
        pts.shuffle(&mut rng);
        pts.truncate(270);
        // Streaming-sum oracle over the survivors.
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (_, v) in &pts {
            sum += v;
            n += 1;
        }
        let s = TimeSeries::raw("n", pts);
        let out = aggregate(&s, WindowLen::Hour, &CoverageRule::default()).unwrap();
        assert_eq!(out.windows.len(), 1);
        let w = out.windows[0];
        assert!((w.mean - sum / n as f64).abs() <= 1e-12 * w.mean);
        assert_eq!(w.coverage, 0.75);
        assert!(w.valid);
    }

    #[test]
    fn aggregation_rejects_finer_target() {
        let s = hourly("n", 0..3, |_| 1.0);
        assert!(aggregate(&s, WindowLen::TenMin, &CoverageRule::default()).is_err());
        assert!(aggregate(&s, WindowLen::Raw, &CoverageRule::default()).is_err());
    }

    #[test]
    fn empty_input_aggregates_to_empty() {
        let s = TimeSeries::raw("n", std::iter::empty());
        let out = aggregate(&s, WindowLen::Hour, &CoverageRule::default()).unwrap();
        assert!(out.windows.is_empty());
    }

    #[test]
    fn align_examples() {
        let a = hourly("a", 0..10, |h| h as f64);
        let self_join = align_pairs(&a, &a).unwrap();
        assert_eq!(self_join.pairs.len(), 10);
        assert_eq!(self_join.dropped, 0);

        let b = hourly("b", 20..25, |_| 1.0);
        let disjoint = align_pairs(&a, &b).unwrap();
        assert!(disjoint.pairs.is_empty());
        assert_eq!(disjoint.dropped, 15);

        let c = hourly("c", 5..15, |h| 2.0 * h as f64);
        // Set-intersection oracle.
        let want: Vec<i64> = (0..10).filter(|h| (5..15).contains(h)).collect();
        let got = align_pairs(&a, &c).unwrap();
        let hours: Vec<i64> = got
            .pairs
            .iter()
            .map(|p| (p.start - t0()).num_hours())
            .collect();
        assert_eq!(hours, want);
        assert_eq!(got.dropped, 10);
        assert!(got.pairs.iter().all(|p| p.b == 2.0 * p.a));
    }

    #[test]
    fn align_requires_equal_windows() {
        let a = hourly("a", 0..2, |_| 1.0);
        let mut b = a.clone();
        b.window_len = WindowLen::TenMin;
        assert!(matches!(
            align_pairs(&a, &b),
            Err(TsError::WindowMismatch { .. })
        ));
    }

    #[test]
    fn reference_mean_examples() {
        let m1 = hourly("m1", [0], |_| 100.0);
        let m2 = hourly("m2", [0, 1], |_| 120.0);
        let avg = reference_mean(&[m1, m2], 1).unwrap();
        assert_eq!(avg.windows[0].mean, 110.0);
        assert_eq!(avg.windows[1].mean, 120.0);
        assert!(avg.windows[1].valid);

        let m1 = hourly("m1", [0], |_| 100.0);
        let m2 = hourly("m2", [0, 1], |_| 120.0);
        let strict = reference_mean(&[m1, m2], 2).unwrap();
        assert!(!strict.windows[1].valid);
        assert!(matches!(reference_mean(&[], 1), Err(TsError::NoMonitors)));
    }

    #[test]
    fn reference_mean_matches_row_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid: Vec<[f64; 2]> = (0..12)
            .map(|_| [rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)])
            .collect();
        let m1 = hourly("m1", 0..12, |h| grid[h as usize][0]);
        let m2 = hourly("m2", 0..12, |h| grid[h as usize][1]);
        let avg = reference_mean(&[m1, m2], 2).unwrap();
        for (h, w) in avg.windows.iter().enumerate() {
            let want = (grid[h][0] + grid[h][1]) / 2.0;
            assert!((w.mean - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn sample_checks() {
        let span = StudyWindow::new(t0(), t0() + Duration::days(1)).unwrap();
        let registry: BTreeSet<String> = ["n1".to_string()].into();
        let mut s = Sample {
            timestamp: t0(),
            node_id: "n1".into(),
            location_class: LocationClass::Indoor,
            pm25: 3.0,
            pm25_std: None,
            fix: None,
            env: None,
        };
        assert_eq!(check_sample(&s, &span, &registry), Ok(()));
        s.pm25 = -1.0;
        assert_eq!(check_sample(&s, &span, &registry), Err(Rejection::NegativeOrNonFinite));
        s.pm25 = 1.0;
        s.timestamp = t0() + Duration::days(1);
        assert_eq!(check_sample(&s, &span, &registry), Err(Rejection::OutsideStudyWindow));
        s.timestamp = t0();
        s.node_id = "n2".into();
        assert_eq!(check_sample(&s, &span, &registry), Err(Rejection::UnknownNode));
    }
}
