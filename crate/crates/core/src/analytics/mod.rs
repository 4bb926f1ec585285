//! Indoor/outdoor ratios, PM2.5 reduction, network averages and paired tests.

mod wilcoxon;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::timeseries::{align_pairs, StudyWindow, TimeSeries, TsError};

pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_with_method, PMethod, WilcoxonResult, EXACT_MAX_N};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

/// Min/median/mean/max; the median of an even count is the mean of the two
/// central values. `None` for an empty slice.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Some(Summary {
        n,
        min: v[0],
        median,
        mean: v.iter().sum::<f64>() / n as f64,
        max: v[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoRatioSeries {
    pub location_id: String,
    pub ratios: Vec<(DateTime<Utc>, f64)>,
    /// Aligned hours skipped because the outdoor mean was not positive.
    pub skipped_nonpositive: usize,
    pub summary: Option<Summary>,
}

/// Hourly indoor/outdoor ratio over the hours both series report validly.
pub fn io_ratio(
    location_id: &str,
    indoor: &TimeSeries,
    outdoor: &TimeSeries,
) -> Result<IoRatioSeries, TsError> {
    let aligned = align_pairs(indoor, outdoor)?;
    let mut skipped = 0;
    let ratios: Vec<(DateTime<Utc>, f64)> = aligned
        .pairs
        .iter()
        .filter_map(|p| {
            if p.b > 0.0 {
                Some((p.start, p.a / p.b))
            } else {
                skipped += 1;
                None
            }
        })
        .collect();
    let values: Vec<f64> = ratios.iter().map(|r| r.1).collect();
    Ok(IoRatioSeries {
        location_id: location_id.to_string(),
        summary: summarize(&values),
        ratios,
        skipped_nonpositive: skipped,
    })
}

/// `(O - I) / O * 100`; absent when `O <= 0`.
pub fn reduction_percent(outdoor_mean: f64, indoor_mean: f64) -> Option<f64> {
    (outdoor_mean > 0.0).then(|| (outdoor_mean - indoor_mean) / outdoor_mean * 100.0)
}

/// Reduction from each series' own valid-window mean inside `span`.
pub fn pm_reduction(indoor: &TimeSeries, outdoor: &TimeSeries, span: &StudyWindow) -> Option<f64> {
    let (i, _) = indoor.mean_max_within(span)?;
    let (o, _) = outdoor.mean_max_within(span)?;
    reduction_percent(o, i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkPoint {
    pub start: DateTime<Utc>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); absent with a single reporter.
    pub sigma: Option<f64>,
    pub n: usize,
}

/// Per-window cross-sensor mean and 1-sigma band over sensors reporting validly.
pub fn network_average(series: &[&TimeSeries]) -> Result<Vec<NetworkPoint>, TsError> {
    if let Some(first) = series.first() {
        if let Some(other) = series.iter().find(|s| s.window_len != first.window_len) {
            return Err(TsError::WindowMismatch {
                a: first.window_len,
                b: other.window_len,
            });
        }
    }
    let mut by_start: BTreeMap<DateTime<Utc>, Vec<f64>> = BTreeMap::new();
    for s in series {
        for w in s.valid_windows() {
            by_start.entry(w.start).or_default().push(w.mean);
        }
    }
    Ok(by_start
        .into_iter()
        .map(|(start, vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sigma = (n >= 2).then(|| {
                let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                (ss / (n - 1) as f64).sqrt()
            });
            NetworkPoint {
                start,
                mean,
                sigma,
                n,
            }
        })
        .collect())
}

/// Pearson r over a paired sample; absent below three points or when either
/// side is constant.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r over the valid windows both series share.
pub fn correlation(a: &TimeSeries, b: &TimeSeries) -> Result<Option<f64>, TsError> {
    let aligned = align_pairs(a, b)?;
    let pairs: Vec<(f64, f64)> = aligned.pairs.iter().map(|p| (p.a, p.b)).collect();
    Ok(pearson(&pairs))
}

/// Calibrated hourly streams of one site. L2-a and L2-b share an outdoor stream.
#[derive(Debug, Clone, Copy)]
pub struct SiteStreams<'a> {
    pub location_id: &'a str,
    pub indoor: Option<&'a TimeSeries>,
    pub outdoor: Option<&'a TimeSeries>,
}

/// One row in the per-site indoor/outdoor summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummaryRow {
    pub location_id: String,
    pub indoor_mean: Option<f64>,
    pub indoor_max: Option<f64>,
    pub outdoor_mean: Option<f64>,
    pub outdoor_max: Option<f64>,
    pub io_min: Option<f64>,
    pub io_median: Option<f64>,
    pub io_mean: Option<f64>,
    pub io_max: Option<f64>,
    pub reduction_pct: Option<f64>,
}

impl SiteSummaryRow {
    pub const HEADER: [&'static str; 10] = [
        "location_id",
        "indoor_mean",
        "indoor_max",
        "outdoor_mean",
        "outdoor_max",
        "io_min",
        "io_median",
        "io_mean",
        "io_max",
        "reduction_pct",
    ];

    pub fn cells(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.location_id.clone(),
            f(self.indoor_mean),
            f(self.indoor_max),
            f(self.outdoor_mean),
            f(self.outdoor_max),
            f(self.io_min),
            f(self.io_median),
            f(self.io_mean),
            f(self.io_max),
            f(self.reduction_pct),
        ]
    }
}

/// Builds one summary row per site over `span`.
///
/// Means and maxima use each stream's own valid hours; the I/O columns use
/// only the hours both streams share.
pub fn summarize_table(
    sites: &[SiteStreams<'_>],
    span: &StudyWindow,
) -> Result<Vec<SiteSummaryRow>, TsError> {
    sites
        .iter()
        .map(|site| {
            let indoor = site.indoor.map(|s| s.restrict(span));
            let outdoor = site.outdoor.map(|s| s.restrict(span));
            let im = indoor.as_ref().and_then(|s| s.mean_max_within(span));
            let om = outdoor.as_ref().and_then(|s| s.mean_max_within(span));
            let io = match (&indoor, &outdoor) {
                (Some(i), Some(o)) => io_ratio(site.location_id, i, o)?.summary,
                _ => None,
            };
            let reduction = match (im, om) {
                (Some((i, _)), Some((o, _))) => reduction_percent(o, i),
                _ => None,
            };
            Ok(SiteSummaryRow {
                location_id: site.location_id.to_string(),
                indoor_mean: im.map(|v| v.0),
                indoor_max: im.map(|v| v.1),
                outdoor_mean: om.map(|v| v.0),
                outdoor_max: om.map(|v| v.1),
                io_min: io.map(|s| s.min),
                io_median: io.map(|s| s.median),
                io_mean: io.map(|s| s.mean),
                io_max: io.map(|s| s.max),
                reduction_pct: reduction,
            })
        })
        .collect()
}
