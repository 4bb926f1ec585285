//! Deterministic synthetic smoke episodes.
//!
//! Indoor concentrations follow a single-zone mass balance
//! `dC/dt = P a C_out - (a + k) C` integrated exactly over each sampling step,
//! so the correct pipeline outputs are known by construction. Sensors see an
//! affine distortion of the truth plus Gaussian noise; reference monitors see
//! the hourly truth.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, Utc};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    minute_of_day, DailyInterval, PersonalConfig, RunConfig, SiteMetadata, StudyConfig,
    WilcoxonWindows,
};
use crate::exposure::{
    attribute_all, exposure_share, DailyAttribution, FenceLabel, Geofence, LabeledSeries,
    LabeledWindow, MicroenvLabel, EARTH_RADIUS_M,
};
use crate::timeseries::{
    write_reference_csv, write_samples_csv, CsvError, LocationClass, ReferenceRecord, Sample,
    WindowLen,
};
use crate::wire::GpsFix;

/// Single-zone infiltration model. Rates are per hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxModel {
    /// Penetration factor P in (0, 1].
    pub penetration: f64,
    /// Air exchange rate a, 1/h.
    pub air_exchange_per_h: f64,
    /// Filtration plus deposition loss k, 1/h.
    pub k_total_per_h: f64,
}

impl BoxModel {
    pub fn loss_rate_per_h(&self) -> f64 {
        self.air_exchange_per_h + self.k_total_per_h
    }

    /// Steady-state indoor/outdoor ratio `P a / (a + k)`.
    pub fn steady_ratio(&self) -> f64 {
        self.penetration * self.air_exchange_per_h / self.loss_rate_per_h()
    }

    pub fn steady_state(&self, c_out: f64) -> f64 {
        self.steady_ratio() * c_out
    }

    /// Exact update over `dt_s` seconds with `c_out` held constant.
    pub fn step(&self, c_in: f64, c_out: f64, dt_s: f64) -> f64 {
        let c_ss = self.steady_state(c_out);
        c_ss + (c_in - c_ss) * (-self.loss_rate_per_h() * dt_s / 3600.0).exp()
    }
}

pub fn indoor_step(
    c_in: f64,
    c_out: f64,
    penetration: f64,
    air_exchange_per_h: f64,
    k_total_per_h: f64,
    dt_s: f64,
) -> f64 {
    BoxModel {
        penetration,
        air_exchange_per_h,
        k_total_per_h,
    }
    .step(c_in, c_out, dt_s)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn cfg_err(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Config(msg.into())
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_period() -> f64 {
    10.0
}
fn default_offset() -> f64 {
    -7.0
}
fn default_monitors() -> Vec<String> {
    vec!["ref-1".into(), "ref-2".into()]
}
fn default_radius() -> f64 {
    10.0
}
fn default_gps_sigma() -> f64 {
    2.0
}
fn default_personal_node() -> String {
    "P1".into()
}

/// Outdoor truth: piecewise-linear through `(hours since start, ug/m3)`
/// breakpoints, held flat outside them, times an optional diurnal factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutdoorProfile {
    pub breakpoints: Vec<[f64; 2]>,
    /// Fractional amplitude of a 24-h sinusoid peaking at 15:00 local.
    #[serde(default)]
    pub diurnal_amplitude: f64,
}

impl OutdoorProfile {
    fn at(&self, hours: f64, local_minute: f64) -> f64 {
        let bp = &self.breakpoints;
        let base = if hours <= bp[0][0] {
            bp[0][1]
        } else if hours >= bp[bp.len() - 1][0] {
            bp[bp.len() - 1][1]
        } else {
            let i = bp.partition_point(|p| p[0] <= hours);
            let (a, b) = (bp[i - 1], bp[i]);
            a[1] + (b[1] - a[1]) * (hours - a[0]) / (b[0] - a[0])
        };
        let phase = 2.0 * std::f64::consts::PI * (local_minute / 60.0 - 9.0) / 24.0;
        base * (1.0 + self.diurnal_amplitude * phase.sin())
    }
}

/// Sensor reading = `slope * truth + intercept + N(0, noise_sigma)`, floored at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorDistortion {
    #[serde(default = "one")]
    pub slope: f64,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Default for SensorDistortion {
    fn default() -> Self {
        SensorDistortion {
            slope: 1.0,
            intercept: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    #[serde(default = "default_monitors")]
    pub monitors: Vec<String>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            monitors: default_monitors(),
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvacSchedule {
    pub from: String,
    pub to: String,
    /// Extra removal rate while running, 1/h.
    pub k_per_h: f64,
}

/// Daily indoor emission: an instantaneous concentration increment at a local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CookingEvent {
    pub at: String,
    pub delta_ug_m3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScenario {
    #[serde(flatten)]
    pub metadata: SiteMetadata,
    pub penetration: f64,
    pub air_exchange_per_h: f64,
    #[serde(default)]
    pub k_extra_per_h: f64,
    #[serde(default)]
    pub hvac_schedule: Option<HvacSchedule>,
    #[serde(default)]
    pub cooking: Vec<CookingEvent>,
    #[serde(default = "yes")]
    pub outdoor_sensor: bool,
    /// Outdoor sensor stops reporting this many hours into the episode.
    #[serde(default)]
    pub outdoor_sensor_hours: Option<f64>,
    /// Site whose outdoor node this site reports against when it has none.
    #[serde(default)]
    pub shared_outdoor: Option<String>,
}

impl SiteScenario {
    pub fn indoor_node(&self) -> String {
        format!("{}-in", self.metadata.location_id)
    }

    pub fn outdoor_node(&self) -> String {
        format!("{}-out", self.metadata.location_id)
    }

    pub fn base_model(&self) -> BoxModel {
        BoxModel {
            penetration: self.penetration,
            air_exchange_per_h: self.air_exchange_per_h,
            k_total_per_h: self.k_extra_per_h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FencePoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_radius")]
    pub radius_m: f64,
}

/// Where a microenvironment's concentration comes from: a site's indoor truth,
/// or the outdoor truth when `site` is absent, scaled by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSource {
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default = "one")]
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalSources {
    pub home: ConcentrationSource,
    pub office: ConcentrationSource,
    pub other: ConcentrationSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub from: String,
    pub to: String,
    pub env: MicroenvLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalScenario {
    #[serde(default = "default_personal_node")]
    pub node_id: String,
    pub home: FencePoint,
    pub office: FencePoint,
    /// Center of the "other" locations; must lie outside both fences.
    pub other: [f64; 2],
    #[serde(default = "default_gps_sigma")]
    pub gps_sigma_m: f64,
    /// Probability that a fix is flagged invalid.
    #[serde(default)]
    pub gps_dropout: f64,
    pub sources: PersonalSources,
    /// Daily local-time pattern covering 00:00-24:00 without gaps.
    pub schedule: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    #[serde(default = "default_period")]
    pub sample_period_s: f64,
    #[serde(default = "default_offset")]
    pub utc_offset_hours: f64,
    /// Site whose outdoor sensor trains the calibration.
    pub calibration_site: String,
    pub outdoor: OutdoorProfile,
    #[serde(default)]
    pub sensor: SensorDistortion,
    #[serde(default)]
    pub reference: ReferenceConfig,
    pub sites: Vec<SiteScenario>,
    #[serde(default)]
    pub personal: Option<PersonalScenario>,
    #[serde(default)]
    pub wilcoxon: Option<WilcoxonWindows>,
}

/// Resolved personal schedule: sorted, contiguous, covering the whole day.
fn resolve_schedule(entries: &[ScheduleEntry]) -> Result<Vec<(DailyInterval, MicroenvLabel)>, ScenarioError> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let iv = DailyInterval::new(&e.from, &e.to)
            .filter(|iv| iv.from_min < iv.to_min)
            .ok_or_else(|| cfg_err(format!("bad schedule interval {}..{}", e.from, e.to)))?;
        out.push((iv, e.env));
    }
    out.sort_by_key(|(iv, _)| iv.from_min);
    let mut cursor = 0;
    for (iv, _) in &out {
        if iv.from_min != cursor {
            return Err(cfg_err(format!(
                "personal schedule gap or overlap at minute {cursor} of the day"
            )));
        }
        cursor = iv.to_min;
    }
    if cursor != 1440 {
        return Err(cfg_err(format!(
            "personal schedule gap at minute {cursor} of the day"
        )));
    }
    Ok(out)
}

fn parse_clock(s: &str) -> Result<f64, ScenarioError> {
    DailyInterval::new(s, s)
        .map(|iv| f64::from(iv.from_min))
        .ok_or_else(|| cfg_err(format!("bad clock time {s:?}")))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn offset(&self) -> Result<FixedOffset, ScenarioError> {
        FixedOffset::east_opt((self.utc_offset_hours * 3600.0).round() as i32)
            .ok_or_else(|| cfg_err("utc_offset_hours out of range"))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.end <= self.start {
            return Err(cfg_err("episode end must follow start"));
        }
        if !(self.sample_period_s > 0.0) {
            return Err(cfg_err("sample_period_s must be positive"));
        }
        self.offset()?;
        let bp = &self.outdoor.breakpoints;
        if bp.is_empty() || bp.windows(2).any(|w| w[1][0] <= w[0][0]) || bp.iter().any(|p| p[1] < 0.0) {
            return Err(cfg_err("outdoor breakpoints must be non-empty, increasing in time, non-negative"));
        }
        if self.outdoor.diurnal_amplitude.abs() >= 1.0 {
            return Err(cfg_err("diurnal_amplitude must lie in (-1, 1)"));
        }
        if !(self.sensor.slope > 0.0) || self.sensor.noise_sigma < 0.0 || self.reference.noise_sigma < 0.0 {
            return Err(cfg_err("sensor slope must be positive and noise sigmas non-negative"));
        }
        if self.reference.monitors.is_empty() {
            return Err(cfg_err("at least one reference monitor is required"));
        }
        for s in &self.sites {
            let id = &s.metadata.location_id;
            if !(s.penetration > 0.0 && s.penetration <= 1.0) {
                return Err(cfg_err(format!("{id}: penetration must lie in (0, 1]")));
            }
            if !(s.air_exchange_per_h > 0.0) || !(s.k_extra_per_h >= 0.0) {
                return Err(cfg_err(format!("{id}: need a > 0 and k_extra >= 0")));
            }
            if let Some(h) = &s.hvac_schedule {
                DailyInterval::new(&h.from, &h.to)
                    .ok_or_else(|| cfg_err(format!("{id}: bad hvac interval")))?;
                if !(h.k_per_h >= 0.0) {
                    return Err(cfg_err(format!("{id}: hvac k_per_h must be non-negative")));
                }
            }
            for c in &s.cooking {
                parse_clock(&c.at)?;
                if !(c.delta_ug_m3 >= 0.0) {
                    return Err(cfg_err(format!("{id}: cooking increments must be non-negative")));
                }
            }
            if let Some(other) = &s.shared_outdoor {
                if !self.sites.iter().any(|o| &o.metadata.location_id == other && o.outdoor_sensor) {
                    return Err(cfg_err(format!("{id}: shared_outdoor {other} has no outdoor sensor")));
                }
            }
        }
        let cal = self
            .site(&self.calibration_site)
            .ok_or_else(|| cfg_err("calibration_site is not a configured site"))?;
        if !cal.outdoor_sensor {
            return Err(cfg_err("calibration_site has no outdoor sensor"));
        }
        if let Some(p) = &self.personal {
            resolve_schedule(&p.schedule)?;
            for src in [&p.sources.home, &p.sources.office, &p.sources.other] {
                if let Some(site) = &src.site {
                    if self.site(site).is_none() {
                        return Err(cfg_err(format!("personal source site {site} is not configured")));
                    }
                }
                if !(src.factor >= 0.0) {
                    return Err(cfg_err("personal source factor must be non-negative"));
                }
            }
            if !(0.0..=1.0).contains(&p.gps_dropout) || !(p.gps_sigma_m >= 0.0) {
                return Err(cfg_err("gps_dropout must lie in [0, 1] and gps_sigma_m be non-negative"));
            }
            for fence in [&p.home, &p.office] {
                if !(fence.radius_m > 0.0) {
                    return Err(cfg_err("personal fence radius must be positive"));
                }
                let d = crate::exposure::haversine_m(p.other[0], p.other[1], fence.lat, fence.lon);
                if d <= fence.radius_m + 4.0 * p.gps_sigma_m + 1.0 {
                    return Err(cfg_err("personal 'other' location is too close to a fence"));
                }
            }
        }
        Ok(())
    }

    pub fn site(&self, location_id: &str) -> Option<&SiteScenario> {
        self.sites.iter().find(|s| s.metadata.location_id == location_id)
    }

    fn times(&self) -> Vec<DateTime<Utc>> {
        let span_ms = (self.end - self.start).num_milliseconds() as f64;
        let period_ms = self.sample_period_s * 1000.0;
        let n = (span_ms / period_ms).ceil() as usize;
        (0..n)
            .map(|i| self.start + Duration::milliseconds((i as f64 * period_ms).round() as i64))
            .filter(|t| *t < self.end)
            .collect()
    }

    /// Pipeline configuration matching this episode's nodes and fences.
    pub fn run_config(&self) -> RunConfig {
        let sites = self
            .sites
            .iter()
            .map(|s| {
                let mut meta = s.metadata.clone();
                meta.indoor_node = Some(s.indoor_node());
                meta.outdoor_node = if s.outdoor_sensor {
                    Some(s.outdoor_node())
                } else {
                    s.shared_outdoor.as_ref().map(|o| format!("{o}-out"))
                };
                meta
            })
            .collect();
        let calibration_node = format!("{}-out", self.calibration_site);
        let (personal, geofences) = match &self.personal {
            Some(p) => (
                Some(PersonalConfig {
                    node_id: p.node_id.clone(),
                    home_nodes: p
                        .sources
                        .home
                        .site
                        .iter()
                        .map(|s| format!("{s}-in"))
                        .collect(),
                    outdoor_node: Some(calibration_node.clone()),
                }),
                vec![
                    Geofence {
                        label: FenceLabel::Home,
                        lat: p.home.lat,
                        lon: p.home.lon,
                        radius_m: p.home.radius_m,
                    },
                    Geofence {
                        label: FenceLabel::Office,
                        lat: p.office.lat,
                        lon: p.office.lon,
                        radius_m: p.office.radius_m,
                    },
                ],
            ),
            None => (None, Vec::new()),
        };
        RunConfig {
            study: StudyConfig {
                start: self.start,
                end: self.end,
                utc_offset_hours: self.utc_offset_hours,
                sample_period_s: self.sample_period_s,
                min_coverage: 0.75,
                min_monitors: 1,
                calibration_node,
                nighttime: DailyInterval::new("22:00", "06:00").expect("valid band"),
                carry_forward_min: 30,
            },
            wilcoxon: self.wilcoxon,
            sites,
            personal,
            geofences,
            frame_logs: Vec::new(),
            nmea_logs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCalibration {
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    /// `P a / (a + k_extra)` with HVAC off.
    pub steady_io: f64,
    pub steady_io_hvac_on: Option<f64>,
    pub true_indoor_mean: f64,
    pub true_outdoor_mean: f64,
    pub true_io_median: f64,
    pub true_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalTruth {
    /// Percent of classified time per label.
    pub time_share_pct: BTreeMap<MicroenvLabel, f64>,
    /// Percent of summed daily exposure per label.
    pub exposure_share_pct: BTreeMap<MicroenvLabel, f64>,
    pub daily: Vec<DailyAttribution>,
}

/// What the pipeline should recover, computed from noiseless truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub sensor: SensorDistortion,
    pub expected_calibration: ExpectedCalibration,
    pub sites: BTreeMap<String, SiteTruth>,
    pub personal: Option<PersonalTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDataset {
    /// Time-major; nodes in configuration order within a timestamp.
    pub samples: Vec<Sample>,
    pub reference: Vec<ReferenceRecord>,
    pub run_config: RunConfig,
    pub truth: GroundTruth,
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

impl EpisodeDataset {
    pub fn write_to(&self, dir: &Path) -> Result<(), ScenarioError> {
        fs::create_dir_all(dir)?;
        write_samples_csv(
            BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?),
            &self.samples,
        )?;
        write_reference_csv(
            BufWriter::new(fs::File::create(dir.join(REFERENCE_FILE))?),
            &self.reference,
        )?;
        fs::write(dir.join(CONFIG_FILE), self.run_config.to_toml())?;
        fs::write(
            dir.join(GROUND_TRUTH_FILE),
            serde_json::to_string_pretty(&self.truth)? + "\n",
        )?;
        Ok(())
    }
}

struct Noise {
    rng: ChaCha8Rng,
    std: Normal<f64>,
}

impl Noise {
    fn gauss(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            sigma * self.std.sample(&mut self.rng)
        }
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn read_sensor(truth: f64, d: &SensorDistortion, noise: &mut Noise) -> f64 {
    round2((d.slope * truth + d.intercept + noise.gauss(d.noise_sigma)).max(0.0))
}

/// Whether local clock minute `at` falls in `(prev, cur]`, across midnight.
fn crossed(prev: f64, cur: f64, at: f64) -> bool {
    if cur >= prev {
        prev < at && at <= cur
    } else {
        at > prev || at <= cur
    }
}

fn simulate_indoor(
    site: &SiteScenario,
    times: &[DateTime<Utc>],
    outdoor: &[f64],
    offset: FixedOffset,
    dt_s: f64,
) -> Result<Vec<f64>, ScenarioError> {
    let base = site.base_model();
    let hvac = match &site.hvac_schedule {
        Some(h) => Some((
            DailyInterval::new(&h.from, &h.to).ok_or_else(|| cfg_err("bad hvac interval"))?,
            h.k_per_h,
        )),
        None => None,
    };
    let cooking: Vec<(f64, f64)> = site
        .cooking
        .iter()
        .map(|c| Ok((parse_clock(&c.at)?, c.delta_ug_m3)))
        .collect::<Result<_, ScenarioError>>()?;
    let mut out = Vec::with_capacity(times.len());
    let Some(&first_out) = outdoor.first() else {
        return Ok(out);
    };
    let mut c = base.steady_state(first_out);
    out.push(c);
    for i in 1..times.len() {
        let prev_min = minute_of_day(times[i - 1], offset);
        let cur_min = minute_of_day(times[i], offset);
        let mut model = base;
        if let Some((iv, k)) = hvac {
            if iv.contains_minute(prev_min) {
                model.k_total_per_h += k;
            }
        }
        c = model.step(c, 0.5 * (outdoor[i - 1] + outdoor[i]), dt_s);
        for &(at, delta) in &cooking {
            if crossed(prev_min, cur_min, at) {
                c += delta;
            }
        }
        out.push(c);
    }
    Ok(out)
}

fn offset_position(center: (f64, f64), east_m: f64, north_m: f64) -> (f64, f64) {
    let lat = center.0 + (north_m / EARTH_RADIUS_M).to_degrees();
    let lon = center.1 + (east_m / (EARTH_RADIUS_M * center.0.to_radians().cos())).to_degrees();
    (lat, lon)
}

/// Block means of `values` over windows of `len`, keyed by window start.
fn block_means(times: &[DateTime<Utc>], values: &[f64], len: WindowLen) -> BTreeMap<DateTime<Utc>, f64> {
    let mut acc: BTreeMap<DateTime<Utc>, (f64, usize)> = BTreeMap::new();
    for (t, v) in times.iter().zip(values) {
        let e = acc.entry(len.floor(*t)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn generate_episode(cfg: &ScenarioConfig) -> Result<EpisodeDataset, ScenarioError> {
    cfg.validate()?;
    let offset = cfg.offset()?;
    let times = cfg.times();
    let mut noise = Noise {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        std: Normal::new(0.0, 1.0).expect("unit normal"),
    };

    let outdoor: Vec<f64> = times
        .iter()
        .map(|t| {
            let hours = (*t - cfg.start).num_milliseconds() as f64 / 3.6e6;
            cfg.outdoor.at(hours, minute_of_day(*t, offset))
        })
        .collect();
    let mut indoor: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for site in &cfg.sites {
        indoor.insert(
            &site.metadata.location_id,
            simulate_indoor(site, &times, &outdoor, offset, cfg.sample_period_s)?,
        );
    }

    let mut samples: Vec<Sample> = Vec::new();
    let sample = |t: DateTime<Utc>, node: &str, class, pm25, fix| Sample {
        timestamp: t,
        node_id: node.to_string(),
        location_class: class,
        pm25,
        pm25_std: None,
        fix,
        env: None,
    };
    for (i, &t) in times.iter().enumerate() {
        let hours = (t - cfg.start).num_milliseconds() as f64 / 3.6e6;
        for site in &cfg.sites {
            let id = site.metadata.location_id.as_str();
            let reading = read_sensor(indoor[id][i], &cfg.sensor, &mut noise);
            samples.push(sample(t, &site.indoor_node(), LocationClass::Indoor, reading, None));
            let outdoor_live = site.outdoor_sensor && site.outdoor_sensor_hours.is_none_or(|h| hours < h);
            if outdoor_live {
                let reading = read_sensor(outdoor[i], &cfg.sensor, &mut noise);
                samples.push(sample(t, &site.outdoor_node(), LocationClass::Outdoor, reading, None));
            }
        }
    }

    let personal_truth = match &cfg.personal {
        Some(p) => Some(simulate_personal(p, cfg, &times, &outdoor, &indoor, offset, &mut noise, &mut samples)?),
        None => None,
    };
    samples.sort_by_key(|s| s.timestamp);

    let hourly_out = block_means(&times, &outdoor, WindowLen::Hour);
    let mut reference = Vec::new();
    for (&hour, &truth) in &hourly_out {
        for m in &cfg.reference.monitors {
            let v = round2((truth + noise.gauss(cfg.reference.noise_sigma)).max(0.0));
            reference.push(ReferenceRecord {
                timestamp: hour,
                monitor_id: m.clone(),
                pm25: v,
            });
        }
    }

    let mut site_truth = BTreeMap::new();
    for site in &cfg.sites {
        let id = site.metadata.location_id.as_str();
        let hourly_in = block_means(&times, &indoor[id], WindowLen::Hour);
        let ins: Vec<f64> = hourly_in.values().copied().collect();
        let outs: Vec<f64> = hourly_out.values().copied().collect();
        let ratios: Vec<f64> = ins.iter().zip(&outs).filter(|(_, o)| **o > 0.0).map(|(i, o)| i / o).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (im, om) = (mean(&ins), mean(&outs));
        let base = site.base_model();
        site_truth.insert(
            id.to_string(),
            SiteTruth {
                steady_io: base.steady_ratio(),
                steady_io_hvac_on: site.hvac_schedule.as_ref().map(|h| {
                    BoxModel {
                        k_total_per_h: base.k_total_per_h + h.k_per_h,
                        ..base
                    }
                    .steady_ratio()
                }),
                true_indoor_mean: im,
                true_outdoor_mean: om,
                true_io_median: crate::analytics::summarize(&ratios).map_or(f64::NAN, |s| s.median),
                true_reduction_pct: (om - im) / om * 100.0,
            },
        );
    }

    let d = cfg.sensor;
    Ok(EpisodeDataset {
        samples,
        reference,
        run_config: cfg.run_config(),
        truth: GroundTruth {
            seed: cfg.seed,
            sensor: d,
            expected_calibration: ExpectedCalibration {
                beta0: -d.intercept / d.slope,
                beta1: 1.0 / d.slope,
            },
            sites: site_truth,
            personal: personal_truth,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_personal(
    p: &PersonalScenario,
    cfg: &ScenarioConfig,
    times: &[DateTime<Utc>],
    outdoor: &[f64],
    indoor: &BTreeMap<&str, Vec<f64>>,
    offset: FixedOffset,
    noise: &mut Noise,
    samples: &mut Vec<Sample>,
) -> Result<PersonalTruth, ScenarioError> {
    let schedule = resolve_schedule(&p.schedule)?;
    let source = |label: MicroenvLabel| match label {
        MicroenvLabel::Home => &p.sources.home,
        MicroenvLabel::Office => &p.sources.office,
        MicroenvLabel::Other => &p.sources.other,
    };
    let mut truth_vals = Vec::with_capacity(times.len());
    let mut truth_labels = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let minute = minute_of_day(t, offset);
        let env = schedule
            .iter()
            .find(|(iv, _)| iv.contains_minute(minute))
            .map(|(_, l)| *l)
            .expect("schedule covers the day");
        let src = source(env);
        let base = match &src.site {
            Some(site) => indoor[site.as_str()][i],
            None => outdoor[i],
        };
        let conc = src.factor * base;
        let (center, radius) = match env {
            MicroenvLabel::Home => ((p.home.lat, p.home.lon), Some(p.home.radius_m)),
            MicroenvLabel::Office => ((p.office.lat, p.office.lon), Some(p.office.radius_m)),
            MicroenvLabel::Other => ((p.other[0], p.other[1]), None),
        };
        let (mut east, mut north) = (noise.gauss(p.gps_sigma_m), noise.gauss(p.gps_sigma_m));
        if let Some(r) = radius {
            let d = east.hypot(north);
            let cap = 0.8 * r;
            if d > cap {
                east *= cap / d;
                north *= cap / d;
            }
        }
        let (lat, lon) = offset_position(center, east, north);
        let valid = !(p.gps_dropout > 0.0 && noise.uniform() < p.gps_dropout);
        let reading = read_sensor(conc, &cfg.sensor, noise);
        samples.push(Sample {
            timestamp: t,
            node_id: p.node_id.clone(),
            location_class: LocationClass::Personal,
            pm25: reading,
            pm25_std: None,
            fix: Some(GpsFix {
                timestamp: t,
                latitude: lat,
                longitude: lon,
                valid,
                hdop: None,
            }),
            env: None,
        });
        truth_vals.push(conc);
        truth_labels.push(env);
    }

    // True 10-minute slots: mean true concentration, majority true label.
    let mut slots: BTreeMap<DateTime<Utc>, (f64, usize, [usize; 3])> = BTreeMap::new();
    for ((t, v), l) in times.iter().zip(&truth_vals).zip(&truth_labels) {
        let e = slots.entry(WindowLen::TenMin.floor(*t)).or_default();
        e.0 += v;
        e.1 += 1;
        e.2[*l as usize] += 1;
    }
    let labeled = LabeledSeries {
        windows: slots
            .into_iter()
            .map(|(start, (sum, n, tally))| {
                let label = MicroenvLabel::ALL
                    .into_iter()
                    .max_by(|a, b| tally[*a as usize].cmp(&tally[*b as usize]).then(b.cmp(a)))
                    .expect("three labels");
                LabeledWindow {
                    start,
                    pm25: sum / n as f64,
                    label: Some(label),
                    carried: false,
                }
            })
            .collect(),
        unclassified: 0,
        invalid_fixes: 0,
    };
    let daily = attribute_all(&labeled, offset);
    let mut time_share_pct = BTreeMap::new();
    let mut exposure_share_pct = BTreeMap::new();
    for label in MicroenvLabel::ALL {
        if let Some(s) = exposure_share(&daily, &[label]) {
            time_share_pct.insert(label, s.time_pct);
            exposure_share_pct.insert(label, s.exposure_pct);
        }
    }
    Ok(PersonalTruth {
        time_share_pct,
        exposure_share_pct,
        daily,
    })
}
