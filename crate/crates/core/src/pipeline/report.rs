//! Plot-ready CSV bundles shaped after the study figures.

use std::collections::BTreeMap;

use chrono::{DateTime, FixedOffset, Utc};

use super::{
    cell_f64, cell_time, label_from_str, opt_cell, read_table, write_csv, ErrorKind,
    FileRoot, PipelineError, Stage, StageIo, ATTRIBUTION_FILE, CALIBRATED_10MIN_FILE,
    CALIBRATED_HOURLY_FILE, IO_HEADER, IO_HOURLY_FILE, LABELS_FILE, LABELS_HEADER,
    NETWORK_AVG_FILE, NETWORK_HEADER,
};
use crate::config::DailyInterval;
use crate::exposure::{MicroenvLabel, ATTRIBUTION_HEADER};
use crate::timeseries::io::fmt_time;
use crate::timeseries::read_windows_csv;

pub const REPORT_DIR: &str = "report";

const STAGE: Stage = Stage::Report;

struct Clock {
    offset: FixedOffset,
    night: DailyInterval,
}

impl Clock {
    fn cells(&self, t: DateTime<Utc>) -> [String; 3] {
        [
            fmt_time(t),
            t.with_timezone(&self.offset).format("%Y-%m-%dT%H:%M%:z").to_string(),
            u8::from(self.night.contains(t, self.offset)).to_string(),
        ]
    }
}

fn path(name: &str) -> String {
    format!("{REPORT_DIR}/{name}")
}

pub(super) fn write_bundles(io: &mut StageIo<'_>) -> Result<(), PipelineError> {
    let cfg = &io.ctx.config;
    let span = cfg
        .study_window()
        .map_err(|e| PipelineError::new(STAGE, ErrorKind::Config, e.to_string()))?;
    let clock = Clock {
        offset: cfg
            .offset()
            .map_err(|e| PipelineError::new(STAGE, ErrorKind::Config, e.to_string()))?,
        night: cfg.study.nighttime,
    };

    // Figure 2: network averages with 1-sigma bands.
    let bytes = io.read(FileRoot::Output, NETWORK_AVG_FILE)?;
    let rows = read_table(STAGE, NETWORK_AVG_FILE, &bytes, &NETWORK_HEADER)?;
    let times = rows
        .iter()
        .map(|r| cell_time(STAGE, NETWORK_AVG_FILE, r, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let buf = write_csv(
        STAGE,
        &["group", "window_start", "local_time", "night", "mean", "sigma", "n"],
        |w| {
            for (r, t) in rows.iter().zip(&times) {
                let [a, b, c] = clock.cells(*t);
                w.write_record([&r[0], &a, &b, &c, &r[2], &r[3], &r[4]])?;
            }
            Ok(())
        },
    )?;
    io.write(&path("fig2_network.csv"), buf)?;

    // Figure 3: hourly indoor and outdoor per site.
    let bytes = io.read(FileRoot::Output, CALIBRATED_HOURLY_FILE)?;
    let hourly = read_windows_csv(&bytes[..]).map_err(io.csv_err(CALIBRATED_HOURLY_FILE))?;
    let valid = |node: &Option<String>| -> BTreeMap<DateTime<Utc>, f64> {
        node.as_deref()
            .and_then(|n| hourly.get(n))
            .map(|s| {
                s.valid_windows()
                    .filter(|w| span.contains(w.start))
                    .map(|w| (w.start, w.mean))
                    .collect()
            })
            .unwrap_or_default()
    };
    let mut site_rows = Vec::new();
    for site in &cfg.sites {
        let indoor = valid(&site.indoor_node);
        let outdoor = valid(&site.outdoor_node);
        let mut hours: Vec<_> = indoor.keys().chain(outdoor.keys()).copied().collect();
        hours.sort();
        hours.dedup();
        for t in hours {
            site_rows.push((
                site.location_id.clone(),
                t,
                indoor.get(&t).copied(),
                outdoor.get(&t).copied(),
            ));
        }
    }
    let buf = write_csv(
        STAGE,
        &["location_id", "window_start", "local_time", "night", "indoor", "outdoor"],
        |w| {
            for (id, t, i, o) in &site_rows {
                let [a, b, c] = clock.cells(*t);
                w.write_record([id.clone(), a, b, c, opt_cell(*i), opt_cell(*o)])?;
            }
            Ok(())
        },
    )?;
    io.write(&path("fig3_sites.csv"), buf)?;

    // Figure 4: hourly I/O ratios.
    let bytes = io.read(FileRoot::Output, IO_HOURLY_FILE)?;
    let rows = read_table(STAGE, IO_HOURLY_FILE, &bytes, &IO_HEADER)?;
    let times = rows
        .iter()
        .map(|r| cell_time(STAGE, IO_HOURLY_FILE, r, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let buf = write_csv(
        STAGE,
        &["location_id", "window_start", "local_time", "night", "io_ratio"],
        |w| {
            for (r, t) in rows.iter().zip(&times) {
                let [a, b, c] = clock.cells(*t);
                w.write_record([&r[0], &a, &b, &c, &r[4]])?;
            }
            Ok(())
        },
    )?;
    io.write(&path("fig4_io.csv"), buf)?;

    // Figure 5: personal trace against home monitors and outdoor.
    let bytes = io.read(FileRoot::Output, LABELS_FILE)?;
    let labels = read_table(STAGE, LABELS_FILE, &bytes, &LABELS_HEADER)?;
    let bytes = io.read(FileRoot::Output, CALIBRATED_10MIN_FILE)?;
    let tens = read_windows_csv(&bytes[..]).map_err(io.csv_err(CALIBRATED_10MIN_FILE))?;
    let lookup = |nodes: &[String]| -> BTreeMap<DateTime<Utc>, f64> {
        let mut acc: BTreeMap<DateTime<Utc>, (f64, usize)> = BTreeMap::new();
        for s in nodes.iter().filter_map(|n| tens.get(n)) {
            for w in s.valid_windows() {
                let e = acc.entry(w.start).or_default();
                e.0 += w.mean;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
    };
    let (home, outdoor) = match &cfg.personal {
        Some(p) => (lookup(&p.home_nodes), lookup(&p.outdoor_node.iter().cloned().collect::<Vec<_>>())),
        None => Default::default(),
    };
    let mut personal_rows = Vec::with_capacity(labels.len());
    for r in &labels {
        let t = cell_time(STAGE, LABELS_FILE, r, 0)?;
        let pm = cell_f64(STAGE, LABELS_FILE, r, 1)?;
        personal_rows.push((t, pm, r[2].to_string()));
    }
    let buf = write_csv(
        STAGE,
        &["window_start", "local_time", "night", "personal", "home", "outdoor", "label"],
        |w| {
            for (t, pm, label) in &personal_rows {
                let [a, b, c] = clock.cells(*t);
                w.write_record([
                    a,
                    b,
                    c,
                    opt_cell(*pm),
                    opt_cell(home.get(t).copied()),
                    opt_cell(outdoor.get(t).copied()),
                    label.clone(),
                ])?;
            }
            Ok(())
        },
    )?;
    io.write(&path("fig5_personal.csv"), buf)?;

    // Figure 6: stacked daily attributed exposure.
    let bytes = io.read(FileRoot::Output, ATTRIBUTION_FILE)?;
    let rows = read_table(STAGE, ATTRIBUTION_FILE, &bytes, &ATTRIBUTION_HEADER)?;
    let mut days: BTreeMap<String, ([f64; 3], f64)> = BTreeMap::new();
    for r in &rows {
        let label = label_from_str(&r[1]).ok_or_else(|| {
            PipelineError::new(STAGE, ErrorKind::Input, format!("unknown label {:?}", &r[1]))
                .in_file(ATTRIBUTION_FILE)
        })?;
        let ac = cell_f64(STAGE, ATTRIBUTION_FILE, r, 4)?.unwrap_or(0.0);
        let total = cell_f64(STAGE, ATTRIBUTION_FILE, r, 5)?.unwrap_or(0.0);
        let e = days.entry(r[0].to_string()).or_default();
        let i = MicroenvLabel::ALL.iter().position(|l| *l == label).expect("known label");
        e.0[i] = ac;
        e.1 = total;
    }
    let buf = write_csv(STAGE, &["date", "home", "office", "other", "total"], |w| {
        for (day, (ac, total)) in &days {
            w.write_record([
                day.clone(),
                ac[0].to_string(),
                ac[1].to_string(),
                ac[2].to_string(),
                total.to_string(),
            ])?;
        }
        Ok(())
    })?;
    io.write(&path("fig6_attribution.csv"), buf)?;
    io.count("days", days.len() as u64);
    Ok(())
}
