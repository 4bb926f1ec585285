//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::time::{Duration as StdDuration, Instant};

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use smokenet::analytics::{pm_reduction, wilcoxon_with_method, PMethod};
use smokenet::calibration::{accuracy_of, bic_score, select_model, ModelForm};
use smokenet::exposure::{attribute_all, LabeledSeries, LabeledWindow, MicroenvLabel};
use smokenet::pipeline::{ExposureSummary, TABLE2_FILE, EXPOSURE_SHARES_FILE};
use smokenet::scenario::{GroundTruth, ScenarioConfig, GROUND_TRUTH_FILE};
use smokenet::timeseries::{StudyWindow, TimeSeries, Window, WindowLen};
use smokenet::wire::{encode_pms_frame, parse_gps_sentence, parse_pms_frame, resync_and_parse, FrameScanner, NmeaLog, SensorFrame};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn hourly(id: &str, mean: f64) -> TimeSeries {
    TimeSeries {
        node_id: id.into(),
        window_len: WindowLen::Hour,
        windows: vec![Window {
            start: Utc.with_ymd_and_hms(2020, 9, 12, 0, 0, 0).unwrap(),
            mean,
            coverage: 1.0,
            n_samples: 360,
            valid: true,
        }],
    }
}

fn table2_consistency() -> Outcome {
    // (site, indoor mean, outdoor mean, printed reduction %)
    let rows = [
        ("L1", 20.9, 102.0, 79.6),
        ("L2-a", 58.7, 114.5, 48.7),
        ("L2-b", 42.4, 114.5, 63.0),
        ("L3", 48.9, 104.5, 53.2),
        ("L4", 104.3, 123.8, 15.7),
        ("L5", 79.7, 112.2, 29.0),
        ("L6", 90.9, 110.1, 17.5),
        ("L7", 82.5, 105.5, 21.8),
    ];
    let t = Utc.with_ymd_and_hms(2020, 9, 12, 0, 0, 0).unwrap();
    let span = StudyWindow::new(t, t + Duration::hours(1)).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_site = "";
    for (site, indoor, outdoor, printed) in rows {
        let r = pm_reduction(&hourly("in", indoor), &hourly("out", outdoor), &span).unwrap_or(f64::NAN);
        let gap = (r - printed).abs();
        if !(gap <= worst) {
            worst = gap;
            worst_site = site;
        }
    }
    outcome(worst <= 0.2, format!("8 sites, largest gap {worst:.3} pp at {worst_site}"))
}

fn calibration_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(264);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let pairs: Vec<(f64, f64)> = (0..264)
        .map(|_| {
            let x: f64 = rng.random_range(5.0..250.0);
            (x, 0.7 * x + 5.0 + noise.sample(&mut rng))
        })
        .collect();
    let model = match select_model(&pairs) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("fit failed: {e}")),
    };
    let pre = accuracy_of(|x| x, &pairs).rmse;
    let post = accuracy_of(|x| model.predict(x), &pairs).rmse;
    let pass = model.form == ModelForm::LinearFree
        && (0.65..=0.75).contains(&model.beta1)
        && (2.0..=8.0).contains(&model.beta0)
        && post <= pre;
    outcome(
        pass,
        format!(
            "{} b1={:.4} b0={:.3} rmse {:.2} -> {:.2}",
            model.form.as_str(),
            model.beta1,
            model.beta0,
            pre,
            post
        ),
    )
}

fn bic_arithmetic() -> Outcome {
    let v = bic_score(50, 200.0, 2);
    let oracle = 50.0 * (200.0f64 / 50.0).ln() + 2.0 * 50.0f64.ln();
    let mut worst_gap: f64 = 0.0;
    for n in [3usize, 10, 50, 264, 1000, 10_000] {
        for rss in [0.5, 200.0, 1e5] {
            let gap = bic_score(n, rss, 3) - bic_score(n, rss, 2);
            worst_gap = worst_gap.max((gap - (n as f64).ln()).abs());
        }
    }
    let pass = (v - 77.139).abs() <= 0.001 && (v - oracle).abs() < 1e-12 && worst_gap < 1e-9;
    outcome(pass, format!("bic(50, 200, 2) = {v:.4}, penalty gap error {worst_gap:.1e}"))
}

fn random_frame(rng: &mut ChaCha8Rng) -> SensorFrame {
    SensorFrame {
        pm1_std: rng.random(),
        pm25_std: rng.random(),
        pm10_std: rng.random(),
        pm1_atm: rng.random(),
        pm25_atm: rng.random(),
        pm10_atm: rng.random(),
        counts: rng.random(),
        status: rng.random(),
    }
}

fn parser_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1_000_000);
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut panics = 0u64;
    let mut decoded = 0u64;
    for i in 0..1_000_000u32 {
        let len = rng.random_range(0..=96);
        let mut bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        if i % 2 == 0 {
            let frame = encode_pms_frame(&random_frame(&mut rng));
            let at = rng.random_range(0..=bytes.len());
            let keep = rng.random_range(0..=frame.len());
            bytes.splice(at..at, frame[..keep].iter().copied());
            if i % 4 == 0 && !bytes.is_empty() {
                let k = rng.random_range(0..bytes.len());
                bytes[k] = rng.random();
            }
        }
        let result = panic::catch_unwind(|| {
            let mut n = FrameScanner::new(&bytes).filter(|r| r.is_ok()).count();
            n += resync_and_parse(&bytes).iter().filter(|r| r.is_ok()).count();
            n += usize::from(parse_pms_frame(&bytes).is_ok());
            if i % 8 == 0 {
                let text = String::from_utf8_lossy(&bytes);
                let date = chrono::NaiveDate::from_ymd_opt(2020, 9, 10).unwrap();
                let _ = parse_gps_sentence(&text, date);
                let _ = NmeaLog::new(date).parse(&text);
            }
            n as u64
        });
        match result {
            Ok(n) => decoded += n,
            Err(_) => panics += 1,
        }
    }
    panic::set_hook(hook);

    let mut round_trip_failures = 0;
    let mut frames = Vec::new();
    for _ in 0..10_000 {
        let f = random_frame(&mut rng);
        let bytes = encode_pms_frame(&f);
        if parse_pms_frame(&bytes) != Ok(f) || encode_pms_frame(&parse_pms_frame(&bytes).unwrap_or_default()) != bytes {
            round_trip_failures += 1;
        }
        frames.push(bytes);
    }

    let (mut rejected, mut trials) = (0u64, 0u64);
    for bytes in frames.iter().take(200) {
        for pos in 0..bytes.len() {
            for flip in 1..=255u8 {
                let mut b = *bytes;
                b[pos] ^= flip;
                trials += 1;
                if parse_pms_frame(&b).is_err() {
                    rejected += 1;
                }
            }
        }
    }
    let rate = rejected as f64 / trials as f64;
    let pass = panics == 0 && round_trip_failures == 0 && rate >= 0.995;
    outcome(
        pass,
        format!(
            "1e6 fuzz inputs, {panics} panics, {decoded} frames recovered; 1e4 round trips, {round_trip_failures} mismatches; corruption rejected {:.3}% of {trials}",
            rate * 100.0
        ),
    )
}

fn wilcoxon_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let d: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-6i32..=6))).collect();
        let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x, 0.0)).collect();
        let r = wilcoxon_with_method(&pairs, PMethod::Exact);
        let (wp, wm, p) = common::wilcoxon_oracle(&d);
        if (r.w_plus, r.w_minus, r.statistic, r.p_value) != (wp, wm, wp.min(wm), p) {
            mismatches += 1;
        }
    }
    let five: Vec<(f64, f64)> = (1..=5).map(|k| (f64::from(k), 0.0)).collect();
    let p5 = wilcoxon_with_method(&five, PMethod::Exact).p_value;
    outcome(mismatches == 0 && p5 == 0.0625, format!("200 samples, {mismatches} mismatches; d=1..5 p={p5}"))
}

fn attribution_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let offset = chrono::FixedOffset::west_opt(7 * 3600).unwrap();
    let t0 = Utc.with_ymd_and_hms(2020, 9, 10, 7, 0, 0).unwrap();
    let days = 500;
    let windows: Vec<LabeledWindow> = (0..days * 144)
        .map(|i| LabeledWindow {
            start: t0 + Duration::minutes(10 * i as i64),
            pm25: rng.random_range(0.0..400.0),
            label: Some(MicroenvLabel::ALL[rng.random_range(0..3)]),
            carried: false,
        })
        .collect();
    let series = LabeledSeries { windows: windows.clone(), unclassified: 0, invalid_fixes: 0 };
    let lambda = 3.7;
    let scaled = LabeledSeries {
        windows: windows.iter().map(|w| LabeledWindow { pm25: w.pm25 * lambda, ..*w }).collect(),
        unclassified: 0,
        invalid_fixes: 0,
    };
    let a = attribute_all(&series, offset);
    let b = attribute_all(&scaled, offset);
    let mut sum_err: f64 = 0.0;
    let mut lin_err: f64 = 0.0;
    for (j, (x, y)) in a.iter().zip(&b).enumerate() {
        let day = &windows[j * 144..(j + 1) * 144];
        let mean = day.iter().map(|w| w.pm25).sum::<f64>() / 144.0;
        let total: f64 = MicroenvLabel::ALL.iter().map(|&l| x.entry(l).ac).sum();
        sum_err = sum_err.max((total - mean).abs() / mean);
        for l in MicroenvLabel::ALL {
            let want = x.entry(l).ac * lambda;
            if want > 0.0 {
                lin_err = lin_err.max((y.entry(l).ac - want).abs() / want);
            }
        }
    }
    let pass = a.len() == days && b.len() == days && sum_err <= 1e-9 && lin_err <= 1e-12;
    outcome(pass, format!("{} days, sum rel err {sum_err:.1e}, scaling rel err {lin_err:.1e}", a.len()))
}

const ORDERING_SCENARIO: &str = r#"
seed = 11
start = "2020-09-10T07:00:00Z"
end = "2020-09-14T07:00:00Z"
calibration_site = "H"

[outdoor]
breakpoints = [[0, 60], [30, 160], [70, 140], [96, 70]]
diurnal_amplitude = 0.15

[sensor]
slope = 1.3
intercept = 1.5
noise_sigma = 3.0

[reference]
noise_sigma = 2.0

[[sites]]
location_id = "H"
hepa = true
penetration = 0.8
air_exchange_per_h = 0.5
k_extra_per_h = 2.0

[[sites]]
location_id = "N"
penetration = 0.8
air_exchange_per_h = 0.5
k_extra_per_h = 0.1
"#;

fn table2_medians(out: &Path) -> BTreeMap<String, f64> {
    let text = common::read(&out.join(TABLE2_FILE));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "io_median").unwrap();
    lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[0].to_string(), cols[col].parse().unwrap_or(f64::NAN))
        })
        .collect()
}

fn simulate_and_run(cfg: &ScenarioConfig) -> Result<(tempfile::TempDir, PathBuf), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("input");
    let out = dir.path().join("out");
    common::simulate_into(cfg, &input);
    common::run_dir(&input, &out).map_err(|e| e.to_string())?;
    Ok((dir, out))
}

fn end_to_end_ordering() -> Outcome {
    let cfg = ScenarioConfig::from_toml(ORDERING_SCENARIO).unwrap();
    let (_dir, out) = match simulate_and_run(&cfg) {
        Ok(v) => v,
        Err(e) => return outcome(false, e),
    };
    let med = table2_medians(&out);
    let (h, n) = (med["H"], med["N"]);
    let (eh, en) = (0.8 * 0.5 / 2.5, 0.8 * 0.5 / 0.6);
    let pass = h < n && (h - eh).abs() <= 0.05 && (n - en).abs() <= 0.05;
    outcome(pass, format!("median I/O HEPA {h:.3} (analytic {eh:.3}), non-HEPA {n:.3} (analytic {en:.3})"))
}

const PERSONAL_SCENARIO: &str = r#"
seed = 76
start = "2020-09-10T07:00:00Z"
end = "2020-09-17T07:00:00Z"
calibration_site = "H"

[outdoor]
breakpoints = [[0, 50], [48, 170], [120, 150], [168, 60]]
diurnal_amplitude = 0.2

[sensor]
slope = 1.3
intercept = 1.5
noise_sigma = 3.0

[reference]
noise_sigma = 2.0

[[sites]]
location_id = "H"
penetration = 0.8
air_exchange_per_h = 0.5
k_extra_per_h = 0.3

[personal]
home = { lat = 47.6550, lon = -122.3080 }
office = { lat = 47.6530, lon = -122.3040 }
other = [47.6600, -122.3200]
gps_dropout = 0.05
sources.home = { factor = 0.5 }
sources.office = { factor = 0.9 }
sources.other = { factor = 0.9 }
schedule = [
    { from = "00:00", to = "08:00", env = "home" },
    { from = "08:00", to = "09:00", env = "other" },
    { from = "09:00", to = "12:40", env = "office" },
    { from = "12:40", to = "13:50", env = "other" },
    { from = "13:50", to = "24:00", env = "home" },
]
"#;

fn attribution_shares() -> Outcome {
    let cfg = ScenarioConfig::from_toml(PERSONAL_SCENARIO).unwrap();
    let (dir, out) = match simulate_and_run(&cfg) {
        Ok(v) => v,
        Err(e) => return outcome(false, e),
    };
    let truth: GroundTruth =
        serde_json::from_str(&common::read(&dir.path().join("input").join(GROUND_TRUTH_FILE))).unwrap();
    let truth = truth.personal.unwrap();
    let summary: ExposureSummary = serde_json::from_str(&common::read(&out.join(EXPOSURE_SHARES_FILE))).unwrap();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for label in MicroenvLabel::ALL {
        let got = summary
            .shares
            .iter()
            .find(|s| s.labels == [label])
            .map(|s| s.exposure_pct)
            .unwrap_or(f64::NAN);
        let want = truth.exposure_share_pct[&label];
        if !((got - want).abs() <= worst) {
            worst = (got - want).abs();
        }
        parts.push(format!(
            "{} {:.1}% time {:.2}/{:.2}% exposure",
            label.as_str(),
            truth.time_share_pct[&label],
            got,
            want
        ));
    }
    outcome(worst <= 2.0, format!("{}; largest gap {worst:.2} pp", parts.join(", ")))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn determinism() -> Outcome {
    let cfg = common::small_scenario();
    let runs: Vec<Result<(tempfile::TempDir, PathBuf), String>> = (0..2).map(|_| simulate_and_run(&cfg)).collect();
    let mut dirs = Vec::new();
    for r in runs {
        match r {
            Ok((d, _)) => dirs.push(d),
            Err(e) => return outcome(false, e),
        }
    }
    let (a, b) = (tree(dirs[0].path()), tree(dirs[1].path()));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    outcome(differing.is_empty() && a.len() > 10, format!("{} files compared, differing: {:?}", a.len(), differing))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<StdDuration>); 9] = [
        ("table2-consistency", table2_consistency, Some(StdDuration::from_secs(1))),
        ("calibration-recovery", calibration_recovery, Some(StdDuration::from_secs(1))),
        ("bic-arithmetic", bic_arithmetic, None),
        ("parser-robustness", parser_robustness, Some(StdDuration::from_secs(30))),
        ("wilcoxon-oracle", wilcoxon_oracle, None),
        ("attribution-exactness", attribution_exactness, None),
        ("end-to-end-ordering", end_to_end_ordering, Some(StdDuration::from_secs(10))),
        ("attribution-shares", attribution_shares, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let t = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = t.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= b);
        let pass = result.pass && in_budget;
        if !pass {
            failed += 1;
        }
        let budget_note = budget.map(|b| format!(" of {} s", b.as_secs())).unwrap_or_default();
        println!(
            "{} {name} ({:.2} s{budget_note}): {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
