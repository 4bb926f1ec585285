#![allow(dead_code)]

use std::path::Path;

use smokenet::pipeline::{self, Context, Manifest, PipelineError};
use smokenet::scenario::{generate_episode, EpisodeDataset, ScenarioConfig, CONFIG_FILE};

/// Two-sided signed-rank p by listing all 2^n sign assignments.
/// Ranks are midranks of |d| computed by pairwise counting.
pub fn wilcoxon_oracle(diffs: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = ranks.iter().sum::<f64>() - w_plus;
    if n == 0 {
        return (0.0, 0.0, 1.0);
    }
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_plus {
            lo += 1;
        }
        if w >= w_plus {
            hi += 1;
        }
    }
    let p = (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0);
    (w_plus, w_minus, p)
}

/// Small episode: one HEPA site, one leaky site sharing nothing, a site
/// without its own outdoor sensor, and a wearer.
pub const SMALL_SCENARIO: &str = r#"
seed = 7
start = "2020-09-10T07:00:00Z"
end = "2020-09-12T07:00:00Z"
calibration_site = "A"

[outdoor]
breakpoints = [[0, 80], [12, 150], [36, 150], [48, 60]]

[sensor]
slope = 1.3
intercept = 1.5
noise_sigma = 2.0

[reference]
noise_sigma = 1.0

[wilcoxon.during]
start = "2020-09-10T07:00:00Z"
end = "2020-09-11T07:00:00Z"

[wilcoxon.post]
start = "2020-09-11T07:00:00Z"
end = "2020-09-12T07:00:00Z"

[[sites]]
location_id = "A"
hepa = true
penetration = 0.8
air_exchange_per_h = 0.5
k_extra_per_h = 2.0

[[sites]]
location_id = "B"
penetration = 0.8
air_exchange_per_h = 0.5
k_extra_per_h = 0.1
cooking = [{ at = "18:00", delta_ug_m3 = 40.0 }]

[[sites]]
location_id = "C"
penetration = 0.9
air_exchange_per_h = 0.8
k_extra_per_h = 0.4
outdoor_sensor = false
shared_outdoor = "B"

[personal]
node_id = "P1"
home = { lat = 47.6550, lon = -122.3080 }
office = { lat = 47.6530, lon = -122.3040 }
other = [47.6600, -122.3200]
gps_dropout = 0.05
sources.home = { site = "A" }
sources.office = { site = "B" }
sources.other = { factor = 0.9 }
schedule = [
    { from = "00:00", to = "08:00", env = "home" },
    { from = "08:00", to = "09:00", env = "other" },
    { from = "09:00", to = "17:00", env = "office" },
    { from = "17:00", to = "24:00", env = "home" },
]
"#;

pub fn small_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml(SMALL_SCENARIO).expect("fixture scenario parses")
}

pub fn simulate_into(cfg: &ScenarioConfig, dir: &Path) -> EpisodeDataset {
    let ds = generate_episode(cfg).expect("episode generates");
    ds.write_to(dir).expect("episode writes");
    ds
}

pub fn run_dir(input: &Path, out: &Path) -> Result<Manifest, PipelineError> {
    let ctx = Context::load(&input.join(CONFIG_FILE), input, out)?;
    pipeline::run(&ctx)
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
