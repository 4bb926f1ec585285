use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smokenet::pipeline::{self, Context, PipelineError, StageRecord};
use smokenet::scenario::{generate_episode, ScenarioConfig, ScenarioError, CONFIG_FILE};

/// Telemetry and exposure analytics for low-cost PM2.5 sensor networks.
#[derive(Debug, Parser)]
#[command(name = "smokenet", version)]
struct Cli {
    /// Run configuration (TOML). For `simulate`, the scenario configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Directory holding samples.csv, reference.csv and, by default, config.toml.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode frame and NMEA logs and merge them into samples.csv.
    Parse(InputArgs),
    /// Validate samples and write 10-minute and hourly windows.
    Ingest(InputArgs),
    /// Fit and select the calibration model and apply it to every sensor.
    Calibrate {
        #[command(flatten)]
        input: InputArgs,
        /// Training node; defaults to the configured calibration node.
        #[arg(long)]
        node: Option<String>,
    },
    /// Site summary table, hourly I/O ratios, network averages, paired test.
    Analyze(InputArgs),
    /// Geofence labeling and daily exposure attribution.
    Attribute(InputArgs),
    /// Figure-shaped CSV bundles.
    Report(InputArgs),
    /// Every stage in order.
    Run(InputArgs),
    /// Generate a synthetic episode from a scenario configuration.
    Simulate {
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn context(cli: &Cli, input: &InputArgs) -> Result<Context, PipelineError> {
    let input_dir = match (&input.input, &cli.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(cfg)) => cfg.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => PathBuf::from("."),
    };
    let config = cli
        .config
        .clone()
        .unwrap_or_else(|| input_dir.join(CONFIG_FILE));
    Context::load(&config, &input_dir, &cli.out)
}

fn print_record(stage: &str, record: &StageRecord) {
    println!("{stage}: wrote {} file(s)", record.outputs.len());
    for (name, value) in &record.counters {
        println!("  {name} = {value}");
    }
}

fn run_pipeline(cli: &Cli) -> Result<(), PipelineError> {
    let (stage, input) = match &cli.command {
        Command::Parse(i) => ("parse", i),
        Command::Ingest(i) => ("ingest", i),
        Command::Calibrate { input, .. } => ("calibrate", input),
        Command::Analyze(i) => ("analyze", i),
        Command::Attribute(i) => ("attribute", i),
        Command::Report(i) => ("report", i),
        Command::Run(i) => ("run", i),
        Command::Simulate { .. } => unreachable!("handled separately"),
    };
    let ctx = context(cli, input)?;
    let record = match &cli.command {
        Command::Parse(_) => pipeline::parse(&ctx)?,
        Command::Ingest(_) => pipeline::ingest(&ctx)?,
        Command::Calibrate { node, .. } => pipeline::calibrate(&ctx, node.as_deref())?,
        Command::Analyze(_) => pipeline::analyze(&ctx)?,
        Command::Attribute(_) => pipeline::attribute(&ctx)?,
        Command::Report(_) => pipeline::report(&ctx)?,
        Command::Run(_) => {
            let manifest = pipeline::run(&ctx)?;
            for (s, r) in &manifest.stages {
                print_record(s.as_str(), r);
            }
            println!("outputs in {}", ctx.out.display());
            return Ok(());
        }
        Command::Simulate { .. } => unreachable!("handled separately"),
    };
    print_record(stage, &record);
    Ok(())
}

fn simulate(cli: &Cli, seed: Option<u64>) -> Result<(), (i32, String)> {
    let path = cli
        .config
        .as_ref()
        .ok_or((3, "simulate needs --config <scenario.toml>".to_string()))?;
    let text = std::fs::read_to_string(path).map_err(|e| (3, format!("{}: {e}", path.display())))?;
    let mut cfg = ScenarioConfig::from_toml(&text).map_err(|e| (exit_code(&e), e.to_string()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = generate_episode(&cfg).map_err(|e| (exit_code(&e), e.to_string()))?;
    dataset
        .write_to(&cli.out)
        .map_err(|e| (exit_code(&e), e.to_string()))?;
    println!(
        "simulate: {} samples, {} reference records written to {}",
        dataset.samples.len(),
        dataset.reference.len(),
        cli.out.display()
    );
    Ok(())
}

fn exit_code(e: &ScenarioError) -> i32 {
    match e {
        ScenarioError::Config(_) | ScenarioError::Syntax(_) => 3,
        ScenarioError::Csv(_) | ScenarioError::Io(_) | ScenarioError::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { seed } => simulate(&cli, *seed),
        _ => run_pipeline(&cli).map_err(|e| (e.exit_code(), e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
