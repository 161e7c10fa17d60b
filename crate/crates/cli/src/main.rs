//! `wxpipe`: simulate a low-cost weather station, run its datalogger and
//! ingestion server, process raw samples into hourly parameters, and
//! calibrate them against a reference station.

mod calib;
mod e2e;
mod error;
mod files;
mod manifest;
mod report;
mod station;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wxpipe_core::calibration::{split_by_days, Split};
use wxpipe_core::metrics::MetricsReport;
use wxpipe_core::model::{parse_ts, write_hourly_csv, PairedDataset, Sensor, StationId, Timestamp};
use wxpipe_core::processing::{process_samples, ProcessingConfig};
use wxpipe_core::server::serve;
use wxpipe_core::sim::{emit_reference_hourly, gen_weather, simulate_raw, DistortionProfile, RawStreamOptions, Scenario};
use wxpipe_core::store::RawStore;

use crate::calib::{best_from_ranking_csv, corrected_csv, experiment_seeds, learner_named, learners, FinalSummary};
use crate::error::{data, exit_code, usage, EXIT_OK};
use crate::files::{load_hourly, load_paired, raw_csv, read_input, sensor_from_name, write_output};
use crate::manifest::{write_with_manifest, RunManifest, MANIFEST_FILE};

pub const DEFAULT_START: &str = "2024-01-01T00:00:00Z";
pub const ENV_SPOOL: &str = "WXPIPE_SPOOL";
pub const ENV_STORE: &str = "WXPIPE_STORE";

#[derive(Parser, Debug)]
#[command(name = "wxpipe", version, about = "Low-cost weather station pipeline")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate weather, the low-cost raw stream and the reference hourly data.
    Simulate(SimulateArgs),
    /// Run the datalogger client against a server.
    Station(station::StationArgs),
    /// Run the ingestion server.
    Server(ServerArgs),
    /// Turn stored raw samples into hourly parameters.
    Process(ProcessArgs),
    /// Metrics of the low-cost values against the reference in a paired file.
    Evaluate(EvaluateArgs),
    /// Rank models over seeded experiments, or run the final correction.
    Calibrate(CalibrateArgs),
    /// Simulate, transfer, process, calibrate and report in one go.
    E2e(e2e::E2eArgs),
    /// Plot data and metrics from two hourly files.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value = "rainy-season")]
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 30, conflicts_with = "minutes")]
    days: u32,
    /// Length in minutes instead of days; rounded down to whole hours for
    /// the reference file.
    #[arg(long)]
    minutes: Option<usize>,
    #[arg(long, default_value = DEFAULT_START)]
    start: String,
    /// `default`, `identity`, or a distortion profile JSON file.
    #[arg(long, default_value = "default")]
    distortion: String,
    /// Directory for raw.csv and pws.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ServerArgs {
    #[arg(long, default_value = "0.0.0.0:7700")]
    bind: String,
    /// Store directory; WXPIPE_STORE takes precedence.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ProcessArgs {
    /// Store directory; WXPIPE_STORE takes precedence.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    station: String,
    /// Inclusive start, e.g. 2024-01-01T00:00:00Z.
    #[arg(long)]
    from: String,
    /// Exclusive end.
    #[arg(long)]
    to: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Sensor of the paired file; taken from a `paired_<S>.csv` name if omitted.
    #[arg(long)]
    sensor: Option<String>,
    /// Only score the hours after the first N days.
    #[arg(long)]
    train_days: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
enum Mode {
    Experiments,
    Final,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    sensor: Option<String>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Number of seeded experiments (seeds 1..=N).
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 100)]
    forest_trees: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 18)]
    train_days: u32,
    /// Model for the final run; `best` takes the top of --ranking, or ranks
    /// first when no ranking is given.
    #[arg(long, default_value = "best")]
    model: String,
    #[arg(long)]
    ranking: Option<PathBuf>,
    /// Seed of the final fit.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also save the fitted model as JSON (final mode).
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Low-cost station hourly CSV.
    #[arg(long)]
    lcaws: PathBuf,
    /// Reference station hourly CSV.
    #[arg(long)]
    pws: PathBuf,
    /// Optional corrected low-cost hourly CSV.
    #[arg(long)]
    corrected: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn parse_start(s: &str) -> Result<Timestamp> {
    parse_ts(s).map_err(|e| usage(format!("timestamp {s:?}: {e} (expected YYYY-MM-DDTHH:MM:SSZ)")))
}

pub fn parse_station(s: &str) -> Result<StationId> {
    Ok(StationId::new(s)?)
}

fn parse_sensor(flag: Option<&str>, path: &Path) -> Result<Sensor> {
    match flag {
        Some(s) => Ok(s.to_ascii_uppercase().parse()?),
        None => sensor_from_name(path).ok_or_else(|| usage(format!("--sensor is required for {}", path.display()))),
    }
}

/// `default`, `identity`, or a JSON profile file.
pub fn parse_distortion(spec: &str, seed: u64) -> Result<DistortionProfile> {
    let profile = match spec {
        "default" => DistortionProfile::lcaws_default(seed),
        "identity" => DistortionProfile::identity(seed),
        path => {
            let text = read_input(Path::new(path))?;
            serde_json::from_str(&text).map_err(|e| data(format!("distortion profile {path}: {e}")))?
        }
    };
    profile.validate().map_err(data)?;
    Ok(profile)
}

fn env_path(var: &str, flag: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    std::env::var_os(var)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or(flag)
        .ok_or_else(|| usage(format!("--{name} or {var} is required")))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let scenario: Scenario = args.scenario.parse()?;
    let start = parse_start(&args.start)?;
    let profile = parse_distortion(&args.distortion, args.seed)?;
    let minutes = args.minutes.unwrap_or(args.days as usize * 1440);
    let truth = gen_weather(args.seed, start, minutes, scenario)?;
    let raw = simulate_raw(&truth, &profile, &ProcessingConfig::default(), &RawStreamOptions::default());
    let whole = truth.len() / 60 * 60;
    let reference = if whole > 0 { emit_reference_hourly(&truth[..whole])? } else { Vec::new() };

    let mut manifest = RunManifest::new("simulate", &args, vec![args.seed], started)?;
    if Path::new(&args.distortion).is_file() {
        manifest.input(Path::new(&args.distortion))?;
    }
    let raw_path = args.out.join("raw.csv");
    let pws_path = args.out.join("pws.csv");
    write_output(&raw_path, &raw_csv(&raw))?;
    write_output(&pws_path, &write_hourly_csv(&reference))?;
    manifest.output(&raw_path, &args.out)?;
    manifest.output(&pws_path, &args.out)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    println!("{} raw samples, {} reference hours → {}", raw.len(), reference.len(), args.out.display());
    Ok(())
}

fn cmd_server(args: ServerArgs) -> Result<()> {
    let dir = env_path(ENV_STORE, args.store, "store")?;
    let store = Arc::new(RawStore::open(&dir).with_context(|| format!("opening store {}", dir.display()))?);
    let handle = serve(&args.bind, store).with_context(|| format!("binding {}", args.bind))?;
    println!("listening on {}, store {}", handle.addr(), dir.display());
    handle.wait();
    Ok(())
}

fn cmd_process(args: ProcessArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let dir = env_path(ENV_STORE, args.store.clone(), "store")?;
    let station = parse_station(&args.station)?;
    let (from, to) = (parse_start(&args.from)?, parse_start(&args.to)?);
    if from >= to {
        return Err(usage("--from must be before --to"));
    }
    let store = RawStore::open(&dir).with_context(|| format!("opening store {}", dir.display()))?;
    let cfg = ProcessingConfig::default();
    // One window of look-back supplies the lead sample of the first hour.
    let samples = store.query_range(&station, from - cfg.window(), to)?;
    let out = process_samples(&samples, from, to, &cfg);
    for (t, e) in &out.failures {
        log::warn!("window {t}: {e}");
    }
    if out.records.is_empty() {
        return Err(data(format!("no samples for {station} in [{}, {})", args.from, args.to)));
    }
    let mut manifest = RunManifest::new("process", &args, Vec::new(), started)?;
    manifest.inputs.push(manifest::FileEntry::of(&dir.join(wxpipe_core::store::LOG_FILE), dir.join(wxpipe_core::store::LOG_FILE).display().to_string())?);
    write_with_manifest(&args.out, &write_hourly_csv(&out.records), manifest)?;
    println!("{} hourly records ({} windows failed) → {}", out.records.len(), out.failures.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    sensor: Sensor,
    window: String,
    metrics: MetricsReport,
    significance: String,
}

fn test_window(data: &PairedDataset, train_days: Option<u32>) -> Result<(String, Split)> {
    match train_days {
        None => Ok(("all".to_string(), Split { train: Vec::new(), test: (0..data.len()).collect() })),
        Some(d) => Ok((format!("after day {d}"), split_by_days(data, d)?)),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let sensor = parse_sensor(args.sensor.as_deref(), &args.pairs)?;
    let pairs = load_paired(&args.pairs, sensor)?;
    if pairs.is_empty() {
        return Err(data(format!("{} has no paired hours", args.pairs.display())));
    }
    let (window, split) = test_window(&pairs, args.train_days)?;
    let metrics = wxpipe_core::calibration::raw_metrics(&pairs, &split)?;
    let report = EvaluateReport { sensor, window, significance: metrics.significance().to_string(), metrics };
    let mut manifest = RunManifest::new("evaluate", &args, Vec::new(), started)?;
    manifest.input(&args.pairs)?;
    write_with_manifest(&args.out, &(serde_json::to_string_pretty(&report)? + "\n"), manifest)?;
    print!("{}{}", calib::METRICS_HEADER.to_string() + "\n", calib::metrics_line(sensor, "RAW", &report.metrics));
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let sensor = parse_sensor(args.sensor.as_deref(), &args.pairs)?;
    let pairs = load_paired(&args.pairs, sensor)?;
    if args.forest_trees == 0 || args.folds < 2 || args.seeds < 2 {
        return Err(usage("--forest-trees needs ≥ 1; --folds and --seeds need ≥ 2"));
    }
    let seeds = experiment_seeds(args.seeds);
    let pool = learners(args.forest_trees, args.folds);
    match args.mode {
        Mode::Experiments => {
            let ranking = calib::rank(&pairs, &pool, &seeds)?;
            let mut manifest = RunManifest::new("calibrate", &args, seeds, started)?;
            manifest.input(&args.pairs)?;
            write_with_manifest(&args.out, &ranking.csv, manifest)?;
            print!("{}", ranking.csv);
        }
        Mode::Final => {
            let mut manifest = RunManifest::new("calibrate", &args, vec![args.seed], started)?;
            manifest.input(&args.pairs)?;
            let name = if args.model.eq_ignore_ascii_case("best") {
                match &args.ranking {
                    Some(path) => {
                        manifest.input(path)?;
                        best_from_ranking_csv(&read_input(path)?).ok_or_else(|| data(format!("{} ranks no model", path.display())))?
                    }
                    None => {
                        manifest.seeds = seeds.clone();
                        let ranking = calib::rank(&pairs, &pool, &seeds)?;
                        ranking.best().ok_or_else(|| data("ranking has no model"))?.to_string()
                    }
                }
            } else {
                args.model.clone()
            };
            let learner = learner_named(&name, args.forest_trees, args.folds)?;
            let outcome = calib::run_final(&pairs, &learner, args.train_days, args.seed)?;
            if let Some(path) = &args.model_out {
                write_with_manifest(path, &(outcome.model.to_json() + "\n"), manifest.clone())?;
            }
            write_with_manifest(&args.out, &corrected_csv(&pairs, &outcome), manifest)?;
            let s = FinalSummary::new(sensor, &outcome);
            print!("{}", report::metrics_csv(&[(sensor, "RAW", &s.raw), (sensor, &s.model, &s.corrected)]));
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let lcaws = load_hourly(&args.lcaws)?;
    let pws = load_hourly(&args.pws)?;
    let corrected = args.corrected.as_deref().map(load_hourly).transpose()?;
    let pairs: Vec<PairedDataset> = Sensor::ALL.iter().map(|&s| PairedDataset::pair(s, &lcaws, &pws)).collect();
    if pairs[0].is_empty() {
        return Err(data(format!("no overlapping hours between {} and {}", args.lcaws.display(), args.pws.display())));
    }
    let metrics = pairs
        .iter()
        .map(|p| Ok((p.sensor, MetricsReport::compute(&p.pws(), &p.lcaws())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut sources: Vec<(&str, &[_])> = vec![("lcaws", &lcaws), ("pws", &pws)];
    if let Some(c) = &corrected {
        sources.push(("corrected", c));
    }

    let mut manifest = RunManifest::new("report", &args, Vec::new(), started)?;
    manifest.input(&args.lcaws)?;
    manifest.input(&args.pws)?;
    if let Some(c) = &args.corrected {
        manifest.input(c)?;
    }
    let outputs = [
        ("timeseries.csv", report::timeseries_csv(&sources)),
        ("scatter.csv", report::scatter_csv(&pairs)),
        ("metrics.csv", report::metrics_csv(&metrics.iter().map(|(s, m)| (*s, "RAW", m)).collect::<Vec<_>>())),
    ];
    for (name, text) in &outputs {
        let path = args.out.join(name);
        write_output(&path, text)?;
        manifest.output(&path, &args.out)?;
    }
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    print!("{}", outputs[2].1);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Station(a) => station::cmd_station(a),
        Command::Server(a) => cmd_server(a),
        Command::Process(a) => cmd_process(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::E2e(a) => e2e::cmd_e2e(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
