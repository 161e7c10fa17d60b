//! The whole pipeline in one run: simulate both stations, ship the low-cost
//! station's raw stream over loopback TCP, process it, pair it with the
//! reference, calibrate every sensor and write the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use wxpipe_core::calibration::correct_dataset;
use wxpipe_core::client::{Client, ClientConfig, SimulatedSensors, TcpTransport, VirtualClock};
use wxpipe_core::metrics::MetricsReport;
use wxpipe_core::model::{write_hourly_csv, write_paired_csv, HourlyRecord, PairedDataset, RawSample, Sensor, StationId};
use wxpipe_core::processing::{process_samples, window_floor, ProcessingConfig};
use wxpipe_core::server::serve;
use wxpipe_core::sim::{emit_reference_hourly, gen_weather, simulate_raw, RawStreamOptions};
use wxpipe_core::store::RawStore;

use crate::calib::{self, corrected_csv, experiment_seeds, learner_named, learners, FinalSummary};
use crate::error::{data, usage};
use crate::files::{load_hourly, load_paired, write_output};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::report::{metrics_csv, scatter_csv, timeseries_csv};
use crate::{parse_distortion, parse_start, parse_station, DEFAULT_START};

/// Subdirectories the run owns and clears before starting.
const OWNED_DIRS: [&str; 8] = ["store", "spool", "hourly", "paired", "ranking", "models", "corrected", "report"];

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct E2eArgs {
    #[arg(long, default_value = "rainy-season")]
    pub scenario: String,
    /// Seed of the simulated weather and sensor noise.
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub days: u32,
    /// `default`, `identity`, or a distortion profile JSON file.
    #[arg(long, default_value = "default")]
    pub distortion: String,
    #[arg(long, default_value = DEFAULT_START)]
    pub start: String,
    /// Output directory (required unless replaying).
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    #[arg(long, default_value = "LCAWS01")]
    pub station_id: String,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Number of seeded experiments per sensor.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = 100)]
    pub forest_trees: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 18)]
    pub train_days: u32,
    /// Rerun with the flags of an earlier manifest and check that every
    /// output is byte-identical.
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

pub fn cmd_e2e(mut args: E2eArgs) -> Result<()> {
    let Some(manifest_path) = args.replay.take() else {
        let workdir = args.workdir.clone().ok_or_else(|| usage("--workdir is required"))?;
        run(&args, &workdir)?;
        return Ok(());
    };
    let old = RunManifest::read(&manifest_path)?;
    if old.subcommand != "e2e" {
        return Err(data(format!("{} is a {} manifest, not e2e", manifest_path.display(), old.subcommand)));
    }
    let mut replayed: E2eArgs =
        serde_json::from_value(old.flags.clone()).map_err(|e| data(format!("manifest flags: {e}")))?;
    let default_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let workdir = args.workdir.or(replayed.workdir.clone()).unwrap_or(default_dir);
    replayed.workdir = Some(workdir.clone());
    let new = run(&replayed, &workdir)?;

    let mut diffs = Vec::new();
    for o in &old.outputs {
        match new.outputs.iter().find(|n| n.path == o.path) {
            Some(n) if n == o => {}
            Some(n) => diffs.push(format!("{} changed ({} → {})", o.path, o.crc32, n.crc32)),
            None => diffs.push(format!("{} missing", o.path)),
        }
    }
    diffs.extend(new.outputs.iter().filter(|n| !old.outputs.iter().any(|o| o.path == n.path)).map(|n| format!("{} new", n.path)));
    if !diffs.is_empty() {
        return Err(data(format!("replay differs from {}: {}", manifest_path.display(), diffs.join("; "))));
    }
    println!("replay: {} outputs byte-identical", new.outputs.len());
    Ok(())
}

fn prepare(workdir: &Path) -> Result<()> {
    fs::create_dir_all(workdir).with_context(|| format!("creating {}", workdir.display()))?;
    for d in OWNED_DIRS {
        let p = workdir.join(d);
        if p.exists() {
            fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
        }
    }
    Ok(())
}

/// Ship `raw` through a station client and a loopback server; returns what
/// the server stored.
pub fn loopback(raw: &[RawSample], station: &StationId, batch_size: usize, workdir: &Path) -> Result<Vec<RawSample>> {
    let first = raw.first().ok_or_else(|| data("nothing to send"))?;
    let store = Arc::new(RawStore::open(workdir.join("store"))?);
    let server = serve("127.0.0.1:0", store.clone()).context("starting loopback server")?;
    let addr = server.addr().to_string();

    let mut cfg = ClientConfig::new(station.clone(), addr.clone(), workdir.join("spool"));
    cfg.batch_size = batch_size;
    let transport = TcpTransport::new(addr, cfg.send_timeout);
    // The simulated logger has been up for one period when it takes sample 0.
    let clock = VirtualClock::new(first.t_ts, 60_000);
    let mut client = Client::new(cfg, SimulatedSensors::new(raw), transport, clock)?;
    let stats = client.run(&AtomicBool::new(false), Some(raw.len() as u64))?;
    if !client.drain(1000) {
        bail!("{} batches still spooled after draining", client.spool().pending_len());
    }
    server.shutdown();
    info!("station delivered {} batches ({} send failures)", stats.delivered.len(), stats.send_failures);
    Ok(store.all_samples(station)?)
}

/// Hourly records over the whole hours spanned by `samples`.
pub fn process_all(samples: &[RawSample], cfg: &ProcessingConfig) -> Result<Vec<HourlyRecord>> {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Err(data("no samples to process"));
    };
    let out = process_samples(samples, window_floor(&first.t_ts, cfg), window_floor(&last.t_ts, cfg) + cfg.window(), cfg);
    for (t, e) in &out.failures {
        log::warn!("window {t}: {e}");
    }
    Ok(out.records)
}

struct SensorResult {
    paired: PairedDataset,
    all_hours: MetricsReport,
    summary: FinalSummary,
    model: wxpipe_core::calibration::FittedModel,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    info!("stage {name}");
    f().with_context(|| format!("stage {name}"))
}

pub fn run(args: &E2eArgs, workdir: &Path) -> Result<RunManifest> {
    let started = chrono::Utc::now();
    let scenario = args.scenario.parse().map_err(anyhow::Error::new)?;
    let start = parse_start(&args.start)?;
    let station = parse_station(&args.station_id)?;
    let profile = parse_distortion(&args.distortion, args.seed)?;
    if args.days == 0 || args.train_days >= args.days {
        return Err(usage("--train-days must be less than --days, and --days at least 1"));
    }
    if args.batch_size == 0 || args.seeds < 2 || args.forest_trees == 0 || args.folds < 2 {
        return Err(usage("--batch-size, --forest-trees need ≥ 1; --seeds, --folds need ≥ 2"));
    }
    let seeds = experiment_seeds(args.seeds);
    let mut manifest = RunManifest::new("e2e", args, seeds.clone(), started)?;
    if Path::new(&args.distortion).is_file() {
        manifest.input(Path::new(&args.distortion))?;
    }
    prepare(workdir)?;
    let cfg = ProcessingConfig::default();
    let p = |rel: &str| workdir.join(rel);

    let (raw, reference) = stage("simulate", || {
        let truth = gen_weather(args.seed, start, args.days as usize * 1440, scenario)?;
        let raw = simulate_raw(&truth, &profile, &cfg, &RawStreamOptions::default());
        Ok((raw, emit_reference_hourly(&truth)?))
    })?;

    let stored = stage("transfer", || {
        let stored = loopback(&raw, &station, args.batch_size, workdir)?;
        if stored != raw {
            bail!("store holds {} samples, station produced {}", stored.len(), raw.len());
        }
        Ok(stored)
    })?;

    let (lcaws, pws) = stage("process", || {
        let hourly = process_all(&stored, &cfg)?;
        write_output(&p("hourly/lcaws.csv"), &write_hourly_csv(&hourly))?;
        write_output(&p("hourly/pws.csv"), &write_hourly_csv(&reference))?;
        // Continue from the files so every later stage sees exactly what a
        // file-based run would.
        Ok((load_hourly(&p("hourly/lcaws.csv"))?, load_hourly(&p("hourly/pws.csv"))?))
    })?;

    let pool = learners(args.forest_trees, args.folds);
    let mut results = Vec::new();
    for sensor in Sensor::ALL {
        let r = stage(&format!("calibrate {sensor}"), || {
            let path = p(&format!("paired/paired_{sensor}.csv"));
            write_output(&path, &write_paired_csv(&PairedDataset::pair(sensor, &lcaws, &pws)))?;
            let paired = load_paired(&path, sensor)?;
            if paired.is_empty() {
                return Err(data(format!("no overlapping hours for {sensor}")));
            }
            let all_hours = MetricsReport::compute(&paired.pws(), &paired.lcaws())?;

            let ranking = calib::rank(&paired, &pool, &seeds)?;
            write_output(&p(&format!("ranking/ranking_{sensor}.csv")), &ranking.csv)?;
            let best = ranking.best().ok_or_else(|| data("ranking has no model"))?;
            let learner = learner_named(best, args.forest_trees, args.folds)?;

            let outcome = calib::run_final(&paired, &learner, args.train_days, args.seed)?;
            write_output(&p(&format!("models/model_{sensor}.json")), &(outcome.model.to_json() + "\n"))?;
            write_output(&p(&format!("corrected/corrected_{sensor}.csv")), &corrected_csv(&paired, &outcome))?;
            Ok(SensorResult { summary: FinalSummary::new(sensor, &outcome), model: outcome.model, paired, all_hours })
        })?;
        results.push(r);
    }

    stage("report", || {
        let mut corrected = lcaws.clone();
        for r in &results {
            let col = correct_dataset(&r.model, &lcaws, r.paired.sensor)?;
            for (c, v) in corrected.iter_mut().zip(col) {
                c.set_value(r.paired.sensor, v.value(r.paired.sensor));
            }
        }
        write_output(&p("corrected/lcaws_corrected.csv"), &write_hourly_csv(&corrected))?;

        let raw_rows: Vec<_> = results.iter().map(|r| (r.paired.sensor, "RAW", &r.all_hours)).collect();
        write_output(&p("report/raw_metrics.csv"), &metrics_csv(&raw_rows))?;
        let mut final_rows: Vec<_> = results.iter().map(|r| (r.summary.sensor, "RAW", &r.summary.raw)).collect();
        final_rows.extend(results.iter().map(|r| (r.summary.sensor, r.summary.model.as_str(), &r.summary.corrected)));
        write_output(&p("report/final_metrics.csv"), &metrics_csv(&final_rows))?;

        let pairs: Vec<PairedDataset> = results.iter().map(|r| r.paired.clone()).collect();
        write_output(&p("report/scatter.csv"), &scatter_csv(&pairs))?;
        write_output(
            &p("report/timeseries.csv"),
            &timeseries_csv(&[("lcaws", &lcaws), ("pws", &pws), ("corrected", &corrected)]),
        )?;
        let summaries: Vec<&FinalSummary> = results.iter().map(|r| &r.summary).collect();
        write_output(&p("report/summary.json"), &(serde_json::to_string_pretty(&summaries)? + "\n"))?;
        Ok(())
    })?;

    for rel in output_files(workdir)? {
        manifest.output(&workdir.join(&rel), workdir)?;
    }
    manifest.write(&workdir.join(MANIFEST_FILE))?;
    print_summary(&results);
    Ok(manifest)
}

/// Every file under the owned directories, sorted, relative to `workdir`.
/// The spool is excluded: it is empty after a successful run.
fn output_files(workdir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for d in OWNED_DIRS.iter().filter(|d| **d != "spool") {
        let dir = workdir.join(d);
        if dir.is_dir() {
            walk(&dir, &mut files)?;
        }
    }
    let mut rel: Vec<PathBuf> = files.iter().map(|f| f.strip_prefix(workdir).unwrap_or(f).to_path_buf()).collect();
    rel.sort();
    Ok(rel)
}

fn print_summary(results: &[SensorResult]) {
    let r2 = |m: &MetricsReport| m.r2.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!("{:<6} {:<9} {:>9} {:>9} {:>9} {:>9}", "sensor", "model", "raw R2", "raw RMSE", "corr R2", "corr RMSE");
    for r in results {
        let s = &r.summary;
        println!(
            "{:<6} {:<9} {:>9} {:>9.4} {:>9} {:>9.4}",
            s.sensor.code(),
            s.model,
            r2(&s.raw),
            s.raw.rmse,
            r2(&s.corrected),
            s.corrected.rmse
        );
    }
}

