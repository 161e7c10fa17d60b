//! The datalogger client fed by simulated sensors.

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::time::Duration as StdDuration;

use anyhow::{Context, Result};
use chrono::Duration;
use clap::Args;
use serde::Serialize;
use wxpipe_core::client::{Client, ClientConfig, ClientError, Clock, Reading, SensorSource, SystemClock, TcpTransport, VirtualClock};
use wxpipe_core::model::{RawSample, Sensor, Timestamp};
use wxpipe_core::processing::ProcessingConfig;
use wxpipe_core::sim::{gen_weather, simulate_raw, RawStreamOptions, Scenario};

use crate::error::usage;
use crate::{env_path, parse_distortion, parse_start, parse_station, ENV_SPOOL};

#[derive(Args, Debug, Serialize)]
pub struct StationArgs {
    /// Server address, HOST:PORT.
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub station_id: String,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Sampling period, e.g. 60s or 1m.
    #[arg(long, default_value = "60s")]
    pub period: String,
    /// Spool directory; WXPIPE_SPOOL takes precedence.
    #[arg(long)]
    pub spool: Option<PathBuf>,
    #[arg(long, default_value = "rainy-season")]
    pub sim_scenario: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of samples to take before stopping.
    #[arg(long, default_value_t = 1440)]
    pub minutes: usize,
    #[arg(long, default_value = "default")]
    pub distortion: String,
    /// Run on a virtual clock starting at --start instead of waiting out
    /// each period.
    #[arg(long)]
    pub accel: bool,
    /// Start of the simulated record when --accel is set.
    #[arg(long, default_value = crate::DEFAULT_START)]
    pub start: String,
}

pub fn parse_period(s: &str) -> Result<StdDuration> {
    let s = s.trim();
    let (num, unit) = s.split_at(s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len()));
    let n: u64 = num.parse().map_err(|_| usage(format!("period {s:?}: expected e.g. 60s, 1m")))?;
    let secs = match unit {
        "" | "s" => n,
        "m" | "min" => n * 60,
        "h" => n * 3600,
        _ => return Err(usage(format!("period {s:?}: unknown unit {unit:?}"))),
    };
    if secs == 0 {
        return Err(usage("period must be positive"));
    }
    Ok(StdDuration::from_secs(secs))
}

/// Serves the i-th simulated sample for any time inside the i-th period
/// after `start`, so acquisition jitter does not matter.
struct PeriodicReplay {
    start: Timestamp,
    period: Duration,
    samples: Vec<RawSample>,
}

impl SensorSource for PeriodicReplay {
    fn read(&mut self, sensor: Sensor, t: Timestamp) -> Result<Reading, ClientError> {
        let elapsed = t - self.start;
        if elapsed < Duration::zero() {
            return Err(ClientError::SensorReadFailure(sensor));
        }
        let i = (elapsed.num_milliseconds() / self.period.num_milliseconds()) as usize;
        let s = self.samples.get(i).ok_or(ClientError::SensorReadFailure(sensor))?;
        Ok(match sensor {
            Sensor::Ap => Reading::Digital(s.ap_raw),
            Sensor::At => Reading::Digital(s.at_raw),
            Sensor::Rh => Reading::Digital(s.rh_raw),
            Sensor::Rg => Reading::Counter(s.rg_pulses),
            Sensor::Ws => Reading::Counter(s.ws_pulses),
            Sensor::Wd => Reading::Adc(s.wd_adc),
        })
    }
}

fn run<C: Clock>(cfg: ClientConfig, sensors: PeriodicReplay, clock: C, n: usize) -> Result<()> {
    let transport = TcpTransport::new(cfg.server_addr.clone(), cfg.send_timeout);
    let mut client = Client::new(cfg, sensors, transport, clock)?;
    let stats = client.run(&AtomicBool::new(false), Some(n as u64))?;
    let drained = client.drain(100);
    println!(
        "{} samples, {} batches sealed, {} delivered, {} send failures, {} still spooled",
        stats.samples,
        stats.batches_sealed,
        client.stats().delivered.len(),
        client.stats().send_failures,
        client.spool().pending_len()
    );
    if !drained {
        log::warn!("server unreachable; undelivered batches stay in the spool for the next run");
    }
    Ok(())
}

pub fn cmd_station(args: StationArgs) -> Result<()> {
    let station = parse_station(&args.station_id)?;
    let spool = env_path(ENV_SPOOL, args.spool.clone(), "spool")?;
    let period = parse_period(&args.period)?;
    let scenario: Scenario = args.sim_scenario.parse()?;
    let profile = parse_distortion(&args.distortion, args.seed)?;
    let start = if args.accel {
        parse_start(&args.start)?
    } else {
        crate::files::now_second()
    };

    let step = Duration::from_std(period).context("period out of range")?;
    let truth = gen_weather(args.seed, start, args.minutes, scenario)?;
    let raw = simulate_raw(&truth, &profile, &ProcessingConfig::default(), &RawStreamOptions::default());
    let sensors = PeriodicReplay { start, period: step, samples: raw };

    let mut cfg = ClientConfig::new(station, args.server.clone(), spool);
    cfg.batch_size = args.batch_size;
    cfg.period = period;
    cfg.validate()?;
    if args.accel {
        run(cfg, sensors, VirtualClock::new(start, 60_000), args.minutes)
    } else {
        run(cfg, sensors, SystemClock::new(), args.minutes)
    }
}
