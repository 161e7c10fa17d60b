//! Station-side acquisition loop: sample every sensor once per period, seal
//! batches of `batch_size` samples into the spool, and deliver them in
//! order with retry and backoff.

pub mod clock;
pub mod spool;
pub mod transport;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration as StdDuration;

use chrono::{Duration, DurationRound, TimeDelta};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_batch, RawSample, SampleBatch, Sensor, StationId, Timestamp};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use spool::{Spool, DEFAULT_MAX_PENDING};
pub use transport::{send_batch, LinkEvent, ScriptedLink, SendError, TcpTransport, Transport, ACK, NAK};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("sensor {0} could not be read")]
    SensorReadFailure(Sensor),
    #[error("invalid client configuration: {0}")]
    InvalidConfig(String),
    #[error("spool I/O: {0}")]
    Spool(#[from] std::io::Error),
}

/// A single sensor value as the datalogger sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reading {
    Digital(f64),
    Counter(u16),
    Adc(u8),
}

pub trait SensorSource {
    fn read(&mut self, sensor: Sensor, t: Timestamp) -> Result<Reading, ClientError>;
}

/// Replays a precomputed raw stream, looked up by timestamp.
pub struct SimulatedSensors {
    by_time: HashMap<Timestamp, RawSample>,
}

impl SimulatedSensors {
    pub fn new(samples: &[RawSample]) -> Self {
        SimulatedSensors { by_time: samples.iter().map(|s| (s.t_ts, *s)).collect() }
    }
}

impl SensorSource for SimulatedSensors {
    fn read(&mut self, sensor: Sensor, t: Timestamp) -> Result<Reading, ClientError> {
        let s = self.by_time.get(&t).ok_or(ClientError::SensorReadFailure(sensor))?;
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

fn digital(r: Reading, sensor: Sensor) -> Result<f64, ClientError> {
    match r {
        Reading::Digital(v) => Ok(v),
        _ => Err(ClientError::SensorReadFailure(sensor)),
    }
}

fn counter(r: Reading, sensor: Sensor) -> Result<u16, ClientError> {
    match r {
        Reading::Counter(v) => Ok(v),
        _ => Err(ClientError::SensorReadFailure(sensor)),
    }
}

/// Read every sensor once and stamp the tuple with the acquisition time
/// (whole seconds) and the datalogger uptime.
pub fn get_sensordata(sensors: &mut dyn SensorSource, clock: &dyn Clock) -> Result<RawSample, ClientError> {
    let t = clock.now().duration_trunc(TimeDelta::seconds(1)).expect("second truncation");
    let ap_raw = digital(sensors.read(Sensor::Ap, t)?, Sensor::Ap)?;
    let at_raw = digital(sensors.read(Sensor::At, t)?, Sensor::At)?;
    let rh_raw = digital(sensors.read(Sensor::Rh, t)?, Sensor::Rh)?;
    let rg_pulses = counter(sensors.read(Sensor::Rg, t)?, Sensor::Rg)?;
    let ws_pulses = counter(sensors.read(Sensor::Ws, t)?, Sensor::Ws)?;
    let wd_adc = match sensors.read(Sensor::Wd, t)? {
        Reading::Adc(v) => v,
        _ => return Err(ClientError::SensorReadFailure(Sensor::Wd)),
    };
    Ok(RawSample { t_ts: t, ap_raw, at_raw, rh_raw, rg_pulses, ws_pulses, wd_adc, uptime_ms: clock.uptime_ms() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub station_id: StationId,
    pub batch_size: usize,
    /// Sampling period (standby between acquisitions).
    pub period: StdDuration,
    pub server_addr: String,
    pub spool_dir: PathBuf,
    pub max_pending: usize,
    pub send_timeout: StdDuration,
    pub backoff_min: StdDuration,
    pub backoff_max: StdDuration,
}

impl ClientConfig {
    pub fn new(station_id: StationId, server_addr: impl Into<String>, spool_dir: impl Into<PathBuf>) -> Self {
        ClientConfig {
            station_id,
            batch_size: 10,
            period: StdDuration::from_secs(60),
            server_addr: server_addr.into(),
            spool_dir: spool_dir.into(),
            max_pending: DEFAULT_MAX_PENDING,
            send_timeout: transport::DEFAULT_TIMEOUT,
            backoff_min: StdDuration::from_secs(1),
            backoff_max: StdDuration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.batch_size == 0 {
            return Err(ClientError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.period.is_zero() {
            return Err(ClientError::InvalidConfig("sampling period must be positive".into()));
        }
        if self.backoff_min.is_zero() || self.backoff_max < self.backoff_min {
            return Err(ClientError::InvalidConfig("backoff bounds must satisfy 0 < min ≤ max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub samples: u64,
    pub read_failures: u64,
    pub batches_sealed: u64,
    pub delivered: Vec<u64>,
    pub send_failures: u64,
    pub spool_dropped: u64,
}

pub struct Client<S, T, C> {
    cfg: ClientConfig,
    sensors: S,
    transport: T,
    clock: C,
    spool: Spool,
    buffer: Vec<RawSample>,
    retry_at: Option<Timestamp>,
    backoff: StdDuration,
    stats: ClientStats,
}

fn chrono_duration(d: StdDuration) -> Duration {
    Duration::from_std(d).expect("duration fits")
}

impl<S: SensorSource, T: Transport, C: Clock> Client<S, T, C> {
    pub fn new(cfg: ClientConfig, sensors: S, transport: T, clock: C) -> Result<Self, ClientError> {
        cfg.validate()?;
        let spool = Spool::open(&cfg.spool_dir, cfg.max_pending)?;
        if spool.pending_len() > 0 {
            info!("spool holds {} undelivered batches", spool.pending_len());
        }
        let backoff = cfg.backoff_min;
        Ok(Client { cfg, sensors, transport, clock, spool, buffer: Vec::new(), retry_at: None, backoff, stats: ClientStats::default() })
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn spool(&self) -> &Spool {
        &self.spool
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    pub fn clock_mut(&mut self) -> &mut C {
        &mut self.clock
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// One acquisition: read, buffer, seal a full batch, try delivery.
    pub fn tick(&mut self) -> Result<(), ClientError> {
        match get_sensordata(&mut self.sensors, &self.clock) {
            Ok(sample) => {
                self.stats.samples += 1;
                self.buffer.push(sample);
            }
            Err(ClientError::SensorReadFailure(s)) => {
                self.stats.read_failures += 1;
                warn!("sample at {} dropped: sensor {s} failed", self.clock.now());
            }
            Err(e) => return Err(e),
        }
        if self.buffer.len() >= self.cfg.batch_size {
            self.seal()?;
        }
        self.deliver(false);
        Ok(())
    }

    fn seal(&mut self) -> Result<(), ClientError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let samples = std::mem::take(&mut self.buffer);
        let batch = SampleBatch::new(self.cfg.station_id.clone(), self.spool.next_seq(), samples)
            .map_err(|e| ClientError::InvalidConfig(format!("sealed an invalid batch: {e}")))?;
        let evicted = self.spool.push(&batch)?;
        self.stats.batches_sealed += 1;
        self.stats.spool_dropped += evicted.len() as u64;
        Ok(())
    }

    /// Send pending batches oldest first, stopping at the first failure.
    /// Unless `force`, nothing is attempted before the backoff expires.
    pub fn deliver(&mut self, force: bool) {
        if !force && self.retry_at.is_some_and(|t| self.clock.now() < t) {
            return;
        }
        for seq in self.spool.pending() {
            let bytes = match self.spool.load(seq) {
                Ok(b) => b,
                Err(e) => {
                    warn!("cannot read spooled batch {seq}: {e}");
                    return;
                }
            };
            match self.transport.send(&bytes) {
                Ok(()) => {
                    if let Err(e) = self.spool.mark_delivered(seq) {
                        warn!("cannot mark batch {seq} delivered: {e}");
                        return;
                    }
                    debug!("batch {seq} delivered");
                    self.stats.delivered.push(seq);
                    self.retry_at = None;
                    self.backoff = self.cfg.backoff_min;
                }
                Err(err) => {
                    self.stats.send_failures += 1;
                    if err == SendError::Nak {
                        self.refresh_spooled(seq, &bytes);
                    }
                    debug!("batch {seq} not delivered ({err}); retry in {:?}", self.backoff);
                    self.retry_at = Some(self.clock.now() + chrono_duration(self.backoff));
                    self.backoff = (self.backoff * 2).min(self.cfg.backoff_max);
                    return;
                }
            }
        }
    }

    /// After a NAK, re-serialize the spooled batch so the retry sends
    /// canonical bytes; unreadable spool files are set aside.
    fn refresh_spooled(&mut self, seq: u64, bytes: &[u8]) {
        match parse_batch(bytes) {
            Ok(batch) => {
                if let Err(e) = self.spool.rewrite(&batch) {
                    warn!("cannot rewrite batch {seq}: {e}");
                }
            }
            Err(e) => {
                warn!("spooled batch {seq} is corrupt ({e}); setting it aside");
                if let Err(e) = self.spool.discard(seq) {
                    warn!("cannot discard batch {seq}: {e}");
                }
            }
        }
    }

    /// Seal any partial batch and make one delivery attempt.
    pub fn shutdown(&mut self) -> Result<(), ClientError> {
        self.seal()?;
        self.deliver(true);
        Ok(())
    }

    /// Keep retrying (sleeping through backoff) until the spool is empty or
    /// `max_attempts` rounds have failed.
    pub fn drain(&mut self, max_attempts: usize) -> bool {
        for _ in 0..max_attempts {
            if self.spool.pending_len() == 0 {
                return true;
            }
            if let Some(t) = self.retry_at {
                self.clock.sleep_until(t);
            }
            self.deliver(true);
        }
        self.spool.pending_len() == 0
    }

    /// The acquisition loop: one sample per period until `stop` is raised or
    /// `max_samples` have been attempted, then flush the partial batch.
    pub fn run(&mut self, stop: &AtomicBool, max_samples: Option<u64>) -> Result<ClientStats, ClientError> {
        let period = chrono_duration(self.cfg.period);
        let mut next = self.clock.now();
        let mut taken = 0u64;
        while !stop.load(Ordering::SeqCst) && max_samples.is_none_or(|m| taken < m) {
            self.clock.sleep_until(next);
            if stop.load(Ordering::SeqCst) {
                break;
            }
            self.tick()?;
            taken += 1;
            next += period;
        }
        self.shutdown()?;
        Ok(self.stats.clone())
    }
}

/// Run the station loop with the given collaborators until stopped.
pub fn client_loop<S: SensorSource, T: Transport, C: Clock>(
    cfg: ClientConfig,
    sensors: S,
    transport: T,
    clock: C,
    stop: &AtomicBool,
    max_samples: Option<u64>,
) -> Result<ClientStats, ClientError> {
    Client::new(cfg, sensors, transport, clock)?.run(stop, max_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_batch;
    use chrono::{TimeZone, Utc};
    use std::sync::{Arc, Mutex};

    /// Collects delivered batches in memory; can be told to refuse.
    #[derive(Clone, Default)]
    struct Recorder {
        got: Arc<Mutex<Vec<SampleBatch>>>,
        down: Arc<Mutex<bool>>,
    }

    impl Transport for Recorder {
        fn send(&mut self, payload: &[u8]) -> Result<(), SendError> {
            if *self.down.lock().unwrap() {
                return Err(SendError::ConnectFailed("down".into()));
            }
            let b = parse_batch(payload).map_err(|_| SendError::Nak)?;
            self.got.lock().unwrap().push(b);
            Ok(())
        }
    }

    struct Constant {
        fail: Option<Sensor>,
        count: u16,
    }

    impl SensorSource for Constant {
        fn read(&mut self, sensor: Sensor, _t: Timestamp) -> Result<Reading, ClientError> {
            if self.fail == Some(sensor) {
                return Err(ClientError::SensorReadFailure(sensor));
            }
            Ok(match sensor {
                Sensor::Ap => Reading::Digital(1000.0),
                Sensor::At => Reading::Digital(20.0),
                Sensor::Rh => Reading::Digital(55.0),
                Sensor::Rg => Reading::Counter(0),
                Sensor::Ws => {
                    self.count = self.count.wrapping_add(1);
                    Reading::Counter(self.count)
                }
                Sensor::Wd => Reading::Adc(81),
            })
        }
    }

    fn start() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 5, 1, 0, 0, 0).unwrap()
    }

    fn setup(dir: &std::path::Path, rec: &Recorder) -> Client<Constant, Recorder, VirtualClock> {
        let cfg = ClientConfig::new(StationId::new("ST").unwrap(), "unused", dir);
        Client::new(cfg, Constant { fail: None, count: 0 }, rec.clone(), VirtualClock::new(start(), 60_000)).unwrap()
    }

    #[test]
    fn thirty_samples_make_three_batches() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::default();
        let stats = setup(dir.path(), &rec).run(&AtomicBool::new(false), Some(30)).unwrap();
        assert_eq!(stats.delivered, vec![0, 1, 2]);
        let got = rec.got.lock().unwrap();
        assert!(got.iter().all(|b| b.len() == 10));
        let ups: Vec<u64> = got.iter().flat_map(|b| b.samples().iter().map(|s| s.uptime_ms)).collect();
        assert!(ups.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(got[0].samples()[1].t_ts, start() + Duration::minutes(1));
    }

    #[test]
    fn outage_replays_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::default();
        let mut c = setup(dir.path(), &rec);
        for i in 0..30 {
            *rec.down.lock().unwrap() = (10..25).contains(&i);
            c.clock.advance(Duration::minutes(1));
            c.tick().unwrap();
        }
        c.drain(10);
        let seqs: Vec<u64> = rec.got.lock().unwrap().iter().map(|b| b.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        assert!(c.stats().send_failures > 0);
    }

    #[test]
    fn partial_batch_flushed_on_stop() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::default();
        setup(dir.path(), &rec).run(&AtomicBool::new(false), Some(7)).unwrap();
        let got = rec.got.lock().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].len(), 7);
    }

    #[test]
    fn sensor_failure_drops_the_sample() {
        let mut src = Constant { fail: Some(Sensor::Wd), count: 0 };
        let clock = VirtualClock::new(start(), 0);
        assert!(matches!(get_sensordata(&mut src, &clock), Err(ClientError::SensorReadFailure(Sensor::Wd))));

        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::default();
        let cfg = ClientConfig::new(StationId::new("ST").unwrap(), "unused", dir.path());
        let mut c = Client::new(cfg, src, rec.clone(), clock).unwrap();
        c.tick().unwrap();
        assert_eq!(c.stats().read_failures, 1);
        assert_eq!(c.stats().samples, 0);
    }

    #[test]
    fn backoff_doubles_to_the_cap() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recorder::default();
        *rec.down.lock().unwrap() = true;
        let mut c = setup(dir.path(), &rec);
        c.cfg.batch_size = 1;
        let mut waits = Vec::new();
        c.tick().unwrap();
        for _ in 0..8 {
            c.drain(1);
            waits.push((c.retry_at.unwrap() - c.clock.now()).num_seconds());
        }
        assert_eq!(waits, vec![2, 4, 8, 16, 32, 60, 60, 60]);
    }

    #[test]
    fn simulated_source_reproduces_the_stream() {
        use crate::processing::ProcessingConfig;
        use crate::sim::{gen_weather, simulate_raw, DistortionProfile, RawStreamOptions, Scenario};
        let truth = gen_weather(4, start(), 20, Scenario::Windy).unwrap();
        let raw = simulate_raw(&truth, &DistortionProfile::identity(1), &ProcessingConfig::default(), &RawStreamOptions::default());
        let mut src = SimulatedSensors::new(&raw);
        let mut clock = VirtualClock::new(start(), 60_000);
        for expected in &raw {
            assert_eq!(&get_sensordata(&mut src, &clock).unwrap(), expected);
            clock.advance(Duration::minutes(1));
        }
    }
}
