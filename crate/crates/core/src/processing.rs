//! Raw minute samples to hourly weather parameters.
//!
//! Counter-based sensors (rain gauge, anemometer) are processed as pairs of
//! consecutive samples. A pair belongs to the window holding its second
//! sample, so a window can borrow the last sample of the previous window as
//! its lead.

use std::f64::consts::PI;

use chrono::Duration;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RawSample, Timestamp, HourlyRecord};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProcessingError {
    #[error("no samples in window")]
    EmptyWindow,
    #[error("need at least two samples for counter sensors, found {0}")]
    InsufficientCounterSamples(usize),
    #[error("consecutive samples share the same uptime")]
    ZeroTimeDelta,
    #[error("vane code {code} gives {ohms} Ω, beyond the wiring-fault limit")]
    ResistanceOutOfRange { code: u8, ohms: f64 },
    #[error("input sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid processing configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingConfig {
    /// IIR filter factor, 0..=4.
    pub filter_k: u8,
    /// Rain per bucket tip, mm.
    pub mm_per_tip: f64,
    /// Anemometer circumference, m.
    pub circumference_m: f64,
    pub ms_per_second: f64,
    pub r_ref_ohm: f64,
    pub v_max: u8,
    /// Direction reported when the vane circuit is open (code 0).
    pub spliced_angle_deg: f64,
    pub angle_step_deg: f64,
    /// Resistor ladder, one per vane position, strictly increasing.
    pub ladder_ohm: [f64; 8],
    pub window_minutes: i64,
    pub counter_max: u32,
}

impl Default for ProcessingConfig {
    fn default() -> Self {
        ProcessingConfig {
            filter_k: 0,
            mm_per_tip: 0.25,
            circumference_m: 0.924,
            ms_per_second: 1000.0,
            r_ref_ohm: 4700.0,
            v_max: 255,
            spliced_angle_deg: 225.0,
            angle_step_deg: 45.0,
            ladder_ohm: [10_000.0, 20_000.0, 30_000.0, 40_000.0, 50_000.0, 60_000.0, 70_000.0, 80_000.0],
            window_minutes: 60,
            counter_max: 65_535,
        }
    }
}

impl ProcessingConfig {
    pub fn validate(&self) -> Result<(), ProcessingError> {
        let bad = |m: &str| Err(ProcessingError::InvalidConfig(m.to_string()));
        if self.filter_k > 4 {
            return bad("filter_k must be in 0..=4");
        }
        if !(self.mm_per_tip > 0.0) || !(self.circumference_m > 0.0) {
            return bad("mm_per_tip and circumference must be positive");
        }
        if self.ladder_ohm.windows(2).any(|w| w[1] <= w[0]) {
            return bad("ladder must be strictly increasing");
        }
        if self.window_minutes < 1 || self.v_max == 0 {
            return bad("window and v_max must be positive");
        }
        Ok(())
    }

    pub fn window(&self) -> Duration {
        Duration::minutes(self.window_minutes)
    }
}

/// Low-pass IIR step: `(prev·(2^k − 1) + x) / 2^k`. With `k = 0` the input
/// passes through unchanged.
pub fn iir_filter(prev_filtered: f64, x: f64, k: u8) -> f64 {
    assert!(k <= 4, "filter factor must be in 0..=4");
    if k == 0 {
        return x;
    }
    let c = (1u32 << k) as f64;
    (prev_filtered * (c - 1.0) + x) / c
}

pub fn digital_mean(values: &[f64]) -> Result<f64, ProcessingError> {
    if values.is_empty() {
        return Err(ProcessingError::EmptyWindow);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Single lagged difference with the wrap rule: a negative step adds
/// `counter_max` (not `counter_max + 1`), so each wrap loses one count
/// relative to modular arithmetic.
pub fn lagged_step(prev: u64, next: u64, counter_max: u64) -> u64 {
    if next >= prev {
        next - prev
    } else {
        next + (counter_max - prev)
    }
}

pub fn lagged_diff(series: &[u16]) -> Vec<u64> {
    series.windows(2).map(|w| lagged_step(w[0] as u64, w[1] as u64, u16::MAX as u64)).collect()
}

pub fn rain_sum(counters: &[u16], mm_per_tip: f64) -> f64 {
    lagged_diff(counters).iter().sum::<u64>() as f64 * mm_per_tip
}

/// Per-pair speed `C · Δrev / Δt · s`.
pub fn pair_speed(d_rev: u64, d_ms: u64, cfg: &ProcessingConfig) -> Result<f64, ProcessingError> {
    if d_ms == 0 {
        return Err(ProcessingError::ZeroTimeDelta);
    }
    Ok(cfg.circumference_m * (d_rev as f64 / d_ms as f64) * cfg.ms_per_second)
}

pub fn wind_speed_series(rev: &[u16], uptime_ms: &[u64], cfg: &ProcessingConfig) -> Result<Vec<f64>, ProcessingError> {
    if rev.len() != uptime_ms.len() {
        return Err(ProcessingError::LengthMismatch(rev.len(), uptime_ms.len()));
    }
    if rev.len() < 2 {
        return Err(ProcessingError::InsufficientCounterSamples(rev.len()));
    }
    let d_rev = lagged_diff(rev);
    uptime_ms
        .windows(2)
        .zip(d_rev)
        .map(|(t, dr)| pair_speed(dr, lagged_step(t[0], t[1], u64::MAX), cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VaneResistance {
    /// Code 0: the divider is open and no voltage is available.
    Spliced,
    Ohms(f64),
}

pub fn vane_resistance(code: u8, cfg: &ProcessingConfig) -> VaneResistance {
    if code == 0 {
        return VaneResistance::Spliced;
    }
    VaneResistance::Ohms((cfg.r_ref_ohm * (cfg.v_max as f64 / code as f64 - 1.0)).round())
}

/// Maps a vane code to one of the eight cardinal angles, or the spliced
/// calibration angle for code 0. Ties between ladder resistors go to the
/// lower one.
pub fn vane_angle(code: u8, cfg: &ProcessingConfig) -> Result<f64, ProcessingError> {
    let ohms = match vane_resistance(code, cfg) {
        VaneResistance::Spliced => return Ok(cfg.spliced_angle_deg),
        VaneResistance::Ohms(r) => r,
    };
    let limit = 2.0 * cfg.ladder_ohm[cfg.ladder_ohm.len() - 1];
    if ohms > limit {
        return Err(ProcessingError::ResistanceOutOfRange { code, ohms });
    }
    let mut best = 0;
    for (i, r) in cfg.ladder_ohm.iter().enumerate() {
        if (ohms - r).abs() < (ohms - cfg.ladder_ohm[best]).abs() {
            best = i;
        }
    }
    Ok(cfg.angle_step_deg * best as f64)
}

/// Mean wind components: `x̄ = −mean(w·sin θ)`, `ȳ = −mean(w·cos θ)`.
pub fn wind_vector_means(speeds: &[f64], dirs_deg: &[f64]) -> Result<(f64, f64), ProcessingError> {
    if speeds.len() != dirs_deg.len() {
        return Err(ProcessingError::LengthMismatch(speeds.len(), dirs_deg.len()));
    }
    if speeds.is_empty() {
        return Err(ProcessingError::EmptyWindow);
    }
    let n = speeds.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (w, d) in speeds.iter().zip(dirs_deg) {
        let rad = 2.0 * PI * d / 360.0;
        sx += -w * rad.sin();
        sy += -w * rad.cos();
    }
    Ok((sx / n, sy / n))
}

pub fn ws_mean(x: f64, y: f64) -> f64 {
    x.hypot(y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanDirection {
    pub degrees: f64,
    /// Set when the mean vector is exactly zero and the direction is undefined.
    pub calm: bool,
}

/// Mean direction the wind blows from, in `[0, 360)`.
pub fn wd_mean(x: f64, y: f64) -> MeanDirection {
    if x == 0.0 && y == 0.0 {
        return MeanDirection { degrees: 0.0, calm: true };
    }
    let mut deg = x.atan2(y).to_degrees() + 180.0;
    if deg >= 360.0 {
        deg -= 360.0;
    }
    if deg < 0.0 {
        deg += 360.0;
    }
    // The vane only reports multiples of 45°; undo the few ulps atan2 and
    // the component sums leave on those.
    let octant = (deg / 45.0).round() * 45.0;
    if (deg - octant).abs() < 1e-10 {
        deg = octant;
    }
    if deg >= 360.0 {
        deg = 0.0;
    }
    MeanDirection { degrees: deg, calm: false }
}

/// Aggregates one window. `lead` is the sample immediately preceding the
/// window, if any; its pair with the first window sample is attributed here.
pub fn summarize_window(
    hour_start: Timestamp,
    lead: Option<&RawSample>,
    samples: &[RawSample],
    cfg: &ProcessingConfig,
) -> Result<HourlyRecord, ProcessingError> {
    if samples.is_empty() {
        return Err(ProcessingError::EmptyWindow);
    }
    let ap: Vec<f64> = samples.iter().map(|s| s.ap_raw).collect();
    let at: Vec<f64> = samples.iter().map(|s| s.at_raw).collect();
    let rh: Vec<f64> = samples.iter().map(|s| s.rh_raw).collect();

    let chain: Vec<&RawSample> = lead.into_iter().chain(samples.iter()).collect();
    if chain.len() < 2 {
        return Err(ProcessingError::InsufficientCounterSamples(chain.len()));
    }

    let max = cfg.counter_max as u64;
    let mut tips = 0u64;
    let mut speeds = Vec::with_capacity(chain.len() - 1);
    let mut dirs = Vec::with_capacity(chain.len() - 1);
    for pair in chain.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        tips += lagged_step(a.rg_pulses as u64, b.rg_pulses as u64, max);
        if b.uptime_ms < a.uptime_ms {
            // Datalogger restart: the revolution counter restarted too.
            warn!("uptime went backwards at {}, skipping wind pair", b.t_ts);
            continue;
        }
        let d_rev = lagged_step(a.ws_pulses as u64, b.ws_pulses as u64, max);
        speeds.push(pair_speed(d_rev, b.uptime_ms - a.uptime_ms, cfg)?);
        dirs.push(vane_angle(b.wd_adc, cfg)?);
    }

    let (x, y) = if speeds.is_empty() { (0.0, 0.0) } else { wind_vector_means(&speeds, &dirs)? };
    Ok(HourlyRecord {
        hour_start,
        ap_mean: digital_mean(&ap)?,
        at_mean: digital_mean(&at)?,
        rh_mean: digital_mean(&rh)?,
        rg_sum: tips as f64 * cfg.mm_per_tip,
        ws_mean: ws_mean(x, y),
        wd_mean: wd_mean(x, y).degrees,
        n_samples: samples.len() as u32,
    })
}

/// Summarizes samples that all fall into one window, without a lead sample.
pub fn summarize_hour(samples: &[RawSample], cfg: &ProcessingConfig) -> Result<HourlyRecord, ProcessingError> {
    let first = samples.first().ok_or(ProcessingError::EmptyWindow)?;
    summarize_window(window_floor(&first.t_ts, cfg), None, samples, cfg)
}

pub fn window_floor(ts: &Timestamp, cfg: &ProcessingConfig) -> Timestamp {
    let w = cfg.window_minutes * 60;
    let secs = ts.timestamp();
    let floored = secs - secs.rem_euclid(w);
    chrono::DateTime::from_timestamp(floored, 0).expect("in range")
}

/// Result of processing a time range: records for windows with data plus the
/// windows that failed and why.
#[derive(Debug, Clone, Default)]
pub struct RangeOutput {
    pub records: Vec<HourlyRecord>,
    pub failures: Vec<(Timestamp, ProcessingError)>,
}

/// Processes time-ordered samples over `[from, to)`. Samples before `from`
/// only serve as the lead of the first window.
pub fn process_samples(samples: &[RawSample], from: Timestamp, to: Timestamp, cfg: &ProcessingConfig) -> RangeOutput {
    let window = cfg.window();
    let mut out = RangeOutput::default();
    let mut idx = samples.partition_point(|s| s.t_ts < from);
    let mut t = from;
    while t < to {
        let end = (t + window).min(to);
        let start_idx = idx;
        while idx < samples.len() && samples[idx].t_ts < end {
            idx += 1;
        }
        let window_samples = &samples[start_idx..idx];
        if window_samples.is_empty() {
            debug!("no samples in window starting {t}, skipping");
        } else {
            let lead = start_idx
                .checked_sub(1)
                .map(|i| &samples[i])
                .filter(|s| s.t_ts >= t - window);
            match summarize_window(t, lead, window_samples, cfg) {
                Ok(r) => out.records.push(r),
                Err(e) => {
                    warn!("window starting {t} failed: {e}");
                    out.failures.push((t, e));
                }
            }
        }
        t = end;
    }
    out
}
