//! Synthetic weather and inverse sensor models.
//!
//! [`gen_weather`] produces minute-resolution ground truth. The transducers
//! turn that truth into what a low-cost station's datalogger would record:
//! cumulative tip and revolution counters, vane ADC codes, and digital
//! readings carrying a configurable affine distortion plus Gaussian noise.
//! [`emit_reference_hourly`] aggregates the undistorted truth and plays the
//! part of the professional reference station.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{hour_floor, HourlyRecord, RawSample, Sensor, Timestamp};
use crate::processing::{iir_filter, wd_mean, wind_vector_means, ws_mean, ProcessingConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario {0:?} (expected calm, storm, rainy-season or windy)")]
    UnknownScenario(String),
    #[error("truth must cover whole, contiguous hours starting on the hour")]
    PartialHour,
    #[error("minutes must be at least 1")]
    NoMinutes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherMinute {
    pub t_ts: Timestamp,
    pub ap: f64,
    pub at: f64,
    pub rh: f64,
    /// mm/min.
    pub rain_rate: f64,
    /// m/s.
    pub wind_speed: f64,
    /// Direction the wind blows from, degrees in `[0, 360)`.
    pub wind_dir: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Calm,
    Storm,
    RainySeason,
    Windy,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Calm, Scenario::Storm, Scenario::RainySeason, Scenario::Windy];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Calm => "calm",
            Scenario::Storm => "storm",
            Scenario::RainySeason => "rainy-season",
            Scenario::Windy => "windy",
        }
    }

    pub fn params(self) -> ScenarioParams {
        let base = ScenarioParams {
            ap_base: 940.0,
            ap_tide: 1.2,
            ap_synoptic_sd: 3.0,
            at_mean: 23.0,
            at_diurnal: 5.0,
            at_synoptic_sd: 1.8,
            rh_base: 76.0,
            rh_per_degree: -3.2,
            rh_noise_sd: 4.0,
            rain_start_per_min: 1.0 / 600.0,
            rain_mean_minutes: 45.0,
            rain_mean_rate: 0.04,
            wind_mean: 2.4,
            wind_diurnal: 1.0,
            wind_sd: 0.9,
            wind_dir_prevailing: 135.0,
            wind_dir_wander_sd: 40.0,
        };
        match self {
            Scenario::Calm => ScenarioParams {
                rain_start_per_min: 0.0,
                wind_mean: 0.8,
                wind_diurnal: 0.4,
                wind_sd: 0.3,
                ap_synoptic_sd: 1.5,
                ..base
            },
            Scenario::Storm => ScenarioParams {
                rain_start_per_min: 1.0 / 240.0,
                rain_mean_minutes: 70.0,
                rain_mean_rate: 0.15,
                wind_mean: 5.0,
                wind_sd: 2.0,
                ap_synoptic_sd: 5.0,
                wind_dir_wander_sd: 70.0,
                ..base
            },
            Scenario::RainySeason => base,
            Scenario::Windy => ScenarioParams {
                rain_start_per_min: 1.0 / 3000.0,
                rain_mean_minutes: 20.0,
                wind_mean: 7.0,
                wind_diurnal: 2.0,
                wind_sd: 2.5,
                rh_base: 65.0,
                ..base
            },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

/// Shape parameters of a scenario preset. Amplitudes are in sensor units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub ap_base: f64,
    pub ap_tide: f64,
    pub ap_synoptic_sd: f64,
    pub at_mean: f64,
    pub at_diurnal: f64,
    pub at_synoptic_sd: f64,
    pub rh_base: f64,
    pub rh_per_degree: f64,
    pub rh_noise_sd: f64,
    pub rain_start_per_min: f64,
    pub rain_mean_minutes: f64,
    /// Mean episode intensity, mm/min.
    pub rain_mean_rate: f64,
    pub wind_mean: f64,
    pub wind_diurnal: f64,
    pub wind_sd: f64,
    pub wind_dir_prevailing: f64,
    pub wind_dir_wander_sd: f64,
}

/// Mean-reverting AR(1) with correlation time `tau` minutes and stationary
/// standard deviation `sd`.
struct Ar1 {
    phi: f64,
    innov: f64,
    value: f64,
}

impl Ar1 {
    fn new(tau: f64, sd: f64, rng: &mut ChaCha8Rng) -> Self {
        let phi = (-1.0 / tau).exp();
        let z: f64 = rng.sample(StandardNormal);
        Ar1 { phi, innov: sd * (1.0 - phi * phi).sqrt(), value: sd * z }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.value = self.phi * self.value + self.innov * z;
        self.value
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Deterministic minute-resolution weather for a scenario.
pub fn gen_weather(seed: u64, start: Timestamp, minutes: usize, scenario: Scenario) -> Result<Vec<WeatherMinute>, SimError> {
    if minutes == 0 {
        return Err(SimError::NoMinutes);
    }
    let p = scenario.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ap_syn = Ar1::new(2.0 * 1440.0, p.ap_synoptic_sd, &mut rng);
    let mut at_syn = Ar1::new(1440.0, p.at_synoptic_sd, &mut rng);
    let mut rh_noise = Ar1::new(180.0, p.rh_noise_sd, &mut rng);
    let mut wind_slow = Ar1::new(240.0, p.wind_sd, &mut rng);
    let mut gust = Ar1::new(3.0, 0.35 * p.wind_sd, &mut rng);
    let mut dir_slow = Ar1::new(360.0, p.wind_dir_wander_sd, &mut rng);
    let mut dir_fast = Ar1::new(4.0, 12.0, &mut rng);
    let episode_len = Exp::new(1.0 / p.rain_mean_minutes.max(1.0)).expect("positive rate");
    let episode_rate = Exp::new(1.0 / p.rain_mean_rate.max(1e-6)).expect("positive rate");

    let mut rain_left = 0.0f64;
    let mut rain_rate = 0.0f64;
    let mut wet = 0.0f64;
    let mut out = Vec::with_capacity(minutes);
    for m in 0..minutes {
        let t_ts = start + Duration::minutes(m as i64);
        let hour = t_ts.hour() as f64 + t_ts.minute() as f64 / 60.0;

        if rain_left <= 0.0 && p.rain_start_per_min > 0.0 && rng.random::<f64>() < p.rain_start_per_min {
            rain_left = episode_len.sample(&mut rng).max(1.0).round();
            rain_rate = episode_rate.sample(&mut rng);
        }
        let rr = if rain_left > 0.0 {
            rain_left -= 1.0;
            round2(rain_rate * rng.random_range(0.4..1.6)).max(0.01)
        } else {
            0.0
        };
        // Rain cools and humidifies with a lag of about an hour.
        wet = wet * (-1.0f64 / 60.0).exp() + if rr > 0.0 { 1.0 - (-1.0f64 / 60.0).exp() } else { 0.0 };

        let ap = p.ap_base + p.ap_tide * (4.0 * PI * (hour - 10.0) / 24.0).cos() + ap_syn.step(&mut rng);
        let at = p.at_mean + p.at_diurnal * (2.0 * PI * (hour - 9.0) / 24.0).sin() + at_syn.step(&mut rng) - 3.0 * wet;
        let rh = (p.rh_base + p.rh_per_degree * (at - p.at_mean) + rh_noise.step(&mut rng) + 20.0 * wet).clamp(15.0, 100.0);

        let diurnal = p.wind_diurnal * (2.0 * PI * (hour - 10.0) / 24.0).sin();
        let ws = (p.wind_mean + diurnal + wind_slow.step(&mut rng) + gust.step(&mut rng)).max(0.0);
        let wd = (p.wind_dir_prevailing + dir_slow.step(&mut rng) + dir_fast.step(&mut rng)).rem_euclid(360.0);

        out.push(WeatherMinute {
            t_ts,
            ap: round2(ap),
            at: round2(at),
            rh: round2(rh),
            rain_rate: rr,
            wind_speed: round2(ws),
            wind_dir: wd,
        });
    }
    Ok(out)
}

/// Distortion applied to one sensor: `gain·x + offset + N(0, noise_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorDistortion {
    pub gain: f64,
    pub offset: f64,
    pub noise_sigma: f64,
}

impl SensorDistortion {
    pub const IDENTITY: SensorDistortion = SensorDistortion { gain: 1.0, offset: 0.0, noise_sigma: 0.0 };

    pub fn new(gain: f64, offset: f64, noise_sigma: f64) -> Self {
        assert!(noise_sigma >= 0.0, "noise_sigma must be non-negative");
        SensorDistortion { gain, offset, noise_sigma }
    }
}

/// Per-sensor distortion of the low-cost station relative to the truth,
/// indexed in canonical sensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionProfile {
    pub seed: u64,
    pub sensors: [SensorDistortion; 6],
}

impl DistortionProfile {
    pub fn identity(seed: u64) -> Self {
        DistortionProfile { seed, sensors: [SensorDistortion::IDENTITY; 6] }
    }

    /// The default low-cost station: biased digital sensors with noise at the
    /// scale of the raw errors observed in the field, an anemometer that
    /// under-reads, and a rain gauge that misses part of the water.
    pub fn lcaws_default(seed: u64) -> Self {
        let mut p = DistortionProfile::identity(seed);
        p.sensors[Sensor::Ap.index()] = SensorDistortion::new(1.001, -0.6, 0.5305);
        p.sensors[Sensor::At.index()] = SensorDistortion::new(1.07, -1.0, 0.9894);
        p.sensors[Sensor::Rh.index()] = SensorDistortion::new(0.92, 2.0, 4.1609);
        p.sensors[Sensor::Rg.index()] = SensorDistortion::new(0.82, 0.0, 0.0);
        p.sensors[Sensor::Ws.index()] = SensorDistortion::new(0.9, 0.3, 0.7056);
        p
    }

    pub fn get(&self, sensor: Sensor) -> SensorDistortion {
        self.sensors[sensor.index()]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (s, d) in Sensor::ALL.iter().zip(&self.sensors) {
            if !(d.noise_sigma >= 0.0) || !d.gain.is_finite() || !d.offset.is_finite() {
                return Err(format!("invalid distortion for {s}: {d:?}"));
            }
        }
        Ok(())
    }

    fn noise(&self, sensor: Sensor, minute_index: u64) -> f64 {
        let sigma = self.get(sensor).noise_sigma;
        if sigma == 0.0 {
            return 0.0;
        }
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((sensor.index() as u64) << 56)
            .wrapping_add(minute_index);
        let z: f64 = ChaCha8Rng::seed_from_u64(key).sample(StandardNormal);
        sigma * z
    }

    fn apply(&self, sensor: Sensor, x: f64, minute_index: u64) -> f64 {
        let d = self.get(sensor);
        d.gain * x + d.offset + self.noise(sensor, minute_index)
    }

    /// The weather as the low-cost sensors perceive it.
    pub fn perceive(&self, truth: &WeatherMinute, minute_index: u64) -> WeatherMinute {
        let (ap, at, rh) = transduce_digital(truth, self, minute_index);
        let rain_rate = if truth.rain_rate > 0.0 {
            self.apply(Sensor::Rg, truth.rain_rate, minute_index).max(0.0)
        } else {
            0.0
        };
        WeatherMinute {
            t_ts: truth.t_ts,
            ap,
            at,
            rh,
            rain_rate,
            wind_speed: self.apply(Sensor::Ws, truth.wind_speed, minute_index).max(0.0),
            wind_dir: self.apply(Sensor::Wd, truth.wind_dir, minute_index).rem_euclid(360.0),
        }
    }
}

/// Distorted digital readings at 0.01 resolution. The identity profile returns
/// the (already 0.01-resolution) truth unchanged.
pub fn transduce_digital(truth: &WeatherMinute, profile: &DistortionProfile, minute_index: u64) -> (f64, f64, f64) {
    let ap = round2(profile.apply(Sensor::Ap, truth.ap, minute_index)).max(0.0);
    let at = round2(profile.apply(Sensor::At, truth.at, minute_index));
    let rh = round2(profile.apply(Sensor::Rh, truth.rh, minute_index)).clamp(0.0, 100.0);
    (ap, at, rh)
}

/// Tipping bucket with residual water carried between minutes.
#[derive(Debug, Clone)]
pub struct RainGauge {
    mm_per_tip: f64,
    residual: f64,
    counter: u16,
}

impl RainGauge {
    pub fn new(mm_per_tip: f64, counter0: u16) -> Self {
        assert!(mm_per_tip > 0.0, "mm_per_tip must be positive");
        RainGauge { mm_per_tip, residual: 0.0, counter: counter0 }
    }

    /// Adds one minute of rain and returns the cumulative counter.
    pub fn step(&mut self, rain_mm: f64) -> u16 {
        self.residual += rain_mm.max(0.0);
        let tips = (self.residual / self.mm_per_tip).floor();
        self.residual -= tips * self.mm_per_tip;
        self.counter = self.counter.wrapping_add((tips as u64 % 65_536) as u16);
        self.counter
    }
}

pub fn transduce_rain(truth: &[WeatherMinute], mm_per_tip: f64, counter0: u16) -> Vec<u16> {
    let mut gauge = RainGauge::new(mm_per_tip, counter0);
    truth.iter().map(|m| gauge.step(m.rain_rate)).collect()
}

/// One minute of anemometer rotation: the counter advances by
/// `round(60·speed/C)` revolutions and the uptime by 60 s.
pub fn transduce_wind(truth: &WeatherMinute, circumference_m: f64, counter0: u16, uptime0: u64) -> (u16, u64) {
    assert!(circumference_m > 0.0, "circumference must be positive");
    let revs = (60.0 * truth.wind_speed.max(0.0) / circumference_m).round() as u64;
    (counter0.wrapping_add((revs % 65_536) as u16), uptime0 + 60_000)
}

/// Ideal 8-bit vane code for a direction: quantize to the nearest of the
/// eight cardinal angles (ties go to the higher angle) and evaluate the
/// divider measured across the reference resistor. The code is the
/// truncated ADC reading `⌊v_max·R_ref / (R_ref + R_p)⌋`.
pub fn transduce_vane(wind_dir: f64, cfg: &ProcessingConfig) -> u8 {
    let step = cfg.angle_step_deg;
    let n = cfg.ladder_ohm.len();
    let pos = ((wind_dir.rem_euclid(360.0) + step / 2.0) / step).floor() as usize % n;
    let r_p = cfg.ladder_ohm[pos];
    (cfg.v_max as f64 * cfg.r_ref_ohm / (cfg.r_ref_ohm + r_p)).floor() as u8
}

/// Options for rendering a raw sample stream from truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawStreamOptions {
    pub rain_counter0: u16,
    pub wind_counter0: u16,
    pub uptime0_ms: u64,
}

/// Renders the raw datalogger stream for each truth minute. Sample `i`
/// carries the counters after minute `i` and uptime `uptime0 + 60 s·(i + 1)`.
pub fn simulate_raw(
    truth: &[WeatherMinute],
    profile: &DistortionProfile,
    cfg: &ProcessingConfig,
    opts: &RawStreamOptions,
) -> Vec<RawSample> {
    let mut gauge = RainGauge::new(cfg.mm_per_tip, opts.rain_counter0);
    let (mut rev, mut uptime) = (opts.wind_counter0, opts.uptime0_ms);
    let mut filtered: Option<(f64, f64)> = None;
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let seen = profile.perceive(t, i as u64);
            let (ap, at) = match filtered {
                Some((fa, ft)) if cfg.filter_k > 0 => (
                    round2(iir_filter(fa, seen.ap, cfg.filter_k)),
                    round2(iir_filter(ft, seen.at, cfg.filter_k)),
                ),
                _ => (seen.ap, seen.at),
            };
            filtered = Some((ap, at));
            let rg = gauge.step(seen.rain_rate);
            (rev, uptime) = transduce_wind(&seen, cfg.circumference_m, rev, uptime);
            RawSample {
                t_ts: t.t_ts,
                ap_raw: ap,
                at_raw: at,
                rh_raw: seen.rh,
                rg_pulses: rg,
                ws_pulses: rev,
                wd_adc: transduce_vane(seen.wind_dir, cfg),
                uptime_ms: uptime,
            }
        })
        .collect()
}

/// Hourly aggregation of undistorted truth, as the reference station reports
/// it: digital means, total rain, and the vector-mean wind.
pub fn emit_reference_hourly(truth: &[WeatherMinute]) -> Result<Vec<HourlyRecord>, SimError> {
    let first = truth.first().ok_or(SimError::PartialHour)?;
    if hour_floor(&first.t_ts) != first.t_ts || !truth.len().is_multiple_of(60) {
        return Err(SimError::PartialHour);
    }
    if truth.windows(2).any(|w| w[1].t_ts - w[0].t_ts != Duration::minutes(1)) {
        return Err(SimError::PartialHour);
    }
    Ok(truth
        .chunks(60)
        .map(|hour| {
            let n = hour.len() as f64;
            let mean = |f: fn(&WeatherMinute) -> f64| hour.iter().map(f).sum::<f64>() / n;
            let speeds: Vec<f64> = hour.iter().map(|m| m.wind_speed).collect();
            let dirs: Vec<f64> = hour.iter().map(|m| m.wind_dir).collect();
            let (x, y) = wind_vector_means(&speeds, &dirs).expect("non-empty hour");
            HourlyRecord {
                hour_start: hour[0].t_ts,
                ap_mean: mean(|m| m.ap),
                at_mean: mean(|m| m.at),
                rh_mean: mean(|m| m.rh),
                rg_sum: hour.iter().map(|m| m.rain_rate).sum(),
                ws_mean: ws_mean(x, y),
                wd_mean: wd_mean(x, y).degrees,
                n_samples: hour.len() as u32,
            }
        })
        .collect())
}
