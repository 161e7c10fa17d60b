//! Shared domain types and the text formats exchanged between stages.
//!
//! Batch format (LF terminated):
//!
//! ```text
//! LCAWS,<station_id>,<seq>,<n_records>
//! <ts>,<ap>,<at>,<rh>,<rg_pulses>,<ws_pulses>,<wd_adc>,<uptime_ms>   (n_records times)
//! CRC32,<8 hex digits over every preceding byte>
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const BATCH_MAGIC: &str = "LCAWS";
const CRC_TAG: &str = "CRC32";

pub fn format_ts(ts: &Timestamp) -> String {
    ts.format(TS_FORMAT).to_string()
}

pub fn parse_ts(s: &str) -> Result<Timestamp, chrono::ParseError> {
    NaiveDateTime::parse_from_str(s, TS_FORMAT).map(|n| Utc.from_utc_datetime(&n))
}

/// Truncates a timestamp to the start of its hour.
pub fn hour_floor(ts: &Timestamp) -> Timestamp {
    ts.with_nanosecond(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_minute(0))
        .expect("valid hour truncation")
}

/// The six weather parameters, in the canonical column order used by every
/// file format (AP, AT, RH, RG, WS, WD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sensor {
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "RH")]
    Rh,
    #[serde(rename = "RG")]
    Rg,
    #[serde(rename = "WS")]
    Ws,
    #[serde(rename = "WD")]
    Wd,
}

impl Sensor {
    pub const ALL: [Sensor; 6] = [Sensor::Ap, Sensor::At, Sensor::Rh, Sensor::Rg, Sensor::Ws, Sensor::Wd];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            Sensor::Ap => "AP",
            Sensor::At => "AT",
            Sensor::Rh => "RH",
            Sensor::Rg => "RG",
            Sensor::Ws => "WS",
            Sensor::Wd => "WD",
        }
    }
}

impl fmt::Display for Sensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown sensor {0:?} (expected one of AP, AT, RH, RG, WS, WD)")]
pub struct UnknownSensor(pub String);

impl FromStr for Sensor {
    type Err = UnknownSensor;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AP" => Ok(Sensor::Ap),
            "AT" => Ok(Sensor::At),
            "RH" => Ok(Sensor::Rh),
            "RG" => Ok(Sensor::Rg),
            "WS" => Ok(Sensor::Ws),
            "WD" => Ok(Sensor::Wd),
            _ => Err(UnknownSensor(s.to_string())),
        }
    }
}

/// Printable station identifier. Commas and whitespace are rejected because
/// the identifier is embedded in CSV headers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StationId(String);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid station id {0:?}: must be non-empty printable ASCII without commas or spaces")]
pub struct InvalidStationId(pub String);

impl StationId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidStationId> {
        let id = id.into();
        let ok = !id.is_empty() && id.bytes().all(|b| b.is_ascii_graphic() && b != b',');
        if ok {
            Ok(StationId(id))
        } else {
            Err(InvalidStationId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for StationId {
    type Error = InvalidStationId;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        StationId::new(value)
    }
}

impl From<StationId> for String {
    fn from(value: StationId) -> Self {
        value.0
    }
}

impl FromStr for StationId {
    type Err = InvalidStationId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StationId::new(s)
    }
}

/// One minute of raw datalogger output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub t_ts: Timestamp,
    /// Filtered pressure, hPa.
    pub ap_raw: f64,
    /// Filtered temperature, °C.
    pub at_raw: f64,
    /// Humidity, %.
    pub rh_raw: f64,
    /// Cumulative tipping-bucket counter.
    pub rg_pulses: u16,
    /// Cumulative anemometer revolution counter.
    pub ws_pulses: u16,
    /// Vane ADC code reduced to 8 bits.
    pub wd_adc: u8,
    /// Milliseconds since the datalogger started.
    pub uptime_ms: u64,
}

impl RawSample {
    fn check_ranges(&self) -> Result<(), String> {
        if !self.ap_raw.is_finite() || self.ap_raw < 0.0 {
            return Err(format!("pressure {} out of range", self.ap_raw));
        }
        if !self.at_raw.is_finite() {
            return Err(format!("temperature {} not finite", self.at_raw));
        }
        if !self.rh_raw.is_finite() || !(0.0..=100.0).contains(&self.rh_raw) {
            return Err(format!("humidity {} out of range", self.rh_raw));
        }
        Ok(())
    }

    /// One CSV record line without terminator.
    pub fn to_record(&self) -> String {
        format!(
            "{},{:.2},{:.2},{:.2},{},{},{},{}",
            format_ts(&self.t_ts),
            self.ap_raw,
            self.at_raw,
            self.rh_raw,
            self.rg_pulses,
            self.ws_pulses,
            self.wd_adc,
            self.uptime_ms
        )
    }

    pub fn from_record(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("expected 8 fields, found {}", fields.len()));
        }
        let t_ts = parse_ts(fields[0]).map_err(|e| format!("timestamp {:?}: {e}", fields[0]))?;
        let real = |i: usize, name: &str| -> Result<f64, String> {
            fields[i].parse::<f64>().map_err(|_| format!("{name} {:?} is not a number", fields[i]))
        };
        let sample = RawSample {
            t_ts,
            ap_raw: real(1, "pressure")?,
            at_raw: real(2, "temperature")?,
            rh_raw: real(3, "humidity")?,
            rg_pulses: fields[4]
                .parse()
                .map_err(|_| format!("rain counter {:?} out of range 0..=65535", fields[4]))?,
            ws_pulses: fields[5]
                .parse()
                .map_err(|_| format!("wind counter {:?} out of range 0..=65535", fields[5]))?,
            wd_adc: fields[6]
                .parse()
                .map_err(|_| format!("vane code {:?} out of range 0..=255", fields[6]))?,
            uptime_ms: fields[7].parse().map_err(|_| format!("uptime {:?} invalid", fields[7]))?,
        };
        sample.check_ranges()?;
        Ok(sample)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("checksum mismatch: stated {stated:08x}, computed {computed:08x}")]
    ChecksumMismatch { stated: u32, computed: u32 },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("batch contains no samples")]
    EmptyBatch,
}

/// A file of consecutive samples from one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub station_id: StationId,
    pub seq: u64,
    samples: Vec<RawSample>,
}

impl SampleBatch {
    pub fn new(station_id: StationId, seq: u64, samples: Vec<RawSample>) -> Result<Self, BatchError> {
        if samples.is_empty() {
            return Err(BatchError::EmptyBatch);
        }
        for (i, s) in samples.iter().enumerate() {
            s.check_ranges()
                .map_err(|reason| BatchError::MalformedRecord { line: i + 2, reason })?;
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].t_ts < w[0].t_ts) {
            return Err(BatchError::MalformedRecord {
                line: i + 3,
                reason: "samples not ordered by timestamp".into(),
            });
        }
        Ok(SampleBatch { station_id, seq, samples })
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<RawSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn body(&self) -> String {
        let mut out = format!("{BATCH_MAGIC},{},{},{}\n", self.station_id, self.seq, self.samples.len());
        for s in &self.samples {
            out.push_str(&s.to_record());
            out.push('\n');
        }
        out
    }

    /// CRC32 of the serialized header and records.
    pub fn crc32(&self) -> u32 {
        crc32fast::hash(self.body().as_bytes())
    }
}

pub fn serialize_batch(batch: &SampleBatch) -> Vec<u8> {
    let body = batch.body();
    let crc = crc32fast::hash(body.as_bytes());
    let mut out = body.into_bytes();
    out.extend_from_slice(format!("{CRC_TAG},{crc:08x}\n").as_bytes());
    out
}

pub fn parse_batch(bytes: &[u8]) -> Result<SampleBatch, BatchError> {
    let malformed = |line: usize, reason: &str| BatchError::MalformedRecord { line, reason: reason.to_string() };

    if bytes.is_empty() {
        return Err(BatchError::EmptyBatch);
    }
    if !bytes.ends_with(b"\n") {
        return Err(malformed(0, "missing final line terminator"));
    }
    // The CRC line is the last line; everything before it is covered.
    let without_last = &bytes[..bytes.len() - 1];
    let split = without_last.iter().rposition(|&b| b == b'\n').map(|p| p + 1).unwrap_or(0);
    let (covered, crc_line) = bytes.split_at(split);
    let crc_line = std::str::from_utf8(&crc_line[..crc_line.len() - 1]).map_err(|_| malformed(0, "non-UTF-8 checksum line"))?;
    let stated = crc_line
        .strip_prefix("CRC32,")
        .filter(|hex| hex.len() == 8)
        .and_then(|hex| u32::from_str_radix(hex, 16).ok())
        .ok_or_else(|| malformed(0, "missing or invalid CRC32 line"))?;
    let computed = crc32fast::hash(covered);
    if stated != computed {
        return Err(BatchError::ChecksumMismatch { stated, computed });
    }

    let text = std::str::from_utf8(covered).map_err(|_| malformed(1, "payload is not UTF-8"))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "missing header"))?;
    let h: Vec<&str> = header.split(',').collect();
    if h.len() != 4 || h[0] != BATCH_MAGIC {
        return Err(malformed(1, "header must be LCAWS,<station_id>,<seq>,<n_records>"));
    }
    let station_id = StationId::new(h[1]).map_err(|e| malformed(1, &e.to_string()))?;
    let seq: u64 = h[2].parse().map_err(|_| malformed(1, "invalid sequence number"))?;
    let n: usize = h[3].parse().map_err(|_| malformed(1, "invalid record count"))?;
    if n == 0 {
        return Err(BatchError::EmptyBatch);
    }

    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let sample = RawSample::from_record(line).map_err(|reason| BatchError::MalformedRecord { line: i + 2, reason })?;
        samples.push(sample);
    }
    if samples.len() != n {
        return Err(malformed(1, &format!("header announces {n} records, found {}", samples.len())));
    }
    SampleBatch::new(station_id, seq, samples)
}

/// Processed weather parameters for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub hour_start: Timestamp,
    pub ap_mean: f64,
    pub at_mean: f64,
    pub rh_mean: f64,
    pub rg_sum: f64,
    pub ws_mean: f64,
    pub wd_mean: f64,
    pub n_samples: u32,
}

impl HourlyRecord {
    pub fn value(&self, sensor: Sensor) -> f64 {
        match sensor {
            Sensor::Ap => self.ap_mean,
            Sensor::At => self.at_mean,
            Sensor::Rh => self.rh_mean,
            Sensor::Rg => self.rg_sum,
            Sensor::Ws => self.ws_mean,
            Sensor::Wd => self.wd_mean,
        }
    }

    pub fn set_value(&mut self, sensor: Sensor, v: f64) {
        match sensor {
            Sensor::Ap => self.ap_mean = v,
            Sensor::At => self.at_mean = v,
            Sensor::Rh => self.rh_mean = v,
            Sensor::Rg => self.rg_sum = v,
            Sensor::Ws => self.ws_mean = v,
            Sensor::Wd => self.wd_mean = v,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        Sensor::ALL.map(|s| self.value(s))
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: duplicate hour {hour}")]
    DuplicateHour { line: usize, hour: String },
}

pub const HOURLY_HEADER: &str = "hour_start,ap_mean,at_mean,rh_mean,rg_sum,ws_mean,wd_mean,n_samples";

pub fn write_hourly_csv(records: &[HourlyRecord]) -> String {
    let mut out = String::from(HOURLY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
            format_ts(&r.hour_start),
            r.ap_mean,
            r.at_mean,
            r.rh_mean,
            r.rg_sum,
            r.ws_mean,
            r.wd_mean,
            r.n_samples
        ));
    }
    out
}

fn parse_f64(field: &str, line: usize, name: &str) -> Result<f64, CsvError> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CsvError::Invalid { line, reason: format!("{name} {field:?} is not a finite number") })
}

fn parse_hour(field: &str, line: usize) -> Result<Timestamp, CsvError> {
    parse_ts(field.trim()).map_err(|e| CsvError::Invalid { line, reason: format!("timestamp {field:?}: {e}") })
}

pub fn read_hourly_csv(text: &str) -> Result<Vec<HourlyRecord>, CsvError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(CsvError::Invalid { line: lineno, reason: format!("expected 8 fields, found {}", f.len()) });
        }
        let hour_start = parse_hour(f[0], lineno)?;
        if !seen.insert(hour_start) {
            return Err(CsvError::DuplicateHour { line: lineno, hour: f[0].to_string() });
        }
        out.push(HourlyRecord {
            hour_start,
            ap_mean: parse_f64(f[1], lineno, "ap_mean")?,
            at_mean: parse_f64(f[2], lineno, "at_mean")?,
            rh_mean: parse_f64(f[3], lineno, "rh_mean")?,
            rg_sum: parse_f64(f[4], lineno, "rg_sum")?,
            ws_mean: parse_f64(f[5], lineno, "ws_mean")?,
            wd_mean: parse_f64(f[6], lineno, "wd_mean")?,
            n_samples: f[7]
                .trim()
                .parse()
                .map_err(|_| CsvError::Invalid { line: lineno, reason: format!("n_samples {:?}", f[7]) })?,
        });
    }
    Ok(out)
}

/// One aligned hour: the low-cost value, the reference value, and all six
/// low-cost parameters of that hour as covariates (canonical sensor order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub hour_start: Timestamp,
    pub lcaws: f64,
    pub pws: f64,
    pub covariates: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub sensor: Sensor,
    rows: Vec<PairedRow>,
}

impl PairedDataset {
    /// Rows are sorted by hour; duplicate hours are rejected.
    pub fn new(sensor: Sensor, mut rows: Vec<PairedRow>) -> Result<Self, CsvError> {
        rows.sort_by_key(|r| r.hour_start);
        if let Some(w) = rows.windows(2).find(|w| w[0].hour_start == w[1].hour_start) {
            return Err(CsvError::DuplicateHour { line: 0, hour: format_ts(&w[0].hour_start) });
        }
        Ok(PairedDataset { sensor, rows })
    }

    /// Inner join of low-cost and reference hourly records on `hour_start`.
    pub fn pair(sensor: Sensor, lcaws: &[HourlyRecord], pws: &[HourlyRecord]) -> Self {
        let reference: std::collections::HashMap<Timestamp, &HourlyRecord> =
            pws.iter().map(|r| (r.hour_start, r)).collect();
        let mut seen = HashSet::new();
        let mut rows: Vec<PairedRow> = lcaws
            .iter()
            .filter(|l| seen.insert(l.hour_start))
            .filter_map(|l| {
                reference.get(&l.hour_start).map(|p| PairedRow {
                    hour_start: l.hour_start,
                    lcaws: l.value(sensor),
                    pws: p.value(sensor),
                    covariates: l.values(),
                })
            })
            .collect();
        rows.sort_by_key(|r| r.hour_start);
        PairedDataset { sensor, rows }
    }

    pub fn rows(&self) -> &[PairedRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lcaws(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.lcaws).collect()
    }

    pub fn pws(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pws).collect()
    }

    pub fn covariates(&self) -> Vec<[f64; 6]> {
        self.rows.iter().map(|r| r.covariates).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> PairedDataset {
        PairedDataset { sensor: self.sensor, rows: indices.iter().map(|&i| self.rows[i]).collect() }
    }
}

pub const PAIRED_HEADER: &str = "hour_start,lcaws_value,pws_value,cov_ap,cov_at,cov_rh,cov_rg,cov_ws,cov_wd";

pub fn write_paired_csv(data: &PairedDataset) -> String {
    let mut out = String::from(PAIRED_HEADER);
    out.push('\n');
    for r in &data.rows {
        let c = r.covariates;
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            format_ts(&r.hour_start),
            r.lcaws,
            r.pws,
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5]
        ));
    }
    out
}

pub fn read_paired_csv(sensor: Sensor, text: &str) -> Result<PairedDataset, CsvError> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(CsvError::Invalid { line: lineno, reason: format!("expected 9 fields, found {}", f.len()) });
        }
        let hour_start = parse_hour(f[0], lineno)?;
        if !seen.insert(hour_start) {
            return Err(CsvError::DuplicateHour { line: lineno, hour: f[0].to_string() });
        }
        let mut covariates = [0.0; 6];
        for (j, c) in covariates.iter_mut().enumerate() {
            *c = parse_f64(f[3 + j], lineno, "covariate")?;
        }
        rows.push(PairedRow {
            hour_start,
            lcaws: parse_f64(f[1], lineno, "lcaws_value")?,
            pws: parse_f64(f[2], lineno, "pws_value")?,
            covariates,
        });
    }
    PairedDataset::new(sensor, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> Timestamp {
        parse_ts(s).unwrap()
    }

    fn sample(minute: i64) -> RawSample {
        RawSample {
            t_ts: ts("2019-03-01T13:00:00Z") + chrono::Duration::minutes(minute),
            ap_raw: 940.12,
            at_raw: 22.5,
            rh_raw: 81.0,
            rg_pulses: 12,
            ws_pulses: 65530,
            wd_adc: 81,
            uptime_ms: 60_000 * (minute as u64 + 1),
        }
    }

    fn station() -> StationId {
        StationId::new("SJC01").unwrap()
    }

    #[test]
    fn single_sample_batch_is_header_record_crc() {
        let b = SampleBatch::new(station(), 7, vec![sample(5)]).unwrap();
        let text = String::from_utf8(serialize_batch(&b)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "LCAWS,SJC01,7,1");
        assert_eq!(lines[1], "2019-03-01T13:05:00Z,940.12,22.50,81.00,12,65530,81,360000");
        assert!(lines[2].starts_with("CRC32,"));
        assert_eq!(lines[2].len(), "CRC32,".len() + 8);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn seq_only_changes_header_bytes() {
        let a = serialize_batch(&SampleBatch::new(station(), 1, vec![sample(0), sample(1)]).unwrap());
        let b = serialize_batch(&SampleBatch::new(station(), 2, vec![sample(0), sample(1)]).unwrap());
        let header_end = a.iter().position(|&c| c == b'\n').unwrap();
        let crc_start = a.len() - "CRC32,00000000\n".len();
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert!(!diffs.is_empty());
        // Record lines are untouched; only the header and the checksum differ.
        assert!(diffs.iter().all(|&i| i < header_end || i >= crc_start));
        assert_eq!(&a[header_end..crc_start], &b[header_end..crc_start]);
    }

    #[test]
    fn flipped_payload_byte_is_a_checksum_mismatch() {
        let bytes = serialize_batch(&SampleBatch::new(station(), 3, vec![sample(0), sample(1)]).unwrap());
        let mut bad = bytes.clone();
        let pos = bad.iter().position(|&c| c == b'9').unwrap();
        bad[pos] = b'8';
        assert!(matches!(parse_batch(&bad), Err(BatchError::ChecksumMismatch { .. })));
    }

    fn with_crc(body: &str) -> Vec<u8> {
        let crc = crc32fast::hash(body.as_bytes());
        format!("{body}CRC32,{crc:08x}\n").into_bytes()
    }

    #[test]
    fn vane_code_out_of_range_is_malformed() {
        let bytes = with_crc("LCAWS,SJC01,0,1\n2019-03-01T13:05:00Z,940.12,22.50,81.00,12,65530,300,360000\n");
        match parse_batch(&bytes) {
            Err(BatchError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_miscounted_batches_are_rejected() {
        assert_eq!(parse_batch(b""), Err(BatchError::EmptyBatch));
        assert_eq!(parse_batch(&with_crc("LCAWS,SJC01,0,0\n")), Err(BatchError::EmptyBatch));
        let short = with_crc("LCAWS,SJC01,0,2\n2019-03-01T13:05:00Z,940.12,22.50,81.00,12,65530,30,360000\n");
        assert!(matches!(parse_batch(&short), Err(BatchError::MalformedRecord { .. })));
        let humid = with_crc("LCAWS,SJC01,0,1\n2019-03-01T13:05:00Z,940.12,22.50,100.50,12,65530,30,360000\n");
        assert!(matches!(parse_batch(&humid), Err(BatchError::MalformedRecord { .. })));
        let counter = with_crc("LCAWS,SJC01,0,1\n2019-03-01T13:05:00Z,940.12,22.50,10.00,65536,0,30,360000\n");
        assert!(matches!(parse_batch(&counter), Err(BatchError::MalformedRecord { .. })));
    }

    #[test]
    fn unordered_samples_are_rejected() {
        assert!(SampleBatch::new(station(), 0, vec![sample(2), sample(1)]).is_err());
        assert_eq!(SampleBatch::new(station(), 0, vec![]), Err(BatchError::EmptyBatch));
    }

    #[test]
    fn station_ids_reject_separators() {
        assert!(StationId::new("a,b").is_err());
        assert!(StationId::new("").is_err());
        assert!(StationId::new("has space").is_err());
        assert!(StationId::new("LCAWS-01").is_ok());
    }

    #[test]
    fn pairing_is_an_inner_join() {
        let h = |hour: i64, v: f64| HourlyRecord {
            hour_start: ts("2019-03-01T00:00:00Z") + chrono::Duration::hours(hour),
            ap_mean: v,
            at_mean: v + 1.0,
            rh_mean: 50.0,
            rg_sum: 0.0,
            ws_mean: 1.0,
            wd_mean: 90.0,
            n_samples: 60,
        };
        let l = vec![h(0, 1.0), h(1, 2.0), h(3, 4.0)];
        let p = vec![h(1, 20.0), h(2, 30.0), h(3, 40.0)];
        let d = PairedDataset::pair(Sensor::At, &l, &p);
        assert_eq!(d.len(), 2);
        assert_eq!(d.rows()[0].lcaws, 3.0);
        assert_eq!(d.rows()[0].pws, 21.0);
        assert_eq!(d.rows()[1].covariates, [4.0, 5.0, 50.0, 0.0, 1.0, 90.0]);

        let text = write_paired_csv(&d);
        assert_eq!(read_paired_csv(Sensor::At, &text).unwrap(), d);
        let hourly = write_hourly_csv(&l);
        assert_eq!(read_hourly_csv(&hourly).unwrap(), l);
        let dup = format!("{hourly}{}", hourly.lines().nth(1).unwrap());
        assert!(matches!(read_hourly_csv(&dup), Err(CsvError::DuplicateHour { .. })));
    }

    fn arb_sample() -> impl Strategy<Value = (i64, i64, i64, i64, u16, u16, u8, u64)> {
        (
            0i64..100_000,
            0i64..120_000,
            -5000i64..5000,
            0i64..=10_000,
            any::<u16>(),
            any::<u16>(),
            any::<u8>(),
            any::<u64>(),
        )
    }

    fn arb_batch() -> impl Strategy<Value = SampleBatch> {
        ("[A-Za-z0-9_-]{1,12}", any::<u64>(), prop::collection::vec(arb_sample(), 1..25)).prop_map(|(id, seq, raw)| {
            let base = ts("2019-03-01T00:00:00Z");
            let mut minute = 0;
            let samples = raw
                .into_iter()
                .map(|(step, ap, at, rh, rg, ws, wd, up)| {
                    minute += step % 5;
                    RawSample {
                        t_ts: base + chrono::Duration::seconds(minute * 60 + step % 60),
                        ap_raw: ap as f64 / 100.0,
                        at_raw: at as f64 / 100.0,
                        rh_raw: rh as f64 / 100.0,
                        rg_pulses: rg,
                        ws_pulses: ws,
                        wd_adc: wd,
                        uptime_ms: up,
                    }
                })
                .collect::<Vec<_>>();
            let mut samples = samples;
            samples.sort_by_key(|s| s.t_ts);
            SampleBatch::new(StationId::new(id).unwrap(), seq, samples).unwrap()
        })
    }

    proptest! {
        #[test]
        fn batch_round_trip(batch in arb_batch()) {
            let bytes = serialize_batch(&batch);
            prop_assert_eq!(parse_batch(&bytes).unwrap(), batch);
        }

        #[test]
        fn single_byte_corruption_is_detected(batch in arb_batch(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
            let mut bytes = serialize_batch(&batch);
            let i = pos.index(bytes.len());
            bytes[i] ^= flip;
            prop_assert!(parse_batch(&bytes).is_err());
        }
    }
}
