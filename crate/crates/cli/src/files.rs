//! Reading and writing the pipeline's text files.

use std::fs;
use std::io;
use std::path::Path;

use anyhow::{Context, Result};
use wxpipe_core::model::{read_hourly_csv, read_paired_csv, HourlyRecord, PairedDataset, RawSample, Sensor};

use crate::error::data;

pub const RAW_HEADER: &str = "t_ts,ap_raw,at_raw,rh_raw,rg_pulses,ws_pulses,wd_adc,uptime_ms";

pub fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => data(format!("missing input {}", path.display())),
        _ => anyhow::Error::new(e).context(format!("reading {}", path.display())),
    })
}

pub fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn raw_csv(samples: &[RawSample]) -> String {
    let mut out = String::with_capacity(samples.len() * 64);
    out.push_str(RAW_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&s.to_record());
        out.push('\n');
    }
    out
}

pub fn load_hourly(path: &Path) -> Result<Vec<HourlyRecord>> {
    let text = read_input(path)?;
    read_hourly_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_paired(path: &Path, sensor: Sensor) -> Result<PairedDataset> {
    let text = read_input(path)?;
    read_paired_csv(sensor, &text).with_context(|| format!("parsing {}", path.display()))
}

/// The current time truncated to whole seconds.
pub fn now_second() -> chrono::DateTime<chrono::Utc> {
    let now = chrono::Utc::now();
    chrono::DateTime::from_timestamp(now.timestamp(), 0).unwrap_or(now)
}

/// `paired_WS.csv` → WS.
pub fn sensor_from_name(path: &Path) -> Option<Sensor> {
    let stem = path.file_stem()?.to_str()?;
    stem.rsplit(['_', '-', '.']).next()?.to_ascii_uppercase().parse().ok()
}
