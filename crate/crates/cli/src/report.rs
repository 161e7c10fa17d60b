//! Plot data and metric tables for comparing the two stations.

use std::collections::BTreeMap;

use wxpipe_core::metrics::MetricsReport;
use wxpipe_core::model::{format_ts, HourlyRecord, PairedDataset, Sensor, Timestamp};

use crate::calib::{metrics_line, METRICS_HEADER};

pub const TIMESERIES_HEADER: &str = "sensor,hour,source,value";
pub const SCATTER_HEADER: &str = "sensor,lcaws,pws";

/// Long-format series for every sensor: one row per (hour, source).
/// Sources appear in the order given.
pub fn timeseries_csv(sources: &[(&str, &[HourlyRecord])]) -> String {
    let mut out = format!("{TIMESERIES_HEADER}\n");
    let indexed: Vec<(&str, BTreeMap<Timestamp, &HourlyRecord>)> =
        sources.iter().map(|(name, recs)| (*name, recs.iter().map(|r| (r.hour_start, r)).collect())).collect();
    let mut hours: Vec<Timestamp> = indexed.iter().flat_map(|(_, m)| m.keys().copied()).collect();
    hours.sort();
    hours.dedup();
    for sensor in Sensor::ALL {
        for h in &hours {
            for (name, recs) in &indexed {
                if let Some(r) = recs.get(h) {
                    out.push_str(&format!("{},{},{},{:.4}\n", sensor, format_ts(h), name, r.value(sensor)));
                }
            }
        }
    }
    out
}

pub fn scatter_csv(pairs: &[PairedDataset]) -> String {
    let mut out = format!("{SCATTER_HEADER}\n");
    for p in pairs {
        for r in p.rows() {
            out.push_str(&format!("{},{:.4},{:.4}\n", p.sensor, r.lcaws, r.pws));
        }
    }
    out
}

pub fn metrics_csv(rows: &[(Sensor, &str, &MetricsReport)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (s, model, m) in rows {
        out.push_str(&metrics_line(*s, model, m));
    }
    out
}
