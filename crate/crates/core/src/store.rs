//! Append-only raw-sample store with a dedup index on (station, seq).
//!
//! Layout: a single `raw.log` in the store directory. Each accepted batch is
//! written as its record lines, each prefixed with `<station>,<seq>,`,
//! followed by a commit line `COMMIT,<station>,<seq>,<n>,<crc32>` where the
//! CRC covers the batch's prefixed record lines. A batch without a valid
//! commit line is a torn write and is cut off when the store is opened.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use log::warn;
use thiserror::Error;

use crate::model::{RawSample, SampleBatch, StationId, Timestamp};

pub const LOG_FILE: &str = "raw.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("invalid range: from must precede to")]
    InvalidRange,
    #[error("corrupt store log at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended(usize),
    Duplicate,
}

#[derive(Debug, Default)]
struct StationIndex {
    seqs: HashSet<u64>,
    samples: BTreeMap<(Timestamp, u64, u32), RawSample>,
}

#[derive(Debug, Default)]
struct Index {
    stations: HashMap<StationId, StationIndex>,
}

impl Index {
    fn insert(&mut self, station: &StationId, seq: u64, samples: &[RawSample]) {
        let st = self.stations.entry(station.clone()).or_default();
        st.seqs.insert(seq);
        for (i, s) in samples.iter().enumerate() {
            st.samples.insert((s.t_ts, seq, i as u32), *s);
        }
    }

    fn contains(&self, station: &StationId, seq: u64) -> bool {
        self.stations.get(station).is_some_and(|s| s.seqs.contains(&seq))
    }
}

#[derive(Debug)]
pub struct RawStore {
    dir: PathBuf,
    writer: Mutex<File>,
    index: RwLock<Index>,
}

fn batch_lines(batch: &SampleBatch) -> String {
    let mut body = String::new();
    for s in batch.samples() {
        body.push_str(&format!("{},{},{}\n", batch.station_id, batch.seq, s.to_record()));
    }
    body
}

/// Parse the log, returning the index and the byte length of the committed
/// prefix.
fn replay(text: &[u8]) -> Result<(Index, u64), StoreError> {
    let mut index = Index::default();
    let mut committed = 0u64;
    let mut offset = 0usize;
    let mut open: Option<(StationId, u64, Vec<RawSample>, usize)> = None;

    while offset < text.len() {
        let Some(nl) = text[offset..].iter().position(|&b| b == b'\n') else {
            break; // partial last line
        };
        let line_end = offset + nl + 1;
        let line = std::str::from_utf8(&text[offset..offset + nl]).map_err(|_| StoreError::Corrupt {
            offset: offset as u64,
            reason: "not UTF-8".into(),
        })?;
        let corrupt = |reason: String| StoreError::Corrupt { offset: offset as u64, reason };

        if let Some(rest) = line.strip_prefix("COMMIT,") {
            let f: Vec<&str> = rest.split(',').collect();
            let Some((station, seq, samples, start)) = open.take() else {
                return Err(corrupt("commit without records".into()));
            };
            if f.len() != 4 {
                return Err(corrupt("malformed commit line".into()));
            }
            let n: usize = f[2].parse().map_err(|_| corrupt("bad commit count".into()))?;
            let crc = u32::from_str_radix(f[3], 16).map_err(|_| corrupt("bad commit checksum".into()))?;
            if f[0] != station.as_str() || f[1] != seq.to_string() || n != samples.len() {
                return Err(corrupt("commit does not match its records".into()));
            }
            if crc32fast::hash(&text[start..offset]) != crc {
                return Err(corrupt("commit checksum mismatch".into()));
            }
            if !index.contains(&station, seq) {
                index.insert(&station, seq, &samples);
            }
            committed = line_end as u64;
        } else {
            let mut parts = line.splitn(3, ',');
            let (Some(st), Some(seq), Some(record)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(corrupt("record line has too few fields".into()));
            };
            let station = StationId::new(st).map_err(|e| corrupt(e.to_string()))?;
            let seq: u64 = seq.parse().map_err(|_| corrupt("bad sequence number".into()))?;
            let sample = RawSample::from_record(record).map_err(corrupt)?;
            match &mut open {
                Some((s, q, v, _)) if *s == station && *q == seq => v.push(sample),
                Some(_) => return Err(corrupt("records of two batches interleaved".into())),
                None => open = Some((station, seq, vec![sample], offset)),
            }
        }
        offset = line_end;
    }
    Ok((index, committed))
}

impl RawStore {
    /// Open (creating if needed) the store in `dir`, rebuilding the index
    /// from the log. Anything after the last complete commit is truncated.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let text = fs::read(&path)?;
        let (index, committed) = match replay(&text) {
            Ok(r) => r,
            // Damage confined to the uncommitted tail is a torn write.
            Err(StoreError::Corrupt { offset, reason }) => {
                let (index, committed) = replay(&text[..offset as usize])?;
                if let Some(next_commit) = find_commit_after(&text, offset as usize) {
                    return Err(StoreError::Corrupt {
                        offset,
                        reason: format!("{reason}; later commit at byte {next_commit}"),
                    });
                }
                (index, committed)
            }
            Err(e) => return Err(e),
        };
        if committed < text.len() as u64 {
            warn!("store {}: dropping {} bytes of torn tail", path.display(), text.len() as u64 - committed);
            file.set_len(committed)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(RawStore { dir, writer: Mutex::new(file), index: RwLock::new(index) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Durably append a batch unless its (station, seq) is already stored.
    pub fn append(&self, batch: &SampleBatch) -> Result<AppendOutcome, StoreError> {
        let mut file = self.writer.lock().expect("writer lock poisoned");
        if self.index.read().expect("index lock poisoned").contains(&batch.station_id, batch.seq) {
            return Ok(AppendOutcome::Duplicate);
        }
        let body = batch_lines(batch);
        let commit = format!("COMMIT,{},{},{},{:08x}\n", batch.station_id, batch.seq, batch.len(), crc32fast::hash(body.as_bytes()));
        let before = file.metadata()?.len();
        let written = file
            .write_all(format!("{body}{commit}").as_bytes())
            .and_then(|_| file.sync_data());
        if let Err(e) = written {
            // Leave the log ending on a commit boundary.
            let _ = file.set_len(before);
            return Err(e.into());
        }
        self.index.write().expect("index lock poisoned").insert(&batch.station_id, batch.seq, batch.samples());
        Ok(AppendOutcome::Appended(batch.len()))
    }

    /// Samples of `station` with `from ≤ t_ts < to`, ordered by time (then
    /// by arrival sequence).
    pub fn query_range(&self, station: &StationId, from: Timestamp, to: Timestamp) -> Result<Vec<RawSample>, StoreError> {
        if from >= to {
            return Err(StoreError::InvalidRange);
        }
        let index = self.index.read().expect("index lock poisoned");
        let st = index.stations.get(station).ok_or_else(|| StoreError::UnknownStation(station.to_string()))?;
        Ok(st.samples.range((from, 0, 0)..(to, 0, 0)).map(|(_, s)| *s).collect())
    }

    /// Every sample of a station in time order.
    pub fn all_samples(&self, station: &StationId) -> Result<Vec<RawSample>, StoreError> {
        let index = self.index.read().expect("index lock poisoned");
        let st = index.stations.get(station).ok_or_else(|| StoreError::UnknownStation(station.to_string()))?;
        Ok(st.samples.values().copied().collect())
    }

    pub fn stations(&self) -> Vec<StationId> {
        let mut v: Vec<StationId> = self.index.read().expect("index lock poisoned").stations.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn contains(&self, station: &StationId, seq: u64) -> bool {
        self.index.read().expect("index lock poisoned").contains(station, seq)
    }

    /// Stored sequence numbers of a station, ascending.
    pub fn seqs(&self, station: &StationId) -> Vec<u64> {
        let index = self.index.read().expect("index lock poisoned");
        let mut v: Vec<u64> = index.stations.get(station).map(|s| s.seqs.iter().copied().collect()).unwrap_or_default();
        v.sort_unstable();
        v
    }

    pub fn sample_count(&self, station: &StationId) -> usize {
        self.index.read().expect("index lock poisoned").stations.get(station).map_or(0, |s| s.samples.len())
    }
}

fn find_commit_after(text: &[u8], offset: usize) -> Option<usize> {
    let needle = b"\nCOMMIT,";
    text[offset..].windows(needle.len()).position(|w| w == needle).map(|p| p + offset + 1)
}
