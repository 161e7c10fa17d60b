//! On-disk FIFO of serialized batches awaiting delivery.
//!
//! Each batch lives in `<seq>.pending` (seq zero-padded to 20 digits) until
//! the server acknowledges it, then it is renamed to `<seq>.delivered`.
//! Files are written to a temporary name, synced, and renamed into place, so
//! a crash never leaves a half-written `.pending` file.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;

use crate::model::{serialize_batch, SampleBatch};

pub const DEFAULT_MAX_PENDING: usize = 10_000;

#[derive(Debug)]
pub struct Spool {
    dir: PathBuf,
    max_pending: usize,
    pending: BTreeSet<u64>,
    next_seq: u64,
    dropped: u64,
}

fn parse_name(path: &Path) -> Option<(u64, &str)> {
    let stem = path.file_stem()?.to_str()?;
    let ext = path.extension()?.to_str()?;
    if stem.len() != 20 {
        return None;
    }
    stem.parse().ok().map(|seq| (seq, ext))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directory fsync makes the rename durable; not supported everywhere.
    match fs::File::open(dir).and_then(|d| d.sync_all()) {
        Err(e) if e.kind() != io::ErrorKind::PermissionDenied => Err(e),
        _ => Ok(()),
    }
}

impl Spool {
    /// Open or create a spool. The next sequence number continues after the
    /// highest one found on disk; stray temporary files are removed.
    pub fn open(dir: impl Into<PathBuf>, max_pending: usize) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut pending = BTreeSet::new();
        let mut next_seq = 0;
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "tmp") {
                fs::remove_file(&path)?;
                continue;
            }
            let Some((seq, ext)) = parse_name(&path) else { continue };
            match ext {
                "pending" => {
                    pending.insert(seq);
                }
                "delivered" => {}
                _ => continue,
            }
            next_seq = next_seq.max(seq + 1);
        }
        Ok(Spool { dir, max_pending: max_pending.max(1), pending, next_seq, dropped: 0 })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, seq: u64, ext: &str) -> PathBuf {
        self.dir.join(format!("{seq:020}.{ext}"))
    }

    /// The sequence number the next batch must carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Batches dropped because the spool was full.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Undelivered sequence numbers, oldest first.
    pub fn pending(&self) -> Vec<u64> {
        self.pending.iter().copied().collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Store a batch. Returns the sequence numbers evicted to respect the
    /// bound (oldest first).
    pub fn push(&mut self, batch: &SampleBatch) -> io::Result<Vec<u64>> {
        assert_eq!(batch.seq, self.next_seq, "spool sequence must be gapless");
        let tmp = self.path(batch.seq, "tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serialize_batch(batch))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(batch.seq, "pending"))?;
        sync_dir(&self.dir)?;
        self.pending.insert(batch.seq);
        self.next_seq = batch.seq + 1;

        let mut evicted = Vec::new();
        while self.pending.len() > self.max_pending {
            let oldest = self.pending.pop_first().expect("non-empty");
            fs::remove_file(self.path(oldest, "pending"))?;
            self.dropped += 1;
            warn!("spool full: dropped undelivered batch {oldest}");
            evicted.push(oldest);
        }
        Ok(evicted)
    }

    pub fn load(&self, seq: u64) -> io::Result<Vec<u8>> {
        fs::read(self.path(seq, "pending"))
    }

    /// Replace the stored bytes of a pending batch.
    pub fn rewrite(&self, batch: &SampleBatch) -> io::Result<()> {
        let tmp = self.path(batch.seq, "tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serialize_batch(batch))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(batch.seq, "pending"))
    }

    pub fn mark_delivered(&mut self, seq: u64) -> io::Result<()> {
        fs::rename(self.path(seq, "pending"), self.path(seq, "delivered"))?;
        self.pending.remove(&seq);
        Ok(())
    }

    /// Give up on a pending batch whose stored bytes are unreadable.
    pub fn discard(&mut self, seq: u64) -> io::Result<()> {
        fs::rename(self.path(seq, "pending"), self.path(seq, "rejected"))?;
        self.pending.remove(&seq);
        Ok(())
    }
}
