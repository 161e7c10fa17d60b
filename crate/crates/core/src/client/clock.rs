use std::time::Instant;

use chrono::{Duration, Utc};

use crate::model::Timestamp;

/// Wall-clock time plus a monotonic millisecond uptime.
pub trait Clock {
    fn now(&self) -> Timestamp;
    fn uptime_ms(&self) -> u64;
    /// Block until `t`; returns immediately if `t` has passed.
    fn sleep_until(&mut self, t: Timestamp);
}

/// Time that only moves when asked to. Uptime advances in step with `now`.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    start: Timestamp,
    now: Timestamp,
    uptime_at_start: u64,
}

impl VirtualClock {
    pub fn new(start: Timestamp, uptime_at_start: u64) -> Self {
        VirtualClock { start, now: start, uptime_at_start }
    }

    pub fn advance(&mut self, d: Duration) {
        self.now += d;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        self.now
    }

    fn uptime_ms(&self) -> u64 {
        self.uptime_at_start + (self.now - self.start).num_milliseconds().max(0) as u64
    }

    fn sleep_until(&mut self, t: Timestamp) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    booted: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { booted: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }

    fn uptime_ms(&self) -> u64 {
        self.booted.elapsed().as_millis() as u64
    }

    fn sleep_until(&mut self, t: Timestamp) {
        if let Ok(d) = (t - Utc::now()).to_std() {
            std::thread::sleep(d);
        }
    }
}
