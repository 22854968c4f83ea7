use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Microseconds since the Unix epoch. Used for timestamps that cross
/// process boundaries.
pub fn epoch_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// Run-relative clock shared by the engine, its executors and the monitor.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    start: Instant,
    epoch_start_us: u64,
}

impl Default for RunClock {
    fn default() -> Self {
        Self::new()
    }
}

impl RunClock {
    pub fn new() -> Self {
        RunClock {
            start: Instant::now(),
            epoch_start_us: epoch_us(),
        }
    }

    /// Microseconds since the run started.
    pub fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    /// Converts an epoch timestamp reported by another process.
    pub fn from_epoch_us(&self, epoch: u64) -> u64 {
        epoch.saturating_sub(self.epoch_start_us)
    }

    pub fn epoch_start_us(&self) -> u64 {
        self.epoch_start_us
    }
}
