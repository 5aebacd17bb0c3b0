//! Wall-clock timestamps derived from a monotonic clock.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Nanoseconds since the Unix epoch, read from the wall clock.
pub fn unix_now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// A wall-clock reading paired with a monotonic instant.
///
/// Later instants are converted to wall time by adding the monotonic offset,
/// so intervals between converted stamps never go negative even if the
/// wall clock is stepped in between.
#[derive(Debug, Clone, Copy)]
pub struct WallAnchor {
    wall_ns: u64,
    instant: Instant,
}

impl WallAnchor {
    pub fn now() -> Self {
        let instant = Instant::now();
        Self {
            wall_ns: unix_now_ns(),
            instant,
        }
    }

    pub fn wall_ns(&self) -> u64 {
        self.wall_ns
    }

    pub fn stamp(&self, at: Instant) -> u64 {
        self.wall_ns + at.saturating_duration_since(self.instant).as_nanos() as u64
    }
}
