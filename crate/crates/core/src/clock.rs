//! Time base shared by every component.
//!
//! All timestamps are whole milliseconds. In virtual mode the clock only moves
//! when the event loop advances it; in wall-clock mode it tracks the system
//! clock (milliseconds since the Unix epoch, so histories stay monotone across
//! process restarts).

use std::fmt;
use std::ops::{Add, Sub};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// A point in (virtual or wall) time, in milliseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime((secs * 1000.0).round().max(0.0) as u64)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0.saturating_add(rhs.as_millis() as u64))
    }
}

impl Sub<SimTime> for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

/// Formats a duration the same way [`SimTime`] is displayed (seconds, 3 decimals).
pub fn fmt_secs(d: Duration) -> String {
    let ms = d.as_millis() as u64;
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

/// Parses a duration given in (possibly fractional) seconds.
pub fn secs(s: f64) -> Duration {
    Duration::from_millis((s * 1000.0).round().max(0.0) as u64)
}

pub trait Clock: Send {
    fn now(&self) -> SimTime;

    /// Called by the event loop before processing an event scheduled at `t`.
    fn advance_to(&mut self, t: SimTime);

    fn is_virtual(&self) -> bool;
}

#[derive(Debug, Default)]
pub struct VirtualClock {
    now: SimTime,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> SimTime {
        self.now
    }

    fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[derive(Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now(&self) -> SimTime {
        let since_epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        SimTime(since_epoch.as_millis() as u64)
    }

    fn advance_to(&mut self, _t: SimTime) {}

    fn is_virtual(&self) -> bool {
        false
    }
}
