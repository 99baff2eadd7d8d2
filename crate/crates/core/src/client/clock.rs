//! Time sources. Retry backoff, call durations and simulated latency all go
//! through [`Clock`] so tests can replace real sleeping with virtual time.

use std::collections::HashMap;
use std::sync::Mutex;
use std::thread::{self, ThreadId};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        thread::sleep(d);
    }
}

/// Virtual time kept separately per thread: `sleep` returns immediately and
/// advances only the calling thread's timeline. A call and the in-process
/// simulator it talks to run on the same thread, so measured durations equal
/// the simulated delays exactly even when several workers run at once.
#[derive(Debug, Default)]
pub struct VirtualClock {
    timelines: Mutex<HashMap<ThreadId, Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        let map = self.timelines.lock().expect("clock lock");
        map.get(&thread::current().id())
            .copied()
            .unwrap_or_default()
    }

    fn sleep(&self, d: Duration) {
        let mut map = self.timelines.lock().expect("clock lock");
        *map.entry(thread::current().id()).or_default() += d;
    }
}
