//! Timestamp sources for the executor loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub trait Clock {
    /// Nanoseconds since an arbitrary fixed origin.
    fn now_ns(&mut self) -> u64;
}

/// Monotonic wall clock.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    #[inline]
    fn now_ns(&mut self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// Deterministic counter: each read returns the current value, then
/// advances it by `step_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FakeClock {
    pub next_ns: u64,
    pub step_ns: i64,
}

impl Clock for FakeClock {
    fn now_ns(&mut self) -> u64 {
        let now = self.next_ns;
        self.next_ns = self.next_ns.wrapping_add_signed(self.step_ns);
        now
    }
}

/// Clock selection carried in the executor job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSpec {
    #[default]
    Monotonic,
    Fake {
        start_ns: u64,
        step_ns: i64,
    },
}

impl ClockSpec {
    pub fn build(self) -> Box<dyn Clock> {
        match self {
            ClockSpec::Monotonic => Box::new(MonotonicClock::new()),
            ClockSpec::Fake { start_ns, step_ns } => Box::new(FakeClock {
                next_ns: start_ns,
                step_ns,
            }),
        }
    }
}

/// Smallest non-zero difference between consecutive monotonic reads.
pub fn measure_resolution_ns() -> u64 {
    let mut clock = MonotonicClock::new();
    let mut best = u64::MAX;
    for _ in 0..1000 {
        let a = clock.now_ns();
        let mut b = clock.now_ns();
        while b == a {
            b = clock.now_ns();
        }
        best = best.min(b - a);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_clock_steps() {
        let mut c = ClockSpec::Fake {
            start_ns: 5,
            step_ns: 1000,
        }
        .build();
        assert_eq!(c.now_ns(), 5);
        assert_eq!(c.now_ns(), 1005);
    }

    #[test]
    fn monotonic_resolution_is_positive() {
        let r = measure_resolution_ns();
        assert!(r > 0 && r < 1_000_000);
    }
}
