//! Monotonic clock anchor and rate pacing.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

static ANCHOR: OnceLock<Instant> = OnceLock::new();

/// Monotonic nanoseconds since the first call in this process. All threads
/// share the anchor, so timestamps are directly comparable.
pub fn now_ns() -> u64 {
    ANCHOR.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Sleep-then-spin wait until the monotonic clock reaches `target_ns`.
///
/// Coarse sleeping stops short of the target and a spin loop covers the
/// remainder, which keeps the median wake-up error in the tens of
/// microseconds.
pub fn wait_until_ns(target_ns: u64) {
    const SPIN_WINDOW_NS: u64 = 400_000;
    loop {
        let now = now_ns();
        if now >= target_ns {
            return;
        }
        let remaining = target_ns - now;
        if remaining > SPIN_WINDOW_NS {
            std::thread::sleep(Duration::from_nanos(remaining - SPIN_WINDOW_NS));
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Fixed-rate pacer on an absolute schedule: tick times are multiples of the
/// period from the start tick, so jitter does not accumulate.
#[derive(Debug)]
pub struct Pacer {
    period_ns: u64,
    next_ns: u64,
}

impl Pacer {
    /// A pacer whose first tick fires immediately.
    pub fn new(period_ns: u64) -> Self {
        assert!(period_ns > 0, "pacer period must be positive");
        Self { period_ns, next_ns: now_ns() }
    }

    pub fn period_ns(&self) -> u64 {
        self.period_ns
    }

    /// Block until the next tick and return its scheduled time.
    ///
    /// If the loop has fallen more than one period behind, the schedule
    /// re-anchors at the current time instead of firing a burst of
    /// catch-up ticks.
    pub fn wait_tick(&mut self) -> u64 {
        let target = self.next_ns;
        wait_until_ns(target);
        let now = now_ns();
        self.next_ns = if now > target + self.period_ns { now + self.period_ns } else { target + self.period_ns };
        target
    }
}
