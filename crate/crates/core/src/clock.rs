use std::time::{Duration, Instant};

use chrono::NaiveDate;

/// Time source for latency measurement and date-aware prompts.
pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;

    fn today(&self) -> NaiveDate;
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn today(&self) -> NaiveDate {
        chrono::Local::now().date_naive()
    }
}

/// Frozen clock: every instant is zero and the date never changes.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock {
    pub date: NaiveDate,
}

impl FixedClock {
    pub fn new(date: NaiveDate) -> Self {
        Self { date }
    }
}

impl Default for FixedClock {
    fn default() -> Self {
        Self::new(NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }

    fn today(&self) -> NaiveDate {
        self.date
    }
}
