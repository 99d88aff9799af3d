use std::time::{Duration, Instant};

/// Wall-clock time spent in each phase of a prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub gate_selection: Duration,
    pub feature_extraction: Duration,
    pub location_update: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.gate_selection + self.feature_extraction + self.location_update
    }

    pub fn add(&mut self, other: &PhaseTimes) {
        self.gate_selection += other.gate_selection;
        self.feature_extraction += other.feature_extraction;
        self.location_update += other.location_update;
    }
}

/// Runs `f`, charging its duration to the slot picked by `slot` when a
/// timing sink is present.
#[inline]
pub(crate) fn timed<T>(
    times: &mut Option<&mut PhaseTimes>,
    slot: fn(&mut PhaseTimes) -> &mut Duration,
    f: impl FnOnce() -> T,
) -> T {
    match times {
        Some(t) => {
            let start = Instant::now();
            let out = f();
            *slot(t) += start.elapsed();
            out
        }
        None => f(),
    }
}
