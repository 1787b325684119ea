//! Virtual clock instants.

use std::cmp::Ordering;
use std::fmt;

/// A point on the virtual clock.
///
/// `seq` breaks ties between events scheduled for the same second; it is
/// assigned by whoever owns the event queue and grows monotonically.
#[derive(Debug, Clone, Copy)]
pub struct SimTime {
    pub seconds: f64,
    pub seq: u64,
}

impl SimTime {
    pub const ZERO: SimTime = SimTime { seconds: 0.0, seq: 0 };

    pub fn new(seconds: f64, seq: u64) -> Self {
        debug_assert!(seconds >= 0.0, "virtual time is nonnegative");
        Self { seconds, seq }
    }

    /// An instant without a meaningful tie-break, for pure computations.
    pub fn at(seconds: f64) -> Self {
        Self::new(seconds, 0)
    }
}

impl PartialEq for SimTime {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.seconds
            .total_cmp(&other.seconds)
            .then(self.seq.cmp(&other.seq))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s#{}", self.seconds, self.seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_seconds_then_seq() {
        let a = SimTime::new(1.0, 5);
        let b = SimTime::new(1.0, 6);
        let c = SimTime::new(0.5, 100);
        assert!(c < a);
        assert!(a < b);
        let mut v = vec![b, a, c];
        v.sort();
        assert_eq!(v, vec![c, a, b]);
    }
}
