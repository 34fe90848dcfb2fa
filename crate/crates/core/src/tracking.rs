//! Common interface of the state-tracking filters.

use crate::simulator::MeasurementPair;
use crate::state::StateIndex;

/// A recursive estimator fed one measurement pair per interval.
pub trait TrackingFilter {
    /// Short stable identifier used in output files.
    fn name(&self) -> &'static str;

    /// Forget everything and start from a known state.
    fn reset(&mut self, initial: StateIndex);

    /// Consume one interval and return the current best guess.
    fn step(&mut self, m: MeasurementPair) -> StateIndex;

    /// True once the filter hit a numerical failure; it then keeps returning
    /// its last prediction until reset.
    fn failed(&self) -> bool {
        false
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64; 8]) -> StateIndex {
    let mut best = 0;
    for i in 1..8 {
        if v[i] > v[best] {
            best = i;
        }
    }
    StateIndex::new(best as u8).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.0; 8]).value(), 0);
        assert_eq!(argmax(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).value(), 1);
        assert_eq!(argmax(&[-3.0, -2.0, -1.0, -1.5, -9.0, -9.0, -9.0, -0.5]).value(), 7);
    }
}
