//! Comparison filters: a first-order discretized Wonham filter and a
//! hysteresis threshold detector on smoothed syndrome signals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{rate_matrix, RateMatrix};
use crate::simulator::MeasurementPair;
use crate::state::{positive, syndrome_of, Qubit, StateIndex};
use crate::tracking::{argmax, TrackingFilter};

/// Probability vector of the linearized Wonham filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WonhamState {
    pub p: [f64; 8],
}

impl WonhamState {
    pub fn point_mass(state: StateIndex) -> Self {
        let mut p = [0.0; 8];
        p[state.index()] = 1.0;
        WonhamState { p }
    }
}

const SIGNS: [(f64, f64); 8] = {
    let mut s = [(0.0, 0.0); 8];
    let mut i = 0;
    while i < 8 {
        let b1 = (i >> 2) & 1;
        let b2 = (i >> 1) & 1;
        let b3 = i & 1;
        s[i] = (if b1 == b2 { 1.0 } else { -1.0 }, if b2 == b3 { 1.0 } else { -1.0 });
        i += 1;
    }
    s
};

/// `p + T (Q^T p + (m1 S1 + m2 S2) / k * p)`, clamped at zero and renormalized.
pub fn wonham_step(state: &WonhamState, m: MeasurementPair, q: &RateMatrix, k: f64, dt: f64) -> Result<(WonhamState, StateIndex)> {
    let p = &state.p;
    let mut next = [0.0; 8];
    for l in 0..8 {
        let drift: f64 = (0..8).map(|from| q.q[from][l] * p[from]).sum();
        let (s1, s2) = SIGNS[l];
        let obs = (m.m1 * s1 + m.m2 * s2) / k * p[l];
        next[l] = (p[l] + dt * (drift + obs)).max(0.0);
    }
    let total: f64 = next.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Divergence);
    }
    next.iter_mut().for_each(|x| *x /= total);
    Ok((WonhamState { p: next }, argmax(&next)))
}

#[derive(Debug, Clone)]
pub struct WonhamFilter {
    q: RateMatrix,
    k: f64,
    dt: f64,
    state: WonhamState,
    last: StateIndex,
    failed: bool,
}

impl WonhamFilter {
    pub fn new(mu: f64, dt: f64, k: f64) -> Result<Self> {
        positive("k", k)?;
        positive("dt", dt)?;
        Ok(WonhamFilter {
            q: rate_matrix(mu)?,
            k,
            dt,
            state: WonhamState::point_mass(StateIndex::ZERO),
            last: StateIndex::ZERO,
            failed: false,
        })
    }

    pub fn state(&self) -> &WonhamState {
        &self.state
    }
}

impl TrackingFilter for WonhamFilter {
    fn name(&self) -> &'static str {
        "wonham"
    }

    fn reset(&mut self, initial: StateIndex) {
        self.state = WonhamState::point_mass(initial);
        self.last = initial;
        self.failed = false;
    }

    fn step(&mut self, m: MeasurementPair) -> StateIndex {
        if self.failed {
            return self.last;
        }
        match wonham_step(&self.state, m, &self.q, self.k, self.dt) {
            Ok((s, pred)) => {
                self.state = s;
                self.last = pred;
            }
            Err(_) => self.failed = true,
        }
        self.last
    }

    fn failed(&self) -> bool {
        self.failed
    }
}

/// Settings of the threshold detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    /// Smoothing time constant in microseconds.
    pub tau: f64,
    /// A syndrome reading `+1` is declared flipped when its average drops below this.
    pub eta_low: f64,
    /// A syndrome reading `-1` is declared restored when its average rises above this.
    pub eta_high: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams {
            tau: 6.0,
            eta_low: -0.25,
            eta_high: 0.5,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        positive("tau", self.tau)?;
        if !(self.eta_low < self.eta_high) {
            return Err(Error::param("eta_low", format!("{} must be below eta_high {}", self.eta_low, self.eta_high)));
        }
        if !self.eta_low.is_finite() || !self.eta_high.is_finite() {
            return Err(Error::param("eta", "thresholds must be finite"));
        }
        Ok(())
    }

    /// Averaging weight of the newest sample for interval `dt`.
    pub fn lambda(&self, dt: f64) -> f64 {
        -(-dt / self.tau).exp_m1()
    }
}

/// Smoothed signals and the current belief of the threshold detector.
///
/// `ema` averages the raw measurements. Each syndrome estimate switches to
/// `-1` below `eta_low` and back to `+1` above `eta_high`. When one syndrome
/// switches while the other average already sits between the thresholds on
/// its way to switching, both are taken to have changed (a middle-qubit flip).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdState {
    pub ema: [f64; 2],
    pub believed_state: StateIndex,
    pub params: ThresholdParams,
    lambda: f64,
}

impl ThresholdState {
    pub fn new(initial: StateIndex, params: ThresholdParams, dt: f64) -> Result<Self> {
        params.validate()?;
        positive("dt", dt)?;
        let (s1, s2) = syndrome_of(initial).as_f64();
        Ok(ThresholdState {
            ema: [s1, s2],
            believed_state: initial,
            params,
            lambda: params.lambda(dt),
        })
    }
}

fn leaning(ema: f64, sign: f64, p: &ThresholdParams) -> bool {
    if sign > 0.0 {
        ema < p.eta_high
    } else {
        ema > p.eta_low
    }
}

fn switches(ema: f64, sign: f64, p: &ThresholdParams) -> bool {
    if sign > 0.0 {
        ema < p.eta_low
    } else {
        ema > p.eta_high
    }
}

pub fn threshold_step(state: &ThresholdState, m: MeasurementPair) -> (ThresholdState, StateIndex) {
    let mut next = *state;
    let lam = state.lambda;
    next.ema[0] = lam * m.m1 + (1.0 - lam) * state.ema[0];
    next.ema[1] = lam * m.m2 + (1.0 - lam) * state.ema[1];
    let (s1, s2) = syndrome_of(state.believed_state).as_f64();
    let p = &state.params;
    let sw1 = switches(next.ema[0], s1, p);
    let sw2 = switches(next.ema[1], s2, p);
    let flip = match (sw1, sw2) {
        (false, false) => None,
        (true, true) => Some(Qubit::Two),
        (true, false) if leaning(next.ema[1], s2, p) => Some(Qubit::Two),
        (false, true) if leaning(next.ema[0], s1, p) => Some(Qubit::Two),
        (true, false) => Some(Qubit::One),
        (false, true) => Some(Qubit::Three),
    };
    if let Some(q) = flip {
        next.believed_state = state.believed_state.flip(q.mask());
    }
    (next, next.believed_state)
}

#[derive(Debug, Clone)]
pub struct ThresholdFilter {
    dt: f64,
    state: ThresholdState,
}

impl ThresholdFilter {
    pub fn new(params: ThresholdParams, dt: f64) -> Result<Self> {
        Ok(ThresholdFilter {
            dt,
            state: ThresholdState::new(StateIndex::ZERO, params, dt)?,
        })
    }

    pub fn state(&self) -> &ThresholdState {
        &self.state
    }
}

impl TrackingFilter for ThresholdFilter {
    fn name(&self) -> &'static str {
        "threshold"
    }

    fn reset(&mut self, initial: StateIndex) {
        self.state = ThresholdState::new(initial, self.state.params, self.dt).expect("validated params");
    }

    fn step(&mut self, m: MeasurementPair) -> StateIndex {
        let (s, pred) = threshold_step(&self.state, m);
        self.state = s;
        pred
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: u8) -> StateIndex {
        StateIndex::new(v).unwrap()
    }

    #[test]
    fn wonham_zero_measurement_zero_rate_is_identity() {
        let q = RateMatrix { q: [[0.0; 8]; 8], mu: 0.0 };
        let st = WonhamState { p: [0.1, 0.2, 0.05, 0.05, 0.3, 0.1, 0.1, 0.1] };
        let (n, pred) = wonham_step(&st, MeasurementPair::new(0.0, 0.0), &q, 0.5, 0.1).unwrap();
        for i in 0..8 {
            assert!((n.p[i] - st.p[i]).abs() < 1e-15);
        }
        assert_eq!(pred, s(4));
    }

    #[test]
    fn wonham_stays_normalized_and_clamps() {
        let q = rate_matrix(0.01).unwrap();
        let mut st = WonhamState { p: [0.125; 8] };
        for i in 0..200 {
            let m = MeasurementPair::new(if i % 2 == 0 { 30.0 } else { -25.0 }, 3.0);
            st = wonham_step(&st, m, &q, 0.5, 0.1).unwrap().0;
            assert!((st.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(st.p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn wonham_divergence_detected() {
        // without jump terms nothing refills the clamped entries
        let q = RateMatrix { q: [[0.0; 8]; 8], mu: 0.0 };
        let st = WonhamState::point_mass(s(0));
        assert_eq!(wonham_step(&st, MeasurementPair::new(-1e3, -1e3), &q, 0.5, 0.1), Err(Error::Divergence));
    }

    #[test]
    fn wonham_signs_match_syndromes() {
        for l in StateIndex::all() {
            assert_eq!(SIGNS[l.index()], syndrome_of(l).as_f64());
        }
    }

    #[test]
    fn threshold_quiet_signal_never_moves() {
        let mut f = ThresholdFilter::new(ThresholdParams::default(), 0.1).unwrap();
        for _ in 0..1000 {
            assert_eq!(f.step(MeasurementPair::new(1.0, 1.0)), s(0));
        }
    }

    #[test]
    fn threshold_step_response_time() {
        let p = ThresholdParams::default();
        let dt = 0.1;
        let mut st = ThresholdState::new(s(0), p, dt).unwrap();
        // ema_n = -1 + 2 (1 - lambda)^n crosses eta_low after tau ln(2 / (1 + eta_low)) / dt steps
        let expect = (p.tau * (2.0 / (1.0 + p.eta_low)).ln() / dt).ceil() as usize;
        let mut fired = None;
        for n in 1..200 {
            let (next, pred) = threshold_step(&st, MeasurementPair::new(-1.0, 1.0));
            st = next;
            if pred != s(0) {
                fired = Some((n, pred));
                break;
            }
        }
        assert_eq!(fired, Some((expect, s(4))));
    }

    #[test]
    fn threshold_detects_middle_flip() {
        let mut f = ThresholdFilter::new(ThresholdParams::default(), 0.1).unwrap();
        let mut last = s(0);
        for _ in 0..300 {
            last = f.step(MeasurementPair::new(-1.0, -0.95));
        }
        assert_eq!(last, s(2));
        for _ in 0..300 {
            last = f.step(MeasurementPair::new(-1.0, -1.0));
        }
        assert_eq!(last, s(2));
    }

    #[test]
    fn threshold_recovers_from_false_alarm() {
        let fast = ThresholdParams {
            tau: 1.0,
            eta_low: 0.0,
            eta_high: 0.5,
        };
        let mut f = ThresholdFilter::new(fast, 0.1).unwrap();
        for _ in 0..10 {
            f.step(MeasurementPair::new(-1.0, 1.0));
        }
        assert_eq!(f.state().believed_state, s(4));
        let mut last = s(4);
        for _ in 0..100 {
            last = f.step(MeasurementPair::new(1.0, 1.0));
        }
        assert_eq!(last, s(0));
    }

    #[test]
    fn threshold_params_validated() {
        let bad = ThresholdParams {
            tau: 1.0,
            eta_low: 0.5,
            eta_high: 0.5,
        };
        assert!(ThresholdFilter::new(bad, 0.1).is_err());
        assert!(ThresholdFilter::new(ThresholdParams { tau: 0.0, ..Default::default() }, 0.1).is_err());
    }
}
