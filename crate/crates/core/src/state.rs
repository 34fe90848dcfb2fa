//! Three-qubit state labels, parity syndromes and the run configuration.
//!
//! A state is the bit pattern of the three physical qubits with qubit 1 in
//! the most significant position, so `4 = |100>` and `1 = |001>`. Only the
//! basis label is tracked: the parity operators `Z1Z2` and `Z2Z3` act the
//! same way on `a|x> + b|x XOR 7>`, so a label and its complement are
//! indistinguishable to the measurement.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-encoded computational state of the three qubits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StateIndex(u8);

impl StateIndex {
    pub const ZERO: StateIndex = StateIndex(0);

    pub fn new(value: u8) -> Result<Self> {
        if value < 8 {
            Ok(StateIndex(value))
        } else {
            Err(Error::InvalidState(value))
        }
    }

    /// All eight states in index order.
    pub fn all() -> impl Iterator<Item = StateIndex> + Clone {
        (0u8..8).map(StateIndex)
    }

    #[inline]
    pub fn value(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The other state in the same parity subspace.
    #[inline]
    pub fn complement(self) -> StateIndex {
        StateIndex(self.0 ^ 7)
    }

    #[inline]
    pub fn flip(self, mask: FlipMask) -> StateIndex {
        StateIndex(self.0 ^ mask.0)
    }

    /// Bit value (0 or 1) of qubit `q` in 1..=3.
    #[inline]
    pub fn bit(self, qubit: Qubit) -> u8 {
        (self.0 >> (3 - qubit.number())) & 1
    }
}

impl TryFrom<u8> for StateIndex {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        StateIndex::new(v)
    }
}

impl From<StateIndex> for u8 {
    fn from(s: StateIndex) -> u8 {
        s.0
    }
}

impl fmt::Display for StateIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One of the three physical qubits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Qubit {
    One,
    Two,
    Three,
}

impl Qubit {
    pub const ALL: [Qubit; 3] = [Qubit::One, Qubit::Two, Qubit::Three];

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Qubit::One),
            2 => Ok(Qubit::Two),
            3 => Ok(Qubit::Three),
            _ => Err(Error::param("qubit", format!("{n} is not in 1..=3"))),
        }
    }

    #[inline]
    pub fn number(self) -> u8 {
        match self {
            Qubit::One => 1,
            Qubit::Two => 2,
            Qubit::Three => 3,
        }
    }

    /// Zero-based position, 0 for qubit 1.
    #[inline]
    pub fn position(self) -> usize {
        self.number() as usize - 1
    }

    #[inline]
    pub fn mask(self) -> FlipMask {
        FlipMask(1 << (3 - self.number()))
    }
}

/// Set of qubits flipped by a transition, in the same bit layout as [`StateIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FlipMask(u8);

impl FlipMask {
    pub const NONE: FlipMask = FlipMask(0);

    pub fn between(from: StateIndex, to: StateIndex) -> FlipMask {
        FlipMask(from.0 ^ to.0)
    }

    /// Net flips implied by per-qubit error counts (odd count = flipped).
    pub fn from_counts(counts: [u32; 3]) -> FlipMask {
        let mut m = 0u8;
        for (q, &c) in Qubit::ALL.iter().zip(counts.iter()) {
            if c % 2 == 1 {
                m |= q.mask().0;
            }
        }
        FlipMask(m)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits < 8 {
            Ok(FlipMask(bits))
        } else {
            Err(Error::param("flip mask", format!("{bits} exceeds 3 bits")))
        }
    }

    #[inline]
    pub fn bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn weight(self) -> u32 {
        self.0.count_ones()
    }

    #[inline]
    pub fn contains(self, q: Qubit) -> bool {
        self.0 & q.mask().0 != 0
    }

    /// Whether the `Z1Z2` and `Z2Z3` eigenvalues change under this flip.
    #[inline]
    pub fn flips_syndromes(self) -> (bool, bool) {
        let q1 = self.contains(Qubit::One);
        let q2 = self.contains(Qubit::Two);
        let q3 = self.contains(Qubit::Three);
        (q1 ^ q2, q2 ^ q3)
    }

    /// The single flipped qubit, if exactly one.
    pub fn single(self) -> Option<Qubit> {
        match self.0 {
            4 => Some(Qubit::One),
            2 => Some(Qubit::Two),
            1 => Some(Qubit::Three),
            _ => None,
        }
    }
}

/// Eigenvalues `(s1, s2)` of `Z1Z2` and `Z2Z3`, each `+1` or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyndromePair {
    pub s1: i8,
    pub s2: i8,
}

impl SyndromePair {
    pub fn new(s1: i8, s2: i8) -> Result<Self> {
        if s1.abs() != 1 || s2.abs() != 1 {
            return Err(Error::param("syndrome", format!("({s1}, {s2}) is not a pair of signs")));
        }
        Ok(SyndromePair { s1, s2 })
    }

    #[inline]
    pub fn as_f64(self) -> (f64, f64) {
        (self.s1 as f64, self.s2 as f64)
    }

    /// Index 0..4 of the parity subspace: bit 1 set when `s1 = -1`, bit 0 when `s2 = -1`.
    #[inline]
    pub fn class(self) -> usize {
        (((self.s1 < 0) as usize) << 1) | (self.s2 < 0) as usize
    }
}

/// Parity syndromes of a basis state.
#[inline]
pub fn syndrome_of(state: StateIndex) -> SyndromePair {
    let b1 = state.bit(Qubit::One);
    let b2 = state.bit(Qubit::Two);
    let b3 = state.bit(Qubit::Three);
    SyndromePair {
        s1: if b1 == b2 { 1 } else { -1 },
        s2: if b2 == b3 { 1 } else { -1 },
    }
}

/// Number of qubits on which two states differ.
#[inline]
pub fn hamming(a: StateIndex, b: StateIndex) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// `+1` when both parities of the state agree, `-1` otherwise.
#[inline]
pub fn parity_sign_c(state: StateIndex) -> i8 {
    let s = syndrome_of(state);
    s.s1 * s.s2
}

/// Physical parameters of a run. Times are in microseconds, rates in 1/us.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Bit-flip rate per qubit.
    pub mu: f64,
    /// Integration interval `T`.
    pub dt: f64,
    /// Noise constant; a measurement over `T` has variance `k / T`.
    pub k: f64,
    pub duration: f64,
    pub seed: u64,
    pub trials: usize,
    #[serde(default)]
    pub initial_state: StateIndex,
}

impl RunConfig {
    pub fn new(mu: f64, dt: f64, k: f64, duration: f64) -> Self {
        RunConfig {
            mu,
            dt,
            k,
            duration,
            seed: 0,
            trials: 1,
            initial_state: StateIndex::ZERO,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    pub fn validate(&self) -> Result<()> {
        positive("mu", self.mu)?;
        positive("dt", self.dt)?;
        positive("k", self.k)?;
        positive("duration", self.duration)?;
        if self.trials == 0 {
            return Err(Error::param("trials", "must be at least 1"));
        }
        if self.steps() == 0 {
            return Err(Error::param("duration", "shorter than half an interval"));
        }
        Ok(())
    }

    /// Number of intervals: `duration / T` rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Duration actually simulated, `steps() * T`.
    pub fn effective_duration(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    /// Measurement noise variance `k / T`.
    #[inline]
    pub fn variance(&self) -> f64 {
        self.k / self.dt
    }

    #[inline]
    pub fn mu_t(&self) -> f64 {
        self.mu * self.dt
    }
}

pub(crate) fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite and > 0, got {v}")))
    }
}
