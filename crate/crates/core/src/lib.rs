//! Continuous parity-measurement simulation and decoding for the
//! three-qubit bit-flip code.

pub mod baselines;
pub mod error;
pub mod filter_log;
pub mod filter_optimal;
pub mod harness;
pub mod markov;
pub mod rng;
pub mod simulator;
pub mod state;
pub mod synd_density;
pub mod tracking;

pub use error::{Error, Result};
pub use state::{hamming, syndrome_of, FlipMask, Qubit, RunConfig, StateIndex, SyndromePair};
