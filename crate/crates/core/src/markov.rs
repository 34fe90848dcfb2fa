//! Bit-flip error process over one integration interval.
//!
//! Each qubit flips as an independent Poisson process with rate `mu`. Over an
//! interval `T` a qubit ends up flipped when it saw an odd number of errors,
//! so with `x = mu T`:
//!
//! ```text
//! P(even) = e^-x cosh x      P(odd) = e^-x sinh x
//! J[a][b] = sinh(x)^d cosh(x)^(3-d) e^(-3x),  d = hamming(a, b)
//! ```

use crate::error::{Error, Result};
use crate::state::{hamming, positive, StateIndex};

pub type Matrix8 = [[f64; 8]; 8];

/// Probabilities of an even and an odd number of Poisson events with mean `mu_t`.
pub fn parity_probs(mu_t: f64) -> Result<(f64, f64)> {
    if !(mu_t >= 0.0) || !mu_t.is_finite() {
        return Err(Error::param("mu_t", format!("must be finite and >= 0, got {mu_t}")));
    }
    // e^-x sinh x = (1 - e^-2x) / 2, evaluated without cancellation
    let p_odd = -(-2.0 * mu_t).exp_m1() / 2.0;
    Ok((1.0 - p_odd, p_odd))
}

/// `ln sinh x` for `x > 0`, accurate down to tiny arguments.
pub fn log_sinh(x: f64) -> f64 {
    if x < 1e-3 {
        let x2 = x * x;
        // sinh(x)/x = 1 + x^2/6 + x^4/120 + ...
        x.ln() + (x2 / 6.0 + x2 * x2 / 120.0).ln_1p()
    } else if x < 20.0 {
        x.sinh().ln()
    } else {
        x - std::f64::consts::LN_2 + (-(-2.0 * x).exp()).ln_1p()
    }
}

/// `ln cosh x` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Interval transition probabilities, `j[a][b] = P(next = b | prev = a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub j: Matrix8,
    pub mu_t: f64,
}

impl TransitionMatrix {
    #[inline]
    pub fn get(&self, prev: StateIndex, next: StateIndex) -> f64 {
        self.j[prev.index()][next.index()]
    }

    /// Probability of a transition at Hamming distance `d`.
    pub fn by_distance(&self, d: u32) -> f64 {
        self.j[0][(1u8 << d) as usize - 1]
    }
}

pub fn transition_matrix(mu: f64, dt: f64) -> Result<TransitionMatrix> {
    positive("mu", mu)?;
    positive("dt", dt)?;
    let mu_t = mu * dt;
    let (even, odd) = parity_probs(mu_t)?;
    let mut j = [[0.0; 8]; 8];
    for a in StateIndex::all() {
        for b in StateIndex::all() {
            let d = hamming(a, b) as i32;
            j[a.index()][b.index()] = odd.powi(d) * even.powi(3 - d);
        }
    }
    Ok(TransitionMatrix { j, mu_t })
}

/// Natural log of the transition matrix, computed directly in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTransitionMatrix {
    pub logj: Matrix8,
    pub mu_t: f64,
}

impl LogTransitionMatrix {
    #[inline]
    pub fn get(&self, prev: StateIndex, next: StateIndex) -> f64 {
        self.logj[prev.index()][next.index()]
    }
}

pub fn log_transition_matrix(mu: f64, dt: f64) -> Result<LogTransitionMatrix> {
    positive("mu", mu)?;
    positive("dt", dt)?;
    let x = mu * dt;
    let ls = log_sinh(x);
    let lc = log_cosh(x);
    let mut logj = [[0.0; 8]; 8];
    for a in StateIndex::all() {
        for b in StateIndex::all() {
            let d = hamming(a, b) as f64;
            logj[a.index()][b.index()] = d * ls + (3.0 - d) * lc - 3.0 * x;
        }
    }
    Ok(LogTransitionMatrix { logj, mu_t: x })
}

/// Generator of three independent flip processes.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    pub q: Matrix8,
    pub mu: f64,
}

impl RateMatrix {
    #[inline]
    pub fn get(&self, from: StateIndex, to: StateIndex) -> f64 {
        self.q[from.index()][to.index()]
    }
}

pub fn rate_matrix(mu: f64) -> Result<RateMatrix> {
    positive("mu", mu)?;
    let mut q = [[0.0; 8]; 8];
    for a in StateIndex::all() {
        for b in StateIndex::all() {
            q[a.index()][b.index()] = match hamming(a, b) {
                0 => -3.0 * mu,
                1 => mu,
                _ => 0.0,
            };
        }
    }
    Ok(RateMatrix { q, mu })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_probs_edges() {
        assert_eq!(parity_probs(0.0).unwrap(), (1.0, 0.0));
        assert!(parity_probs(-1e-3).is_err());
        for x in [1e-9, 1e-3, 0.1, 2.0, 30.0] {
            let (e, o) = parity_probs(x).unwrap();
            assert!((e + o - 1.0).abs() < 1e-15);
            assert!((e - (-x).exp() * x.cosh()).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let j = transition_matrix(2.5e-3, 0.1).unwrap();
        for row in &j.j {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn single_flip_ratio_is_tanh() {
        let x: f64 = 0.05;
        let j = transition_matrix(0.5, 0.1).unwrap();
        assert!((j.j[0][4] / j.j[0][0] - x.tanh()).abs() < 1e-14);
    }

    #[test]
    fn log_matrix_diagonal_and_corner() {
        let x: f64 = 0.02;
        let lj = log_transition_matrix(0.2, 0.1).unwrap();
        for a in 0..8 {
            let want = 3.0 * x.cosh().ln() - 3.0 * x;
            assert!((lj.logj[a][a] - want).abs() < 1e-14);
        }
        assert!((lj.logj[0][7] - lj.logj[0][0] - 3.0 * x.tanh().ln()).abs() < 1e-12);
    }

    #[test]
    fn single_flip_log_gap_near_log_mu_t() {
        let lj = log_transition_matrix(0.1, 0.1).unwrap();
        let gap = lj.logj[0][4] - lj.logj[0][0];
        assert!((gap - (1e-2f64).ln()).abs() < 0.01, "gap {gap}");
        assert!((gap + 4.6).abs() < 0.02);
    }

    #[test]
    fn tiny_mu_t_stays_finite() {
        let lj = log_transition_matrix(1e-6, 1e-3).unwrap();
        assert!(lj.logj.iter().flatten().all(|v| v.is_finite()));
        assert!((lj.logj[0][7] - 3.0 * (1e-9f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn rate_matrix_rows_sum_to_zero() {
        let q = rate_matrix(0.3).unwrap();
        for row in &q.q {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert_eq!(q.q[0][7], 0.0);
        assert_eq!(q.q[0][4], 0.3);
    }

    #[test]
    fn non_positive_parameters_rejected() {
        assert!(transition_matrix(0.0, 0.1).is_err());
        assert!(transition_matrix(1.0, -0.1).is_err());
        assert!(log_transition_matrix(1.0, 0.0).is_err());
        assert!(rate_matrix(-1.0).is_err());
    }
}
