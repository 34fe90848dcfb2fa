//! Log-domain filters with Gaussian approximations of the interval likelihood.
//!
//! For each candidate predecessor `a` of state `b` the update forms
//!
//! ```text
//! L[a][b] = lp[a] + log J[a][b] + log P(m | a, b)
//! ```
//!
//! and keeps either the column maximum (one-term) or the two largest entries
//! combined exactly, `L* + log(1 + exp(L2 - L*))` (two-term). The likelihood
//! uses a narrow Gaussian around the start syndrome for a syndrome that does
//! not change, and a broad zero-mean Gaussian of variance `1/3 + k/T` for one
//! that does. A middle-qubit flip moves both syndromes together, so it is
//! written in the rotated coordinates `(m1 -+ c m2) / 2`.
//!
//! Without normalization all entries drift down by about `delta` per step;
//! subtracting it keeps magnitudes bounded and leaves the argmax alone.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::markov::{log_cosh, log_transition_matrix, LogTransitionMatrix, Matrix8};
use crate::simulator::MeasurementPair;
use crate::state::{positive, syndrome_of, FlipMask, Qubit, StateIndex};
use crate::tracking::{argmax, TrackingFilter};

/// Unnormalized log-probabilities of the eight states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosterior {
    pub lp: [f64; 8],
    pub steps_elapsed: u64,
}

impl LogPosterior {
    pub fn argmax(&self) -> StateIndex {
        argmax(&self.lp)
    }

    pub fn max(&self) -> f64 {
        self.lp.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest absolute entry.
    pub fn norm(&self) -> f64 {
        self.lp.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    /// Entries shifted so that they exponentiate to a distribution.
    pub fn normalized(&self) -> [f64; 8] {
        let mx = self.max();
        let lse = mx + self.lp.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        self.lp.map(|x| x - lse)
    }
}

/// `0` at `initial`, `floor` elsewhere.
pub fn init_log_posterior(initial: StateIndex, floor: f64) -> Result<LogPosterior> {
    if !(floor < 0.0) || !floor.is_finite() {
        return Err(Error::param("floor", format!("must be finite and < 0, got {floor}")));
    }
    let mut lp = [floor; 8];
    lp[initial.index()] = 0.0;
    Ok(LogPosterior { lp, steps_elapsed: 0 })
}

#[inline]
fn log_normal(x: f64, var: f64, log_norm: f64) -> f64 {
    -x * x / (2.0 * var) + log_norm
}

/// Closed-form Gaussian log-likelihoods for one `(k, T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensityModel {
    pub k: f64,
    pub dt: f64,
    narrow: f64,
    broad: f64,
    half_narrow: f64,
    half_broad: f64,
    ln_narrow: f64,
    ln_broad: f64,
    ln_half_narrow: f64,
    ln_half_broad: f64,
}

impl LogDensityModel {
    pub fn new(k: f64, dt: f64) -> Result<Self> {
        positive("k", k)?;
        positive("dt", dt)?;
        let v = k / dt;
        let ln = |var: f64| -0.5 * (2.0 * PI * var).ln();
        Ok(LogDensityModel {
            k,
            dt,
            narrow: v,
            broad: 1.0 / 3.0 + v,
            half_narrow: v / 2.0,
            half_broad: 1.0 / 3.0 + v / 2.0,
            ln_narrow: ln(v),
            ln_broad: ln(1.0 / 3.0 + v),
            ln_half_narrow: ln(v / 2.0),
            ln_half_broad: ln(1.0 / 3.0 + v / 2.0),
        })
    }

    /// `log P(m | prev, prev ^ flip)` with signs `(s1, s2)` of `prev`.
    pub fn eval_signs(&self, m: MeasurementPair, s1: f64, s2: f64, flip: FlipMask) -> f64 {
        if flip.single() == Some(Qubit::Two) {
            let c = s1 * s2;
            let u = (m.m1 - c * m.m2) / 2.0;
            let v = (m.m1 + c * m.m2) / 2.0;
            return log_normal(u, self.half_narrow, self.ln_half_narrow)
                + log_normal(v, self.half_broad, self.ln_half_broad)
                - std::f64::consts::LN_2;
        }
        let (f1, f2) = flip.flips_syndromes();
        self.axis(m.m1, s1, f1) + self.axis(m.m2, s2, f2)
    }

    #[inline]
    fn axis(&self, m: f64, s: f64, flipped: bool) -> f64 {
        if flipped {
            log_normal(m, self.broad, self.ln_broad)
        } else {
            log_normal(m - s, self.narrow, self.ln_narrow)
        }
    }

    pub fn eval(&self, m: MeasurementPair, prev: StateIndex, flip: FlipMask) -> f64 {
        let (s1, s2) = syndrome_of(prev).as_f64();
        self.eval_signs(m, s1, s2, flip)
    }

    /// All 32 distinct values for one measurement: `[parity class][flip pattern]`.
    pub fn table(&self, m: MeasurementPair) -> [[f64; 8]; 4] {
        let mut out = [[0.0; 8]; 4];
        for (class, row) in out.iter_mut().enumerate() {
            let s1 = if class & 2 != 0 { -1.0 } else { 1.0 };
            let s2 = if class & 1 != 0 { -1.0 } else { 1.0 };
            for (f, v) in row.iter_mut().enumerate() {
                *v = self.eval_signs(m, s1, s2, FlipMask::from_bits(f as u8).unwrap());
            }
        }
        out
    }
}

/// Log-likelihood of a measurement pair given the start state and which
/// qubit (if any) flipped during the interval.
pub fn log_measurement_density(m: MeasurementPair, prev: StateIndex, flipped: Option<Qubit>, k: f64, dt: f64) -> Result<f64> {
    let model = LogDensityModel::new(k, dt)?;
    let flip = flipped.map_or(FlipMask::NONE, Qubit::mask);
    Ok(model.eval(m, prev, flip))
}

/// Exact density of one syndrome's measurement after a single flip at a
/// uniform time: a unit-width uniform convolved with the readout noise.
pub fn exact_single_error_density(m1: f64, k: f64, dt: f64) -> f64 {
    let w = (2.0 * k / dt).sqrt();
    0.25 * (libm::erf((m1 + 1.0) / w) - libm::erf((m1 - 1.0) / w))
}

/// Per-step drift of the unnormalized log-posterior while no error occurs.
pub fn delta(mu: f64, dt: f64, k: f64) -> f64 {
    let x = mu * dt;
    -(1.0 + (2.0 * PI * k / dt).ln() - 3.0 * log_cosh(x) + 3.0 * x)
}

/// `L[a][b]` for every predecessor `a` and successor `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LTerms {
    pub l: Matrix8,
}

impl LTerms {
    /// Largest entry in column `b` and its row.
    pub fn column_max(&self, b: usize) -> (usize, f64) {
        let mut best = (0, self.l[0][b]);
        for a in 1..8 {
            if self.l[a][b] > best.1 {
                best = (a, self.l[a][b]);
            }
        }
        best
    }

    /// The two largest entries of column `b`, largest first.
    pub fn top_two(&self, b: usize) -> (f64, f64) {
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for a in 0..8 {
            let x = self.l[a][b];
            if x > hi {
                lo = hi;
                hi = x;
            } else if x > lo {
                lo = x;
            }
        }
        (hi, lo)
    }
}

const CLASS: [usize; 8] = {
    let mut c = [0; 8];
    let mut i = 0;
    while i < 8 {
        let b1 = (i >> 2) & 1;
        let b2 = (i >> 1) & 1;
        let b3 = i & 1;
        c[i] = (((b1 != b2) as usize) << 1) | (b2 != b3) as usize;
        i += 1;
    }
    c
};

fn build_l_from(prior: &LogPosterior, ld: &[[f64; 8]; 4], logj: &LogTransitionMatrix) -> LTerms {
    let mut l = [[0.0; 8]; 8];
    for a in 0..8 {
        let row = &ld[CLASS[a]];
        for b in 0..8 {
            l[a][b] = prior.lp[a] + logj.logj[a][b] + row[a ^ b];
        }
    }
    LTerms { l }
}

pub fn build_l(prior: &LogPosterior, m: MeasurementPair, logj: &LogTransitionMatrix, model: &LogDensityModel) -> LTerms {
    build_l_from(prior, &model.table(m), logj)
}

/// Exact `log(1 + e^x)` for `x <= 0`.
pub fn softplus(x: f64) -> Result<f64> {
    if x > 0.0 {
        return Err(Error::PositiveSoftplus(x));
    }
    Ok(x.exp().ln_1p())
}

/// `log(1 + e^x)` on `[lo, 0]` by linear interpolation between uniform knots; 0 below `lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftplusTable {
    pub lo: f64,
    h: f64,
    values: Vec<f64>,
}

pub const SOFTPLUS_LO: f64 = -10.0;
pub const SOFTPLUS_KNOTS: usize = 1024;

impl SoftplusTable {
    pub fn new(lo: f64, knots: usize) -> Result<Self> {
        if !(lo < 0.0) {
            return Err(Error::param("lo", "must be < 0"));
        }
        if knots < 2 {
            return Err(Error::param("knots", "need at least 2"));
        }
        let h = -lo / (knots - 1) as f64;
        let values = (0..knots).map(|i| (lo + i as f64 * h).exp().ln_1p()).collect();
        Ok(SoftplusTable { lo, h, values })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if x > 0.0 {
            return Err(Error::PositiveSoftplus(x));
        }
        Ok(self.eval_unchecked(x))
    }

    #[inline]
    fn eval_unchecked(&self, x: f64) -> f64 {
        if !(x > self.lo) {
            return 0.0;
        }
        let u = (x - self.lo) / self.h;
        let i = (u as usize).min(self.values.len() - 2);
        let f = u - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

impl Default for SoftplusTable {
    fn default() -> Self {
        SoftplusTable::new(SOFTPLUS_LO, SOFTPLUS_KNOTS).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogMode {
    OneTerm,
    #[default]
    TwoTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftplusMode {
    /// Lookup table with this many knots on `[-10, 0]`.
    Table(usize),
    Exact,
}

impl Default for SoftplusMode {
    fn default() -> Self {
        SoftplusMode::Table(SOFTPLUS_KNOTS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogFilterConfig {
    pub mode: LogMode,
    pub apply_delta_correction: bool,
    pub softplus: SoftplusMode,
    /// Entries more than this far below the current maximum are raised to it.
    pub clamp_floor: f64,
    /// Log-probability given to every state but the initial one.
    pub init_floor: f64,
}

impl Default for LogFilterConfig {
    fn default() -> Self {
        LogFilterConfig {
            mode: LogMode::TwoTerm,
            apply_delta_correction: true,
            softplus: SoftplusMode::default(),
            clamp_floor: -1e6,
            init_floor: -100.0,
        }
    }
}

impl LogFilterConfig {
    pub fn one_term() -> Self {
        LogFilterConfig {
            mode: LogMode::OneTerm,
            ..Default::default()
        }
    }

    pub fn two_term() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_floor < 0.0) {
            return Err(Error::param("clamp_floor", "must be < 0"));
        }
        if !(self.init_floor < 0.0) {
            return Err(Error::param("init_floor", "must be < 0"));
        }
        if let SoftplusMode::Table(k) = self.softplus {
            if k < 2 {
                return Err(Error::param("softplus", "table needs at least 2 knots"));
            }
        }
        Ok(())
    }
}

/// Everything a log-filter step needs for one `(mu, T, k)`.
#[derive(Debug, Clone)]
pub struct LogKernel {
    pub config: LogFilterConfig,
    pub logj: LogTransitionMatrix,
    pub model: LogDensityModel,
    pub delta: f64,
    table: Option<SoftplusTable>,
}

impl LogKernel {
    pub fn new(mu: f64, dt: f64, k: f64, config: LogFilterConfig) -> Result<Self> {
        config.validate()?;
        let table = match config.softplus {
            SoftplusMode::Table(knots) => Some(SoftplusTable::new(SOFTPLUS_LO, knots)?),
            SoftplusMode::Exact => None,
        };
        Ok(LogKernel {
            config,
            logj: log_transition_matrix(mu, dt)?,
            model: LogDensityModel::new(k, dt)?,
            delta: delta(mu, dt, k),
            table,
        })
    }

    #[inline]
    fn softplus(&self, x: f64) -> f64 {
        match &self.table {
            Some(t) => t.eval_unchecked(x),
            None => x.exp().ln_1p(),
        }
    }

    /// Combine the columns of `l` into the next log-posterior.
    pub fn combine(&self, prior: &LogPosterior, l: &LTerms) -> LogPosterior {
        let mut lp = [0.0; 8];
        for (b, out) in lp.iter_mut().enumerate() {
            *out = match self.config.mode {
                LogMode::OneTerm => l.column_max(b).1,
                LogMode::TwoTerm => {
                    let (hi, lo) = l.top_two(b);
                    hi + self.softplus(lo - hi)
                }
            };
        }
        if self.config.apply_delta_correction {
            lp.iter_mut().for_each(|x| *x -= self.delta);
        }
        let floor = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max) + self.config.clamp_floor;
        lp.iter_mut().for_each(|x| *x = x.max(floor));
        LogPosterior {
            lp,
            steps_elapsed: prior.steps_elapsed + 1,
        }
    }
}

/// One filter step; returns the new log-posterior and its argmax.
pub fn step(state: &LogPosterior, m: MeasurementPair, kernel: &LogKernel) -> (LogPosterior, StateIndex) {
    let l = build_l(state, m, &kernel.logj, &kernel.model);
    let next = kernel.combine(state, &l);
    let pred = next.argmax();
    (next, pred)
}

/// Average log-likelihood matrix `G[a][b] = E[log P(m | a, b)]` for
/// measurements of an interval spent entirely in `truth`.
pub fn diagnostics_g<R: Rng + ?Sized>(truth: StateIndex, k: f64, dt: f64, samples: usize, rng: &mut R) -> Result<Matrix8> {
    if samples < 10_000 {
        return Err(Error::param("samples", format!("need at least 1e4, got {samples}")));
    }
    let model = LogDensityModel::new(k, dt)?;
    let sigma = (k / dt).sqrt();
    let (s1, s2) = syndrome_of(truth).as_f64();
    let mut g = [[0.0; 8]; 8];
    for _ in 0..samples {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let ld = model.table(MeasurementPair::new(s1 + sigma * n1, s2 + sigma * n2));
        for a in 0..8 {
            for b in 0..8 {
                g[a][b] += ld[CLASS[a]][a ^ b];
            }
        }
    }
    g.iter_mut().flatten().for_each(|x| *x /= samples as f64);
    Ok(g)
}

/// [`TrackingFilter`] running [`step`].
#[derive(Debug, Clone)]
pub struct LogFilter {
    kernel: LogKernel,
    state: LogPosterior,
}

impl LogFilter {
    pub fn new(mu: f64, dt: f64, k: f64, config: LogFilterConfig) -> Result<Self> {
        let kernel = LogKernel::new(mu, dt, k, config)?;
        let state = init_log_posterior(StateIndex::ZERO, config.init_floor)?;
        Ok(LogFilter { kernel, state })
    }

    pub fn state(&self) -> &LogPosterior {
        &self.state
    }

    pub fn kernel(&self) -> &LogKernel {
        &self.kernel
    }

    /// Step and also return the `L` terms that produced the update.
    pub fn step_with_terms(&mut self, m: MeasurementPair) -> (StateIndex, LTerms) {
        let l = build_l(&self.state, m, &self.kernel.logj, &self.kernel.model);
        self.state = self.kernel.combine(&self.state, &l);
        (self.state.argmax(), l)
    }
}

impl TrackingFilter for LogFilter {
    fn name(&self) -> &'static str {
        match self.kernel.config.mode {
            LogMode::OneTerm => "one_term",
            LogMode::TwoTerm => "two_term",
        }
    }

    fn reset(&mut self, initial: StateIndex) {
        self.state = init_log_posterior(initial, self.kernel.config.init_floor).expect("validated floor");
    }

    fn step(&mut self, m: MeasurementPair) -> StateIndex {
        let (next, pred) = step(&self.state, m, &self.kernel);
        self.state = next;
        pred
    }
}
