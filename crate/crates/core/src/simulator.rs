//! Ground-truth trajectories and noisy parity records.
//!
//! Bit-flips arrive as independent Poisson processes, one per qubit. Each
//! interval collects the flips that land inside it, integrates both syndromes
//! over the interval from the resulting sign changes, and adds Gaussian noise
//! with variance `k / T` to the two averages.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::state::{positive, syndrome_of, FlipMask, Qubit, RunConfig, StateIndex};

/// A single bit-flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub qubit: Qubit,
    /// Microseconds since the start of the run.
    pub time: f64,
}

/// Interval averages of the two syndromes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyndromeMeans {
    pub s1bar: f64,
    pub s2bar: f64,
}

/// Integrated noisy readouts of `Z1Z2` and `Z2Z3` for one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub m1: f64,
    pub m2: f64,
}

impl MeasurementPair {
    pub fn new(m1: f64, m2: f64) -> Self {
        MeasurementPair { m1, m2 }
    }
}

/// Everything produced for one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub index: usize,
    pub start_state: StateIndex,
    /// State at the end of the interval; this is what a filter is scored against.
    pub end_state: StateIndex,
    pub counts: [u32; 3],
    pub means: SyndromeMeans,
    pub measurement: MeasurementPair,
    pub events: SmallVec<[ErrorEvent; 2]>,
}

/// A complete simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub config: RunConfig,
    /// `states[i]` is the state at time `(i + 1) T`.
    pub states: Vec<StateIndex>,
    pub means: Vec<SyndromeMeans>,
    pub measurements: Vec<MeasurementPair>,
    pub events: Vec<ErrorEvent>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> Option<StateIndex> {
        self.states.last().copied()
    }
}

/// Per-qubit error counts for one interval: three independent Poisson(`mu T`) draws.
///
/// Sampled as a Poisson(`3 mu T`) total split uniformly over the qubits, which
/// has the same joint law and needs a single Poisson draw per interval.
pub fn sample_error_counts<R: Rng + ?Sized>(mu: f64, dt: f64, rng: &mut R) -> [u32; 3] {
    let lambda = 3.0 * mu * dt;
    if !(lambda > 0.0) {
        return [0; 3];
    }
    let total: f64 = Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(0.0);
    split_counts(total as u32, rng)
}

fn split_counts<R: Rng + ?Sized>(total: u32, rng: &mut R) -> [u32; 3] {
    let mut counts = [0u32; 3];
    for _ in 0..total {
        counts[rng.random_range(0..3usize)] += 1;
    }
    counts
}

/// Average over `[0, 1]` of a `+1`-started sign that flips at each of the
/// sorted `times`: `(-1)^N + 2 sum_j (-1)^(j-1) x_j`.
pub(crate) fn alternating_gap_sum(times: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut sign = 1.0;
    for x in times {
        sum += 2.0 * sign * x;
        sign = -sign;
    }
    sum + sign
}

/// Merge two ascending slices into one ascending iterator.
pub(crate) fn merge_sorted<'a>(a: &'a [f64], b: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let (mut i, mut j) = (0, 0);
    std::iter::from_fn(move || match (a.get(i), b.get(j)) {
        (Some(&x), Some(&y)) if x <= y => {
            i += 1;
            Some(x)
        }
        (_, Some(&y)) => {
            j += 1;
            Some(y)
        }
        (Some(&x), None) => {
            i += 1;
            Some(x)
        }
        (None, None) => None,
    })
}

fn check_times(times: &[f64]) -> Result<()> {
    let in_range = times.iter().all(|t| (0.0..=1.0).contains(t));
    let sorted = times.windows(2).all(|w| w[0] <= w[1]);
    if in_range && sorted {
        Ok(())
    } else {
        Err(Error::UnsortedTimes)
    }
}

/// Interval syndrome averages given the starting state and each qubit's
/// error times, normalized to `[0, 1]` and sorted.
pub fn syndrome_means(start: StateIndex, q1: &[f64], q2: &[f64], q3: &[f64]) -> Result<SyndromeMeans> {
    check_times(q1)?;
    check_times(q2)?;
    check_times(q3)?;
    Ok(syndrome_means_unchecked(start, q1, q2, q3))
}

pub(crate) fn syndrome_means_unchecked(start: StateIndex, q1: &[f64], q2: &[f64], q3: &[f64]) -> SyndromeMeans {
    let (s1, s2) = syndrome_of(start).as_f64();
    SyndromeMeans {
        s1bar: s1 * alternating_gap_sum(merge_sorted(q1, q2)),
        s2bar: s2 * alternating_gap_sum(merge_sorted(q2, q3)),
    }
}

/// Where the bit-flips come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ErrorSource {
    /// Independent Poisson processes at the configured rate.
    #[default]
    Poisson,
    /// A fixed list of flips; no random errors are drawn.
    Schedule(Vec<ErrorEvent>),
}

/// Lazily generated trajectory, one [`Interval`] per `next()`.
pub struct TrajectoryStream<R = StreamRng> {
    rng: R,
    dt: f64,
    sigma: f64,
    steps: usize,
    step: usize,
    state: StateIndex,
    /// Total error rate per interval, `3 mu T`.
    rate: f64,
    /// Time of the next random error, in intervals since the start.
    next_error: f64,
    schedule: Vec<ErrorEvent>,
    schedule_pos: usize,
    scheduled: bool,
    times: [Vec<f64>; 3],
}

impl<R: Rng> TrajectoryStream<R> {
    pub fn new(config: &RunConfig, source: ErrorSource, rng: R) -> Result<Self> {
        positive("dt", config.dt)?;
        positive("k", config.k)?;
        if !(config.mu >= 0.0) {
            return Err(Error::param("mu", "must be >= 0"));
        }
        let rate = 3.0 * config.mu * config.dt;
        let (scheduled, mut schedule) = match source {
            ErrorSource::Poisson => (false, Vec::new()),
            ErrorSource::Schedule(s) => (true, s),
        };
        schedule.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut rng = rng;
        let next_error = if rate > 0.0 && !scheduled {
            rng.sample::<f64, _>(Exp1) / rate
        } else {
            f64::INFINITY
        };
        Ok(TrajectoryStream {
            rng,
            dt: config.dt,
            sigma: config.variance().sqrt(),
            steps: config.steps(),
            step: 0,
            state: config.initial_state,
            rate,
            next_error,
            schedule,
            schedule_pos: 0,
            scheduled,
            times: Default::default(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Errors form one Poisson process of rate `3 mu` with uniformly chosen
    /// qubits; walking its exponential gaps gives the per-interval counts and
    /// times without a draw for every quiet interval.
    fn draw_random_errors(&mut self) -> [u32; 3] {
        let mut counts = [0u32; 3];
        let start = self.step as f64;
        while self.next_error < start + 1.0 {
            let q = self.rng.random_range(0..3usize);
            self.times[q].push((self.next_error - start).clamp(0.0, 1.0));
            counts[q] += 1;
            self.next_error += self.rng.sample::<f64, _>(Exp1) / self.rate;
        }
        counts
    }

    fn take_scheduled_errors(&mut self) -> [u32; 3] {
        let mut counts = [0u32; 3];
        let end = (self.step + 1) as f64 * self.dt;
        while let Some(ev) = self.schedule.get(self.schedule_pos) {
            let last = self.step + 1 == self.steps;
            if ev.time >= end && !last {
                break;
            }
            let x = (ev.time / self.dt - self.step as f64).clamp(0.0, 1.0);
            self.times[ev.qubit.position()].push(x);
            counts[ev.qubit.position()] += 1;
            self.schedule_pos += 1;
        }
        counts
    }
}

impl<R: Rng> Iterator for TrajectoryStream<R> {
    type Item = Interval;

    fn next(&mut self) -> Option<Interval> {
        if self.step >= self.steps {
            return None;
        }
        for t in &mut self.times {
            t.clear();
        }
        let counts = if self.scheduled {
            self.take_scheduled_errors()
        } else {
            self.draw_random_errors()
        };
        let mut events = SmallVec::new();
        if counts.iter().any(|&c| c > 0) {
            for (q, t) in self.times.iter_mut().enumerate() {
                t.sort_by(f64::total_cmp);
                for &x in t.iter() {
                    events.push(ErrorEvent {
                        qubit: Qubit::ALL[q],
                        time: (self.step as f64 + x) * self.dt,
                    });
                }
            }
            events.sort_by(|a: &ErrorEvent, b: &ErrorEvent| a.time.total_cmp(&b.time));
        }
        let start = self.state;
        let means = syndrome_means_unchecked(start, &self.times[0], &self.times[1], &self.times[2]);
        let n1: f64 = self.rng.sample(StandardNormal);
        let n2: f64 = self.rng.sample(StandardNormal);
        let measurement = MeasurementPair {
            m1: means.s1bar + self.sigma * n1,
            m2: means.s2bar + self.sigma * n2,
        };
        self.state = start.flip(FlipMask::from_counts(counts));
        let index = self.step;
        self.step += 1;
        Some(Interval {
            index,
            start_state: start,
            end_state: self.state,
            counts,
            means,
            measurement,
            events,
        })
    }
}

/// Stream for trial `trial` of a run, keyed by `config.seed`.
pub fn trial_stream(config: &RunConfig, trial: u64, source: ErrorSource) -> Result<TrajectoryStream> {
    TrajectoryStream::new(config, source, rng::stream(config.seed, trial))
}

/// Simulate and collect a whole trajectory.
pub fn simulate_trajectory<R: Rng>(config: &RunConfig, rng: R) -> Result<TrajectoryRecord> {
    simulate_with_source(config, ErrorSource::Poisson, rng)
}

pub fn simulate_with_source<R: Rng>(config: &RunConfig, source: ErrorSource, rng: R) -> Result<TrajectoryRecord> {
    let stream = TrajectoryStream::new(config, source, rng)?;
    let n = stream.steps();
    let mut rec = TrajectoryRecord {
        config: config.clone(),
        states: Vec::with_capacity(n),
        means: Vec::with_capacity(n),
        measurements: Vec::with_capacity(n),
        events: Vec::new(),
    };
    for iv in stream {
        rec.states.push(iv.end_state);
        rec.means.push(iv.means);
        rec.measurements.push(iv.measurement);
        rec.events.extend(iv.events);
    }
    Ok(rec)
}

#[derive(Serialize)]
struct IntervalRow {
    trial: u64,
    i: usize,
    true_state: u8,
    s1bar: f64,
    s2bar: f64,
    m1: f64,
    m2: f64,
}

#[derive(Serialize)]
struct EventRow {
    trial: u64,
    qubit: u8,
    time_us: f64,
}

/// CSV writer for trajectory dumps: one file of intervals, one of error events.
pub struct TrajectoryCsv<W: Write> {
    intervals: csv::Writer<W>,
    events: csv::Writer<W>,
}

impl<W: Write> TrajectoryCsv<W> {
    pub fn new(intervals: W, events: W) -> Self {
        TrajectoryCsv {
            intervals: csv::Writer::from_writer(intervals),
            events: csv::Writer::from_writer(events),
        }
    }

    pub fn write(&mut self, trial: u64, rec: &TrajectoryRecord) -> Result<()> {
        for i in 0..rec.len() {
            self.intervals
                .serialize(IntervalRow {
                    trial,
                    i,
                    true_state: rec.states[i].value(),
                    s1bar: rec.means[i].s1bar,
                    s2bar: rec.means[i].s2bar,
                    m1: rec.measurements[i].m1,
                    m2: rec.measurements[i].m2,
                })
                .map_err(csv_err)?;
        }
        for ev in &rec.events {
            self.events
                .serialize(EventRow {
                    trial,
                    qubit: ev.qubit.number(),
                    time_us: ev.time,
                })
                .map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.intervals.flush()?;
        self.events.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Cache(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_rate_gives_no_errors() {
        let mut r = stream(1, 0);
        for _ in 0..100 {
            assert_eq!(sample_error_counts(0.0, 0.1, &mut r), [0, 0, 0]);
        }
    }

    #[test]
    fn means_without_errors_equal_start_syndromes() {
        let m = syndrome_means(StateIndex::ZERO, &[], &[], &[]).unwrap();
        assert_eq!((m.s1bar, m.s2bar), (1.0, 1.0));
        let m = syndrome_means(StateIndex::new(2).unwrap(), &[], &[], &[]).unwrap();
        assert_eq!((m.s1bar, m.s2bar), (-1.0, -1.0));
    }

    #[test]
    fn single_qubit_one_error_at_point_seven() {
        let m = syndrome_means(StateIndex::ZERO, &[0.7], &[], &[]).unwrap();
        assert!((m.s1bar - 0.4).abs() < 1e-12);
        assert_eq!(m.s2bar, 1.0);
    }

    #[test]
    fn middle_qubit_error_moves_both() {
        let m = syndrome_means(StateIndex::ZERO, &[], &[0.5], &[]).unwrap();
        assert!(m.s1bar.abs() < 1e-12 && m.s2bar.abs() < 1e-12);
    }

    #[test]
    fn two_errors_merge_across_qubits() {
        // flips at 0.2 (q1) and 0.6 (q2): +0.2 - 0.4 + 0.4
        let m = syndrome_means(StateIndex::ZERO, &[0.2], &[0.6], &[]).unwrap();
        assert!((m.s1bar - 0.2).abs() < 1e-12);
        // syndrome 2 only sees 0.6: +0.6 - 0.4
        assert!((m.s2bar - 0.2).abs() < 1e-12);
    }

    #[test]
    fn unsorted_or_out_of_range_rejected() {
        assert_eq!(syndrome_means(StateIndex::ZERO, &[0.5, 0.1], &[], &[]), Err(Error::UnsortedTimes));
        assert_eq!(syndrome_means(StateIndex::ZERO, &[], &[1.5], &[]), Err(Error::UnsortedTimes));
    }

    #[test]
    fn state_sequence_follows_count_parities() {
        let cfg = RunConfig::new(0.5, 0.2, 0.5, 40.0).with_seed(11);
        let mut prev = cfg.initial_state;
        let mut flips = 0;
        for iv in trial_stream(&cfg, 0, ErrorSource::Poisson).unwrap() {
            assert_eq!(iv.start_state, prev);
            assert_eq!(iv.end_state, prev.flip(FlipMask::from_counts(iv.counts)));
            assert_eq!(iv.events.len() as u32, iv.counts.iter().sum::<u32>());
            assert!(iv.means.s1bar.abs() <= 1.0 && iv.means.s2bar.abs() <= 1.0);
            flips += iv.events.len();
            prev = iv.end_state;
        }
        assert!(flips > 0);
    }

    #[test]
    fn replay_is_deterministic() {
        let cfg = RunConfig::new(0.05, 0.1, 0.5, 20.0).with_seed(5);
        let a = simulate_trajectory(&cfg, stream(5, 9)).unwrap();
        let b = simulate_trajectory(&cfg, stream(5, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
    }

    #[test]
    fn low_noise_error_free_measurements_sit_on_syndromes() {
        let cfg = RunConfig::new(1e-12, 0.1, 1e-14, 5.0);
        let rec = simulate_trajectory(&cfg, stream(0, 0)).unwrap();
        for m in &rec.measurements {
            assert!((m.m1 - 1.0).abs() < 1e-5 && (m.m2 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn schedule_injects_flip_at_given_time() {
        let cfg = RunConfig::new(2.5e-3, 0.1, 0.4, 15.0);
        let ev = ErrorEvent { qubit: Qubit::Three, time: 7.55 };
        let rec = simulate_with_source(&cfg, ErrorSource::Schedule(vec![ev]), stream(0, 0)).unwrap();
        assert_eq!(rec.events.len(), 1);
        assert!((rec.events[0].time - 7.55).abs() < 1e-9);
        assert_eq!(rec.states[74].value(), 0);
        assert_eq!(rec.states[75].value(), 1);
        assert!((rec.means[75].s2bar - 0.0).abs() < 1e-9);
        assert_eq!(rec.final_state().unwrap().value(), 1);
    }

    #[test]
    fn csv_dump_has_expected_headers() {
        let cfg = RunConfig::new(0.5, 0.5, 0.5, 3.0).with_seed(2);
        let rec = simulate_trajectory(&cfg, stream(2, 0)).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        {
            let mut w = TrajectoryCsv::new(&mut a, &mut b);
            w.write(0, &rec).unwrap();
            w.flush().unwrap();
        }
        let a = String::from_utf8(a).unwrap();
        assert!(a.starts_with("trial,i,true_state,s1bar,s2bar,m1,m2\n"));
        assert_eq!(a.lines().count(), 1 + rec.len());
        let b = String::from_utf8(b).unwrap();
        if !rec.events.is_empty() {
            assert!(b.starts_with("trial,qubit,time_us\n"));
        }
    }
}
