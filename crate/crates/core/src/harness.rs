//! Experiment orchestration: sweeps, scoring, aggregation and output files.
//!
//! Every trial draws its own random stream from `(seed, trial)`, and all
//! filters at one sweep point consume the same measurements, so filter
//! differences are paired and results do not depend on the thread count.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ThresholdFilter, ThresholdParams, WonhamFilter};
use crate::error::{Error, Result};
use crate::filter_log::{LogFilter, LogFilterConfig, LogMode};
use crate::filter_optimal::{DensityMode, MeasurementDensityTable, OptimalFilter};
use crate::markov::transition_matrix;
use crate::simulator::{csv_err, trial_stream, ErrorEvent, ErrorSource, MeasurementPair, TrajectoryCsv};
use crate::state::{hamming, RunConfig, StateIndex};
use crate::synd_density::{choose_n_max, HistogramBank};
use crate::tracking::TrackingFilter;

/// 1 when the prediction is the true state or one bit-flip away from it.
pub fn score(predicted: StateIndex, truth: StateIndex) -> u8 {
    (hamming(predicted, truth) <= 1) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Optimal,
    TwoTerm,
    OneTerm,
    Wonham,
    Threshold,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Optimal,
        FilterKind::TwoTerm,
        FilterKind::OneTerm,
        FilterKind::Wonham,
        FilterKind::Threshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Optimal => "optimal",
            FilterKind::TwoTerm => "two_term",
            FilterKind::OneTerm => "one_term",
            FilterKind::Wonham => "wonham",
            FilterKind::Threshold => "threshold",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::param("filters", format!("unknown filter `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Duration,
    ErrorRate,
    TimeStep,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Duration => "duration",
            SweepAxis::ErrorRate => "error_rate",
            SweepAxis::TimeStep => "time_step",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "duration" => Ok(SweepAxis::Duration),
            "error_rate" => Ok(SweepAxis::ErrorRate),
            "time_step" => Ok(SweepAxis::TimeStep),
            _ => Err(Error::param("sweep", format!("unknown axis `{s}`"))),
        }
    }
}

/// Histogram and likelihood-table settings for the reference filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSettings {
    /// Histogram half-resolution; `2n` bins per axis.
    pub n: usize,
    pub samples: u64,
    /// Seed of the histogram streams, independent of the trial seed.
    pub table_seed: u64,
    /// Largest total error count kept; chosen from the Poisson tail when unset.
    pub n_max: Option<u32>,
    pub exact: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for OptimalSettings {
    fn default() -> Self {
        OptimalSettings {
            n: 25,
            samples: 1_000_000,
            table_seed: 0,
            n_max: None,
            exact: false,
            cache_dir: None,
        }
    }
}

impl OptimalSettings {
    pub fn mode(&self) -> DensityMode {
        if self.exact {
            DensityMode::Exact
        } else {
            DensityMode::Tabulated
        }
    }

    pub fn bank(&self, max_mu_t: f64) -> Result<HistogramBank> {
        let n_max = self.n_max.unwrap_or_else(|| choose_n_max(max_mu_t));
        HistogramBank::load_or_build(self.cache_dir.as_deref(), self.n, self.samples, self.table_seed, n_max)
    }
}

/// Settings shared by both log filters; the mode is set per filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSettings {
    pub apply_delta_correction: bool,
    pub exact_softplus: bool,
    pub clamp_floor: f64,
    pub init_floor: f64,
}

impl Default for LogSettings {
    fn default() -> Self {
        let d = LogFilterConfig::default();
        LogSettings {
            apply_delta_correction: d.apply_delta_correction,
            exact_softplus: false,
            clamp_floor: d.clamp_floor,
            init_floor: d.init_floor,
        }
    }
}

impl LogSettings {
    pub fn config(&self, mode: LogMode) -> LogFilterConfig {
        LogFilterConfig {
            mode,
            apply_delta_correction: self.apply_delta_correction,
            softplus: if self.exact_softplus {
                crate::filter_log::SoftplusMode::Exact
            } else {
                Default::default()
            },
            clamp_floor: self.clamp_floor,
            init_floor: self.init_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Parameters that are not swept; the swept one is overridden per point.
    pub base: RunConfig,
    pub filters: Vec<FilterKind>,
    pub threshold: ThresholdParams,
    pub optimal: OptimalSettings,
    pub log: LogSettings,
    /// Average the score over every step instead of scoring the last one.
    pub per_step: bool,
}

impl ExperimentSpec {
    pub fn new(axis: SweepAxis, values: Vec<f64>, base: RunConfig, filters: Vec<FilterKind>) -> Self {
        ExperimentSpec {
            axis,
            values,
            base,
            filters,
            threshold: ThresholdParams::default(),
            optimal: OptimalSettings::default(),
            log: LogSettings::default(),
            per_step: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.trials == 0 {
            return Err(Error::param("trials", "must be at least 1"));
        }
        if self.values.is_empty() {
            return Err(Error::param("values", "need at least one axis value"));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("values", "axis values must be finite and > 0"));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("values", "axis values must be strictly increasing"));
        }
        if self.filters.is_empty() {
            return Err(Error::param("filters", "need at least one filter"));
        }
        self.threshold.validate()?;
        for cfg in self.point_configs() {
            cfg.validate()?;
        }
        if self.axis == SweepAxis::Duration {
            for &v in &self.values {
                if (v / self.base.dt).round() < 1.0 {
                    return Err(Error::param("values", format!("duration {v} is shorter than one interval")));
                }
            }
        }
        Ok(())
    }

    /// Run configurations to simulate; a duration sweep simulates once to the longest value.
    fn point_configs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        match self.axis {
            SweepAxis::Duration => {
                let mut c = self.base.clone();
                c.duration = *self.values.last().unwrap_or(&self.base.duration);
                out.push(c);
            }
            SweepAxis::ErrorRate => {
                for &v in &self.values {
                    out.push(RunConfig { mu: v, ..self.base.clone() });
                }
            }
            SweepAxis::TimeStep => {
                for &v in &self.values {
                    out.push(RunConfig { dt: v, ..self.base.clone() });
                }
            }
        }
        out
    }

    fn max_mu_t(&self) -> f64 {
        self.point_configs().iter().map(RunConfig::mu_t).fold(0.0, f64::max)
    }
}

/// Any of the five filters, cloned once per trial.
#[derive(Debug, Clone)]
pub enum AnyFilter {
    Optimal(OptimalFilter),
    Log(LogFilter),
    Wonham(WonhamFilter),
    Threshold(ThresholdFilter),
}

impl TrackingFilter for AnyFilter {
    fn name(&self) -> &'static str {
        match self {
            AnyFilter::Optimal(f) => f.name(),
            AnyFilter::Log(f) => f.name(),
            AnyFilter::Wonham(f) => f.name(),
            AnyFilter::Threshold(f) => f.name(),
        }
    }

    fn reset(&mut self, initial: StateIndex) {
        match self {
            AnyFilter::Optimal(f) => f.reset(initial),
            AnyFilter::Log(f) => f.reset(initial),
            AnyFilter::Wonham(f) => f.reset(initial),
            AnyFilter::Threshold(f) => f.reset(initial),
        }
    }

    #[inline]
    fn step(&mut self, m: MeasurementPair) -> StateIndex {
        match self {
            AnyFilter::Optimal(f) => f.step(m),
            AnyFilter::Log(f) => f.step(m),
            AnyFilter::Wonham(f) => f.step(m),
            AnyFilter::Threshold(f) => f.step(m),
        }
    }

    fn failed(&self) -> bool {
        match self {
            AnyFilter::Optimal(f) => f.failed(),
            AnyFilter::Log(f) => f.failed(),
            AnyFilter::Wonham(f) => f.failed(),
            AnyFilter::Threshold(f) => f.failed(),
        }
    }
}

/// Build a filter for one run configuration. `table` is required for [`FilterKind::Optimal`].
pub fn build_filter(
    kind: FilterKind,
    cfg: &RunConfig,
    table: Option<&Arc<MeasurementDensityTable>>,
    log: &LogSettings,
    threshold: &ThresholdParams,
) -> Result<AnyFilter> {
    Ok(match kind {
        FilterKind::Optimal => {
            let t = table.ok_or_else(|| Error::param("optimal", "likelihood tables were not built"))?;
            AnyFilter::Optimal(OptimalFilter::new(Arc::clone(t))?)
        }
        FilterKind::TwoTerm => AnyFilter::Log(LogFilter::new(cfg.mu, cfg.dt, cfg.k, log.config(LogMode::TwoTerm))?),
        FilterKind::OneTerm => AnyFilter::Log(LogFilter::new(cfg.mu, cfg.dt, cfg.k, log.config(LogMode::OneTerm))?),
        FilterKind::Wonham => AnyFilter::Wonham(WonhamFilter::new(cfg.mu, cfg.dt, cfg.k)?),
        FilterKind::Threshold => AnyFilter::Threshold(ThresholdFilter::new(*threshold, cfg.dt)?),
    })
}

/// Aggregated scores of one set of filters on one run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutcome {
    pub trials: usize,
    /// `successes[filter][checkpoint]`.
    pub successes: Vec<Vec<u64>>,
    /// Per-step mode: sum and sum of squares of each trial's mean score.
    pub step_sums: Vec<(f64, f64)>,
    pub failures: Vec<u64>,
}

impl PointOutcome {
    /// Inaccuracy and its standard error for one filter and checkpoint.
    pub fn inaccuracy(&self, filter: usize, checkpoint: usize, per_step: bool) -> (f64, f64) {
        let n = self.trials as f64;
        if per_step {
            let (s, s2) = self.step_sums[filter];
            let mean = s / n;
            let var = if self.trials > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            (1.0 - mean, (var / n).sqrt())
        } else {
            let p = 1.0 - self.successes[filter][checkpoint] as f64 / n;
            (p, (p * (1.0 - p) / n).sqrt())
        }
    }
}

struct TrialOutcome {
    scores: Vec<u8>,
    step_means: Vec<f64>,
    failed: Vec<bool>,
}

/// Run every filter on `cfg.trials` shared trajectories, scoring at each
/// step count in `checkpoints` (ascending, each at most `cfg.steps()`).
pub fn run_point(cfg: &RunConfig, checkpoints: &[usize], filters: &[AnyFilter], source: &ErrorSource) -> Result<PointOutcome> {
    cfg.validate()?;
    let nf = filters.len();
    let nc = checkpoints.len();
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| -> Result<TrialOutcome> {
            let mut fs = filters.to_vec();
            for f in &mut fs {
                f.reset(cfg.initial_state);
            }
            let mut scores = vec![0u8; nf * nc];
            let mut step_sum = vec![0u32; nf];
            let mut next_cp = 0;
            let mut steps = 0usize;
            for iv in trial_stream(cfg, trial, source.clone())? {
                steps += 1;
                for (i, f) in fs.iter_mut().enumerate() {
                    let pred = f.step(iv.measurement);
                    let s = score(pred, iv.end_state);
                    step_sum[i] += s as u32;
                    let mut cp = next_cp;
                    while cp < nc && checkpoints[cp] == steps {
                        scores[i * nc + cp] = s;
                        cp += 1;
                    }
                }
                while next_cp < nc && checkpoints[next_cp] == steps {
                    next_cp += 1;
                }
            }
            Ok(TrialOutcome {
                scores,
                step_means: step_sum.iter().map(|&s| s as f64 / steps.max(1) as f64).collect(),
                failed: fs.iter().map(|f| f.failed()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = PointOutcome {
        trials: cfg.trials,
        successes: vec![vec![0; nc]; nf],
        step_sums: vec![(0.0, 0.0); nf],
        failures: vec![0; nf],
    };
    for t in &outcomes {
        for i in 0..nf {
            for c in 0..nc {
                out.successes[i][c] += t.scores[i * nc + c] as u64;
            }
            out.step_sums[i].0 += t.step_means[i];
            out.step_sums[i].1 += t.step_means[i] * t.step_means[i];
            out.failures[i] += t.failed[i] as u64;
        }
    }
    Ok(out)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub filter: FilterKind,
    pub axis: SweepAxis,
    pub axis_value: f64,
    pub inaccuracy: f64,
    pub stderr: f64,
    pub trials: usize,
    pub mu: f64,
    #[serde(rename = "T")]
    pub dt: f64,
    pub k: f64,
    pub duration: f64,
    pub seed: u64,
    /// Intervals filtered before scoring.
    pub steps: usize,
    /// Trials in which the filter hit a numerical failure.
    pub failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramKey {
    pub file: String,
    pub n: usize,
    pub samples: u64,
    pub seed: u64,
    pub n_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetadata {
    pub version: String,
    pub spec: ExperimentSpec,
    pub histograms: Option<HistogramKey>,
    pub threshold_tuning: TuningRecord,
    pub rows: Vec<ResultRow>,
    pub errors: Vec<PointError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointError {
    pub axis_value: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub metadata: ExperimentMetadata,
}

/// Grid searched for the threshold detector defaults and the values it picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub taus: Vec<f64>,
    pub eta_lows: Vec<f64>,
    pub eta_highs: Vec<f64>,
    pub chosen: ThresholdParams,
    pub operating_point: RunConfig,
}

pub const TUNING_TAUS: [f64; 8] = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0];
pub const TUNING_ETA_LOWS: [f64; 5] = [-0.75, -0.5, -0.25, 0.0, 0.25];
pub const TUNING_ETA_HIGHS: [f64; 5] = [-0.25, 0.0, 0.25, 0.5, 0.75];

pub fn tuning_operating_point() -> RunConfig {
    RunConfig::new(2.5e-3, 0.1, 0.5, 100.0).with_trials(10_000).with_seed(7)
}

pub fn default_tuning_record() -> TuningRecord {
    TuningRecord {
        taus: TUNING_TAUS.to_vec(),
        eta_lows: TUNING_ETA_LOWS.to_vec(),
        eta_highs: TUNING_ETA_HIGHS.to_vec(),
        chosen: ThresholdParams::default(),
        operating_point: tuning_operating_point(),
    }
}

/// Run a full sweep. Points whose tables cannot be built are reported in
/// `metadata.errors` and produce no rows.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let wants_optimal = spec.filters.contains(&FilterKind::Optimal);
    let bank = if wants_optimal {
        Some(spec.optimal.bank(spec.max_mu_t())?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let configs = spec.point_configs();
    for (pi, cfg) in configs.iter().enumerate() {
        let (checkpoints, axis_values): (Vec<usize>, Vec<f64>) = match spec.axis {
            SweepAxis::Duration => spec.values.iter().map(|&v| ((v / cfg.dt).round() as usize, v)).unzip(),
            _ => (vec![cfg.steps()], vec![spec.values[pi]]),
        };
        let point = (|| -> Result<PointOutcome> {
            let table = match &bank {
                Some(b) => Some(Arc::new(MeasurementDensityTable::build(
                    cfg.mu,
                    cfg.dt,
                    cfg.k,
                    b,
                    b.n_max,
                    spec.optimal.mode(),
                )?)),
                None => None,
            };
            let filters = spec
                .filters
                .iter()
                .map(|&k| build_filter(k, cfg, table.as_ref(), &spec.log, &spec.threshold))
                .collect::<Result<Vec<_>>>()?;
            run_point(cfg, &checkpoints, &filters, &ErrorSource::Poisson)
        })();
        let point = match point {
            Ok(p) => p,
            Err(e) => {
                errors.push(PointError {
                    axis_value: spec.values[pi],
                    message: e.to_string(),
                });
                continue;
            }
        };
        for (ci, (&cp, &av)) in checkpoints.iter().zip(&axis_values).enumerate() {
            for (fi, &kind) in spec.filters.iter().enumerate() {
                let (inacc, se) = point.inaccuracy(fi, ci, spec.per_step);
                rows.push(ResultRow {
                    filter: kind,
                    axis: spec.axis,
                    axis_value: av,
                    inaccuracy: inacc,
                    stderr: se,
                    trials: cfg.trials,
                    mu: cfg.mu,
                    dt: cfg.dt,
                    k: cfg.k,
                    duration: cp as f64 * cfg.dt,
                    seed: cfg.seed,
                    steps: cp,
                    failures: point.failures[fi],
                });
            }
        }
    }
    // duration sweeps produce rows checkpoint-major; order by filter then axis value
    let order = |k: FilterKind| spec.filters.iter().position(|&f| f == k).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| order(a.filter).cmp(&order(b.filter)).then(a.axis_value.total_cmp(&b.axis_value)));
    let histograms = bank.as_ref().map(|b| HistogramKey {
        file: HistogramBank::file_name(b.n, b.samples, b.seed, b.n_max),
        n: b.n,
        samples: b.samples,
        seed: b.seed,
        n_max: b.n_max,
    });
    let metadata = ExperimentMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        histograms,
        threshold_tuning: TuningRecord {
            chosen: spec.threshold,
            ..default_tuning_record()
        },
        rows: rows.clone(),
        errors,
    };
    Ok(ExperimentOutput { rows, metadata })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    filter: &'a str,
    axis: &'a str,
    axis_value: f64,
    inaccuracy: f64,
    stderr: f64,
    trials: usize,
    mu: f64,
    #[serde(rename = "T")]
    dt: f64,
    k: f64,
    duration: f64,
    seed: u64,
}

pub const RESULTS_HEADER: &str = "filter,axis,axis_value,inaccuracy,stderr,trials,mu,T,k,duration,seed";

pub fn write_results_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(RESULTS_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        wr.serialize(CsvRow {
            filter: r.filter.name(),
            axis: r.axis.name(),
            axis_value: r.axis_value,
            inaccuracy: r.inaccuracy,
            stderr: r.stderr,
            trials: r.trials,
            mu: r.mu,
            dt: r.dt,
            k: r.k,
            duration: r.duration,
            seed: r.seed,
        })
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Path of the JSON sidecar next to a CSV: `results.csv` gives `results.meta.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Cache(format!("json: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_experiment(out: &Path, result: &ExperimentOutput) -> Result<()> {
    let mut w = BufWriter::new(File::create(out)?);
    write_results_csv(&mut w, &result.rows)?;
    w.flush()?;
    write_json(&sidecar_path(out), &result.metadata)
}

/// Dump raw trajectories: intervals to `intervals`, error events to `events`.
pub fn dump_trajectories(cfg: &RunConfig, source: &ErrorSource, intervals: &Path, events: &Path) -> Result<()> {
    cfg.validate()?;
    let mut w = TrajectoryCsv::new(BufWriter::new(File::create(intervals)?), BufWriter::new(File::create(events)?));
    for trial in 0..cfg.trials as u64 {
        let rec = crate::simulator::simulate_with_source(cfg, source.clone(), crate::rng::stream(cfg.seed, trial))?;
        w.write(trial, &rec)?;
    }
    w.flush()
}

/// Inaccuracy of the threshold detector over a grid of settings, all on
/// the same trajectories; returns the best setting and the full table.
pub fn tune_threshold(cfg: &RunConfig, taus: &[f64], lows: &[f64], highs: &[f64]) -> Result<(ThresholdParams, Vec<(ThresholdParams, f64)>)> {
    let mut grid = Vec::new();
    for &tau in taus {
        for &eta_low in lows {
            for &eta_high in highs {
                let p = ThresholdParams { tau, eta_low, eta_high };
                if p.validate().is_ok() {
                    grid.push(p);
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::param("grid", "no valid threshold setting"));
    }
    let filters = grid
        .iter()
        .map(|p| ThresholdFilter::new(*p, cfg.dt).map(AnyFilter::Threshold))
        .collect::<Result<Vec<_>>>()?;
    let out = run_point(cfg, &[cfg.steps()], &filters, &ErrorSource::Poisson)?;
    let table: Vec<(ThresholdParams, f64)> = grid.iter().enumerate().map(|(i, p)| (*p, out.inaccuracy(i, 0, false).0)).collect();
    let best = table
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| *p)
        .unwrap();
    Ok((best, table))
}

/// Settings of a diagnostics run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSpec {
    pub config: RunConfig,
    /// Fixed flips; random errors at the configured rate when empty.
    pub schedule: Vec<ErrorEvent>,
    pub include_optimal: bool,
    pub optimal: OptimalSettings,
    pub log: LogSettings,
}

/// Mean and standard deviation across trials of one traced quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

/// Per-step averages; every vector is indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsOutput {
    pub dt: f64,
    pub trials: usize,
    /// `L[prev][next]` minus its column maximum, from the reference filter.
    pub l_optimal: Vec<[[Moments; 8]; 8]>,
    /// Same for the two-term filter.
    pub l_two_term: Vec<[[Moments; 8]; 8]>,
    pub logp_optimal: Vec<[Moments; 8]>,
    pub logp_two_term: Vec<[Moments; 8]>,
    pub logp_one_term: Vec<[Moments; 8]>,
    /// Largest `|log p|` of the two-term filter without the drift correction.
    pub norm_uncorrected: Vec<Moments>,
    pub norm_corrected: Vec<Moments>,
    /// Steps where the corrected and uncorrected filters predicted different states.
    pub argmax_mismatches: u64,
    pub delta: f64,
}

impl DiagnosticsOutput {
    pub fn steps(&self) -> usize {
        self.norm_corrected.len()
    }
}

// layout of one step's accumulator block
const L_OPT: usize = 0;
const L_TWO: usize = 64;
const P_OPT: usize = 128;
const P_TWO: usize = 136;
const P_ONE: usize = 144;
const N_RAW: usize = 152;
const N_COR: usize = 153;
const BLOCK: usize = 154;

fn column_relative(l: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut out = *l;
    for b in 0..8 {
        let mx = (0..8).map(|a| l[a][b]).fold(f64::NEG_INFINITY, f64::max);
        for a in 0..8 {
            out[a][b] = l[a][b] - mx;
        }
    }
    out
}

const LOG_FLOOR: f64 = 1e-300;

/// Trace the filters' internals, averaged over `config.trials` runs.
pub fn diagnostics_run(spec: &DiagnosticsSpec) -> Result<DiagnosticsOutput> {
    let cfg = &spec.config;
    cfg.validate()?;
    let steps = cfg.steps();
    let source = if spec.schedule.is_empty() {
        ErrorSource::Poisson
    } else {
        ErrorSource::Schedule(spec.schedule.clone())
    };
    let table = if spec.include_optimal {
        let bank = spec.optimal.bank(cfg.mu_t())?;
        Some(Arc::new(MeasurementDensityTable::build(cfg.mu, cfg.dt, cfg.k, &bank, bank.n_max, spec.optimal.mode())?))
    } else {
        None
    };
    let j = transition_matrix(cfg.mu, cfg.dt)?;
    let two = LogFilter::new(cfg.mu, cfg.dt, cfg.k, spec.log.config(LogMode::TwoTerm))?;
    let one = LogFilter::new(cfg.mu, cfg.dt, cfg.k, spec.log.config(LogMode::OneTerm))?;
    let raw = LogFilter::new(
        cfg.mu,
        cfg.dt,
        cfg.k,
        LogFilterConfig {
            apply_delta_correction: false,
            ..spec.log.config(LogMode::TwoTerm)
        },
    )?;
    let cor = LogFilter::new(
        cfg.mu,
        cfg.dt,
        cfg.k,
        LogFilterConfig {
            apply_delta_correction: true,
            ..spec.log.config(LogMode::TwoTerm)
        },
    )?;
    let delta = cor.kernel().delta;

    const CHUNK: usize = 64;
    let chunks = cfg.trials.div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>, u64)> {
            let mut sum = vec![0.0; steps * BLOCK];
            let mut sq = vec![0.0; steps * BLOCK];
            let mut mismatches = 0u64;
            let end = ((c + 1) * CHUNK).min(cfg.trials);
            for trial in (c * CHUNK)..end {
                let mut opt = table.as_ref().map(|t| OptimalFilter::new(Arc::clone(t))).transpose()?;
                let (mut two, mut one, mut raw, mut cor) = (two.clone(), one.clone(), raw.clone(), cor.clone());
                if let Some(o) = &mut opt {
                    o.reset(cfg.initial_state);
                }
                for f in [&mut two, &mut one, &mut raw, &mut cor] {
                    f.reset(cfg.initial_state);
                }
                for (i, iv) in trial_stream(cfg, trial as u64, source.clone())?.enumerate() {
                    let mut v = [0.0; BLOCK];
                    if let (Some(o), Some(t)) = (&mut opt, &table) {
                        let prior = *o.posterior();
                        let lik = t.likelihoods(iv.measurement);
                        let mut l = [[0.0; 8]; 8];
                        for a in StateIndex::all() {
                            let row = &lik[crate::state::syndrome_of(a).class()];
                            for b in 0..8 {
                                let c = prior.p[a.index()] * j.j[a.index()][b] * row[a.index() ^ b];
                                l[a.index()][b] = c.max(LOG_FLOOR).ln();
                            }
                        }
                        let rel = column_relative(&l);
                        v[L_OPT..L_OPT + 64].copy_from_slice(rel.as_flattened());
                        o.step(iv.measurement);
                        for (s, p) in o.posterior().p.iter().enumerate() {
                            v[P_OPT + s] = p.max(LOG_FLOOR).ln();
                        }
                    }
                    let (_, l2) = two.step_with_terms(iv.measurement);
                    v[L_TWO..L_TWO + 64].copy_from_slice(column_relative(&l2.l).as_flattened());
                    v[P_TWO..P_TWO + 8].copy_from_slice(&two.state().normalized());
                    one.step(iv.measurement);
                    v[P_ONE..P_ONE + 8].copy_from_slice(&one.state().normalized());
                    let pr = raw.step(iv.measurement);
                    let pc = cor.step(iv.measurement);
                    mismatches += (pr != pc) as u64;
                    v[N_RAW] = raw.state().norm();
                    v[N_COR] = cor.state().norm();
                    let base = i * BLOCK;
                    for (k, x) in v.iter().enumerate() {
                        sum[base + k] += x;
                        sq[base + k] += x * x;
                    }
                }
            }
            Ok((sum, sq, mismatches))
        })
        .collect::<Result<_>>()?;

    let mut sum = vec![0.0; steps * BLOCK];
    let mut sq = vec![0.0; steps * BLOCK];
    let mut argmax_mismatches = 0;
    for (s, q, m) in &partials {
        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        sq.iter_mut().zip(q).for_each(|(a, b)| *a += b);
        argmax_mismatches += m;
    }
    let n = cfg.trials as f64;
    let moments = |idx: usize| {
        let mean = sum[idx] / n;
        let var = if cfg.trials > 1 { ((sq[idx] - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        Moments { mean, sd: var.sqrt() }
    };
    let mat = |i: usize, off: usize| {
        let mut m = [[Moments { mean: 0.0, sd: 0.0 }; 8]; 8];
        for a in 0..8 {
            for b in 0..8 {
                m[a][b] = moments(i * BLOCK + off + a * 8 + b);
            }
        }
        m
    };
    let vec8 = |i: usize, off: usize| std::array::from_fn(|s| moments(i * BLOCK + off + s));
    Ok(DiagnosticsOutput {
        dt: cfg.dt,
        trials: cfg.trials,
        l_optimal: (0..steps).map(|i| mat(i, L_OPT)).collect(),
        l_two_term: (0..steps).map(|i| mat(i, L_TWO)).collect(),
        logp_optimal: (0..steps).map(|i| vec8(i, P_OPT)).collect(),
        logp_two_term: (0..steps).map(|i| vec8(i, P_TWO)).collect(),
        logp_one_term: (0..steps).map(|i| vec8(i, P_ONE)).collect(),
        norm_uncorrected: (0..steps).map(|i| moments(i * BLOCK + N_RAW)).collect(),
        norm_corrected: (0..steps).map(|i| moments(i * BLOCK + N_COR)).collect(),
        argmax_mismatches,
        delta,
    })
}

#[derive(Serialize)]
struct DiagRow {
    series: &'static str,
    step: usize,
    time_us: f64,
    row: Option<usize>,
    col: Option<usize>,
    mean: f64,
    sd: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "series,step,time_us,row,col,mean,sd";

/// Long-format CSV of a diagnostics run. Reference-filter series are
/// omitted when that filter was not traced.
pub fn write_diagnostics_csv<W: Write>(w: W, d: &DiagnosticsOutput, with_optimal: bool) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for i in 0..d.steps() {
        let t = (i + 1) as f64 * d.dt;
        let mut put = |series, row, col, m: Moments| {
            wr.serialize(DiagRow {
                series,
                step: i + 1,
                time_us: t,
                row,
                col,
                mean: m.mean,
                sd: m.sd,
            })
        };
        let mut mats = vec![("l_two_term", &d.l_two_term[i])];
        let mut vecs = vec![("logp_two_term", &d.logp_two_term[i]), ("logp_one_term", &d.logp_one_term[i])];
        if with_optimal {
            mats.insert(0, ("l_optimal", &d.l_optimal[i]));
            vecs.insert(0, ("logp_optimal", &d.logp_optimal[i]));
        }
        for (name, m) in mats {
            for a in 0..8 {
                for b in 0..8 {
                    put(name, Some(a), Some(b), m[a][b]).map_err(csv_err)?;
                }
            }
        }
        for (name, v) in vecs {
            for (s, m) in v.iter().enumerate() {
                put(name, Some(s), None, *m).map_err(csv_err)?;
            }
        }
        put("norm_uncorrected", None, None, d.norm_uncorrected[i]).map_err(csv_err)?;
        put("norm_corrected", None, None, d.norm_corrected[i]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsMetadata {
    pub version: String,
    pub spec: DiagnosticsSpec,
    pub delta: f64,
    pub argmax_mismatches: u64,
}

/// Ordinary least squares `y = a + b x`; returns `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}
