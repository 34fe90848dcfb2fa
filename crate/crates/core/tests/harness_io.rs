use std::process::Command;
use std::sync::Arc;

use cqec::filter_log::{LogFilter, LogFilterConfig};
use cqec::filter_optimal::{DensityMode, MeasurementDensityTable};
use cqec::harness::{
    diagnostics_run, run_experiment, run_point, write_experiment, AnyFilter, DiagnosticsSpec, ExperimentSpec, FilterKind,
    LogSettings, OptimalSettings, SweepAxis, RESULTS_HEADER,
};
use cqec::simulator::{ErrorEvent, ErrorSource};
use cqec::synd_density::HistogramBank;
use cqec::tracking::argmax;
use cqec::{Qubit, RunConfig, StateIndex};

fn small_spec() -> ExperimentSpec {
    let base = RunConfig::new(2.5e-3, 0.1, 0.5, 20.0).with_trials(200).with_seed(61);
    ExperimentSpec::new(
        SweepAxis::ErrorRate,
        vec![1e-3, 1e-2],
        base,
        vec![FilterKind::TwoTerm, FilterKind::OneTerm, FilterKind::Wonham, FilterKind::Threshold],
    )
}

#[test]
fn results_csv_round_trips_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.csv");
    let result = run_experiment(&small_spec()).unwrap();
    write_experiment(&out, &result).unwrap();

    let mut rd = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>().join(","), RESULTS_HEADER);
    let recs: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(recs.len(), result.rows.len());
    for (rec, row) in recs.iter().zip(&result.rows) {
        assert_eq!(&rec[0], row.filter.name());
        assert_eq!(&rec[1], "error_rate");
        assert_eq!(rec[2].parse::<f64>().unwrap(), row.axis_value);
        assert_eq!(rec[3].parse::<f64>().unwrap(), row.inaccuracy);
        let p: f64 = rec[3].parse().unwrap();
        let se: f64 = rec[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!((se - (p * (1.0 - p) / 200.0).sqrt()).abs() < 1e-15);
    }

    let meta: serde_json::Value = serde_json::from_reader(std::fs::File::open(dir.path().join("results.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(meta["spec"]["base"]["k"], 0.5);
    assert_eq!(meta["rows"].as_array().unwrap().len(), result.rows.len());
    assert!(meta["threshold_tuning"]["chosen"]["tau"].is_number());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = small_spec();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_experiment(&spec).unwrap().rows)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn filters_at_one_point_share_measurements() {
    let cfg = RunConfig::new(5e-3, 0.1, 0.5, 50.0).with_trials(300).with_seed(67);
    let f = || AnyFilter::Log(LogFilter::new(cfg.mu, cfg.dt, cfg.k, LogFilterConfig::one_term()).unwrap());
    let out = run_point(&cfg, &[100, 500], &[f(), f()], &ErrorSource::Poisson).unwrap();
    assert_eq!(out.successes[0], out.successes[1]);
}

#[test]
fn optimal_runs_record_histogram_key() {
    let mut spec = small_spec();
    spec.filters = vec![FilterKind::Optimal];
    spec.optimal = OptimalSettings {
        n: 8,
        samples: 10_000,
        ..OptimalSettings::default()
    };
    let out = run_experiment(&spec).unwrap();
    assert!(out.metadata.errors.is_empty());
    assert_eq!(out.rows.len(), 2);
    assert_eq!(out.metadata.histograms.as_ref().unwrap().n, 8);
}

#[test]
fn zero_trials_is_a_validation_error() {
    let mut spec = small_spec();
    spec.base.trials = 0;
    assert!(run_experiment(&spec).is_err());
}

#[test]
fn injected_flip_dominates_the_true_column_before_and_moves_the_argmax_after() {
    // qubit-3 flip at 7.5 us over a 15 us run, k/T = 4
    let spec = DiagnosticsSpec {
        config: RunConfig::new(2.5e-3, 0.1, 0.4, 15.0).with_trials(1000).with_seed(71),
        schedule: vec![ErrorEvent {
            qubit: Qubit::from_number(3).unwrap(),
            time: 7.5,
        }],
        include_optimal: true,
        optimal: OptimalSettings {
            samples: 200_000,
            ..OptimalSettings::default()
        },
        log: LogSettings::default(),
    };
    let d = diagnostics_run(&spec).unwrap();
    // well before the flip only the stay-at-zero term matters in column 0
    for step in 20..70 {
        let col: Vec<f64> = (0..8).map(|a| d.l_optimal[step][a][0].mean).collect();
        assert_eq!(col[0], 0.0);
        assert!(col[1..].iter().all(|&x| x < -4.0), "step {step}: {col:?}");
    }
    let last = d.steps() - 1;
    let means = |v: &[cqec::harness::Moments; 8]| std::array::from_fn::<f64, 8, _>(|i| v[i].mean);
    assert_eq!(argmax(&means(&d.logp_optimal[60])), StateIndex::ZERO);
    assert_eq!(argmax(&means(&d.logp_optimal[last])), StateIndex::new(1).unwrap());
    assert_eq!(argmax(&means(&d.logp_two_term[last])), StateIndex::new(1).unwrap());
}

#[test]
fn cli_bench_and_simulate_write_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_cqec");
    let out = dir.path().join("bench.csv");
    let status = Command::new(exe)
        .args(["--threads", "2", "bench", "--sweep", "duration", "--values", "1,2", "--trials", "20"])
        .args(["--filters", "two_term,threshold", "--eta-low", "-0.3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER);
    assert_eq!(text.lines().count(), 5);
    assert!(dir.path().join("bench.meta.json").exists());

    let traj = dir.path().join("traj.csv");
    let status = Command::new(exe)
        .args(["simulate", "--duration", "1", "--trials", "2", "--flip", "2@0.55", "--out"])
        .arg(&traj)
        .status()
        .unwrap();
    assert!(status.success());
    let intervals = std::fs::read_to_string(&traj).unwrap();
    assert_eq!(intervals.lines().count(), 1 + 2 * 10);
    let events = std::fs::read_to_string(dir.path().join("traj.events.csv")).unwrap();
    assert_eq!(events.lines().count(), 1 + 2);

    let bad = Command::new(exe).args(["bench", "--values", "2,1", "--trials", "5"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn tabulated_and_exact_tables_agree_on_filter_outcome() {
    let cfg = RunConfig::new(2.5e-3, 0.1, 0.5, 30.0).with_trials(200).with_seed(73);
    let bank = HistogramBank::build(25, 200_000, 0, 3).unwrap();
    let f = |mode| {
        let t = MeasurementDensityTable::build(cfg.mu, cfg.dt, cfg.k, &bank, 3, mode).unwrap();
        AnyFilter::Optimal(cqec::filter_optimal::OptimalFilter::new(Arc::new(t)).unwrap())
    };
    let out = run_point(&cfg, &[cfg.steps()], &[f(DensityMode::Tabulated), f(DensityMode::Exact)], &ErrorSource::Poisson).unwrap();
    assert_eq!(out.successes[0], out.successes[1]);
}
