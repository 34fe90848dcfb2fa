use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cqec::baselines::ThresholdParams;
use cqec::harness::{
    self, DiagnosticsMetadata, DiagnosticsSpec, ExperimentSpec, FilterKind, LogSettings, OptimalSettings, SweepAxis,
};
use cqec::simulator::{ErrorEvent, ErrorSource};
use cqec::synd_density::{choose_n_max, HistogramBank};
use cqec::{Qubit, RunConfig};

#[derive(Parser)]
#[command(name = "cqec", version, about = "Continuous bit-flip code simulation and filtering")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write raw trajectories as CSV.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Fixed flip `QUBIT@TIME_US`, e.g. `3@7.5`; repeatable. Disables random errors.
        #[arg(long = "flip")]
        flips: Vec<String>,
        /// Interval CSV; events go to `<stem>.events.csv`.
        #[arg(long, default_value = "trajectories.csv")]
        out: PathBuf,
    },
    /// Sweep one parameter and score the filters.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "duration")]
        sweep: String,
        /// Comma-separated, strictly increasing axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "optimal,two_term,one_term,wonham,threshold")]
        filters: Vec<String>,
        /// Score the mean over all steps rather than the last step.
        #[arg(long)]
        per_step: bool,
        #[command(flatten)]
        threshold: ThresholdArgs,
        #[command(flatten)]
        tables: TableArgs,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Trace filter internals averaged over trials.
    Diagnostics {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "flip")]
        flips: Vec<String>,
        /// Skip the reference filter.
        #[arg(long)]
        no_optimal: bool,
        #[command(flatten)]
        tables: TableArgs,
        #[arg(long, default_value = "diagnostics.csv")]
        out: PathBuf,
    },
    /// Build or refresh the syndrome histogram cache.
    BuildTables {
        #[command(flatten)]
        tables: TableArgs,
        /// Largest error probability per interval to cover.
        #[arg(long, default_value_t = 0.01)]
        max_mu_t: f64,
    },
    /// Grid-search the threshold detector settings.
    TuneThreshold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "threshold_tuning.json")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Error rate per qubit per microsecond.
    #[arg(long, default_value_t = 2.5e-3)]
    mu: f64,
    /// Interval length in microseconds.
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Noise strength; defaults to 0.5, or 0.1 for time-step sweeps.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    duration: f64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn config(&self, default_k: f64) -> RunConfig {
        RunConfig::new(self.mu, self.dt, self.k.unwrap_or(default_k), self.duration)
            .with_seed(self.seed)
            .with_trials(self.trials)
    }
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    eta_low: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    eta_high: Option<f64>,
}

impl ThresholdArgs {
    fn params(&self) -> ThresholdParams {
        let d = ThresholdParams::default();
        ThresholdParams {
            tau: self.tau.unwrap_or(d.tau),
            eta_low: self.eta_low.unwrap_or(d.eta_low),
            eta_high: self.eta_high.unwrap_or(d.eta_high),
        }
    }
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, default_value_t = 25)]
    hist_n: usize,
    #[arg(long, default_value_t = 1_000_000)]
    hist_samples: u64,
    #[arg(long, default_value_t = 0)]
    table_seed: u64,
    #[arg(long)]
    n_max: Option<u32>,
    /// Evaluate the reference likelihood directly instead of from a grid.
    #[arg(long)]
    exact_density: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl TableArgs {
    fn settings(&self) -> OptimalSettings {
        OptimalSettings {
            n: self.hist_n,
            samples: self.hist_samples,
            table_seed: self.table_seed,
            n_max: self.n_max,
            exact: self.exact_density,
            cache_dir: self.cache_dir.clone(),
        }
    }
}

fn parse_flips(flips: &[String]) -> anyhow::Result<ErrorSource> {
    if flips.is_empty() {
        return Ok(ErrorSource::Poisson);
    }
    let mut events = Vec::new();
    for f in flips {
        let (q, t) = f.split_once('@').with_context(|| format!("flip `{f}` is not QUBIT@TIME"))?;
        let qubit = Qubit::from_number(q.trim().parse()?)?;
        events.push(ErrorEvent {
            qubit,
            time: t.trim().parse()?,
        });
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(ErrorSource::Schedule(events))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.cmd {
        Command::Simulate { run, flips, out } => {
            let cfg = run.config(0.5);
            let events = out.with_extension("events.csv");
            harness::dump_trajectories(&cfg, &parse_flips(&flips)?, &out, &events)?;
            eprintln!("wrote {} and {}", out.display(), events.display());
        }
        Command::Bench {
            run,
            sweep,
            values,
            filters,
            per_step,
            threshold,
            tables,
            out,
        } => {
            let axis: SweepAxis = sweep.parse()?;
            let default_k = if axis == SweepAxis::TimeStep { 0.1 } else { 0.5 };
            let filters = filters.iter().map(|f| f.parse()).collect::<Result<Vec<FilterKind>, _>>()?;
            let mut spec = ExperimentSpec::new(axis, values, run.config(default_k), filters);
            spec.threshold = threshold.params();
            spec.optimal = tables.settings();
            spec.per_step = per_step;
            let result = harness::run_experiment(&spec)?;
            for e in &result.metadata.errors {
                eprintln!("axis value {}: {}", e.axis_value, e.message);
            }
            harness::write_experiment(&out, &result)?;
            eprintln!("wrote {} rows to {}", result.rows.len(), out.display());
        }
        Command::Diagnostics {
            run,
            flips,
            no_optimal,
            tables,
            out,
        } => {
            let schedule = match parse_flips(&flips)? {
                ErrorSource::Schedule(e) => e,
                _ => Vec::new(),
            };
            let spec = DiagnosticsSpec {
                config: run.config(0.5),
                schedule,
                include_optimal: !no_optimal,
                optimal: tables.settings(),
                log: LogSettings::default(),
            };
            let d = harness::diagnostics_run(&spec)?;
            let w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            harness::write_diagnostics_csv(w, &d, !no_optimal)?;
            harness::write_json(
                &harness::sidecar_path(&out),
                &DiagnosticsMetadata {
                    version: env!("CARGO_PKG_VERSION").to_string(),
                    spec,
                    delta: d.delta,
                    argmax_mismatches: d.argmax_mismatches,
                },
            )?;
            eprintln!("wrote {}", out.display());
        }
        Command::BuildTables { tables, max_mu_t } => {
            let s = tables.settings();
            if s.cache_dir.is_none() {
                bail!("--cache-dir is required");
            }
            let bank = s.bank(max_mu_t)?;
            let n_max = s.n_max.unwrap_or_else(|| choose_n_max(max_mu_t));
            eprintln!(
                "{} signatures in {}",
                bank.histograms.len(),
                HistogramBank::file_name(bank.n, bank.samples, bank.seed, n_max)
            );
        }
        Command::TuneThreshold { run, out } => {
            let cfg = run.config(0.5);
            let (best, table) = harness::tune_threshold(
                &cfg,
                &harness::TUNING_TAUS,
                &harness::TUNING_ETA_LOWS,
                &harness::TUNING_ETA_HIGHS,
            )?;
            for (p, inacc) in &table {
                println!("tau={} eta_low={} eta_high={} inaccuracy={:.5}", p.tau, p.eta_low, p.eta_high, inacc);
            }
            println!("best: {best:?}");
            harness::write_json(&out, &serde_json::json!({ "config": cfg, "best": best, "grid": table }))?;
        }
    }
    Ok(())
}
