//! Command-line front end.
//!
//! Exit status is 0 on success, 2 when the configuration or arguments are at
//! fault, 3 when the run itself failed (I/O and the like).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{error_budget, expected_d1_rate, sweep, write_sweep_csv};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::feedback::{run_lock, write_trace_csv};
use crate::protocol::{run_experiment_with_sink, FeedbackMode, TrialLog, TrialRecord};

#[derive(Debug, Parser)]
#[command(
    name = "cqkd",
    version,
    about = "Counterfactual QKD Monte Carlo simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Config file path or bundled config name.
    #[arg(long, short = 'c', default_value = "fiber1km_mu05")]
    pub config: String,
    /// Dotted key=value override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunFeedback {
    Ideal,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a session and write the JSON report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        slots: Option<u64>,
        /// Report path; stdout when neither this nor the config names one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-slot trial log as CSV.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long, value_enum)]
        feedback: Option<RunFeedback>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the analytic error budget.
    Budget {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Observed D1 count rate; the analytic estimate is used when absent.
        #[arg(long)]
        d1_rate: Option<f64>,
    },
    /// Simulate the phase lock and print its summary.
    Lock {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Simulated seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, value_enum)]
        feedback: Option<OnOff>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
        /// Summary JSON path; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run once per value of one parameter with a shared seed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        slots: Option<u64>,
        /// CSV path; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every full report as a JSON array.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_run(
    cfg: ConfigArgs,
    seed: Option<u64>,
    slots: Option<u64>,
    out: Option<PathBuf>,
    trials: Option<PathBuf>,
    feedback: Option<RunFeedback>,
    threads: Option<usize>,
) -> Result<()> {
    let mut c = ScenarioConfig::load(&cfg.config, &cfg.overrides)?;
    c.seed = seed.unwrap_or(c.seed);
    c.n_slots = slots.unwrap_or(c.n_slots);
    c.threads = threads.unwrap_or(c.threads);
    if let Some(f) = feedback {
        c.feedback_mode = match f {
            RunFeedback::Ideal => FeedbackMode::Ideal,
            RunFeedback::Live => FeedbackMode::Live,
        };
    }
    let params = c.system_params();
    let settings = c.run_settings();
    let live = c.live_lock();

    let trials_path = trials.or(c.output.trials_csv.clone());
    let report = match trials_path {
        Some(path) => {
            let mut log = TrialLog::new(std::io::BufWriter::new(create(&path)?));
            let mut sink = |r: &TrialRecord| log.write(r);
            let report =
                run_experiment_with_sink(&params, &c.adversary, &settings, &live, Some(&mut sink))?;
            log.finish()?.flush().map_err(|e| Error::io(&path, e))?;
            report
        }
        None => run_experiment_with_sink(&params, &c.adversary, &settings, &live, None)?,
    };

    let out = out.or(c.output.report.clone());
    emit(&report.to_json()?, out.as_deref())?;
    if out.is_some() {
        let qber = report
            .qber
            .map_or("n/a".to_string(), |q| format!("{:.3}%", 100.0 * q));
        eprintln!(
            "{} slots, {} sifted bits, qber {qber}, key rate {:.2} bit/s",
            report.n_slots, report.counts.sifted_bits, report.key_rate
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BudgetOutput {
    d1_rate: f64,
    d1_rate_source: &'static str,
    #[serde(flatten)]
    budget: crate::analysis::ErrorBudget,
}

fn cmd_budget(cfg: ConfigArgs, d1_rate: Option<f64>) -> Result<()> {
    let c = ScenarioConfig::load(&cfg.config, &cfg.overrides)?;
    let params = c.system_params();
    let (rate, source) = match d1_rate {
        Some(r) => (r, "observed"),
        None => (expected_d1_rate(&params), "analytic"),
    };
    let budget = error_budget(&params, rate)?;
    emit(
        &serde_json::to_string_pretty(&BudgetOutput {
            d1_rate: rate,
            d1_rate_source: source,
            budget,
        })?,
        None,
    )
}

fn cmd_lock(
    cfg: ConfigArgs,
    duration: f64,
    feedback: Option<OnOff>,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    stride: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let c = ScenarioConfig::load(&cfg.config, &cfg.overrides)?;
    let mut settings = c.lock;
    if let Some(f) = feedback {
        settings.feedback = f == OnOff::On;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(c.seed));
    let run = run_lock(&c.controller, &settings, duration, &mut rng)?;
    if let Some(path) = trace.or(c.output.trace_csv.clone()) {
        let stride = stride.unwrap_or(c.output.trace_stride);
        if stride == 0 {
            return Err(Error::Parameter {
                name: "stride",
                reason: "must be positive".into(),
            });
        }
        write_trace_csv(&path, &run.trace, stride)?;
    }
    emit(&serde_json::to_string_pretty(&run.summary)?, out.as_deref())
}

fn cmd_sweep(
    cfg: ConfigArgs,
    axis: String,
    values: Vec<f64>,
    seed: Option<u64>,
    slots: Option<u64>,
    out: Option<PathBuf>,
    reports: Option<PathBuf>,
) -> Result<()> {
    let mut c = ScenarioConfig::load(&cfg.config, &cfg.overrides)?;
    c.seed = seed.unwrap_or(c.seed);
    c.n_slots = slots.unwrap_or(c.n_slots);
    let rows = sweep(
        &c.system_params(),
        &c.adversary,
        &c.run_settings(),
        &c.live_lock(),
        &axis,
        &values,
    )?;
    match &out {
        Some(p) => write_sweep_csv(create(p)?, &rows)?,
        None => write_sweep_csv(std::io::stdout().lock(), &rows)?,
    }
    if let Some(p) = reports {
        std::fs::write(&p, serde_json::to_string_pretty(&rows)? + "\n")
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            cfg,
            seed,
            slots,
            out,
            trials,
            feedback,
            threads,
        } => cmd_run(cfg, seed, slots, out, trials, feedback, threads),
        Command::Budget { cfg, d1_rate } => cmd_budget(cfg, d1_rate),
        Command::Lock {
            cfg,
            duration,
            feedback,
            seed,
            trace,
            stride,
            out,
        } => cmd_lock(cfg, duration, feedback, seed, trace, stride, out),
        Command::Sweep {
            cfg,
            axis,
            values,
            seed,
            slots,
            out,
            reports,
        } => cmd_sweep(cfg, axis, values, seed, slots, out, reports),
    }
}

pub fn exit_code(result: &Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config_error() => ExitCode::from(2),
        Err(_) => ExitCode::from(3),
    }
}

pub fn main() -> ExitCode {
    let result = execute(Cli::parse());
    if let Err(e) = &result {
        eprintln!("cqkd: {e}");
    }
    exit_code(&result)
}
