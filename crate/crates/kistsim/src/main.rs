use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kistsim::experiment::{self, ExperimentSpec};
use kistsim::metrics;
use kistsim::sched::Policy;

/// Onion-relay socket scheduling simulator: AMAP vs KIST.
#[derive(Parser)]
#[command(name = "kistsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment spec and export its metrics.
    Run {
        /// Path to a key=value experiment spec file.
        spec: PathBuf,
        /// Override the spec's scheduling policy (amap|kist).
        #[arg(long)]
        policy: Option<Policy>,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out/<policy>-<loss>-load<f>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override 1-in-k cell trace sampling.
        #[arg(long)]
        sample: Option<u64>,
    },
    /// Run the 10-run load/loss matrix (2 policies x 5 cells) and compare
    /// each matched pair.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs (each is an isolated simulation instance).
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long)]
        sample: Option<u64>,
    },
    /// Compare two exported runs (identical specs up to the policy).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
    },
}

fn load_spec(path: &PathBuf) -> anyhow::Result<ExperimentSpec> {
    ExperimentSpec::parse_file(path).with_context(|| format!("loading spec {}", path.display()))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { spec, policy, seed, out, sample } => {
            let mut spec = load_spec(&spec)?;
            if let Some(p) = policy {
                spec.policy = p;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(k) = sample {
                spec.trace_sample = k.max(1);
            }
            let dir = out.unwrap_or_else(|| {
                PathBuf::from("out").join(format!(
                    "{}-{}-load{}-s{}",
                    spec.policy, spec.loss_model, spec.load_factor, spec.seed
                ))
            });
            let run = experiment::run_to_dir(&spec, &dir)?;
            let c = &run.sim.metrics.counters;
            println!(
                "run complete: {} events, {} downloads ({} failed), {} cells delivered, output in {}",
                c.events_processed,
                c.downloads_completed,
                c.downloads_failed,
                c.cells_delivered,
                dir.display()
            );
            Ok(())
        }
        Command::Sweep { spec, out, jobs, sample } => {
            let mut spec = load_spec(&spec)?;
            if let Some(k) = sample {
                spec.trace_sample = k.max(1);
            }
            let report = experiment::sweep(&spec, &out, jobs)?;
            print!("{}", report.render());
            println!("report written to {}", out.join("report.txt").display());
            if report.all_ok() {
                Ok(())
            } else {
                anyhow::bail!("one or more sweep cells failed");
            }
        }
        Command::Compare { run_a, run_b } => {
            let report = metrics::compare(&run_a, &run_b)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}
