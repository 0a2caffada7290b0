//! `absnet` command line: run experiments, validate scenario files, compute baselines.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime failure. Failures are
//! reported on stderr as a one-line JSON error record.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use absnet::scenario::{random_stationary_baseline, resolve_scenario, run_experiment, RunOverrides, BUNDLED};
use absnet::{Error, Result};

#[derive(Parser)]
#[command(name = "absnet", version, about = "Interference-avoiding ABS network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write CSV outputs.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        /// weighted, unweighted, random-baseline or energy-efficient.
        #[arg(long)]
        mode: Option<String>,
        /// Maximum positioning iterations L.
        #[arg(long)]
        iters: Option<usize>,
        /// Monte-Carlo runs.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse and validate a scenario.
    Validate {
        #[arg(long)]
        scenario: String,
    },
    /// Mean flow of randomly placed stationary ABSs.
    Baseline {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List bundled scenarios.
    List,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, mode, iters, runs, seed, out } => {
            let mode = mode.map(|m| m.parse()).transpose()?;
            let s = resolve_scenario(&scenario)?.with_overrides(RunOverrides { mode, iters, runs, seed })?;
            let result = run_experiment(&s)?;
            let written = result.write_outputs(&out)?;
            let rows = absnet::scenario::read_trajectories_csv(&out.join("trajectories.csv"))?;
            absnet::scenario::validate_trajectory_rows(&rows, &s)?;
            let summary = result.summary();
            println!(
                "{} mode={} runs={} mean {}={:.6} std={:.6}",
                summary.scenario, summary.mode, summary.runs, summary.metric, summary.final_flow.mean, summary.final_flow.std
            );
            if let Some(m) = summary.min_savings_pct {
                println!("min energy savings {m:.2}%");
            }
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Validate { scenario } => {
            let s = resolve_scenario(&scenario)?;
            println!(
                "ok: {} ({} ABSs, {} terminals, {} interferers, mode {}, {} runs)",
                s.name,
                s.n_abs(),
                s.n_terminals(),
                s.terminals.interferers.len(),
                s.mode,
                s.monte_carlo_runs
            );
        }
        Command::Baseline { scenario, runs, seed } => {
            let s = resolve_scenario(&scenario)?;
            let runs = runs.unwrap_or(s.baseline.runs);
            let stats = random_stationary_baseline(&s, runs, seed.unwrap_or(s.rng_seed))?;
            println!("{} random-stationary runs={runs} mean={:.6} std={:.6}", s.name, stats.mean, stats.std);
        }
        Command::List => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string());
            eprintln!("{record}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}
