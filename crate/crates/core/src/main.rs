use anyhow::Context;
use clap::{Parser, Subcommand};
use mhe::harness::{compare_runs, load_metrics, load_scenario, run_to_dir};
use mhe::dynamics::model_catalog;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mhe", about = "Moving-horizon estimation scenario runner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and write its trace and metrics.
    Run {
        /// Scenario file to execute.
        scenario: PathBuf,
        /// Output directory (default: runs/<scenario name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare completed runs; the first directory is the baseline.
    Compare {
        /// Run directories, each holding a metrics.kv.
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
    },
    /// List the built-in models and their parameters.
    ListModels,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, out, seed } => {
            let mut sc = load_scenario(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(seed) = seed {
                sc.seed = seed;
            }
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&sc.name));
            let output = run_to_dir(&sc, &dir)?;
            for w in &output.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", output.summary);
            println!("wrote {}", dir.display());
            // A run with flagged estimation failures still produced a full
            // trace; the events are data, not a broken invocation.
            if let Some(reason) = &output.metrics.failure {
                eprintln!("warning: estimator flagged failure events, first: {reason}");
            }
        }
        Command::Compare { run_dirs } => {
            let mut runs = Vec::with_capacity(run_dirs.len());
            for dir in &run_dirs {
                runs.push(load_metrics(dir)?);
            }
            print!("{}", compare_runs(&runs)?);
        }
        Command::ListModels => {
            for info in model_catalog() {
                println!("{}  [{}]", info.kind.name(), info.dims);
                println!("    {}", info.summary);
                if !info.required.is_empty() {
                    println!("    required: {}", info.required.join(", "));
                }
                if !info.optional.is_empty() {
                    println!("    optional: {}", info.optional.join(", "));
                }
            }
        }
    }
    Ok(())
}
