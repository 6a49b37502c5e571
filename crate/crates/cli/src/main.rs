//! Scenario-driven experiment runner: parses strict TOML scenario files,
//! orchestrates the solvers and bound calculators, and writes reproducible
//! run directories.
//!
//! Exit codes: 0 when every bound verdict holds (possibly within confidence
//! bands), 2 when any verdict is violated, 1 on errors.

use clap::{Parser, Subcommand};
use distctl::{runner, scenario, sweep};
use scenario::Scenario;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "distctl", about = "Gap measurements for distributed stochastic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a scenario and persist a run directory.
    Run {
        scenario: PathBuf,
        /// Output root; the run directory is `<name>-<hash8>` inside it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override one grid axis of the full solver: `axis=lo:hi:npts`.
        #[arg(long = "grid", value_name = "AXIS=LO:HI:NPTS")]
        grid: Vec<scenario::GridOverride>,
    },
    /// Re-run a scenario over a list of values for one parameter.
    Sweep {
        scenario: PathBuf,
        /// Dotted path into the scenario, e.g. `problem.horizon`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values substituted at the axis.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(all_hold) => {
            if all_hold {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { scenario, out, seed, grid } => {
            let mut scn = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                scn.seed = seed;
            }
            scn.solvers.grid_overrides = grid;
            let artifacts = runner::run_scenario(scn, out.as_deref())?;
            for line in &artifacts.log {
                println!("{line}");
            }
            for (name, report) in &artifacts.reports {
                if let Some(verdict) = report.get("verdict") {
                    println!(
                        "{name}: {} (gap {}, bound {})",
                        verdict.as_str().unwrap_or("?"),
                        report["gap"],
                        report["bound"]
                    );
                }
            }
            if let Some(dir) = &artifacts.dir {
                println!("run directory: {}", dir.display());
            }
            println!("hash: {}", artifacts.hash);
            Ok(!artifacts.any_violated())
        }
        Command::Sweep { scenario, axis, values, out } => {
            let scn = Scenario::load(&scenario)?;
            let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
            let result = sweep::sweep(scn, &axis, &values, out.as_deref())?;
            println!("{}", result.csv);
            Ok(!result.any_violated)
        }
        Command::Validate { scenario } => {
            let scn = Scenario::load(&scenario)?;
            scn.build_problem()?;
            scn.build_initial_law()?;
            println!("{} ok: {} experiments", scn.name, scn.experiments.len());
            Ok(true)
        }
    }
}
