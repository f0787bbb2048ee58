use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualgrid_bench::{compare_runs, run_file, RunOptions};
use dualgrid_core::coupling::Mode;
use dualgrid_core::interp::Strategy;
use dualgrid_core::transport::Backend;

#[derive(Parser)]
#[command(name = "dualgrid", version, about = "Dual-grid CFD-DEM scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its outputs.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        ranks: usize,
        /// deterministic or threads
        #[arg(long, default_value = "deterministic")]
        backend: Backend,
        /// gather-scatter or distributed; overrides the scenario
        #[arg(long)]
        strategy: Option<Strategy>,
        /// multiscale or monoscale; overrides the scenario
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two run directories of the same scenario.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Largest accepted absolute difference; 0 demands bitwise equality.
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            ranks,
            backend,
            strategy,
            mode,
            out,
        } => {
            let opts = RunOptions {
                ranks,
                backend,
                strategy,
                mode,
            };
            match run_file(&scenario, &opts, &out) {
                Ok(r) => {
                    let m = &r.manifest;
                    let last = r.global().last();
                    println!(
                        "{}: {} steps on {} ranks ({}, {}, {}) -> {}",
                        m.scenario,
                        m.steps,
                        m.ranks,
                        m.backend,
                        m.mode,
                        m.strategy,
                        out.display()
                    );
                    if let Some(l) = last {
                        println!(
                            "t = {:.6} s, {} particles, kinetic energy {:.6e} J",
                            l.time, l.particles, l.kinetic_energy
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Compare { a, b, tol } => match compare_runs(&a, &b, tol) {
            Ok(report) => {
                println!("{report}");
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
