//! `lsi-lab <subcommand> --config <path> [--out <dir>] [--seed <n>] [--threads <n>]`.
//!
//! Exit status: 0 when every report passes, 1 when some report fails,
//! 2 on any error (including solver non-convergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lsi_core::pipeline::{run, Command, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subcommand {
    Solve,
    Simulate,
    Check,
    DemoNonuniqueness,
    All,
}

#[derive(Debug, Parser)]
#[command(name = "lsi-lab", version, about = "Calibrated LSI jump models: solve, simulate, verify")]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Subcommand::Solve => Command::Solve,
        Subcommand::Simulate => Command::Simulate,
        Subcommand::Check => Command::Check,
        Subcommand::DemoNonuniqueness => Command::DemoNonuniqueness,
        Subcommand::All => Command::All,
    };
    let options = RunOptions {
        out: cli.out,
        seed: cli.seed,
        threads: cli.threads,
    };
    match run(command, &cli.config, &options) {
        Ok(outcome) => {
            for r in &outcome.reports {
                println!("{}", r.summary_line());
            }
            if outcome.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("lsi-lab: {e}");
            ExitCode::from(2)
        }
    }
}
