use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dof_bench::{emit_report, run_bench, run_verify, BenchConfig, Format, RunOptions};

#[derive(Parser)]
#[command(name = "bench", about = "Benchmark second-order operator evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and report costs against the Hessian baseline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the batch on one thread.
        #[arg(long)]
        sequential: bool,
        /// Override the config's point seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-check DOF, Hessian, HVP and finite differences.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, format, out, sequential, seed } => {
            let cfg = BenchConfig::load(&config)?;
            let report = run_bench(&cfg, &RunOptions { sequential, seed, workers: None })?;
            let text = emit_report(&report, format)?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { config, seed } => {
            let cfg = BenchConfig::load(&config)?;
            let report = run_verify(&cfg, &RunOptions { seed, ..Default::default() })?;
            println!(
                "{} checks, worst exact error {:.3e}, worst finite-difference error {:.3e}",
                report.checks.len(),
                report.worst_exact,
                report.worst_fd
            );
            if report.passes() {
                println!("all checks passed");
                return Ok(ExitCode::SUCCESS);
            }
            for c in report.failures() {
                eprintln!(
                    "FAIL {} point {}: exact {:.3e} fd {:.3e} special {:?}",
                    c.operator, c.point, c.chain.exact_err, c.chain.fd_err, c.special_err
                );
            }
            Ok(ExitCode::FAILURE)
        }
    }
}
