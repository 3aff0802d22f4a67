//! Benchmark harness for the DOF operator engine.
//!
//! Loads a JSON config describing a network and one or more operators,
//! evaluates every requested method on a shared batch of points, and
//! reports multiplication counts, peak live reals and wall time relative
//! to the full-Hessian baseline.

pub mod config;
pub mod oracle;
pub mod report;
pub mod run;

pub use config::{Architecture, BenchConfig, Operators, DEFAULT_BATCH, DEFAULT_REPEATS};
pub use oracle::{run_verify, PointCheck, VerifyReport};
pub use report::{emit_report, Format};
pub use run::{run_bench, sample_points, BenchReport, BenchRow, RunOptions, TimeStats, CHECKSUM_TOL, WORKERS_ENV};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot read {0}")]
    Io(String, #[source] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dof_core::Error),
    #[error("methods disagree with the Hessian baseline:\n{0}")]
    ChecksumMismatch(String),
    #[error("cannot write report: {0}")]
    Report(String),
}
