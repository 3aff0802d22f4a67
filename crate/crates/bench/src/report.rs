use std::fmt::Write as _;

use dof_core::costmodel::Method;
use serde::Serialize;

use crate::run::BenchReport;
use crate::BenchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Md,
}

/// Flat record for CSV, one per (operator, method).
#[derive(Serialize)]
struct CsvRow<'a> {
    operator: &'a str,
    method: &'a str,
    rank: usize,
    batch: usize,
    mults: u64,
    tangent_flops: u64,
    second_order_pair_flops: u64,
    contraction_flops: u64,
    scalar_mults: u64,
    transcendental_calls: u64,
    peak_live_reals: u64,
    predicted_peak: u64,
    median_ms: f64,
    iqr_ms: f64,
    operator_value_checksum: f64,
    max_point_diff: f64,
    flop_ratio_vs_hessian: f64,
    memory_ratio_vs_hessian: f64,
}

pub fn emit_report(report: &BenchReport, format: Format) -> Result<String, BenchError> {
    match format {
        Format::Json => serde_json::to_string_pretty(report).map_err(|e| BenchError::Report(e.to_string())),
        Format::Csv => to_csv(report),
        Format::Md => Ok(to_markdown(report)),
    }
}

fn to_csv(report: &BenchReport) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        let base = report.row(&row.operator, Method::Hessian);
        let (flop_ratio, memory_ratio) = match base {
            Some(b) => (row.mults as f64 / b.mults as f64, row.peak_live_reals as f64 / b.peak_live_reals as f64),
            None => (f64::NAN, f64::NAN),
        };
        w.serialize(CsvRow {
            operator: &row.operator,
            method: row.method.label(),
            rank: row.rank,
            batch: report.batch,
            mults: row.mults,
            tangent_flops: row.cost.tangent_flops,
            second_order_pair_flops: row.cost.second_order_pair_flops,
            contraction_flops: row.cost.contraction_flops,
            scalar_mults: row.cost.scalar_mults,
            transcendental_calls: row.cost.transcendental_calls,
            peak_live_reals: row.peak_live_reals,
            predicted_peak: row.cost.predicted_peak,
            median_ms: row.wall_time.median_ms,
            iqr_ms: row.wall_time.iqr_ms,
            operator_value_checksum: row.operator_value_checksum,
            max_point_diff: row.max_point_diff,
            flop_ratio_vs_hessian: flop_ratio,
            memory_ratio_vs_hessian: memory_ratio,
        })
        .map_err(|e| BenchError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| BenchError::Report(e.to_string()))
}

fn fmt_ratio(base: f64, method: f64) -> String {
    if method > 0.0 {
        format!("{:.1}", base / method)
    } else {
        "n/a".to_string()
    }
}

/// Operators down, methods across; ratio columns are baseline over method.
fn to_markdown(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Architecture: {}", report.architecture);
    let _ = writeln!(
        out,
        "Batch: {} points, seed {}, {} repeats; graph {} nodes, |E| = {}, |T| = {}, |R| = {}",
        report.batch,
        report.seed,
        report.config.repeats,
        report.graph.n_nodes,
        report.graph.e_count,
        report.graph.t_count,
        report.graph.r_count
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "| Operator | Method | Rank | Mults | Peak live reals | Time (ms) | FLOP ratio | Memory ratio | Time ratio |"
    );
    let _ = writeln!(out, "|---|---|---:|---:|---:|---:|---:|---:|---:|");
    for row in &report.rows {
        let Some(base) = report.row(&row.operator, Method::Hessian) else { continue };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.2} | {} | {} | {} |",
            row.operator,
            row.method.label(),
            row.rank,
            row.mults,
            row.peak_live_reals,
            row.wall_time.median_ms,
            fmt_ratio(base.mults as f64, row.mults as f64),
            fmt_ratio(base.peak_live_reals as f64, row.peak_live_reals as f64),
            fmt_ratio(base.wall_time.median_ms, row.wall_time.median_ms),
        );
    }
    out
}
