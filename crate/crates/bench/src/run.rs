use std::time::Instant;

use dof_core::baseline::HessianEngine;
use dof_core::costmodel::{summarize, CostReport, Method, RatioSummary};
use dof_core::dof::{dof_evaluate_mlp_fused, DofEngine, DofScratch, ForwardLaplacian};
use dof_core::networks::{build_block_mlp, Mlp};
use dof_core::operator::{decompose, Decomposition, OperatorSpec};
use dof_core::{EdgeStats, Graph64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, BenchConfig};
use crate::BenchError;

/// Relative tolerance for checksum agreement between methods.
pub const CHECKSUM_TOL: f64 = 1e-8;
/// Environment variable holding the worker count for batch evaluation.
pub const WORKERS_ENV: &str = "DOF_BENCH_WORKERS";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub sequential: bool,
    /// Overrides the config's point seed.
    pub seed: Option<u64>,
    /// Worker threads; falls back to `DOF_BENCH_WORKERS`, then rayon's default.
    pub workers: Option<usize>,
}

impl RunOptions {
    fn worker_count(&self) -> Result<Option<usize>, BenchError> {
        if let Some(w) = self.workers {
            return Ok(Some(w));
        }
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .map(Some)
                .ok_or_else(|| BenchError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
            Err(_) => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub samples: Vec<f64>,
}

impl TimeStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        Self { median_ms: q(0.5), iqr_ms: q(0.75) - q(0.25), samples }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub operator: String,
    pub method: Method,
    pub rank: usize,
    pub wall_time: TimeStats,
    pub mults: u64,
    pub peak_live_reals: u64,
    pub operator_value_checksum: f64,
    /// Largest per-point deviation from the Hessian baseline, relative to `max(1, |φ|)`.
    pub max_point_diff: f64,
    pub cost: CostReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSummary {
    pub operator: String,
    pub summary: RatioSummary,
    /// Baseline median time over method median time.
    pub time_speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupTiming {
    pub operator: String,
    pub decompose_ms: f64,
    pub plan_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub n_inputs: usize,
    pub n_nodes: usize,
    pub e_count: u64,
    pub t_count: u64,
    pub r_count: u64,
}

impl From<&EdgeStats> for GraphInfo {
    fn from(s: &EdgeStats) -> Self {
        Self { n_inputs: s.n_inputs, n_nodes: s.n_nodes, e_count: s.e_count, t_count: s.t_count, r_count: s.r_count }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub architecture: String,
    pub graph: GraphInfo,
    pub batch: usize,
    pub seed: u64,
    pub sequential: bool,
    pub workers: usize,
    pub graph_build_ms: f64,
    pub setup: Vec<SetupTiming>,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<OperatorSummary>,
}

impl BenchReport {
    pub fn row(&self, operator: &str, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.operator == operator && r.method == method)
    }

    pub fn summary(&self, operator: &str, method: Method) -> Option<&OperatorSummary> {
        self.summaries.iter().find(|s| s.operator == operator && s.summary.method == method)
    }
}

/// The architecture built once per run.
pub struct Network {
    pub graph: Graph64,
    pub mlp: Option<Mlp<f64>>,
}

impl Network {
    pub fn build(arch: &Architecture) -> Result<Self, BenchError> {
        Ok(match arch {
            Architecture::Mlp(spec) => {
                let mlp = Mlp::from_spec(spec)?;
                Self { graph: mlp.graph().clone(), mlp: Some(mlp) }
            }
            Architecture::BlockMlp(spec) => Self { graph: build_block_mlp(spec)?, mlp: None },
        })
    }
}

/// Uniform points in `[-1, 1]ⁿ`.
pub fn sample_points(n: usize, batch: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect()
}

enum Prepared<'a> {
    Dof(Box<DofEngine<'a, f64>>),
    Fused(&'a Mlp<f64>, &'a Decomposition<f64>),
    Hessian(&'a HessianEngine<'a, f64>, &'a OperatorSpec<f64>),
    Hvp(&'a HessianEngine<'a, f64>, &'a Decomposition<f64>, &'a OperatorSpec<f64>),
}

impl Prepared<'_> {
    fn eval(&self, x: &[f64], scratch: &mut DofScratch<f64>) -> dof_core::Result<(f64, CostReport)> {
        match self {
            Prepared::Dof(engine) => engine.evaluate(x, scratch).map(|r| (r.operator_value, r.cost)),
            Prepared::Fused(mlp, dec) => dof_evaluate_mlp_fused(mlp, dec, x).map(|r| (r.operator_value, r.cost)),
            Prepared::Hessian(engine, spec) => {
                engine.operator(spec, x).map(|r| (r.operator_value.unwrap_or(f64::NAN), r.cost))
            }
            Prepared::Hvp(engine, dec, spec) => {
                engine.operator_hvp(dec, spec, x).map(|r| (r.operator_value.unwrap_or(f64::NAN), r.cost))
            }
        }
    }
}

struct MethodRun {
    values: Vec<f64>,
    cost: CostReport,
    time: TimeStats,
}

fn evaluate_batch(
    prepared: &Prepared<'_>,
    points: &[Vec<f64>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Vec<f64>, CostReport), BenchError> {
    let results: Vec<dof_core::Result<(f64, CostReport)>> = match pool {
        Some(pool) => pool.install(|| {
            points.par_iter().map_init(DofScratch::new, |scratch, x| prepared.eval(x, scratch)).collect()
        }),
        None => {
            let mut scratch = DofScratch::new();
            points.iter().map(|x| prepared.eval(x, &mut scratch)).collect()
        }
    };
    let mut values = Vec::with_capacity(points.len());
    let mut total: Option<CostReport> = None;
    for r in results {
        let (v, cost) = r?;
        values.push(v);
        match total.as_mut() {
            Some(t) => t.merge(&cost)?,
            None => total = Some(cost),
        }
    }
    Ok((values, total.expect("batch is non-empty")))
}

fn time_batch(prepared: &Prepared<'_>, points: &[Vec<f64>], repeats: usize) -> Result<TimeStats, BenchError> {
    let mut scratch = DofScratch::new();
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for x in points {
            std::hint::black_box(prepared.eval(std::hint::black_box(x), &mut scratch)?);
        }
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TimeStats::from_samples(samples))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs every configured method on every operator over the same batch.
///
/// Counters come from one pass over the batch (parallel unless
/// `sequential`); wall times come from `repeats` sequential passes.
pub fn run_bench(cfg: &BenchConfig, opts: &RunOptions) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let workers = opts.worker_count()?;
    let pool = if opts.sequential {
        None
    } else {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(w) = workers {
            builder = builder.num_threads(w);
        }
        Some(builder.build().map_err(|e| BenchError::Config(e.to_string()))?)
    };
    let worker_total = pool.as_ref().map_or(1, |p| p.current_num_threads());

    let t = Instant::now();
    let net = Network::build(&cfg.architecture)?;
    let graph_build_ms = ms_since(t);
    let stats = net.graph.edge_stats();
    let n = net.graph.n_inputs();
    let points = sample_points(n, cfg.batch, seed);
    let methods = cfg.run_methods();

    let mut setup = Vec::new();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for op in cfg.operators() {
        let label = op.label();
        let spec = op.resolve()?;
        let t = Instant::now();
        let dec = decompose(&spec, None)?;
        let decompose_ms = ms_since(t);

        let t = Instant::now();
        let fl = ForwardLaplacian::new(n);
        let hessian = HessianEngine::new(&net.graph);
        let mut prepared = Vec::with_capacity(methods.len());
        for &m in &methods {
            prepared.push(match m {
                Method::Dof => Prepared::Dof(Box::new(DofEngine::new(&net.graph, &dec, &spec)?)),
                Method::ForwardLaplacian => Prepared::Dof(Box::new(fl.engine(&net.graph)?)),
                Method::DofFused => {
                    let mlp = net.mlp.as_ref().ok_or_else(|| BenchError::Config("dof_fused needs an mlp".into()))?;
                    Prepared::Fused(mlp, &dec)
                }
                Method::Hessian => Prepared::Hessian(&hessian, &spec),
                Method::Hvp => Prepared::Hvp(&hessian, &dec, &spec),
            });
        }
        setup.push(SetupTiming { operator: label.clone(), decompose_ms, plan_ms: ms_since(t) });

        let mut runs = Vec::with_capacity(methods.len());
        for p in &prepared {
            let (values, cost) = evaluate_batch(p, &points, pool.as_ref())?;
            let time = time_batch(p, &points, cfg.repeats)?;
            runs.push(MethodRun { values, cost, time });
        }

        let base_idx = methods.iter().position(|&m| m == Method::Hessian).expect("baseline always runs");
        let base = &runs[base_idx];
        let base_sum: f64 = base.values.iter().sum();
        let mut divergent = Vec::new();
        for (&m, run) in methods.iter().zip(&runs) {
            let checksum: f64 = run.values.iter().sum();
            let max_point_diff = run
                .values
                .iter()
                .zip(&base.values)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            if (checksum - base_sum).abs() > CHECKSUM_TOL * base_sum.abs().max(1.0) || !checksum.is_finite() {
                divergent.push(format!(
                    "{label}/{}: checksum {checksum:.15e} vs hessian {base_sum:.15e} (max point diff {max_point_diff:.3e})",
                    m.label()
                ));
            }
            if m != Method::Hessian {
                let summary = summarize(&run.cost, &base.cost)?;
                summaries.push(OperatorSummary {
                    operator: label.clone(),
                    summary,
                    time_speedup: base.time.median_ms / run.time.median_ms,
                });
            }
            rows.push(BenchRow {
                operator: label.clone(),
                method: m,
                rank: run.cost.rank,
                wall_time: run.time.clone(),
                mults: run.cost.mults,
                peak_live_reals: run.cost.peak_live_reals,
                operator_value_checksum: checksum,
                max_point_diff,
                cost: run.cost.clone(),
            });
        }
        if !divergent.is_empty() {
            return Err(BenchError::ChecksumMismatch(divergent.join("\n")));
        }
    }

    Ok(BenchReport {
        config: cfg.clone(),
        architecture: cfg.architecture.label(),
        graph: GraphInfo::from(&stats),
        batch: cfg.batch,
        seed,
        sequential: opts.sequential,
        workers: worker_total,
        graph_build_ms,
        setup,
        rows,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_stats_quartiles() {
        let t = TimeStats::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.median_ms, 3.0);
        assert_eq!(t.iqr_ms, 2.0);
        assert_eq!(t.samples.len(), 5);
    }

    #[test]
    fn points_are_seeded() {
        assert_eq!(sample_points(3, 4, 9), sample_points(3, 4, 9));
        assert_ne!(sample_points(3, 4, 9), sample_points(3, 4, 10));
        assert!(sample_points(5, 10, 1).iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }
}
