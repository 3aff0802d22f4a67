use dof_core::costmodel::Method;
use dof_core::dof::{dof_evaluate_mlp_fused, forward_laplacian};
use dof_core::operator::decompose;
use dof_core::verify::{oracle_chain, relative_diff, OracleReport, EXACT_TOL};
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::run::{sample_points, Network, RunOptions};
use crate::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub operator: String,
    pub point: usize,
    pub chain: OracleReport,
    /// Deviation of the fused or Laplacian path from generic DOF, when run.
    pub special_err: Option<f64>,
}

impl PointCheck {
    pub fn passes(&self) -> bool {
        self.chain.passes() && self.special_err.is_none_or(|e| e < EXACT_TOL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<PointCheck>,
    pub worst_exact: f64,
    pub worst_fd: f64,
}

impl VerifyReport {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(PointCheck::passes)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PointCheck> {
        self.checks.iter().filter(|c| !c.passes())
    }
}

/// DOF, full Hessian, HVP and finite differences on a few points per
/// operator, plus the fused and Laplacian paths when configured.
pub fn run_verify(cfg: &BenchConfig, opts: &RunOptions) -> Result<VerifyReport, BenchError> {
    cfg.validate()?;
    let net = Network::build(&cfg.architecture)?;
    let n = net.graph.n_inputs();
    let fd = cfg.fd.unwrap_or_default();
    let points = sample_points(n, cfg.verify_points.max(1), opts.seed.unwrap_or(cfg.seed));
    let methods = cfg.run_methods();
    let mut checks = Vec::new();
    for op in cfg.operators() {
        let spec = op.resolve()?;
        let dec = decompose(&spec, None)?;
        for (k, x) in points.iter().enumerate() {
            let chain = oracle_chain(&net.graph, &spec, &dec, x, &fd)?;
            let mut special: Option<f64> = None;
            if let (true, Some(mlp)) = (methods.contains(&Method::DofFused), net.mlp.as_ref()) {
                let v = dof_evaluate_mlp_fused(mlp, &dec, x)?.operator_value;
                special = Some(relative_diff(v, chain.dof));
            }
            if methods.contains(&Method::ForwardLaplacian) {
                let v = forward_laplacian(&net.graph, x)?.operator_value;
                special = Some(special.unwrap_or(0.0).max(relative_diff(v, chain.dof)));
            }
            checks.push(PointCheck { operator: op.label(), point: k, chain, special_err: special });
        }
    }
    let worst_exact = checks.iter().map(|c| c.chain.exact_err).fold(0.0, f64::max);
    let worst_fd = checks.iter().map(|c| c.chain.fd_err).fold(0.0, f64::max);
    Ok(VerifyReport { checks, worst_exact, worst_fd })
}
