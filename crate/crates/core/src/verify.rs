//! Finite-difference oracles and cross-method agreement checks.

use serde::{Deserialize, Serialize};

use crate::baseline::HessianEngine;
use crate::dof::{DofEngine, DofScratch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::SymMat;
use crate::operator::{apply_to_hessian, Decomposition, OperatorSpec};
use crate::scalar::Scalar;

/// Tolerance for comparisons between exact methods (roundoff only).
pub const EXACT_TOL: f64 = 1e-10;
/// Tolerance for comparisons against finite differences (truncation limited).
pub const FD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdScheme {
    #[default]
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub h: f64,
    #[serde(default)]
    pub scheme: FdScheme,
    pub richardson: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { h: 1e-4, scheme: FdScheme::Central, richardson: true }
    }
}

impl FdConfig {
    pub fn with_h(h: f64) -> Self {
        Self { h, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::NonFiniteInput { what: "finite-difference step" });
        }
        Ok(())
    }
}

/// `|a - b| / max(1, |b|)`
pub fn relative_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

struct Probe<'a, T> {
    g: &'a Graph<T>,
    x: Vec<T>,
    values: Vec<T>,
}

impl<'a, T: Scalar> Probe<'a, T> {
    fn new(g: &'a Graph<T>, x: &[T]) -> Result<Self> {
        if x.len() != g.n_inputs() {
            return Err(Error::DimensionMismatch { expected: g.n_inputs(), found: x.len() });
        }
        Ok(Self { g, x: x.to_vec(), values: Vec::new() })
    }

    fn step(&self, i: usize, h: f64) -> T {
        T::lit(h * self.x[i].as_f64().abs().max(1.0))
    }

    fn at(&mut self, shifts: &[(usize, T)]) -> Result<T> {
        let saved: Vec<T> = shifts.iter().map(|&(i, _)| self.x[i]).collect();
        for &(i, d) in shifts {
            self.x[i] = self.x[i] + d;
        }
        let y = self.g.evaluate_with(&self.x, &mut self.values);
        for (&(i, _), v) in shifts.iter().zip(saved) {
            self.x[i] = v;
        }
        y
    }

    fn d1(&mut self, i: usize, h: f64) -> Result<T> {
        let hi = self.step(i, h);
        Ok((self.at(&[(i, hi)])? - self.at(&[(i, -hi)])?) / (hi + hi))
    }

    fn d2(&mut self, i: usize, k: usize, h: f64, f0: T) -> Result<T> {
        let hi = self.step(i, h);
        if i == k {
            let two = T::lit(2.0);
            return Ok((self.at(&[(i, hi)])? - two * f0 + self.at(&[(i, -hi)])?) / (hi * hi));
        }
        let hk = self.step(k, h);
        let pp = self.at(&[(i, hi), (k, hk)])?;
        let pm = self.at(&[(i, hi), (k, -hk)])?;
        let mp = self.at(&[(i, -hi), (k, hk)])?;
        let mm = self.at(&[(i, -hi), (k, -hk)])?;
        Ok((pp - pm - mp + mm) / (T::lit(4.0) * hi * hk))
    }
}

fn extrapolate<T: Scalar>(cfg: &FdConfig, mut f: impl FnMut(f64) -> Result<T>) -> Result<T> {
    let coarse = f(cfg.h)?;
    if !cfg.richardson {
        return Ok(coarse);
    }
    let fine = f(0.5 * cfg.h)?;
    Ok((T::lit(4.0) * fine - coarse) / T::lit(3.0))
}

/// Central-difference gradient.
pub fn fd_gradient<T: Scalar>(g: &Graph<T>, x: &[T], cfg: &FdConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    let mut probe = Probe::new(g, x)?;
    (0..x.len()).map(|i| extrapolate(cfg, |h| probe.d1(i, h))).collect()
}

/// Second central differences; the off-diagonal stencil is symmetric in
/// `(i, k)`, so the result is symmetric by construction.
pub fn fd_hessian<T: Scalar>(g: &Graph<T>, x: &[T], cfg: &FdConfig) -> Result<SymMat<T>> {
    cfg.validate()?;
    let mut probe = Probe::new(g, x)?;
    let f0 = g.evaluate(x)?;
    let n = x.len();
    let mut h = SymMat::zeros(n);
    for i in 0..n {
        for k in 0..=i {
            h.set(i, k, extrapolate(cfg, |step| probe.d2(i, k, step, f0))?);
        }
    }
    Ok(h)
}

/// `ℒφ(x)` from finite-difference derivatives.
pub fn fd_operator<T: Scalar>(g: &Graph<T>, spec: &OperatorSpec<T>, x: &[T], cfg: &FdConfig) -> Result<T> {
    let hess = fd_hessian(g, x, cfg)?;
    let grad = if spec.has_first_order() { fd_gradient(g, x, cfg)? } else { vec![T::zero(); x.len()] };
    apply_to_hessian(spec, &hess, &grad, g.evaluate(x)?)
}

/// Operator values of every method at one point, and their disagreements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub value: f64,
    pub dof: f64,
    pub hessian: f64,
    pub hvp: f64,
    pub fd: f64,
    /// `max |dof - exact baseline| / max(1, |φ|)`
    pub exact_err: f64,
    /// `max |method - fd| / max(1, |fd|)`
    pub fd_err: f64,
}

impl OracleReport {
    pub fn passes(&self) -> bool {
        self.exact_err < EXACT_TOL && self.fd_err < FD_TOL
    }
}

/// DOF, full Hessian, HVP and finite differences at one point.
pub fn oracle_chain<T: Scalar>(
    g: &Graph<T>,
    spec: &OperatorSpec<T>,
    dec: &Decomposition<T>,
    x: &[T],
    cfg: &FdConfig,
) -> Result<OracleReport> {
    let dof = DofEngine::new(g, dec, spec)?.evaluate(x, &mut DofScratch::new())?;
    let engine = HessianEngine::new(g);
    let hess = engine.operator(spec, x)?;
    let hvp = engine.operator_hvp(dec, spec, x)?;
    let fd = fd_operator(g, spec, x, cfg)?.as_f64();
    let value = dof.value.as_f64();
    let d = dof.operator_value.as_f64();
    let h = hess.operator_value.map_or(f64::NAN, |v| v.as_f64());
    let v = hvp.operator_value.map_or(f64::NAN, |v| v.as_f64());
    let scale = value.abs().max(1.0);
    let exact_err = ((d - h).abs() / scale).max((d - v).abs() / scale);
    let fd_err = relative_diff(d, fd).max(relative_diff(h, fd));
    Ok(OracleReport { value, dof: d, hessian: h, hvp: v, fd, exact_err, fd_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, NodeId, OpKind};

    fn x(k: usize) -> NodeId {
        NodeId::input(k)
    }

    fn norm_sq(n: usize) -> Graph<f64> {
        Graph::new(n, vec![OpKind::SumProduct { terms: (0..n).map(|k| vec![x(k), x(k)]).collect() }]).unwrap()
    }

    #[test]
    fn gradient_of_norm() {
        let g = fd_gradient(&norm_sq(2), &[1.0f64, 2.0], &FdConfig::default()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn affine_gradient_exact() {
        let g = Graph::new(2, vec![OpKind::Affine { weights: vec![(x(0), 0.25), (x(1), -3.0)], bias: 2.0 }]).unwrap();
        let grad = fd_gradient(&g, &[0.5f64, 0.5], &FdConfig::default()).unwrap();
        assert!((grad[0] - 0.25).abs() < 1e-10 && (grad[1] + 3.0).abs() < 1e-10);
    }

    #[test]
    fn cubic_hessian() {
        let g = Graph::new(
            2,
            vec![
                OpKind::Unary { f: Activation::Square, arg: x(0) },
                OpKind::Mul { lhs: NodeId::internal(0), rhs: x(1) },
            ],
        )
        .unwrap();
        let h = fd_hessian(&g, &[1.0, 1.0], &FdConfig::default()).unwrap();
        let want = [[2.0f64, 2.0], [2.0, 0.0]];
        for i in 0..2 {
            for k in 0..2 {
                assert!((h.get(i, k) - want[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn laplacian_and_signature() {
        let g = norm_sq(4);
        let lap = fd_operator(&g, &OperatorSpec::laplacian(4), &[0.1, 0.2, 0.3, 0.4], &FdConfig::default()).unwrap();
        assert!((lap - 8.0).abs() < 1e-6);
        let general = OperatorSpec::second_order(SymMat::from_diag(&[-1.0, 1.0, 1.0, 1.0]));
        let v = fd_operator(&g, &general, &[0.1, 0.2, 0.3, 0.4], &FdConfig::default()).unwrap();
        assert!((v - 4.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(fd_gradient(&norm_sq(1), &[0.0], &FdConfig::with_h(0.0)).is_err());
    }
}
