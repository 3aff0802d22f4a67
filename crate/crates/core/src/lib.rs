//! Forward propagation of second-order differential operators through
//! scalar computation graphs, with a Hessian-based reference for comparison
//! and instrumented cost counters for both.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the benchmarks use.

pub mod baseline;
pub mod costmodel;
pub mod dof;
pub mod error;
pub mod graph;
pub mod networks;
pub mod numerics;
pub mod operator;
pub mod scalar;
pub mod verify;

pub use baseline::{build_adjoint, hessian_full, operator_via_hessian, operator_via_hvp, HessianEngine, HessianResult};
pub use costmodel::{summarize, CostReport, Method, RatioSummary};
pub use dof::{dof_evaluate, dof_evaluate_mlp_fused, forward_laplacian, DofEngine, DofResult, DofScratch};
pub use error::{Error, Result};
pub use graph::{Activation, EdgeStats, Graph, NodeId, OpKind};
pub use networks::{build_block_mlp, build_mlp, BlockMlpSpec, Mlp, MlpSpec};
pub use numerics::{Matrix, SymMat};
pub use operator::{decompose, CoefficientKind, Decomposition, OperatorSpec, Structure};
pub use scalar::Scalar;

pub type Real = f64;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type SymMat64 = SymMat<f64>;
pub type Matrix64 = Matrix<f64>;
pub type OperatorSpec64 = OperatorSpec<f64>;
pub type Decomposition64 = Decomposition<f64>;
pub type Mlp64 = Mlp<f64>;
pub type DofResult64 = DofResult<f64>;
pub type HessianResult64 = HessianResult<f64>;
