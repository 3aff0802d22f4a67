use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("non-finite entry in {what}")]
    NonFiniteInput { what: &'static str },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("node {node} produced a non-finite {what}")]
    NonFinite { node: NodeId, what: &'static str },

    #[error("node {node} references {reference}, which does not precede it")]
    ForwardReference { node: NodeId, reference: NodeId },

    #[error("node {0} is not reachable from the output")]
    DeadNode(NodeId),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid network spec: {0}")]
    InvalidNetwork(String),

    #[error("decomposition does not belong to this operator (fingerprint {decomposition:#x} vs {operator:#x})")]
    DecompositionMismatch { decomposition: u64, operator: u64 },

    #[error("cost reports come from different runs ({left:#x} vs {right:#x})")]
    FingerprintMismatch { left: u64, right: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;
