use std::path::Path;

use dof_core::costmodel::Method;
use dof_core::networks::{BlockMlpSpec, MlpSpec};
use dof_core::operator::OperatorConfig;
use dof_core::verify::FdConfig;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Batch size used when a config does not set one.
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpSpec),
    BlockMlp(BlockMlpSpec),
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp(s) => s.input_dim(),
            Architecture::BlockMlp(s) => s.input_dim(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Architecture::Mlp(s) => {
                let w: Vec<String> = s.widths.iter().map(ToString::to_string).collect();
                format!("mlp {}", w.join("-"))
            }
            Architecture::BlockMlp(s) => format!(
                "block_mlp {}x{} hidden {:?} d_max {}",
                s.n_blocks, s.block_input_dim, s.widths, s.block_output_dim
            ),
        }
    }
}

/// One operator or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operators {
    One(OperatorConfig<f64>),
    Many(Vec<OperatorConfig<f64>>),
}

impl Operators {
    pub fn as_slice(&self) -> &[OperatorConfig<f64>] {
        match self {
            Operators::One(op) => std::slice::from_ref(op),
            Operators::Many(ops) => ops,
        }
    }
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}

fn default_methods() -> Vec<Method> {
    vec![Method::Dof, Method::Hessian]
}

fn default_verify_points() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub architecture: Architecture,
    pub operator: Operators,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Seed for the evaluation points.
    #[serde(default)]
    pub seed: u64,
    /// Points checked by `bench verify` per operator.
    #[serde(default = "default_verify_points")]
    pub verify_points: usize,
    #[serde(default)]
    pub fd: Option<FdConfig>,
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn operators(&self) -> &[OperatorConfig<f64>] {
        self.operator.as_slice()
    }

    /// Methods in run order, with the Hessian baseline always present.
    pub fn run_methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for m in self.methods.iter().copied().chain([Method::Hessian]) {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.operators().is_empty() {
            return bad("at least one operator is required".into());
        }
        let n = self.architecture.input_dim();
        for op in self.operators() {
            if op.dim() != n {
                return bad(format!("operator {} has dimension {} but the architecture takes {n} inputs", op.label(), op.dim()));
            }
            let spec = op.resolve().map_err(|e| BenchError::Config(e.to_string()))?;
            if self.methods.contains(&Method::DofFused) {
                if !matches!(self.architecture, Architecture::Mlp(_)) {
                    return bad("dof_fused needs an mlp architecture".into());
                }
                if spec.has_first_order() || spec.c != 0.0 {
                    return bad(format!("dof_fused handles second-order operators only; {} has b or c terms", op.label()));
                }
            }
            if self.methods.contains(&Method::ForwardLaplacian) {
                let identity = spec.a == dof_core::SymMat::identity(n);
                if !identity || spec.has_first_order() || spec.c != 0.0 {
                    return bad(format!("forward_laplacian needs A = I, b = 0, c = 0; {} is not the Laplacian", op.label()));
                }
            }
        }
        if let Some(fd) = &self.fd {
            if !fd.h.is_finite() || fd.h <= 0.0 {
                return bad("fd.h must be positive and finite".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DENSE: &str = r#"{
        "architecture": {"type": "mlp", "widths": [4, 8, 1], "seed": 3},
        "operator": {"generator": {"kind": "elliptic", "structure": "dense", "n": 4, "seed": 1}},
        "methods": ["dof", "dof_fused", "hessian"]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = BenchConfig::from_json(DENSE).unwrap();
        assert_eq!(cfg.batch, DEFAULT_BATCH);
        assert_eq!(cfg.repeats, DEFAULT_REPEATS);
        assert_eq!(cfg.operators().len(), 1);
        assert_eq!(cfg.run_methods(), vec![Method::Dof, Method::DofFused, Method::Hessian]);
    }

    #[test]
    fn hessian_added_as_baseline() {
        let cfg = BenchConfig::from_json(&DENSE.replace(r#"["dof", "dof_fused", "hessian"]"#, r#"["hvp"]"#)).unwrap();
        assert_eq!(cfg.run_methods(), vec![Method::Hvp, Method::Hessian]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let text = DENSE.replace(r#""n": 4"#, r#""n": 8"#);
        assert!(matches!(BenchConfig::from_json(&text), Err(BenchError::Config(_))));
    }

    #[test]
    fn laplacian_method_needs_identity() {
        let text = DENSE.replace(r#""dof_fused""#, r#""forward_laplacian""#);
        assert!(BenchConfig::from_json(&text).is_err());
        let text = text.replace(r#""kind": "elliptic""#, r#""kind": "laplacian""#);
        assert!(BenchConfig::from_json(&text).is_ok());
    }

    #[test]
    fn zero_batch_rejected() {
        let text = DENSE.replace(r#""methods""#, r#""batch": 0, "methods""#);
        assert!(BenchConfig::from_json(&text).is_err());
    }
}
