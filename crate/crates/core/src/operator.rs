//! Second-order operators `ℒφ = Σ aᵢⱼ ∂²ᵢⱼφ + Σ bᵢ ∂ᵢφ + cφ` with point-constant
//! coefficients, and the signed factorisation `A = LᵀDL`.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{default_eigh_tol, eigh, Matrix, SymMat};
use crate::scalar::Scalar;

/// Relative threshold below which eigenvalues count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec<T> {
    pub a: SymMat<T>,
    pub b: Vec<T>,
    pub c: T,
}

impl<T: Scalar> OperatorSpec<T> {
    pub fn new(a: SymMat<T>, b: Vec<T>, c: T) -> Result<Self> {
        if b.len() != a.dim() {
            return Err(Error::DimensionMismatch { expected: a.dim(), found: b.len() });
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::NonFiniteInput { what: "operator coefficients" });
        }
        Ok(Self { a, b, c })
    }

    /// Pure second-order operator (`b = 0`, `c = 0`).
    pub fn second_order(a: SymMat<T>) -> Self {
        let n = a.dim();
        Self { a, b: vec![T::zero(); n], c: T::zero() }
    }

    /// The Laplacian, `A = I`.
    pub fn laplacian(n: usize) -> Self {
        Self::second_order(SymMat::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn has_first_order(&self) -> bool {
        self.b.iter().any(|&v| v != T::zero())
    }

    /// Identifies `A` alone; decompositions are keyed on it.
    pub fn a_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.a.dim().hash(&mut h);
        for v in self.a.packed() {
            v.fingerprint_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.a_fingerprint().hash(&mut h);
        for v in &self.b {
            v.fingerprint_bits().hash(&mut h);
        }
        self.c.fingerprint_bits().hash(&mut h);
        h.finish()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct OperatorDoc<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    a: SymMat<T>,
    #[serde(default)]
    b: Option<Vec<T>>,
    #[serde(default)]
    c: Option<T>,
}

impl<T: Scalar> Serialize for OperatorSpec<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OperatorDoc { kind: None, a: self.a.clone(), b: Some(self.b.clone()), c: Some(self.c) }.serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for OperatorSpec<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = OperatorDoc::<T>::deserialize(d)?;
        let n = doc.a.dim();
        OperatorSpec::new(doc.a, doc.b.unwrap_or_else(|| vec![T::zero(); n]), doc.c.unwrap_or_else(T::zero))
            .map_err(serde::de::Error::custom)
    }
}

/// `A = LᵀDL` with `L` of shape `r × N` and `D = diag(d)`, `d ∈ {−1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub l: Matrix<T>,
    pub d: Vec<i8>,
    /// Retained eigenvalues, aligned with the rows of `l`.
    pub eigenvalues: Vec<T>,
    source: u64,
}

impl<T: Scalar> Decomposition<T> {
    /// `L = I`, `D = I`: the Laplacian.
    pub fn identity(n: usize) -> Self {
        Self {
            l: Matrix::identity(n),
            d: vec![1; n],
            eigenvalues: vec![T::one(); n],
            source: OperatorSpec::<T>::laplacian(n).a_fingerprint(),
        }
    }

    pub fn rank(&self) -> usize {
        self.l.rows()
    }

    pub fn n(&self) -> usize {
        self.l.cols()
    }

    pub fn source_fingerprint(&self) -> u64 {
        self.source
    }

    /// All retained signs are `+1`, i.e. `A` is positive semidefinite.
    pub fn is_elliptic(&self) -> bool {
        self.d.iter().all(|&s| s == 1)
    }

    pub fn reconstruct(&self) -> SymMat<T> {
        let n = self.n();
        SymMat::from_fn(n, |i, j| {
            (0..self.rank()).fold(T::zero(), |acc, k| {
                let v = self.l.get(k, i) * self.l.get(k, j);
                if self.d[k] < 0 {
                    acc - v
                } else {
                    acc + v
                }
            })
        })
    }

    /// Least-squares solve of `L ∇φ = g`. Rows of `L` are mutually orthogonal,
    /// so this is a scaled back-projection.
    pub fn recover_gradient(&self, g: &[T]) -> Result<Vec<T>> {
        if g.len() != self.rank() {
            return Err(Error::DimensionMismatch { expected: self.rank(), found: g.len() });
        }
        let mut out = vec![T::zero(); self.n()];
        for (k, &gk) in g.iter().enumerate() {
            let row = self.l.row(k);
            let norm2: T = row.iter().map(|&v| v * v).sum();
            let scale = gk / norm2;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + scale * v;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_against(&self, spec: &OperatorSpec<T>) -> Result<()> {
        if self.n() != spec.dim() {
            return Err(Error::DimensionMismatch { expected: spec.dim(), found: self.n() });
        }
        let fp = spec.a_fingerprint();
        if fp != self.source {
            return Err(Error::DecompositionMismatch { decomposition: self.source, operator: fp });
        }
        Ok(())
    }
}

/// Factors `spec.a` through its eigen-decomposition, `L = |Σ|^{1/2} S`,
/// `D = sgn(Σ)`, dropping eigenvalues with `|λ| <= rank_tol`.
///
/// `rank_tol` defaults to `1e-10 · ‖A‖_∞`.
pub fn decompose<T: Scalar>(spec: &OperatorSpec<T>, rank_tol: Option<T>) -> Result<Decomposition<T>> {
    let a = &spec.a;
    let eig = eigh(a, default_eigh_tol(a))?;
    let tol = rank_tol.unwrap_or_else(|| T::lit(DEFAULT_RANK_TOL) * a.norm_inf());
    let n = a.dim();
    let keep: Vec<usize> = (0..n).filter(|&k| eig.values[k].abs() > tol).collect();
    let mut l = Matrix::zeros(keep.len(), n);
    let mut d = Vec::with_capacity(keep.len());
    let mut eigenvalues = Vec::with_capacity(keep.len());
    for (row, &k) in keep.iter().enumerate() {
        let lambda = eig.values[k];
        let scale = lambda.abs().sqrt();
        for (dst, &v) in l.row_mut(row).iter_mut().zip(eig.vectors.row(k)) {
            *dst = scale * v;
        }
        d.push(if lambda < T::zero() { -1 } else { 1 });
        eigenvalues.push(lambda);
    }
    Ok(Decomposition { l, d, eigenvalues, source: spec.a_fingerprint() })
}

/// `Σᵢⱼ aᵢⱼ hᵢⱼ + Σᵢ bᵢ gradᵢ + c·value`, the Hessian-side definition of `ℒφ`.
pub fn apply_to_hessian<T: Scalar>(spec: &OperatorSpec<T>, h: &SymMat<T>, grad: &[T], value: T) -> Result<T> {
    let n = spec.dim();
    if h.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: h.dim() });
    }
    if grad.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: grad.len() });
    }
    let mut acc = T::zero();
    for i in 0..n {
        acc = acc + spec.a.get(i, i) * h.get(i, i);
        for j in 0..i {
            let t = spec.a.get(i, j) * h.get(i, j);
            acc = acc + t + t;
        }
    }
    for (b, g) in spec.b.iter().zip(grad) {
        acc = acc + *b * *g;
    }
    Ok(acc + spec.c * value)
}

/// Multiplications spent by [`apply_to_hessian`].
pub fn contraction_mults<T: Scalar>(spec: &OperatorSpec<T>) -> u64 {
    let n = spec.dim() as u64;
    let mut m = n * (n + 1) / 2;
    if spec.has_first_order() {
        m += n;
    }
    if spec.c != T::zero() {
        m += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    /// `A = ααᵀ`, α square standard normal.
    Elliptic,
    /// `A = α'α'ᵀ`, α' with half as many columns.
    LowRank,
    /// `A = diag(s)`, `s₀ = −1`, `sᵢ = 1` otherwise.
    General,
    /// `A = I`.
    Laplacian,
}

impl CoefficientKind {
    pub fn label(self) -> &'static str {
        match self {
            CoefficientKind::Elliptic => "elliptic",
            CoefficientKind::LowRank => "low_rank",
            CoefficientKind::General => "general",
            CoefficientKind::Laplacian => "laplacian",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Dense,
    /// Block-diagonal; every block repeats one small factor.
    Block,
}

pub const DEFAULT_BLOCK_SIZE: usize = 4;

/// Reproducible benchmark coefficient recipe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: CoefficientKind,
    #[serde(default)]
    pub structure: Structure,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
}

impl GeneratorSpec {
    pub fn build<T: Scalar>(&self) -> Result<OperatorSpec<T>> {
        make_coefficients_with_block(self.kind, self.structure, self.n, self.seed, self.block_size.unwrap_or(DEFAULT_BLOCK_SIZE))
    }

    pub fn label(&self) -> String {
        match self.structure {
            Structure::Dense => self.kind.label().to_string(),
            Structure::Block => format!("{}-block", self.kind.label()),
        }
    }
}

/// Either an explicit operator or a generator recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub enum OperatorConfig<T> {
    Generator { generator: GeneratorSpec },
    Explicit(OperatorSpec<T>),
}

impl<T: Scalar> OperatorConfig<T> {
    pub fn resolve(&self) -> Result<OperatorSpec<T>> {
        match self {
            OperatorConfig::Generator { generator } => generator.build(),
            OperatorConfig::Explicit(spec) => Ok(spec.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OperatorConfig::Generator { generator } => generator.n,
            OperatorConfig::Explicit(spec) => spec.dim(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            OperatorConfig::Generator { generator } => generator.label(),
            OperatorConfig::Explicit(_) => "explicit".to_string(),
        }
    }
}

/// Benchmark coefficient matrices; block structure uses 4×4 blocks.
pub fn make_coefficients<T: Scalar>(kind: CoefficientKind, structure: Structure, n: usize, seed: u64) -> Result<OperatorSpec<T>> {
    make_coefficients_with_block(kind, structure, n, seed, DEFAULT_BLOCK_SIZE)
}

pub fn make_coefficients_with_block<T: Scalar>(
    kind: CoefficientKind,
    structure: Structure,
    n: usize,
    seed: u64,
    block_size: usize,
) -> Result<OperatorSpec<T>> {
    if n == 0 {
        return Err(Error::InvalidOperator("dimension must be positive".into()));
    }
    let (block, blocks) = match structure {
        Structure::Dense => (n, 1),
        Structure::Block => {
            if block_size == 0 || !n.is_multiple_of(block_size) {
                return Err(Error::InvalidOperator(format!(
                    "dimension {n} is not a multiple of block size {block_size}"
                )));
            }
            (block_size, n / block_size)
        }
    };
    if kind == CoefficientKind::LowRank && block < 2 {
        return Err(Error::InvalidOperator("low-rank coefficients need blocks of size >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor_cols = match kind {
        CoefficientKind::Elliptic => block,
        CoefficientKind::LowRank => block / 2,
        CoefficientKind::General | CoefficientKind::Laplacian => 0,
    };
    let factor: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..factor_cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let local = |i: usize, j: usize| -> f64 {
        match kind {
            CoefficientKind::Elliptic | CoefficientKind::LowRank => {
                factor[i].iter().zip(&factor[j]).map(|(a, b)| a * b).sum()
            }
            CoefficientKind::General => match (i == j, i) {
                (true, 0) => -1.0,
                (true, _) => 1.0,
                _ => 0.0,
            },
            CoefficientKind::Laplacian => f64::from(u8::from(i == j)),
        }
    };
    let a = SymMat::from_fn(n, |i, j| {
        let (bi, bj) = (i / block, j / block);
        if bi != bj || bi >= blocks {
            T::zero()
        } else {
            T::lit(local(i % block, j % block))
        }
    });
    Ok(OperatorSpec::second_order(a))
}
