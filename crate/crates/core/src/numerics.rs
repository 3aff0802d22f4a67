//! Small dense linear algebra: symmetric matrices stored as one triangle,
//! a row-major rectangular matrix, and a cyclic Jacobi eigensolver.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Jacobi sweep budget before giving up.
pub const MAX_SWEEPS: usize = 100;

/// Symmetric `n x n` matrix. Only the lower triangle is stored, so
/// `get(i, j) == get(j, i)` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat<T> {
    dim: usize,
    packed: Vec<T>,
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
    hi * (hi + 1) / 2 + lo
}

impl<T: Scalar> SymMat<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, packed: vec![T::zero(); dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![T::one(); dim])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds from the lower triangle of `f(i, j)` (`j <= i`).
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut packed = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                packed.push(f(i, j));
            }
        }
        Self { dim, packed }
    }

    /// Builds from full rows, requiring exact symmetry and finite entries.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                if !rows[i][j].is_finite() {
                    return Err(Error::NonFiniteInput { what: "symmetric matrix" });
                }
                if rows[i][j] != rows[j][i] {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.packed[packed_index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.packed[packed_index(i, j)] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> T {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j).abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }

    pub fn frobenius(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                let v = self.get(i, j);
                acc = acc + v * v;
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.packed.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: other.dim });
        }
        Ok(Self {
            dim: self.dim,
            packed: self.packed.iter().zip(&other.packed).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub(crate) fn packed(&self) -> &[T] {
        &self.packed
    }
}

impl<T: Scalar> Serialize for SymMat<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for SymMat<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<T>>::deserialize(d)?;
        SymMat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch { expected: cols, found: bad.len() });
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, found: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(other.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, found: x.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `m * x` for a symmetric matrix.
pub fn matvec<T: Scalar>(m: &SymMat<T>, x: &[T]) -> Result<Vec<T>> {
    if m.dim() != x.len() {
        return Err(Error::DimensionMismatch { expected: m.dim(), found: x.len() });
    }
    Ok((0..m.dim())
        .map(|i| (0..m.dim()).fold(T::zero(), |acc, j| acc + m.get(i, j) * x[j]))
        .collect())
}

/// Eigen-decomposition `A = Σ_k values[k] · vectors[k] ⊗ vectors[k]`.
///
/// Values are sorted by descending absolute value (stable for ties) and each
/// eigenvector row has its first significant component positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> EigenPair<T> {
    pub fn reconstruct(&self) -> SymMat<T> {
        let n = self.values.len();
        SymMat::from_fn(n, |i, j| {
            (0..n).fold(T::zero(), |acc, k| {
                acc + self.values[k] * self.vectors.get(k, i) * self.vectors.get(k, j)
            })
        })
    }
}

/// Cyclic Jacobi eigensolver.
///
/// Converged when the Frobenius norm of the off-diagonal part drops to `tol`.
/// Exactly-zero off-diagonal entries are never rotated, so block-diagonal
/// inputs yield eigenvectors supported on a single block.
pub fn eigh<T: Scalar>(m: &SymMat<T>, tol: T) -> Result<EigenPair<T>> {
    if !m.is_finite() {
        return Err(Error::NonFiniteInput { what: "symmetric matrix" });
    }
    let n = m.dim();
    let mut a = Matrix::from_fn(n, n, |i, j| m.get(i, j));
    let mut v = Matrix::identity(n);

    let off_norm = |a: &Matrix<T>| {
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc = acc + a.get(i, j) * a.get(i, j);
                }
            }
        }
        acc.sqrt()
    };

    let two = T::lit(2.0);
    let mut converged = off_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (two * apq);
                let t = {
                    let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    if theta < T::zero() {
                        -t
                    } else {
                        t
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, T::zero());
                a.set(q, p, T::zero());
                // columns of `v` accumulate the rotation product
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        converged = off_norm(&a) <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps, residual: off_norm(&a).as_f64() });
    }

    let mut order: Vec<usize> = (0..n).collect();
    // descending |λ|, positive before negative on ties, otherwise stable
    order.sort_by(|&i, &j| {
        let (li, lj) = (a.get(i, i), a.get(j, j));
        lj.abs()
            .partial_cmp(&li.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(lj.partial_cmp(&li).unwrap_or(std::cmp::Ordering::Equal))
    });
    let values: Vec<T> = order.iter().map(|&k| a.get(k, k)).collect();
    let significant = T::lit(1e-8);
    let vectors = {
        let mut out = Matrix::zeros(n, n);
        for (row, &k) in order.iter().enumerate() {
            let col = v.column(k);
            let flip = col
                .iter()
                .find(|x| x.abs() > significant)
                .is_some_and(|&x| x < T::zero());
            for (j, &x) in col.iter().enumerate() {
                out.set(row, j, if flip { -x } else { x });
            }
        }
        out
    };
    Ok(EigenPair { values, vectors })
}

/// Default eigensolver tolerance, `1e-12 · ‖A‖_∞`.
pub fn default_eigh_tol<T: Scalar>(m: &SymMat<T>) -> T {
    let scale = m.norm_inf();
    let eps = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    eps * scale
}
