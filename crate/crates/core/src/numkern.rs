//! Dense symmetric kernels shared by the estimators.
//!
//! All matrices handled here are small: worker blocks of a single task
//! (rarely more than a few dozen rows) and latent feature blocks. The
//! implementations therefore favour clarity and precise pivot diagnostics
//! over blocked performance tricks. Factorizations are Cholesky based; no
//! routine forms an explicit inverse unless asked to.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check in [`SymMatrix::from_rows`].
const SYMMETRY_RTOL: f64 = 1e-12;

/// Pivot threshold factor for [`cholesky`]: a pivot must exceed this times
/// the largest diagonal entry of the input.
const PIVOT_RTOL: f64 = 1e-12;

/// Dense symmetric matrix stored row-major as a full square.
///
/// Symmetry is enforced on construction and maintained by every mutator,
/// so `get(i, j) == get(j, i)` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Zero matrix of the given order.
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    /// `c` times the identity.
    pub fn scaled_identity(n: usize, c: f64) -> Self {
        let mut m = SymMatrix::zeros(n);
        for k in 0..n {
            m.data[k * n + k] = c;
        }
        m
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        SymMatrix::scaled_identity(n, 1.0)
    }

    /// Builds from nested rows, validating squareness and symmetry.
    ///
    /// Entries that disagree across the diagonal by more than a relative
    /// `1e-12` are rejected; smaller disagreements are symmetrized.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: row.len() });
            }
        }
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let a = rows[i][j];
                let b = rows[j][i];
                let tol = SYMMETRY_RTOL * libm::fabs(a).max(libm::fabs(b));
                if libm::fabs(a - b) > tol {
                    return Err(Error::InvalidData(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
                let v = 0.5 * (a + b);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        Ok(m)
    }

    /// Builds a symmetric matrix from `f(i, j)` evaluated on `i <= j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    /// Matrix order.
    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets entry `(i, j)` and its mirror.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Adds `c` to every diagonal entry.
    pub fn add_diagonal(&mut self, c: f64) {
        for k in 0..self.n {
            self.data[k * self.n + k] += c;
        }
    }

    /// Accumulates the rank-one update `self += c * v * v^T`.
    pub fn rank_one_update(&mut self, v: &[f64], c: f64) {
        debug_assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            let ci = c * v[i];
            for j in 0..self.n {
                self.data[i * self.n + j] += ci * v[j];
            }
        }
    }

    /// Accumulates `self += c * other`.
    pub fn add_scaled(&mut self, other: &SymMatrix, c: f64) {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// Multiplies every entry by `c`.
    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    /// `x^T * self * x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mx = self.matvec(x);
        dot(x, &mx)
    }

    /// Sum of the diagonal.
    pub fn trace(&self) -> f64 {
        (0..self.n).map(|k| self.data[k * self.n + k]).sum()
    }

    /// Largest diagonal entry, `0.0` for an empty matrix.
    pub fn max_diagonal(&self) -> f64 {
        let mut best = 0.0_f64;
        for k in 0..self.n {
            best = best.max(self.data[k * self.n + k]);
        }
        best
    }

    /// `trace(self * other)`, valid because both operands are symmetric.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        debug_assert_eq!(self.n, other.n);
        dot(&self.data, &other.data)
    }

    /// Copies the matrix out as nested rows.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for SymMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(
            (0..self.n).map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec()),
        )
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for SymMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        SymMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Extracts the principal submatrix picked out by `indices`.
///
/// `indices` must be strictly ascending and within the matrix order; a
/// principal submatrix of an SPD matrix is again SPD.
pub fn gather_submatrix(m: &SymMatrix, indices: &[usize]) -> Result<SymMatrix> {
    let n = m.order();
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidData(format!(
                "submatrix indices must be strictly ascending, got {} before {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(Error::IndexOutOfRange { index: last, bound: n });
        }
    }
    let k = indices.len();
    let mut out = SymMatrix::zeros(k);
    for (a, &i) in indices.iter().enumerate() {
        for (b, &j) in indices.iter().enumerate().skip(a) {
            let v = m.get(i, j);
            out.data[a * k + b] = v;
            out.data[b * k + a] = v;
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

/// Factors `m = L * L^T`.
///
/// Every pivot must exceed `1e-12` times the largest diagonal entry of
/// `m`; a smaller or non-finite pivot reports the failing index.
pub fn cholesky(m: &SymMatrix) -> Result<Cholesky> {
    let n = m.order();
    let tol = PIVOT_RTOL * m.max_diagonal();
    let mut l = vec![0.0; n * n];
    for k in 0..n {
        let mut d = m.get(k, k);
        for p in 0..k {
            d -= l[k * n + p] * l[k * n + p];
        }
        if !(d > tol) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot_index: k, pivot: d });
        }
        let lkk = libm::sqrt(d);
        l[k * n + k] = lkk;
        for r in (k + 1)..n {
            let mut s = m.get(r, k);
            for p in 0..k {
                s -= l[r * n + p] * l[k * n + p];
            }
            l[r * n + k] = s / lkk;
        }
    }
    Ok(Cholesky { n, l })
}

impl Cholesky {
    /// Order of the factored matrix.
    pub fn order(&self) -> usize {
        self.n
    }

    /// Solves `m * x = b` by forward and back substitution.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, actual: b.len() });
        }
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for p in 0..i {
                s -= self.l[i * n + p] * x[p];
            }
            x[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in (i + 1)..n {
                s -= self.l[p * n + i] * x[p];
            }
            x[i] = s / self.l[i * n + i];
        }
        Ok(x)
    }

    /// `log det m`, summed from the factor diagonal.
    pub fn logdet(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n {
            acc += libm::log(self.l[k * self.n + k]);
        }
        2.0 * acc
    }

    /// Explicit inverse, one solve per unit vector. Only sensible for the
    /// small orders handled here.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.n;
        let mut inv = SymMatrix::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e).expect("dimension is consistent by construction");
            e[j] = 0.0;
            for i in 0..n {
                inv.data[i * n + j] = col[i];
            }
        }
        // Symmetrize away substitution round-off.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (inv.data[i * n + j] + inv.data[j * n + i]);
                inv.data[i * n + j] = v;
                inv.data[j * n + i] = v;
            }
        }
        inv
    }
}

/// Solves `m * x = rhs` for an SPD `m`.
pub fn spd_solve(m: &SymMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    cholesky(m)?.solve(rhs)
}

/// `log det m` for an SPD `m`.
pub fn spd_logdet(m: &SymMatrix) -> Result<f64> {
    Ok(cholesky(m)?.logdet())
}

/// Central finite-difference gradient of `f` at `x0` with step `h`.
///
/// Serves as the model-free oracle the analytic gradients are checked
/// against. Errors if `h` is not positive and finite, or if any
/// evaluation of `f` is non-finite.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for k in 0..x0.len() {
        x[k] = x0[k] + h;
        let fp = f(&x);
        x[k] = x0[k] - h;
        let fm = f(&x);
        x[k] = x0[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to a non-finite value near coordinate {k}"
            )));
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
