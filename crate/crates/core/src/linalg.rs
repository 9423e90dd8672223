//! Dense linear algebra helpers: pivot-checked Cholesky, reduced row echelon
//! form, Kronecker products and a few norms.
//!
//! Nothing in the crate forms an explicit inverse; systems are solved through
//! [`Cholesky`] factors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, tolerance, Real};

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Real> {
    l: DMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factorizes a symmetric positive definite matrix.
    ///
    /// A pivot `d_jj ≤ rel_tol · max_i A_ii` is treated as a loss of
    /// definiteness; the error carries the failing index and a crude
    /// condition estimate `(max pivot / min pivot)`.
    pub fn new(a: &DMatrix<T>, what: &str, rel_tol: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim(what, format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
        }
        let max_diag = (0..n).map(|i| a[(i, i)]).fold(T::zero(), |m, v| if v > m { v } else { m });
        let tol = tolerance::<T>(rel_tol) * if max_diag > T::zero() { max_diag } else { T::one() };
        let mut l = DMatrix::<T>::zeros(n, n);
        let mut min_pivot = T::max_value().unwrap_or_else(|| lit(f64::MAX));
        let mut max_pivot = T::zero();
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) || !d.is_finite() {
                let cond = if d > T::zero() { to_f64(max_pivot / d) } else { f64::INFINITY };
                return Err(Error::NotPositiveDefinite {
                    what: what.to_string(),
                    index: j,
                    condition: cond,
                });
            }
            min_pivot = min_pivot.min(d);
            max_pivot = max_pivot.max(d);
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        let _ = min_pivot;
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L Y = B` in place.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<T>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    /// Solves `Lᵀ Y = B` in place.
    pub fn solve_upper_mut(&self, b: &mut DMatrix<T>) {
        let n = self.dim();
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / self.l[(i, i)];
            }
        }
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m);
        DVector::from_column_slice(x.as_slice())
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        x
    }
}

/// Reduced row echelon form with partial pivoting.
#[derive(Debug, Clone)]
pub struct Rref<T: Real> {
    /// The reduced matrix; rows `rank..` are zero.
    pub reduced: DMatrix<T>,
    /// Row operations applied: `transform · input = reduced`.
    pub transform: DMatrix<T>,
    /// Pivot column of each of the first `rank` rows.
    pub pivots: Vec<usize>,
}

impl<T: Real> Rref<T> {
    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    /// Columns that are not pivots, in input order.
    pub fn free_columns(&self) -> Vec<usize> {
        let ncols = self.reduced.ncols();
        (0..ncols).filter(|c| !self.pivots.contains(c)).collect()
    }
}

/// Computes the RREF of `a`. Pivots smaller than `rel_tol · max|a|` are
/// treated as zero and entries below that threshold are flushed to zero.
pub fn rref<T: Real>(a: &DMatrix<T>, rel_tol: f64) -> Rref<T> {
    let (rows, cols) = a.shape();
    let mut r = a.clone();
    let mut e = DMatrix::<T>::identity(rows, rows);
    let scale = max_abs(a);
    let tol = tolerance::<T>(rel_tol) * if scale > T::zero() { scale } else { T::one() };
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..cols {
        if row == rows {
            break;
        }
        let (mut best, mut best_abs) = (row, r[(row, col)].abs());
        for i in (row + 1)..rows {
            let v = r[(i, col)].abs();
            if v > best_abs {
                best = i;
                best_abs = v;
            }
        }
        if best_abs <= tol {
            for i in row..rows {
                r[(i, col)] = T::zero();
            }
            continue;
        }
        r.swap_rows(row, best);
        e.swap_rows(row, best);
        let p = r[(row, col)];
        if p != T::one() {
            for j in 0..cols {
                r[(row, j)] /= p;
            }
            for j in 0..rows {
                e[(row, j)] /= p;
            }
        }
        for i in 0..rows {
            if i == row {
                continue;
            }
            let f = r[(i, col)];
            if f == T::zero() {
                continue;
            }
            for j in 0..cols {
                let v = r[(row, j)];
                r[(i, j)] -= f * v;
            }
            for j in 0..rows {
                let v = e[(row, j)];
                e[(i, j)] -= f * v;
            }
            r[(i, col)] = T::zero();
        }
        pivots.push(col);
        row += 1;
    }
    for v in r.iter_mut() {
        if v.abs() <= tol {
            *v = T::zero();
        }
    }
    Rref {
        reduced: r,
        transform: e,
        pivots,
    }
}

/// Kronecker product `a ⊗ b` (row-major block layout).
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::<T>::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == T::zero() {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn max_abs<T: Real>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

pub fn max_abs_vec<T: Real>(a: &DVector<T>) -> T {
    a.iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let half = lit::<T>(0.5);
    (a + a.transpose()) * half
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    let eig = SymmetricEigen::new(a.clone());
    eig.eigenvalues.iter().fold(eig.eigenvalues[0], |m, v| m.min(*v))
}

/// Numerical rank via symmetric eigenvalues of `A Aᵀ`-free SVD.
pub fn rank<T: Real>(a: &DMatrix<T>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(T::zero(), |m, v| m.max(*v));
    let tol = tolerance::<T>(rel_tol) * smax;
    svd.singular_values.iter().filter(|s| **s > tol).count()
}

pub fn select_rows<T: Real>(a: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

pub fn select_cols<T: Real>(a: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

pub fn select<T: Real>(a: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn select_vec<T: Real>(v: &DVector<T>, idx: &[usize]) -> DVector<T> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

pub fn all_finite<T: Real>(a: &DMatrix<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Vector norms used for incoherence diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Inf,
    One,
    Two,
}

impl Norm {
    pub fn apply<T: Real>(self, values: impl Iterator<Item = T>) -> T {
        match self {
            Norm::Inf => values.fold(T::zero(), |m, v| m.max(v.abs())),
            Norm::One => values.fold(T::zero(), |s, v| s + v.abs()),
            Norm::Two => values.fold(T::zero(), |s, v| s + v * v).sqrt(),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" => Ok(Norm::Inf),
            "one" => Ok(Norm::One),
            "two" => Ok(Norm::Two),
            _ => Err(Error::Options(format!("unknown norm `{s}` (expected inf, one or two)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let chol = Cholesky::new(&a, "a", 1e-12).unwrap();
        let b = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let x = chol.solve(&b);
        assert_relative_eq!(&a * x, b, epsilon = 1e-12);
        let l = chol.l();
        assert_relative_eq!(l * l.transpose(), a, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rejects_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match Cholesky::new(&a, "omega", 1e-12) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rref_of_canonical_form_is_identity_operation() {
        let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, -1.0, -1.0, 0.0, 1.0, -1.0, 0.0]);
        let r = rref(&c, 1e-10);
        assert_eq!(r.pivots, vec![0, 1]);
        assert_eq!(r.reduced, c);
        assert_eq!(r.free_columns(), vec![2, 3]);
    }

    #[test]
    fn rref_tracks_row_operations() {
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 4.0, 1.0, 1.0, 1.0, 1.0, 3.0, 5.0]);
        let r = rref(&c, 1e-10);
        assert_eq!(r.rank(), 2);
        assert_relative_eq!(&r.transform * &c, r.reduced.clone(), epsilon = 1e-12);
    }

    #[test]
    fn kron_matches_definition() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let k = kron(&a, &b);
        assert_eq!(k, DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0]));
    }

    #[test]
    fn norms() {
        let v = [3.0, -4.0];
        assert_eq!(Norm::Inf.apply(v.iter().copied()), 4.0);
        assert_eq!(Norm::One.apply(v.iter().copied()), 7.0);
        assert_eq!(Norm::Two.apply(v.iter().copied()), 5.0);
    }
}
