//! Non-negative quadratic minimisation by block principal pivoting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::scalar::{lit, Real};

#[derive(Debug, Clone)]
pub struct BpvSolution<T: Real> {
    pub x: DVector<T>,
    pub iterations: usize,
    /// `true` when the single-exchange backup rule was needed.
    pub backup_used: bool,
}

/// Minimises `½ xᵀQx − rᵀx` subject to `x ≥ 0` for positive definite `Q`.
///
/// Full exchanges are tried while the infeasible count keeps shrinking, with
/// three extra attempts after it stalls; after that only the largest
/// infeasible index is exchanged.
pub fn nnls_bpv<T: Real>(q: &DMatrix<T>, r: &DVector<T>, max_iter: usize) -> Result<BpvSolution<T>> {
    let n = q.nrows();
    if q.ncols() != n || r.len() != n {
        return Err(Error::dim("bpv system", n, r.len()));
    }
    let scale = T::one() + r.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tol = lit::<T>(1e-12) * scale;
    let mut passive = vec![false; n];
    let mut best = n + 1;
    let mut spare = 3usize;
    let mut backup_used = false;
    for it in 1..=max_iter {
        let f: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let mut x = DVector::<T>::zeros(n);
        if !f.is_empty() {
            let qff = DMatrix::from_fn(f.len(), f.len(), |i, j| q[(f[i], f[j])]);
            let rf = DVector::from_fn(f.len(), |i, _| r[f[i]]);
            let xf = Cholesky::new(&qff, "bpv subproblem", 1e-12)?.solve_vec(&rf);
            for (k, &i) in f.iter().enumerate() {
                x[i] = xf[k];
            }
        }
        let y = q * &x - r;
        let bad: Vec<usize> = (0..n)
            .filter(|&i| if passive[i] { x[i] < -tol } else { y[i] < -tol })
            .collect();
        if bad.is_empty() {
            x.iter_mut().for_each(|v| *v = v.max(T::zero()));
            return Ok(BpvSolution {
                x,
                iterations: it,
                backup_used,
            });
        }
        if bad.len() < best {
            best = bad.len();
            spare = 3;
            bad.iter().for_each(|&i| passive[i] = !passive[i]);
        } else if spare > 0 {
            spare -= 1;
            bad.iter().for_each(|&i| passive[i] = !passive[i]);
        } else {
            backup_used = true;
            let i = *bad.last().unwrap();
            passive[i] = !passive[i];
        }
    }
    Err(Error::Cycling { iterations: max_iter })
}
