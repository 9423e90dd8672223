//! Constrained least-squares problem after eliminating fixed variables.
//!
//! With fixed set `I` and remaining set `F`, the constraints `C x = 0`
//! become `C_F x_F = −C_I x_I`. The reduced row echelon form of `C_F` gives an
//! independent row set `R x_F = r` and a parameterisation
//! `x_F = x0 + S z`, where `z` collects the non-pivot coordinates. The
//! weighting matrix of `x_F` is the Schur complement
//! `Ω_FF − Ω_FI Ω_II⁻¹ Ω_IF`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{rref, select, select_cols, select_vec, symmetrize, Cholesky};
use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Clone)]
pub(crate) struct ReducedProblem<T: Real> {
    pub fixed: Vec<usize>,
    pub var: Vec<usize>,
    pub omega: DMatrix<T>,
    /// `r = rhs_map · x_I`.
    rhs_map: DMatrix<T>,
    /// Rows that must vanish for the fixed values to be consistent.
    consistency: DMatrix<T>,
    pub r: DMatrix<T>,
    /// Positions within `var` of pivot and non-pivot coordinates.
    pub pivots: Vec<usize>,
    pub nonpivots: Vec<usize>,
    pub s: DMatrix<T>,
}

impl<T: Real> ReducedProblem<T> {
    pub fn new(c: &DMatrix<T>, omega: &DMatrix<T>, fixed: &[usize]) -> Result<Self> {
        let d = c.ncols();
        let mut fixed: Vec<usize> = fixed.to_vec();
        fixed.sort_unstable();
        fixed.dedup();
        if let Some(&bad) = fixed.iter().find(|&&i| i >= d) {
            return Err(Error::dim("immutable index", format!("< {d}"), bad));
        }
        let mut is_fixed = vec![false; d];
        fixed.iter().for_each(|&i| is_fixed[i] = true);
        let var: Vec<usize> = (0..d).filter(|&i| !is_fixed[i]).collect();

        let omega_r = if fixed.is_empty() {
            omega.clone()
        } else {
            let o_ii = select(omega, &fixed, &fixed);
            let chol = Cholesky::new(&o_ii, "covariance of immutable forecasts", 1e-12)?;
            let o_if = select(omega, &fixed, &var);
            let w = chol.solve_lower(&o_if);
            symmetrize(&(select(omega, &var, &var) - w.transpose() * w))
        };

        let c_f = select_cols(c, &var);
        let neg_c_i = -select_cols(c, &fixed);
        let red = rref(&c_f, 1e-10);
        let rank = red.rank();
        let rows = c.nrows();
        let e_top = red.transform.rows(0, rank).into_owned();
        let e_bot = red.transform.rows(rank, rows - rank).into_owned();
        let r = red.reduced.rows(0, rank).into_owned();
        let pivots = red.pivots.clone();
        let nonpivots = red.free_columns();
        let mut s = DMatrix::<T>::zeros(var.len(), nonpivots.len());
        for (row, &p) in pivots.iter().enumerate() {
            for (j, &np) in nonpivots.iter().enumerate() {
                let v = r[(row, np)];
                if v != T::zero() {
                    s[(p, j)] = -v;
                }
            }
        }
        for (j, &np) in nonpivots.iter().enumerate() {
            s[(np, j)] = T::one();
        }
        Ok(Self {
            rhs_map: &e_top * &neg_c_i,
            consistency: &e_bot * &neg_c_i,
            fixed,
            var,
            omega: omega_r,
            r,
            pivots,
            nonpivots,
            s,
        })
    }

    pub fn rank(&self) -> usize {
        self.r.nrows()
    }

    /// Right-hand side `r` and offset `x0` for the given fixed values;
    /// fails when the fixed values contradict the constraints.
    pub fn affine(&self, xhat: &DVector<T>) -> Result<(DVector<T>, DVector<T>)> {
        let xi = select_vec(xhat, &self.fixed);
        if !self.fixed.is_empty() && self.consistency.nrows() > 0 {
            let resid = &self.consistency * &xi;
            let worst = resid.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            let scale = T::one() + xi.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if worst > lit::<T>(1e-9) * scale {
                return Err(Error::InfeasibleImmutable { residual: to_f64(worst) });
            }
        }
        let rhs = &self.rhs_map * &xi;
        let mut x0 = DVector::zeros(self.var.len());
        for (row, &p) in self.pivots.iter().enumerate() {
            x0[p] = rhs[row];
        }
        Ok((rhs, x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn no_fixed_keeps_canonical_form() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, -1.0]);
        let p = ReducedProblem::new(&c, &DMatrix::identity(3, 3), &[]).unwrap();
        assert_eq!(p.r, c);
        assert_eq!(p.s, DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn fixing_top_gives_offset() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, -1.0]);
        let p = ReducedProblem::new(&c, &DMatrix::identity(3, 3), &[0]).unwrap();
        let (_, x0) = p.affine(&DVector::from_row_slice(&[10.0, 4.0, 5.0])).unwrap();
        // x_F = (x1, x2), constraint x1 + x2 = 10, pivot x1
        assert_relative_eq!(&x0 + &p.s * DVector::from_row_slice(&[5.5]), DVector::from_row_slice(&[4.5, 5.5]));
    }

    #[test]
    fn inconsistent_fixed_values_rejected() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, -1.0]);
        let p = ReducedProblem::new(&c, &DMatrix::identity(3, 3), &[0, 1, 2]).unwrap();
        assert!(p.affine(&DVector::from_row_slice(&[10.0, 4.0, 6.0])).is_ok());
        assert!(matches!(
            p.affine(&DVector::from_row_slice(&[10.0, 4.0, 5.0])),
            Err(Error::InfeasibleImmutable { .. })
        ));
    }
}
