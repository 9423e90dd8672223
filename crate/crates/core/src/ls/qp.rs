//! Dense convex QP `min ½ zᵀPz + qᵀz  s.t.  l ≤ Az ≤ u` solved by operator
//! splitting (ADMM with adaptive step) followed by an active-set polish.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::scalar::{lit, to_f64, Real};

/// Solver settings. Rows with `l == u` are treated as equalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Iterations between step-size updates.
    pub adapt_every: usize,
    pub eps_infeasible: f64,
    /// Maximum active-set corrections during polishing.
    pub polish_passes: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adapt_every: 25,
            eps_infeasible: 1e-6,
            polish_passes: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem<T: Real> {
    pub p: DMatrix<T>,
    pub q: DVector<T>,
    pub a: DMatrix<T>,
    pub l: DVector<T>,
    pub u: DVector<T>,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

impl<T: Real> QpProblem<T> {
    fn validate(&self) -> Result<()> {
        let n = self.p.nrows();
        if self.p.ncols() != n || self.q.len() != n || self.a.ncols() != n {
            return Err(Error::dim("qp", n, self.a.ncols()));
        }
        let m = self.a.nrows();
        if self.l.len() != m || self.u.len() != m {
            return Err(Error::dim("qp bounds", m, self.l.len()));
        }
        for i in 0..m {
            if self.l[i] > self.u[i] {
                return Err(Error::InfeasibleBounds(format!(
                    "lower bound {} exceeds upper bound {} in row {i}",
                    to_f64(self.l[i]),
                    to_f64(self.u[i])
                )));
            }
        }
        Ok(())
    }

    fn is_eq(&self, i: usize) -> bool {
        self.l[i] == self.u[i]
    }

    pub fn solve(&self, settings: &QpSettings) -> Result<QpSolution<T>> {
        self.validate()?;
        let (m, n) = self.a.shape();
        let p_chol = Cholesky::new(&self.p, "quadratic term", 1e-12)?;
        let sigma = lit::<T>(settings.sigma);
        let alpha = lit::<T>(settings.alpha);
        let one = T::one();
        let rho_min = lit::<T>(1e-6);
        let rho_max = lit::<T>(1e6);
        let mut rho = lit::<T>(settings.rho);
        let rho_vec = |rho: T| -> DVector<T> {
            DVector::from_fn(m, |i, _| {
                if self.is_eq(i) {
                    rho * lit::<T>(1e3)
                } else if !self.l[i].is_finite() && !self.u[i].is_finite() {
                    rho_min
                } else {
                    rho
                }
            })
        };
        let factor = |rv: &DVector<T>| -> Result<Cholesky<T>> {
            let mut k = self.p.clone();
            for i in 0..n {
                k[(i, i)] += sigma;
            }
            let ra = DMatrix::from_fn(m, n, |i, j| rv[i] * self.a[(i, j)]);
            k += self.a.transpose() * ra;
            Cholesky::new(&k, "qp system", 1e-14)
        };
        let mut rv = rho_vec(rho);
        let mut kkt = factor(&rv)?;

        let mut x = DVector::<T>::zeros(n);
        let mut z = DVector::<T>::zeros(m);
        let mut y = DVector::<T>::zeros(m);
        let clamp = |v: &DVector<T>| DVector::from_fn(m, |i, _| v[i].max(self.l[i]).min(self.u[i]));
        z = clamp(&z);
        let at = self.a.transpose();
        let mut iterations = 0;
        let mut prim = T::zero();
        let mut dual = T::zero();
        let mut converged = false;
        for it in 1..=settings.max_iter {
            iterations = it;
            let rhs = &x * sigma - &self.q + &at * (rv.component_mul(&z) - &y);
            let xt = kkt.solve_vec(&rhs);
            let zt = &self.a * &xt;
            let x_new = &xt * alpha + &x * (one - alpha);
            let z_relaxed = &zt * alpha + &z * (one - alpha);
            let z_new = clamp(&(&z_relaxed + y.component_div(&rv)));
            let dy = rv.component_mul(&(&z_relaxed - &z_new));
            y += &dy;
            x = x_new;
            z = z_new;

            let ax = &self.a * &x;
            let px = &self.p * &x;
            let aty = &at * &y;
            prim = inf_norm(&(&ax - &z));
            dual = inf_norm(&(&px + &self.q + &aty));
            let eps_p = lit::<T>(settings.eps_abs) + lit::<T>(settings.eps_rel) * inf_norm(&ax).max(inf_norm(&z));
            let eps_d = lit::<T>(settings.eps_abs)
                + lit::<T>(settings.eps_rel) * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q));
            if prim <= eps_p && dual <= eps_d {
                converged = true;
                break;
            }
            if self.certifies_infeasible(&dy, settings) {
                return Err(Error::InfeasibleBounds(format!(
                    "primal infeasibility certificate after {it} iterations"
                )));
            }
            if it % settings.adapt_every == 0 {
                let pn = prim / (inf_norm(&ax).max(inf_norm(&z)) + lit::<T>(1e-30));
                let dn = dual / (inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q)) + lit::<T>(1e-30));
                let ratio = (pn / (dn + lit::<T>(1e-30))).sqrt();
                let new_rho = (rho * ratio).max(rho_min).min(rho_max);
                if new_rho > rho * lit::<T>(5.0) || new_rho < rho / lit::<T>(5.0) {
                    rho = new_rho;
                    rv = rho_vec(rho);
                    kkt = factor(&rv)?;
                }
            }
        }

        let mut sol = QpSolution {
            z: x,
            y,
            iterations,
            primal_residual: to_f64(prim),
            dual_residual: to_f64(dual),
            polished: false,
        };
        if let Some((zp, yp)) = self.polish(&p_chol, &sol.z, &sol.y, settings) {
            sol.z = zp;
            sol.y = yp;
            sol.polished = true;
            sol.primal_residual = to_f64(self.violation(&sol.z));
            sol.dual_residual = 0.0;
            return Ok(sol);
        }
        if !converged {
            return Err(Error::NotConverged {
                iterations,
                primal: to_f64(prim),
                dual: to_f64(dual),
            });
        }
        Ok(sol)
    }

    fn certifies_infeasible(&self, dy: &DVector<T>, settings: &QpSettings) -> bool {
        let norm = inf_norm(dy);
        if norm <= T::zero() {
            return false;
        }
        let eps = lit::<T>(settings.eps_infeasible) * norm;
        if inf_norm(&(self.a.transpose() * dy)) > eps {
            return false;
        }
        let mut support = T::zero();
        for i in 0..dy.len() {
            let v = dy[i];
            if v > T::zero() {
                if !self.u[i].is_finite() {
                    return false;
                }
                support += self.u[i] * v;
            } else if v < T::zero() {
                if !self.l[i].is_finite() {
                    return false;
                }
                support += self.l[i] * v;
            }
        }
        support < -eps
    }

    fn violation(&self, z: &DVector<T>) -> T {
        let az = &self.a * z;
        (0..az.len()).fold(T::zero(), |m, i| m.max(self.l[i] - az[i]).max(az[i] - self.u[i]))
    }

    fn scale(&self) -> T {
        let b = (0..self.l.len()).fold(T::zero(), |m, i| {
            let mut m = m;
            if self.l[i].is_finite() {
                m = m.max(self.l[i].abs());
            }
            if self.u[i].is_finite() {
                m = m.max(self.u[i].abs());
            }
            m
        });
        T::one() + b.max(inf_norm(&self.q))
    }

    /// Solves the equality QP on a guessed active set and corrects the set
    /// until primal feasibility and multiplier signs hold.
    fn polish(&self, p_chol: &Cholesky<T>, z: &DVector<T>, y: &DVector<T>, settings: &QpSettings) -> Option<(DVector<T>, DVector<T>)> {
        let m = self.a.nrows();
        let az = &self.a * z;
        let scale = self.scale();
        let tol = lit::<T>(1e-7) * scale;
        // -1 lower active, +1 upper active, 0 inactive
        let mut active: Vec<i8> = (0..m)
            .map(|i| {
                if self.is_eq(i) {
                    1
                } else if y[i] < -tol || (self.l[i].is_finite() && az[i] - self.l[i] < tol && y[i] <= T::zero()) {
                    -1
                } else if y[i] > tol || (self.u[i].is_finite() && self.u[i] - az[i] < tol && y[i] >= T::zero()) {
                    1
                } else {
                    0
                }
            })
            .collect();
        let feas_tol = lit::<T>(1e-10) * scale;
        let sign_tol = lit::<T>(1e-10) * scale;
        let mut seen: Vec<Vec<i8>> = Vec::new();
        for _ in 0..settings.polish_passes {
            if seen.contains(&active) {
                return None;
            }
            seen.push(active.clone());
            let rows: Vec<usize> = (0..m).filter(|&i| active[i] != 0).collect();
            let (zp, yact) = self.solve_equality(p_chol, &rows, &active)?;
            let azp = &self.a * &zp;
            // worst multiplier sign violation
            let mut drop: Option<(usize, T)> = None;
            for (k, &i) in rows.iter().enumerate() {
                if self.is_eq(i) {
                    continue;
                }
                let bad = if active[i] < 0 { yact[k] } else { -yact[k] };
                if bad > sign_tol && drop.is_none_or(|(_, b)| bad > b) {
                    drop = Some((i, bad));
                }
            }
            let mut add: Option<(usize, T, i8)> = None;
            for i in 0..m {
                if active[i] != 0 {
                    continue;
                }
                let lo = self.l[i] - azp[i];
                let hi = azp[i] - self.u[i];
                if lo > feas_tol && add.is_none_or(|(_, v, _)| lo > v) {
                    add = Some((i, lo, -1));
                }
                if hi > feas_tol && add.is_none_or(|(_, v, _)| hi > v) {
                    add = Some((i, hi, 1));
                }
            }
            match (add, drop) {
                (None, None) => {
                    let mut yfull = DVector::zeros(m);
                    for (k, &i) in rows.iter().enumerate() {
                        yfull[i] = yact[k];
                    }
                    return Some((zp, yfull));
                }
                (Some((i, _, side)), _) => active[i] = side,
                (None, Some((i, _))) => active[i] = 0,
            }
        }
        None
    }

    fn solve_equality(&self, p_chol: &Cholesky<T>, rows: &[usize], active: &[i8]) -> Option<(DVector<T>, DVector<T>)> {
        let n = self.p.nrows();
        let pinv_q = p_chol.solve_vec(&self.q);
        if rows.is_empty() {
            return Some((-pinv_q, DVector::zeros(0)));
        }
        let aa = DMatrix::from_fn(rows.len(), n, |k, j| self.a[(rows[k], j)]);
        let b = DVector::from_fn(rows.len(), |k, _| {
            let i = rows[k];
            if active[i] < 0 {
                self.l[i]
            } else {
                self.u[i]
            }
        });
        let pinv_at = p_chol.solve(&aa.transpose());
        let schur = crate::linalg::symmetrize(&(&aa * &pinv_at));
        let sc = Cholesky::new(&schur, "active constraints", 1e-11).ok()?;
        let rhs = -(&aa * &pinv_q) - &b;
        let yact = sc.solve_vec(&rhs);
        let zp = -(pinv_q + &pinv_at * &yact);
        Some((zp, yact))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_constrained_quadratic() {
        // min ½‖z − (2, −1)‖² s.t. 0 ≤ z ≤ 1
        let p = DMatrix::identity(2, 2);
        let q = DVector::from_row_slice(&[-2.0, 1.0]);
        let prob = QpProblem {
            p,
            q,
            a: DMatrix::identity(2, 2),
            l: DVector::from_row_slice(&[0.0, 0.0]),
            u: DVector::from_row_slice(&[1.0, 1.0]),
        };
        let s = prob.solve(&QpSettings::default()).unwrap();
        assert!(s.polished);
        assert_relative_eq!(s.z, DVector::from_row_slice(&[1.0, 0.0]), epsilon = 1e-12);
    }

    #[test]
    fn equality_and_bound() {
        // min ½‖z‖² − z1 s.t. z1 + z2 = 1, z2 ≥ 0.8
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::from_row_slice(&[-1.0, 0.0]),
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            l: DVector::from_row_slice(&[1.0, 0.8]),
            u: DVector::from_row_slice(&[1.0, f64::INFINITY]),
        };
        let s = prob.solve(&QpSettings::default()).unwrap();
        assert_relative_eq!(s.z, DVector::from_row_slice(&[0.2, 0.8]), epsilon = 1e-12);
    }

    #[test]
    fn infeasible_is_reported() {
        // z1 + z2 = 1 with both z ≤ 0
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_row_slice(&[1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]),
            u: DVector::from_row_slice(&[1.0, 0.0, 0.0]),
        };
        let err = prob.solve(&QpSettings::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn crossed_bounds_rejected() {
        let prob = QpProblem {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::identity(1, 1),
            l: DVector::from_row_slice(&[1.0]),
            u: DVector::from_row_slice(&[0.0]),
        };
        assert!(matches!(prob.solve(&QpSettings::default()), Err(Error::InfeasibleBounds(_))));
    }
}
