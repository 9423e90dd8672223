//! Least-squares reconciliation: projection and structural solves,
//! immutable forecasts, bounds and non-negativity.

mod bpv;
mod problem;
pub mod qp;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bpv::{nnls_bpv, BpvSolution};
pub use qp::{QpProblem, QpSettings, QpSolution};

use crate::covariance::{CovarianceMatrix, Estimator};
use crate::error::{Error, Result};
use crate::linalg::{select_vec, symmetrize, Cholesky};
use crate::scalar::{lit, to_f64, Real};
use crate::series::ForecastSet;
use crate::structures::{LinearConstraints, Structure};
use problem::ReducedProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    #[default]
    Proj,
    Strc,
    ProjQp,
    StrcQp,
}

impl Approach {
    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Proj => "proj",
            Approach::Strc => "strc",
            Approach::ProjQp => "proj_qp",
            Approach::StrcQp => "strc_qp",
        }
    }

    fn is_qp(self) -> bool {
        matches!(self, Approach::ProjQp | Approach::StrcQp)
    }

    fn structural(self) -> bool {
        matches!(self, Approach::Strc | Approach::StrcQp)
    }
}

impl FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proj" => Ok(Approach::Proj),
            "strc" => Ok(Approach::Strc),
            "proj_qp" => Ok(Approach::ProjQp),
            "strc_qp" => Ok(Approach::StrcQp),
            _ => Err(Error::Options(format!(
                "unknown approach `{s}` (expected proj, strc, proj_qp or strc_qp)"
            ))),
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Non-negativity treatment of the bottom (free) variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NonNegative {
    #[default]
    None,
    Sntz,
    Bpv,
    Qp,
}

impl NonNegative {
    pub fn as_str(self) -> &'static str {
        match self {
            NonNegative::None => "none",
            NonNegative::Sntz => "sntz",
            NonNegative::Bpv => "bpv",
            NonNegative::Qp => "qp",
        }
    }
}

impl FromStr for NonNegative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NonNegative::None),
            "sntz" => Ok(NonNegative::Sntz),
            "bpv" => Ok(NonNegative::Bpv),
            "qp" => Ok(NonNegative::Qp),
            _ => Err(Error::Options(format!("unknown nn `{s}` (expected sntz, bpv or qp)"))),
        }
    }
}

impl fmt::Display for NonNegative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Interval constraint on one per-period variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound<T> {
    pub index: usize,
    pub lower: T,
    pub upper: T,
}

#[derive(Debug, Clone)]
pub struct ReconciliationOptions<T: Real> {
    pub approach: Approach,
    pub nn: NonNegative,
    /// Bounds applied in every period.
    pub bounds: Vec<Bound<T>>,
    /// Per-period indices kept at their base values in every period.
    pub immutable: Vec<usize>,
    pub settings: QpSettings,
    pub bpv_max_iter: usize,
}

impl<T: Real> Default for ReconciliationOptions<T> {
    fn default() -> Self {
        Self {
            approach: Approach::Proj,
            nn: NonNegative::None,
            bounds: Vec::new(),
            immutable: Vec::new(),
            settings: QpSettings::default(),
            bpv_max_iter: 500,
        }
    }
}

impl<T: Real> ReconciliationOptions<T> {
    pub fn with_approach(approach: Approach) -> Self {
        Self {
            approach,
            ..Self::default()
        }
    }
}

/// What happened beyond the plain least-squares solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LsReport {
    /// Periods whose unconstrained solution violated bounds or non-negativity.
    pub constrained_periods: usize,
    pub qp_iterations: usize,
    pub qp_unpolished: usize,
    pub bpv_backup_used: bool,
}

impl LsReport {
    fn merge(&mut self, other: &LsReport) {
        self.constrained_periods += other.constrained_periods;
        self.qp_iterations = self.qp_iterations.max(other.qp_iterations);
        self.qp_unpolished += other.qp_unpolished;
        self.bpv_backup_used |= other.bpv_backup_used;
    }
}

/// `d × d` reconciliation matrix `M` with `x̃ = M x̂`.
#[derive(Debug, Clone)]
pub struct ProjectionOperator<T: Real> {
    pub m: DMatrix<T>,
    pub approach: Approach,
    pub estimator: Option<Estimator>,
}

impl<T: Real> ProjectionOperator<T> {
    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        &self.m * x
    }
}

/// Builds `M`. The projection form is `I − ΩCᵀ(CΩCᵀ)⁻¹C`; the structural
/// form is `S(SᵀΩ⁻¹S)⁻¹SᵀΩ⁻¹`. QP approaches use the projection form.
pub fn build_projection<T: Real>(
    structure: &Structure<T>,
    omega: &CovarianceMatrix<T>,
    approach: Approach,
) -> Result<ProjectionOperator<T>> {
    let m = projection_matrix(structure.constraints(), &omega.omega, approach)?;
    Ok(ProjectionOperator {
        m,
        approach,
        estimator: Some(omega.estimator),
    })
}

pub(crate) fn projection_matrix<T: Real>(cons: &LinearConstraints<T>, omega: &DMatrix<T>, approach: Approach) -> Result<DMatrix<T>> {
    let d = cons.dim();
    check_omega(omega, d)?;
    if approach.structural() {
        let (chol_q, z) = structural_factors(&cons.s, omega)?;
        // S Q⁻¹ Zᵀ
        Ok(&cons.s * chol_q.solve(&z.transpose()))
    } else {
        let c = &cons.c;
        let g = omega * c.transpose();
        let w = Cholesky::new(&symmetrize(&(c * &g)), "C Ω Cᵀ", 1e-12)?;
        Ok(DMatrix::identity(d, d) - &g * w.solve(c))
    }
}

fn check_omega<T: Real>(omega: &DMatrix<T>, d: usize) -> Result<()> {
    if omega.shape() != (d, d) {
        return Err(Error::dim(
            "covariance matrix",
            format!("{d}x{d}"),
            format!("{}x{}", omega.nrows(), omega.ncols()),
        ));
    }
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "covariance matrix".into(),
        });
    }
    Ok(())
}

/// Cholesky of `Q = SᵀΩ⁻¹S` and `Z = Ω⁻¹S`.
fn structural_factors<T: Real>(s: &DMatrix<T>, omega: &DMatrix<T>) -> Result<(Cholesky<T>, DMatrix<T>)> {
    let z = Cholesky::new(omega, "covariance matrix", 1e-12)?.solve(s);
    let q = symmetrize(&(s.transpose() * &z));
    Ok((Cholesky::new(&q, "Sᵀ Ω⁻¹ S", 1e-12)?, z))
}

enum Solver<T: Real> {
    /// `G = Ω Rᵀ`, factor of `R Ω Rᵀ`.
    Proj { g: DMatrix<T>, w: Cholesky<T> },
    Strc { q: Cholesky<T>, z: DMatrix<T> },
    /// Nothing left to reconcile.
    Identity,
}

/// Least-squares reconciler prepared for one structure, covariance and option set.
pub struct LsReconciler<T: Real> {
    cons: LinearConstraints<T>,
    problem: ReducedProblem<T>,
    opts: ReconciliationOptions<T>,
    solver: Solver<T>,
    /// Cholesky factor of the reduced covariance, for QP formulations.
    omega_chol: Option<Cholesky<T>>,
    /// `(lower, upper)` for each position of the reduced variable vector.
    limits: Vec<Option<(T, T)>>,
    bpv: Option<(DMatrix<T>, DMatrix<T>)>,
}

impl<T: Real> LsReconciler<T> {
    pub fn new(structure: &Structure<T>, omega: &DMatrix<T>, opts: ReconciliationOptions<T>) -> Result<Self> {
        Self::from_constraints(structure.constraints().clone(), omega, opts)
    }

    pub fn from_constraints(cons: LinearConstraints<T>, omega: &DMatrix<T>, opts: ReconciliationOptions<T>) -> Result<Self> {
        let d = cons.dim();
        check_omega(omega, d)?;
        if opts.nn == NonNegative::Sntz && !opts.immutable.is_empty() {
            return Err(Error::Options("sntz cannot be combined with immutable forecasts".into()));
        }
        if opts.nn == NonNegative::Sntz && !opts.bounds.is_empty() {
            return Err(Error::Options("sntz cannot be combined with bounds".into()));
        }
        if opts.nn == NonNegative::Bpv && (!opts.immutable.is_empty() || !opts.bounds.is_empty()) {
            return Err(Error::Options("bpv supports neither immutable forecasts nor bounds".into()));
        }
        for b in &opts.bounds {
            if b.index >= d {
                return Err(Error::dim("bound index", format!("< {d}"), b.index));
            }
            if !(b.lower <= b.upper) {
                return Err(Error::InfeasibleBounds(format!(
                    "variable {}: lower {} > upper {}",
                    b.index,
                    to_f64(b.lower),
                    to_f64(b.upper)
                )));
            }
        }
        let problem = ReducedProblem::new(&cons.c, omega, &opts.immutable)?;

        let solver = if problem.rank() == 0 {
            Solver::Identity
        } else if opts.approach.structural() {
            let (q, z) = structural_factors(&problem.s, &problem.omega)?;
            Solver::Strc { q, z }
        } else {
            let g = &problem.omega * problem.r.transpose();
            let w = Cholesky::new(&symmetrize(&(&problem.r * &g)), "C Ω Cᵀ", 1e-12)?;
            Solver::Proj { g, w }
        };

        let mut limits: Vec<Option<(T, T)>> = vec![None; d];
        if opts.nn == NonNegative::Qp {
            for &f in &cons.free {
                limits[f] = Some((T::zero(), lit(f64::INFINITY)));
            }
        }
        for b in &opts.bounds {
            limits[b.index] = Some(match limits[b.index] {
                Some((l, u)) => (l.max(b.lower), u.min(b.upper)),
                None => (b.lower, b.upper),
            });
        }
        let reduced_limits: Vec<Option<(T, T)>> = problem.var.iter().map(|&v| limits[v]).collect();
        let needs_qp = opts.approach.is_qp() || reduced_limits.iter().any(Option::is_some);
        let omega_chol = if needs_qp && !problem.var.is_empty() {
            Some(Cholesky::new(&problem.omega, "covariance matrix", 1e-12)?)
        } else {
            None
        };
        let bpv = if opts.nn == NonNegative::Bpv {
            let z = Cholesky::new(omega, "covariance matrix", 1e-12)?.solve(&cons.s);
            let q = symmetrize(&(cons.s.transpose() * &z));
            Some((q, z))
        } else {
            None
        };
        Ok(Self {
            cons,
            problem,
            opts,
            solver,
            omega_chol,
            limits: reduced_limits,
            bpv,
        })
    }

    pub fn constraints(&self) -> &LinearConstraints<T> {
        &self.cons
    }

    pub fn options(&self) -> &ReconciliationOptions<T> {
        &self.opts
    }

    fn least_squares(&self, xf: &DVector<T>, rhs: &DVector<T>, x0: &DVector<T>) -> DVector<T> {
        match &self.solver {
            Solver::Identity => xf.clone(),
            Solver::Proj { g, w } => {
                let resid = &self.problem.r * xf - rhs;
                xf - g * w.solve_vec(&resid)
            }
            Solver::Strc { q, z } => {
                let b = q.solve_vec(&(z.transpose() * (xf - x0)));
                x0 + &self.problem.s * b
            }
        }
    }

    fn violates_limits(&self, xf: &DVector<T>) -> bool {
        self.limits
            .iter()
            .zip(xf.iter())
            .any(|(lim, v)| matches!(lim, Some((l, u)) if *v < *l || *v > *u))
    }

    /// Reconciles one per-period vector.
    pub fn reconcile_vector(&self, xhat: &DVector<T>) -> Result<(DVector<T>, LsReport)> {
        let d = self.cons.dim();
        if xhat.len() != d {
            return Err(Error::dim("base forecast vector", d, xhat.len()));
        }
        if xhat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "base forecasts".into(),
            });
        }
        let mut report = LsReport::default();
        for b in &self.opts.bounds {
            if self.problem.fixed.binary_search(&b.index).is_ok() && (xhat[b.index] < b.lower || xhat[b.index] > b.upper) {
                return Err(Error::InfeasibleBounds(format!(
                    "immutable variable {} lies outside its bounds",
                    b.index
                )));
            }
        }
        let (rhs, x0) = self.problem.affine(xhat)?;
        let xf_hat = select_vec(xhat, &self.problem.var);
        let mut xf = self.least_squares(&xf_hat, &rhs, &x0);

        let mut x = xhat.clone();
        match self.opts.nn {
            NonNegative::Sntz => {
                let bottoms = select_vec(&assemble(&x, &self.problem.var, &xf), &self.cons.free);
                if bottoms.iter().any(|v| *v < T::zero()) {
                    report.constrained_periods = 1;
                    return Ok((bottom_up(&self.cons, &bottoms.map(|v| v.max(T::zero()))), report));
                }
            }
            NonNegative::Bpv => {
                let full = assemble(&x, &self.problem.var, &xf);
                if self.cons.free.iter().any(|&f| full[f] < T::zero()) {
                    report.constrained_periods = 1;
                    let (q, z) = self.bpv.as_ref().unwrap();
                    let r = z.transpose() * xhat;
                    let sol = nnls_bpv(q, &r, self.opts.bpv_max_iter)?;
                    report.bpv_backup_used = sol.backup_used;
                    return Ok((&self.cons.s * sol.x, report));
                }
            }
            _ => {}
        }
        if self.opts.approach.is_qp() || self.violates_limits(&xf) {
            if self.violates_limits(&xf) {
                report.constrained_periods = 1;
            }
            let (sol, z) = self.solve_qp(&xf_hat, &rhs, &x0)?;
            report.qp_iterations = sol.iterations;
            report.qp_unpolished = usize::from(!sol.polished);
            xf = &x0 + &self.problem.s * z;
        }
        for (k, &v) in self.problem.var.iter().enumerate() {
            x[v] = xf[k];
        }
        Ok((x, report))
    }

    /// Solves the bounded problem and returns the solution in non-pivot coordinates.
    fn solve_qp(&self, xf_hat: &DVector<T>, rhs: &DVector<T>, x0: &DVector<T>) -> Result<(QpSolution<T>, DVector<T>)> {
        let p = &self.problem;
        let nz = p.nonpivots.len();
        if nz == 0 {
            let empty = QpSolution {
                z: DVector::zeros(0),
                y: DVector::zeros(0),
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                polished: true,
            };
            if self.violates_limits(x0) {
                return Err(Error::InfeasibleBounds("fixed values violate the bounds".into()));
            }
            return Ok((empty, DVector::zeros(0)));
        }
        let l = self.omega_chol.as_ref().expect("qp factor");
        let rows: Vec<usize> = (0..p.var.len()).filter(|&k| self.limits[k].is_some()).collect();
        let lim = |k: usize| self.limits[k].unwrap();
        let structural = self.opts.approach.structural();
        let (sol, mut z) = if structural {
            let y = l.solve_lower(&p.s);
            let target = l.solve_lower(&DMatrix::from_column_slice(xf_hat.len(), 1, (xf_hat - x0).as_slice()));
            let prob = QpProblem {
                p: symmetrize(&(y.transpose() * &y)),
                q: -DVector::from_column_slice((y.transpose() * target).as_slice()),
                a: DMatrix::from_fn(rows.len(), nz, |i, j| p.s[(rows[i], j)]),
                l: DVector::from_fn(rows.len(), |i, _| lim(rows[i]).0 - x0[rows[i]]),
                u: DVector::from_fn(rows.len(), |i, _| lim(rows[i]).1 - x0[rows[i]]),
            };
            let sol = prob.solve(&self.opts.settings)?;
            let z = sol.z.clone();
            (sol, z)
        } else {
            // x_F = x̂_F + L w, objective ‖w‖²
            let lm = l.l();
            let nf = p.var.len();
            let rl = &p.r * lm;
            let eq_rhs = rhs - &p.r * xf_hat;
            let m = rl.nrows() + rows.len();
            let a = DMatrix::from_fn(m, nf, |i, j| if i < rl.nrows() { rl[(i, j)] } else { lm[(rows[i - rl.nrows()], j)] });
            let lo = DVector::from_fn(m, |i, _| {
                if i < rl.nrows() {
                    eq_rhs[i]
                } else {
                    let k = rows[i - rl.nrows()];
                    lim(k).0 - xf_hat[k]
                }
            });
            let hi = DVector::from_fn(m, |i, _| {
                if i < rl.nrows() {
                    eq_rhs[i]
                } else {
                    let k = rows[i - rl.nrows()];
                    lim(k).1 - xf_hat[k]
                }
            });
            let prob = QpProblem {
                p: DMatrix::identity(nf, nf),
                q: DVector::zeros(nf),
                a,
                l: lo,
                u: hi,
            };
            let sol = prob.solve(&self.opts.settings)?;
            let xf = xf_hat + lm * &sol.z;
            let z = DVector::from_fn(nz, |j, _| xf[p.nonpivots[j]]);
            (sol, z)
        };
        // non-pivot coordinates are plain variables: clip round-off against their own limits
        for (j, &np) in p.nonpivots.iter().enumerate() {
            if let Some((lo, hi)) = self.limits[np] {
                z[j] = z[j].max(lo).min(hi);
            }
        }
        Ok((sol, z))
    }

    /// Reconciles every period of a forecast set (in parallel, deterministic order).
    pub fn reconcile(&self, base: &ForecastSet<T>) -> Result<(ForecastSet<T>, LsReport)> {
        let results: Vec<Result<(DVector<T>, LsReport)>> = (0..base.horizon())
            .into_par_iter()
            .map(|h| self.reconcile_vector(&base.period(h)))
            .collect();
        let mut out = base.clone();
        let mut report = LsReport::default();
        for (h, r) in results.into_iter().enumerate() {
            let (x, rep) = r?;
            out.set_period(h, x.as_slice())?;
            report.merge(&rep);
        }
        Ok((out, report))
    }
}

fn assemble<T: Real>(xhat: &DVector<T>, var: &[usize], xf: &DVector<T>) -> DVector<T> {
    let mut x = xhat.clone();
    for (k, &v) in var.iter().enumerate() {
        x[v] = xf[k];
    }
    x
}

fn bottom_up<T: Real>(cons: &LinearConstraints<T>, bottoms: &DVector<T>) -> DVector<T> {
    &cons.s * bottoms
}

/// Reconciled forecasts together with solver information.
#[derive(Debug, Clone)]
pub struct LsOutput<T: Real> {
    pub forecast: ForecastSet<T>,
    pub report: LsReport,
}

/// Least-squares reconciliation of every period of `base`.
pub fn reconcile_ls<T: Real>(
    base: &ForecastSet<T>,
    structure: &Structure<T>,
    omega: &CovarianceMatrix<T>,
    opts: &ReconciliationOptions<T>,
) -> Result<LsOutput<T>> {
    check_layout(base, structure)?;
    let rec = LsReconciler::new(structure, &omega.omega, opts.clone())?;
    let (forecast, report) = rec.reconcile(base)?;
    Ok(LsOutput { forecast, report })
}

pub(crate) fn check_layout<T: Real>(base: &ForecastSet<T>, structure: &Structure<T>) -> Result<()> {
    if base.n() != structure.n() || base.orders() != structure.te().orders() {
        return Err(Error::dim(
            "forecast layout",
            format!("{} series, orders {:?}", structure.n(), structure.te().orders()),
            format!("{} series, orders {:?}", base.n(), base.orders()),
        ));
    }
    Ok(())
}

/// Solves `min (x − x̂)ᵀΩ⁻¹(x − x̂)` subject to `C x = 0`, bounds and fixed
/// entries, with the constraint matrix given directly.
pub fn solve_constrained_qp<T: Real>(
    omega: &DMatrix<T>,
    cons_mat: &DMatrix<T>,
    base: &DVector<T>,
    bounds: &[Bound<T>],
    immutable: &[usize],
    settings: &QpSettings,
) -> Result<DVector<T>> {
    let cons = constraints_from_matrix(cons_mat)?;
    let opts = ReconciliationOptions {
        approach: Approach::StrcQp,
        bounds: bounds.to_vec(),
        immutable: immutable.to_vec(),
        settings: *settings,
        ..ReconciliationOptions::default()
    };
    Ok(LsReconciler::from_constraints(cons, omega, opts)?.reconcile_vector(base)?.0)
}

/// Wraps an arbitrary full-row-rank constraint matrix.
pub fn constraints_from_matrix<T: Real>(cons_mat: &DMatrix<T>) -> Result<LinearConstraints<T>> {
    let d = cons_mat.ncols();
    let red = crate::linalg::rref(cons_mat, 1e-10);
    if red.rank() < cons_mat.nrows() {
        return Err(Error::RankDeficient {
            rank: red.rank(),
            rows: cons_mat.nrows(),
            cols: d,
        });
    }
    let free = red.free_columns();
    let bound = red.pivots.clone();
    let mut s = DMatrix::<T>::zeros(d, free.len());
    for (row, &p) in bound.iter().enumerate() {
        for (j, &f) in free.iter().enumerate() {
            s[(p, j)] = -red.reduced[(row, f)];
        }
    }
    for (j, &f) in free.iter().enumerate() {
        s[(f, j)] = T::one();
    }
    Ok(LinearConstraints {
        free,
        bound,
        s,
        c: cons_mat.clone(),
    })
}

/// Non-negative reconciliation of one vector by block principal pivoting.
pub fn nn_bpv<T: Real>(omega: &DMatrix<T>, cons_mat: &DMatrix<T>, base: &DVector<T>, max_iter: usize) -> Result<(DVector<T>, bool)> {
    let cons = constraints_from_matrix(cons_mat)?;
    let z = Cholesky::new(omega, "covariance matrix", 1e-12)?.solve(&cons.s);
    let q = symmetrize(&(cons.s.transpose() * &z));
    let sol = nnls_bpv(&q, &(z.transpose() * base), max_iter)?;
    Ok((&cons.s * sol.x, sol.backup_used))
}

/// Clamps the free (bottom) values of a coherent vector at zero and
/// aggregates them again.
pub fn nn_sntz<T: Real>(reconciled: &DVector<T>, structure: &Structure<T>) -> DVector<T> {
    let cons = structure.constraints();
    let b = select_vec(reconciled, &cons.free).map(|v| v.max(T::zero()));
    bottom_up(cons, &b)
}

#[cfg(test)]
mod tests;
