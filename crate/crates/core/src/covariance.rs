//! Base forecast error covariance estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, min_eigenvalue, symmetrize};
use crate::scalar::{lit, to_f64, Real};
use crate::series::ResidualSet;
use crate::structures::{Framework, Structure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Str,
    Csstr,
    Testr,
    Wls,
    Wlsv,
    Wlsh,
    Sam,
    Shr,
    Bdsam,
    Bdshr,
}

/// Tags that are recognised but not implemented.
const UNSUPPORTED: &[&str] = &[
    "oasd", "acov", "strar1", "sar1", "har1", "Ssam", "Sshr", "bsam", "bshr", "hsam", "hshr", "hbsam", "hbshr",
];

impl Estimator {
    pub const ALL: [Estimator; 11] = [
        Estimator::Ols,
        Estimator::Str,
        Estimator::Csstr,
        Estimator::Testr,
        Estimator::Wls,
        Estimator::Wlsv,
        Estimator::Wlsh,
        Estimator::Sam,
        Estimator::Shr,
        Estimator::Bdsam,
        Estimator::Bdshr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Ols => "ols",
            Estimator::Str => "str",
            Estimator::Csstr => "csstr",
            Estimator::Testr => "testr",
            Estimator::Wls => "wls",
            Estimator::Wlsv => "wlsv",
            Estimator::Wlsh => "wlsh",
            Estimator::Sam => "sam",
            Estimator::Shr => "shr",
            Estimator::Bdsam => "bdsam",
            Estimator::Bdshr => "bdshr",
        }
    }

    pub fn requires_residuals(self) -> bool {
        !matches!(self, Estimator::Ols | Estimator::Str | Estimator::Csstr | Estimator::Testr)
    }

    pub fn is_diagonal(self) -> bool {
        !matches!(self, Estimator::Sam | Estimator::Shr | Estimator::Bdsam | Estimator::Bdshr)
    }

    pub fn available_for(self, framework: Framework) -> bool {
        use Estimator::*;
        match framework {
            Framework::Cs => matches!(self, Ols | Str | Wls | Sam | Shr),
            Framework::Te => matches!(self, Ols | Str | Wlsv | Wlsh | Sam | Shr),
            Framework::Ct => !matches!(self, Wls),
        }
    }

    pub fn for_framework(framework: Framework) -> Vec<Estimator> {
        Self::ALL.iter().copied().filter(|e| e.available_for(framework)).collect()
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .iter()
            .copied()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::UnsupportedEstimator(s.to_string()))
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `true` for estimator names that exist elsewhere but are not provided here.
pub fn is_known_unsupported(tag: &str) -> bool {
    UNSUPPORTED.contains(&tag)
}

/// Diagonal shift applied to restore positive semidefiniteness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdRepair {
    pub min_eigenvalue: f64,
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct CovarianceMatrix<T: Real> {
    pub omega: DMatrix<T>,
    pub estimator: Estimator,
    /// Shrinkage intensities (one for `shr`, one per series for `bdshr`).
    pub shrink_lambdas: Vec<T>,
    pub repair: Option<PsdRepair>,
}

impl<T: Real> CovarianceMatrix<T> {
    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn shrink_lambda(&self) -> Option<T> {
        self.shrink_lambdas.first().copied()
    }

    fn plain(omega: DMatrix<T>, estimator: Estimator) -> Self {
        Self {
            omega,
            estimator,
            shrink_lambdas: Vec::new(),
            repair: None,
        }
    }
}

/// Custom shrinkage intensity: receives the residuals (already centred unless
/// `mse` is set) and returns λ, which is clamped to `[0, 1]`.
pub type ShrinkageFn<'a, T> = &'a (dyn Fn(&DMatrix<T>) -> T + Sync);

/// Estimates Ω for `structure`.
///
/// With `mse` set the residuals are not mean-corrected and second moments
/// are divided by the number of rows; otherwise means are removed and the
/// divisor is `rows - 1`.
pub fn estimate_covariance<T: Real>(
    estimator: Estimator,
    structure: &Structure<T>,
    residuals: Option<&ResidualSet<T>>,
    mse: bool,
) -> Result<CovarianceMatrix<T>> {
    estimate_covariance_with(estimator, structure, residuals, mse, None)
}

/// [`estimate_covariance`] with an optional custom shrinkage intensity for
/// `shr`/`bdshr`.
pub fn estimate_covariance_with<T: Real>(
    estimator: Estimator,
    structure: &Structure<T>,
    residuals: Option<&ResidualSet<T>>,
    mse: bool,
    shrinkage: Option<ShrinkageFn<'_, T>>,
) -> Result<CovarianceMatrix<T>> {
    let framework = structure.framework();
    if !estimator.available_for(framework) {
        return Err(Error::EstimatorFramework {
            estimator: estimator.to_string(),
            framework: framework.to_string(),
        });
    }
    let d = structure.dim();
    let res = if estimator.requires_residuals() {
        let r = residuals.ok_or_else(|| Error::MissingResiduals(estimator.to_string()))?;
        if r.cols() != d {
            return Err(Error::dim("residual columns", d, r.cols()));
        }
        if r.rows() < 2 {
            return Err(Error::TooFewRows {
                needed: 2,
                found: r.rows(),
            });
        }
        Some(r.values())
    } else {
        None
    };
    let kt = structure.kt();
    let mut out = match estimator {
        Estimator::Ols => CovarianceMatrix::plain(DMatrix::identity(d, d), estimator),
        Estimator::Str => CovarianceMatrix::plain(diag_of_row_sums(structure.summing_matrix()), estimator),
        Estimator::Csstr => {
            let cs = diag_of_row_sums(&structure.cs().summing_matrix());
            CovarianceMatrix::plain(kron(&cs, &DMatrix::identity(kt, kt)), estimator)
        }
        Estimator::Testr => {
            let te = diag_of_row_sums(&structure.te().summing_matrix());
            let n = structure.n();
            CovarianceMatrix::plain(kron(&DMatrix::identity(n, n), &te), estimator)
        }
        Estimator::Wls | Estimator::Wlsh => {
            let v = column_variances(res.unwrap(), mse);
            CovarianceMatrix::plain(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v)), estimator)
        }
        Estimator::Wlsv => {
            let v = column_variances(res.unwrap(), mse);
            let mut pooled = vec![T::zero(); d];
            let te = structure.te();
            for i in 0..structure.n() {
                for &k in te.orders() {
                    let off = i * kt + te.offset(k).unwrap();
                    let w = te.m() / k;
                    let mean = v[off..off + w].iter().fold(T::zero(), |s, x| s + *x) / lit::<T>(w as f64);
                    pooled[off..off + w].iter_mut().for_each(|p| *p = mean);
                }
            }
            CovarianceMatrix::plain(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(pooled)), estimator)
        }
        Estimator::Sam => CovarianceMatrix::plain(sample_covariance(res.unwrap(), mse), estimator),
        Estimator::Shr => {
            let s = shrink(res.unwrap(), mse, shrinkage);
            CovarianceMatrix {
                omega: s.omega,
                estimator,
                shrink_lambdas: vec![s.lambda],
                repair: None,
            }
        }
        Estimator::Bdsam | Estimator::Bdshr => {
            let r = res.unwrap();
            let mut omega = DMatrix::zeros(d, d);
            let mut lambdas = Vec::new();
            for i in 0..structure.n() {
                let block = r.columns(i * kt, kt).into_owned();
                let b = if estimator == Estimator::Bdsam {
                    sample_covariance(&block, mse)
                } else {
                    let s = shrink(&block, mse, shrinkage);
                    lambdas.push(s.lambda);
                    s.omega
                };
                omega.view_mut((i * kt, i * kt), (kt, kt)).copy_from(&b);
            }
            CovarianceMatrix {
                omega,
                estimator,
                shrink_lambdas: lambdas,
                repair: None,
            }
        }
    };
    if !estimator.is_diagonal() {
        out.omega = symmetrize(&out.omega);
        out.repair = repair_psd(&mut out.omega);
    }
    Ok(out)
}

fn diag_of_row_sums<T: Real>(s: &DMatrix<T>) -> DMatrix<T> {
    let sums = nalgebra::DVector::from_fn(s.nrows(), |i, _| s.row(i).sum());
    DMatrix::from_diagonal(&sums)
}

/// Residuals with column means removed unless `mse` is set.
fn centred<T: Real>(res: &DMatrix<T>, mse: bool) -> DMatrix<T> {
    if mse {
        return res.clone();
    }
    let t = lit::<T>(res.nrows() as f64);
    let mut x = res.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / t;
        x.column_mut(j).iter_mut().for_each(|v| *v -= mean);
    }
    x
}

fn divisor<T: Real>(rows: usize, mse: bool) -> T {
    lit(if mse { rows as f64 } else { rows as f64 - 1.0 })
}

fn column_variances<T: Real>(res: &DMatrix<T>, mse: bool) -> Vec<T> {
    let x = centred(res, mse);
    let div = divisor::<T>(res.nrows(), mse);
    (0..x.ncols()).map(|j| x.column(j).norm_squared() / div).collect()
}

/// Sample covariance (two-pass: means first, then centred cross-products).
pub fn sample_covariance<T: Real>(res: &DMatrix<T>, mse: bool) -> DMatrix<T> {
    let x = centred(res, mse);
    let div = divisor::<T>(res.nrows(), mse);
    symmetrize(&(x.transpose() * &x)) / div
}

/// Shrinkage estimate toward the diagonal.
#[derive(Debug, Clone)]
pub struct Shrunk<T: Real> {
    pub lambda: T,
    pub omega: DMatrix<T>,
}

/// Optimal shrinkage intensity of the sample covariance toward its diagonal.
///
/// λ = Σ_{i≠j} Var(r_ij) / Σ_{i≠j} r_ij², with `Var(r_ij)` estimated from the
/// standardised residuals, clamped to `[0, 1]` (λ = 1 when all sample
/// correlations vanish).
pub fn shrink_intensity<T: Real>(residuals: &ResidualSet<T>, mse: bool) -> Result<Shrunk<T>> {
    if residuals.rows() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            found: residuals.rows(),
        });
    }
    Ok(shrink(residuals.values(), mse, None))
}

/// `λ diag(sam) + (1 − λ) sam`; the diagonal is copied from `sam` untouched.
pub fn shrink_toward_diagonal<T: Real>(sam: &DMatrix<T>, lambda: T) -> DMatrix<T> {
    let one_minus = T::one() - lambda;
    let mut out = sam * one_minus;
    for i in 0..sam.nrows() {
        out[(i, i)] = sam[(i, i)];
    }
    out
}

fn shrink<T: Real>(res: &DMatrix<T>, mse: bool, custom: Option<ShrinkageFn<'_, T>>) -> Shrunk<T> {
    let x = centred(res, mse);
    let sam = sample_covariance(res, mse);
    let lambda = match custom {
        Some(f) => f(&x),
        None => default_intensity(&x, &sam),
    };
    let lambda = lambda.max(T::zero()).min(T::one());
    Shrunk {
        lambda,
        omega: shrink_toward_diagonal(&sam, lambda),
    }
}

fn default_intensity<T: Real>(x: &DMatrix<T>, sam: &DMatrix<T>) -> T {
    let (t, p) = x.shape();
    let sd: Vec<T> = (0..p).map(|j| sam[(j, j)].sqrt()).collect();
    let xs = DMatrix::from_fn(t, p, |i, j| if sd[j] > T::zero() { x[(i, j)] / sd[j] } else { T::zero() });
    let xs2 = xs.map(|v| v * v);
    let cross = xs.transpose() * &xs;
    let cross2 = xs2.transpose() * &xs2;
    let tn = lit::<T>(t as f64);
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..p {
        for j in 0..p {
            if i == j || sd[i] == T::zero() || sd[j] == T::zero() {
                continue;
            }
            let v = (cross2[(i, j)] - cross[(i, j)] * cross[(i, j)] / tn) / (tn * (tn - T::one()));
            num += v;
            let r = sam[(i, j)] / (sd[i] * sd[j]);
            den += r * r;
        }
    }
    if den <= T::zero() {
        T::one()
    } else {
        num / den
    }
}

/// Adds `ε I` when the smallest eigenvalue is below `-1e-8 · trace / d`.
fn repair_psd<T: Real>(omega: &mut DMatrix<T>) -> Option<PsdRepair> {
    let d = omega.nrows();
    if d == 0 {
        return None;
    }
    let avg = omega.trace() / lit::<T>(d as f64);
    let min = min_eigenvalue(omega);
    if min >= -lit::<T>(1e-8) * avg.abs() {
        return None;
    }
    let shift = min.abs() + lit::<T>(1e-12) * avg.abs();
    for i in 0..d {
        omega[(i, i)] += shift;
    }
    Some(PsdRepair {
        min_eigenvalue: to_f64(min),
        shift: to_f64(shift),
    })
}
