//! Cross-temporal reconciliation built from one-dimensional steps: the
//! two-step heuristics (temporal then cross-sectional, or the reverse) and
//! the iterative alternation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_covariance, Estimator};
use crate::error::{Error, Result};
use crate::linalg::Norm;
use crate::ls::{check_layout, projection_matrix, Approach};
use crate::scalar::{lit, to_f64, Real};
use crate::series::{ForecastSet, ResidualSet};
use crate::structures::{Framework, Structure};

/// Which dimension is reconciled first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepOrder {
    /// Temporal, then cross-sectional.
    #[default]
    Tcs,
    /// Cross-sectional, then temporal.
    Cst,
}

impl FromStr for StepOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcs" => Ok(StepOrder::Tcs),
            "cst" => Ok(StepOrder::Cst),
            _ => Err(Error::Options(format!("unknown order `{s}` (expected tcs or cst)"))),
        }
    }
}

impl fmt::Display for StepOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepOrder::Tcs => "tcs",
            StepOrder::Cst => "cst",
        })
    }
}

/// How the per-level cross-sectional operators of the second step are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Equal weight for every temporal level.
    #[default]
    Ka,
    /// Equal weight for every temporal column, so level `k` counts `m/k` times.
    Simple,
}

impl FromStr for Averaging {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ka" | "KA" => Ok(Averaging::Ka),
            "simple" => Ok(Averaging::Simple),
            _ => Err(Error::Options(format!("unknown averaging `{s}` (expected ka or simple)"))),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Ka => "ka",
            Averaging::Simple => "simple",
        })
    }
}

/// Covariance choices for the two one-dimensional steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEstimators {
    pub cs: Estimator,
    pub te: Estimator,
    pub mse: bool,
}

impl Default for StepEstimators {
    fn default() -> Self {
        Self {
            cs: Estimator::Ols,
            te: Estimator::Ols,
            mse: true,
        }
    }
}

/// Trace of the iterative procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    /// Incoherence after each iteration.
    pub trace: Vec<f64>,
    /// Incoherence of the base forecasts in the checked dimension.
    pub initial: f64,
    pub norm: Norm,
    pub converged: bool,
}

/// One-dimensional reconciliation operators of a cross-temporal structure.
struct Operators<T: Real> {
    n: usize,
    kt: usize,
    /// Temporal operator (`kt × kt`) of each series.
    te: Vec<DMatrix<T>>,
    /// Cross-sectional operator (`n × n`) of each per-period position.
    cs: Vec<DMatrix<T>>,
}

impl<T: Real> Operators<T> {
    fn new(structure: &Structure<T>, residuals: Option<&ResidualSet<T>>, est: &StepEstimators) -> Result<Self> {
        if structure.framework() != Framework::Ct {
            return Err(Error::Options("two-step and iterative reconciliation need a cross-temporal structure".into()));
        }
        if let Some(r) = residuals {
            if r.cols() != structure.dim() {
                return Err(Error::dim("residual columns", structure.dim(), r.cols()));
            }
        }
        let (n, kt) = (structure.n(), structure.kt());
        let te_s = Structure::temporal(structure.te().clone());
        let cs_s = Structure::cross_sectional(structure.cs().clone());

        let te = (0..n)
            .map(|i| {
                let res = residuals.map(|r| r.select_columns(&(i * kt..(i + 1) * kt).collect::<Vec<_>>()));
                let omega = estimate_covariance(est.te, &te_s, res.as_ref(), est.mse)?;
                projection_matrix(te_s.constraints(), &omega.omega, Approach::Proj)
            })
            .collect::<Result<Vec<_>>>()?;

        let te_struct = structure.te();
        let mut by_level = Vec::new();
        for &k in te_struct.orders() {
            let off = te_struct.offset(k).unwrap();
            let w = te_struct.m() / k;
            let res = residuals.map(|r| {
                let rows = r.rows() * w;
                let v = DMatrix::from_fn(rows, n, |row, i| r.values()[(row / w, i * kt + off + row % w)]);
                ResidualSet::new(v, r.kind())
            });
            let omega = estimate_covariance(est.cs, &cs_s, res.as_ref(), est.mse)?;
            by_level.push(projection_matrix(cs_s.constraints(), &omega.omega, Approach::Proj)?);
        }
        let cs = te_struct
            .positions()
            .iter()
            .map(|(k, _)| by_level[te_struct.orders().iter().position(|o| o == k).unwrap()].clone())
            .collect();
        Ok(Self { n, kt, te, cs })
    }

    fn apply_te(&self, x: &mut DVector<T>, ops: &[DMatrix<T>]) {
        for i in 0..self.n {
            let op = if ops.len() == 1 { &ops[0] } else { &ops[i] };
            let block = op * x.rows(i * self.kt, self.kt);
            x.rows_mut(i * self.kt, self.kt).copy_from(&block);
        }
    }

    fn apply_cs(&self, x: &mut DVector<T>, ops: &[DMatrix<T>]) {
        for p in 0..self.kt {
            let op = if ops.len() == 1 { &ops[0] } else { &ops[p] };
            let col = DVector::from_fn(self.n, |i, _| x[i * self.kt + p]);
            let y = op * col;
            for i in 0..self.n {
                x[i * self.kt + p] = y[i];
            }
        }
    }
}

fn mean_of<T: Real>(mats: &[DMatrix<T>], weights: &[T]) -> DMatrix<T> {
    let total = weights.iter().fold(T::zero(), |s, w| s + *w);
    let mut out = DMatrix::zeros(mats[0].nrows(), mats[0].ncols());
    for (m, w) in mats.iter().zip(weights) {
        out += m * (*w / total);
    }
    out
}

/// Two-step cross-temporal reconciliation.
///
/// `tcs` reconciles each series temporally with its own temporal operator,
/// then applies one cross-sectional operator to every temporal column; that
/// operator averages the per-level operators as selected by `avg`. `cst`
/// reconciles each column cross-sectionally with its level's operator, then
/// applies the average of the per-series temporal operators to every series.
pub fn two_step<T: Real>(
    base: &ForecastSet<T>,
    structure: &Structure<T>,
    residuals: Option<&ResidualSet<T>>,
    est: &StepEstimators,
    order: StepOrder,
    avg: Averaging,
) -> Result<ForecastSet<T>> {
    check_layout(base, structure)?;
    let ops = Operators::new(structure, residuals, est)?;
    let te_struct = structure.te();
    let mut out = base.clone();
    match order {
        StepOrder::Tcs => {
            let orders = te_struct.orders();
            let mut levels = Vec::new();
            let mut weights = Vec::new();
            for &k in orders {
                let p = te_struct.offset(k).unwrap();
                levels.push(ops.cs[p].clone());
                weights.push(match avg {
                    Averaging::Ka => T::one(),
                    Averaging::Simple => lit((te_struct.m() / k) as f64),
                });
            }
            let common = [mean_of(&levels, &weights)];
            for h in 0..base.horizon() {
                let mut x = base.period(h);
                ops.apply_te(&mut x, &ops.te);
                ops.apply_cs(&mut x, &common);
                out.set_period(h, x.as_slice())?;
            }
        }
        StepOrder::Cst => {
            let common = [mean_of(&ops.te, &vec![T::one(); ops.te.len()])];
            for h in 0..base.horizon() {
                let mut x = base.period(h);
                ops.apply_cs(&mut x, &ops.cs);
                ops.apply_te(&mut x, &common);
                out.set_period(h, x.as_slice())?;
            }
        }
    }
    Ok(out)
}

/// Stacked temporal constraint residuals of all series and periods.
fn te_residual<T: Real>(structure: &Structure<T>, x: &DVector<T>) -> Vec<T> {
    let (n, kt) = (structure.n(), structure.kt());
    let c = structure.te().cons_mat();
    (0..n).flat_map(|i| (c * x.rows(i * kt, kt)).iter().copied().collect::<Vec<_>>()).collect()
}

fn cs_residual<T: Real>(structure: &Structure<T>, x: &DVector<T>) -> Vec<T> {
    let (n, kt) = (structure.n(), structure.kt());
    let c = structure.cs().cons_mat();
    (0..kt)
        .flat_map(|p| {
            let col = DVector::from_fn(n, |i, _| x[i * kt + p]);
            (c * col).iter().copied().collect::<Vec<_>>()
        })
        .collect()
}

/// Iterative cross-temporal reconciliation.
///
/// Each iteration reconciles every series temporally and every column
/// cross-sectionally (in the order given by `order`) and then measures the
/// incoherence left in the dimension reconciled first. Stops when it is at
/// most `tol` or after `itmax` iterations; non-convergence is reported, not
/// raised.
#[allow(clippy::too_many_arguments)]
pub fn iterative<T: Real>(
    base: &ForecastSet<T>,
    structure: &Structure<T>,
    residuals: Option<&ResidualSet<T>>,
    est: &StepEstimators,
    itmax: usize,
    tol: f64,
    order: StepOrder,
    norm: Norm,
) -> Result<(ForecastSet<T>, IterationReport)> {
    check_layout(base, structure)?;
    if itmax == 0 {
        return Err(Error::Options("itmax must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Options("tol must be positive".into()));
    }
    let ops = Operators::new(structure, residuals, est)?;
    let mut xs = base.periods();
    let measure = |xs: &[DVector<T>]| -> f64 {
        let all: Vec<T> = xs
            .iter()
            .flat_map(|x| match order {
                StepOrder::Tcs => te_residual(structure, x),
                StepOrder::Cst => cs_residual(structure, x),
            })
            .collect();
        to_f64(norm.apply(all.into_iter()))
    };
    let initial = measure(&xs);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..itmax {
        for x in xs.iter_mut() {
            match order {
                StepOrder::Tcs => {
                    ops.apply_te(x, &ops.te);
                    ops.apply_cs(x, &ops.cs);
                }
                StepOrder::Cst => {
                    ops.apply_cs(x, &ops.cs);
                    ops.apply_te(x, &ops.te);
                }
            }
        }
        let inc = measure(&xs);
        trace.push(inc);
        if inc <= tol {
            converged = true;
            break;
        }
    }
    let out = ForecastSet::from_periods(&xs, structure)?;
    Ok((
        out,
        IterationReport {
            iterations: trace.len(),
            trace,
            initial,
            norm,
            converged,
        },
    ))
}
