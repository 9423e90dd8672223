//! Nonlinear reconciliation: a learner per bottom target maps base forecasts
//! to revised bottom forecasts, which are then aggregated bottom-up.

pub mod learners;
pub mod tree;
pub mod tuning;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::bottom_up;
use crate::error::{Error, Result};
use crate::ls::check_layout;
use crate::scalar::{lit, to_f64, Real};
use crate::series::ForecastSet;
use crate::structures::{Framework, Structure};

pub use learners::{Learner, Model};
pub use tuning::Tuning;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FeatureMode {
    #[default]
    #[serde(rename = "all")]
    All,
    #[serde(rename = "bts")]
    Bts,
    #[serde(rename = "str")]
    Str,
    #[serde(rename = "str-bts")]
    StrBts,
    #[serde(rename = "low-high")]
    LowHigh,
    #[serde(rename = "compact")]
    Compact,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::All => "all",
            FeatureMode::Bts => "bts",
            FeatureMode::Str => "str",
            FeatureMode::StrBts => "str-bts",
            FeatureMode::LowHigh => "low-high",
            FeatureMode::Compact => "compact",
        }
    }

    pub fn available_for(self, framework: Framework) -> bool {
        use FeatureMode::*;
        match framework {
            Framework::Cs => matches!(self, All | Bts | Str | StrBts),
            Framework::Te => matches!(self, All | LowHigh),
            Framework::Ct => matches!(self, All | Compact),
        }
    }
}

impl FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FeatureMode::All),
            "bts" => Ok(FeatureMode::Bts),
            "str" => Ok(FeatureMode::Str),
            "str-bts" => Ok(FeatureMode::StrBts),
            "low-high" => Ok(FeatureMode::LowHigh),
            "compact" => Ok(FeatureMode::Compact),
            _ => Err(Error::Options(format!("unknown feature mode `{s}`"))),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A feature column: series `series` at order `k`, position `j`. Without a
/// position the column follows the target's high-frequency position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub series: String,
    pub k: usize,
    pub j: Option<usize>,
}

impl Feature {
    pub fn name(&self, framework: Framework) -> String {
        match (framework, self.j) {
            (Framework::Cs, _) => self.series.clone(),
            (_, Some(j)) => format!("{}_k{}_{}", self.series, self.k, j + 1),
            (_, None) => format!("{}_k{}", self.series, self.k),
        }
    }

    /// Per-period index for a target at high-frequency position `position`.
    fn resolve<T: Real>(&self, structure: &Structure<T>, position: usize) -> Option<usize> {
        let series = structure.cs().labels().iter().position(|l| *l == self.series)?;
        let te = structure.te();
        let off = te.offset(self.k)?;
        let j = self.j.unwrap_or(position / self.k);
        (j < te.m() / self.k).then(|| series * structure.kt() + off + j)
    }
}

fn feature_at<T: Real>(structure: &Structure<T>, idx: usize) -> Feature {
    let (i, k, j) = structure.locate(idx);
    Feature {
        series: structure.cs().labels()[i].clone(),
        k,
        j: Some(j),
    }
}

/// Feature columns for the model of bottom series `bottom` (0-based among
/// bottoms) at high-frequency position `position`.
pub fn select_features<T: Real>(structure: &Structure<T>, mode: FeatureMode, bottom: usize, position: usize) -> Result<Vec<Feature>> {
    let fw = structure.framework();
    if !mode.available_for(fw) {
        return Err(Error::Options(format!("feature mode `{mode}` is not available for the {} framework", fw.as_str())));
    }
    let cs = structure.cs();
    let (nu, n, m, kt) = (cs.n_upper(), cs.n(), structure.m(), structure.kt());
    if bottom >= cs.n_bottom() {
        return Err(Error::dim("bottom index", format!("< {}", cs.n_bottom()), bottom));
    }
    if position >= m {
        return Err(Error::dim("high-frequency position", format!("< {m}"), position));
    }
    let target = nu + bottom;
    let series: Vec<usize> = match mode {
        FeatureMode::All => return Ok((0..structure.dim()).map(|i| feature_at(structure, i)).collect()),
        FeatureMode::Bts => (nu..n).collect(),
        FeatureMode::Str => (0..nu).filter(|&i| cs.agg_mat()[(i, bottom)] != T::zero()).chain([target]).collect(),
        FeatureMode::StrBts => (0..nu).filter(|&i| cs.agg_mat()[(i, bottom)] != T::zero()).chain(nu..n).collect(),
        FeatureMode::LowHigh => {
            let te = structure.te();
            let hi = te.offset(1).unwrap();
            return Ok([0].into_iter().chain(hi..kt).map(|i| feature_at(structure, i)).collect());
        }
        FeatureMode::Compact => {
            let labels = cs.labels();
            let mut f: Vec<Feature> = (0..n)
                .map(|i| Feature {
                    series: labels[i].clone(),
                    k: 1,
                    j: None,
                })
                .collect();
            f.extend(structure.te().orders().iter().filter(|&&k| k > 1).map(|&k| Feature {
                series: labels[target].clone(),
                k,
                j: None,
            }));
            return Ok(f);
        }
    };
    Ok(series.into_iter().map(|i| feature_at(structure, i)).collect())
}

/// Validation-sample base forecasts and observed free values, one row per
/// top-level period.
#[derive(Debug, Clone)]
pub struct TrainingTable<T: Real> {
    /// `rows × d`, each row a per-period vector.
    pub hat: DMatrix<T>,
    /// `rows × n_free`, bottom series major, high-frequency position minor.
    pub obs: DMatrix<T>,
}

impl<T: Real> TrainingTable<T> {
    pub fn new(hat: DMatrix<T>, obs: DMatrix<T>) -> Self {
        Self { hat, obs }
    }

    /// From forecast layout (`n × (T·kt)`) and bottom layout (`n_b × (T·m)`).
    pub fn from_layout(hat: &ForecastSet<T>, obs: &DMatrix<T>, structure: &Structure<T>) -> Result<Self> {
        check_layout(hat, structure)?;
        let h = hat.periods();
        let d = structure.dim();
        let nf = structure.n_free();
        let (rows, cols) = obs.shape();
        let nb = structure.cs().n_bottom();
        if rows != nb || cols % structure.m() != 0 {
            return Err(Error::dim("observed bottom values", format!("{nb} × (T·{})", structure.m()), format!("{rows} × {cols}")));
        }
        let o: Vec<_> = (0..cols / structure.m())
            .map(|t| nalgebra::DVector::from_fn(nf, |f, _| obs[(f / structure.m(), t * structure.m() + f % structure.m())]))
            .collect();
        Ok(Self {
            hat: DMatrix::from_fn(h.len(), d, |r, c| h[r][c]),
            obs: DMatrix::from_fn(o.len(), nf, |r, c| o[r][c]),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub learner: Learner,
    pub mode: FeatureMode,
    pub tuning: Option<Tuning>,
    pub seed: u64,
    /// Fewest validation rows accepted.
    pub min_rows: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            learner: Learner::forest(),
            mode: FeatureMode::All,
            tuning: None,
            seed: 0,
            min_rows: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTarget {
    /// Label of the bottom series.
    pub series: String,
    pub bottom: usize,
    /// High-frequency positions predicted by this model.
    pub positions: Vec<usize>,
    pub features: Vec<Feature>,
    /// Hyperparameters chosen by tuning.
    pub params: Vec<(String, f64)>,
    pub model: Model,
}

/// Trained models with everything needed to rebuild their inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedReconciler {
    pub version: u32,
    pub framework: Framework,
    pub learner: Learner,
    pub mode: FeatureMode,
    pub seed: u64,
    pub n_bottom: usize,
    pub m: usize,
    pub rows: usize,
    pub targets: Vec<FittedTarget>,
}

impl FittedReconciler {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Training(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s).map_err(|e| Error::Training(format!("invalid model bundle: {e}")))?;
        if f.version != BUNDLE_VERSION {
            return Err(Error::Training(format!("model bundle version {} is not supported (expected {BUNDLE_VERSION})", f.version)));
        }
        Ok(f)
    }
}

/// Targets as `(bottom, positions)`; compact mode pools all positions of a series.
fn targets<T: Real>(structure: &Structure<T>, mode: FeatureMode) -> Vec<(usize, Vec<usize>)> {
    let (nb, m) = (structure.cs().n_bottom(), structure.m());
    if mode == FeatureMode::Compact {
        (0..nb).map(|b| (b, (0..m).collect())).collect()
    } else {
        (0..nb).flat_map(|b| (0..m).map(move |j| (b, vec![j]))).collect()
    }
}

fn design<T: Real>(rows: &[Vec<T>], idx: &[Vec<usize>]) -> DMatrix<f64> {
    let p = idx.first().map_or(0, Vec::len);
    let per = idx.len();
    DMatrix::from_fn(rows.len() * per, p, |r, c| to_f64(rows[r / per][idx[r % per][c]]))
}

pub fn fit<T: Real>(train: &TrainingTable<T>, structure: &Structure<T>, opts: &FitOptions) -> Result<FittedReconciler> {
    let (d, nf, m) = (structure.dim(), structure.n_free(), structure.m());
    let rows = train.hat.nrows();
    if train.hat.ncols() != d {
        return Err(Error::dim("hat columns", d, train.hat.ncols()));
    }
    if train.obs.ncols() != nf {
        return Err(Error::dim("obs columns", nf, train.obs.ncols()));
    }
    if train.obs.nrows() != rows {
        return Err(Error::dim("obs rows (must equal hat rows)", rows, train.obs.nrows()));
    }
    if rows < opts.min_rows {
        return Err(Error::TooFewRows {
            needed: opts.min_rows,
            found: rows,
        });
    }
    for r in 0..rows {
        if train.hat.row(r).iter().chain(train.obs.row(r).iter()).any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("validation row {} contains non-finite values", r + 1)));
        }
    }
    if !opts.mode.available_for(structure.framework()) {
        return Err(Error::Options(format!(
            "feature mode `{}` is not available for the {} framework",
            opts.mode,
            structure.framework().as_str()
        )));
    }
    let hat: Vec<Vec<T>> = (0..rows).map(|r| train.hat.row(r).iter().copied().collect()).collect();
    let labels = structure.cs().labels();
    let nu = structure.cs().n_upper();
    let fitted: Vec<Result<FittedTarget>> = targets(structure, opts.mode)
        .into_par_iter()
        .enumerate()
        .map(|(ti, (b, positions))| {
            let features = select_features(structure, opts.mode, b, positions[0])?;
            let idx: Vec<Vec<usize>> = positions
                .iter()
                .map(|&j| features.iter().map(|f| f.resolve(structure, j).unwrap()).collect())
                .collect();
            let x = design(&hat, &idx);
            let y: Vec<f64> = (0..rows * positions.len())
                .map(|r| to_f64(train.obs[(r / positions.len(), b * m + positions[r % positions.len()])]))
                .collect();
            let (learner, params) = match &opts.tuning {
                Some(t) => {
                    let tuned = tuning::tune(&opts.learner, t, &x, &y, opts.seed, ti)?;
                    (tuned.learner, tuned.params)
                }
                None => (opts.learner.clone(), Vec::new()),
            };
            let model = learner.fit(&x, &y, &mut learners::target_rng(opts.seed, ti))?;
            Ok(FittedTarget {
                series: labels[nu + b].clone(),
                bottom: b,
                positions,
                features,
                params,
                model,
            })
        })
        .collect();
    Ok(FittedReconciler {
        version: BUNDLE_VERSION,
        framework: structure.framework(),
        learner: opts.learner.clone(),
        mode: opts.mode,
        seed: opts.seed,
        n_bottom: structure.cs().n_bottom(),
        m,
        rows,
        targets: fitted.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Predicts the bottom values (`n_b × (m·H)`) for `base`.
pub fn predict_bottoms<T: Real>(base: &ForecastSet<T>, fitted: &FittedReconciler, structure: &Structure<T>) -> Result<DMatrix<T>> {
    check_layout(base, structure)?;
    if fitted.framework != structure.framework() {
        return Err(Error::Options(format!(
            "model was fitted for the {} framework, not {}",
            fitted.framework.as_str(),
            structure.framework().as_str()
        )));
    }
    let (nb, m) = (structure.cs().n_bottom(), structure.m());
    if fitted.n_bottom != nb || fitted.m != m {
        return Err(Error::dim("fitted structure (bottom series, m)", format!("({}, {})", fitted.n_bottom, fitted.m), format!("({nb}, {m})")));
    }
    let mut missing = Vec::new();
    let mut resolved = Vec::with_capacity(fitted.targets.len());
    for t in &fitted.targets {
        if t.bottom >= nb || t.positions.iter().any(|&j| j >= m) {
            return Err(Error::Training(format!("model for `{}` targets positions outside the structure", t.series)));
        }
        let idx: Vec<Vec<usize>> = t
            .positions
            .iter()
            .map(|&j| {
                t.features
                    .iter()
                    .map(|f| match f.resolve(structure, j) {
                        Some(i) => i,
                        None => {
                            let name = f.name(fitted.framework);
                            if !missing.contains(&name) {
                                missing.push(name);
                            }
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        resolved.push(idx);
    }
    if !missing.is_empty() {
        return Err(Error::FeatureMismatch { missing });
    }
    let periods = base.periods();
    let rows: Vec<Vec<T>> = periods.iter().map(|p| p.iter().copied().collect()).collect();
    let mut out = DMatrix::<T>::zeros(nb, m * periods.len());
    for (t, idx) in fitted.targets.iter().zip(&resolved) {
        let x = design(&rows, idx);
        let pred = t.model.predict_rows(&x);
        for (r, v) in pred.into_iter().enumerate() {
            let (h, j) = (r / idx.len(), t.positions[r % idx.len()]);
            out[(t.bottom, h * m + j)] = lit(v);
        }
    }
    Ok(out)
}

/// Bottom forecasts from the fitted models, aggregated bottom-up.
pub fn reconcile_ml<T: Real>(
    base: &ForecastSet<T>,
    fitted: &FittedReconciler,
    structure: &Structure<T>,
    sntz: bool,
    round: bool,
) -> Result<ForecastSet<T>> {
    let bottoms = predict_bottoms(base, fitted, structure)?;
    bottom_up(&bottoms, structure, sntz, round)
}

#[cfg(test)]
mod tests;
