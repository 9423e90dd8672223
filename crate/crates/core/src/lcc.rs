//! Level-conditional coherent reconciliation.
//!
//! For every level of the hierarchy a coherent forecast is built that keeps
//! (exogenous) or jointly revises (endogenous) that level's base forecasts
//! together with the free variables. The result is the average of these
//! level-conditional forecasts, optionally together with bottom-up.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classical::bottom_periods;
use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::linalg::{select, select_rows};
use crate::ls::{check_layout, LsReconciler, ReconciliationOptions};
use crate::scalar::{lit, Real};
use crate::series::ForecastSet;
use crate::structures::{LinearConstraints, Structure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstMode {
    /// The level's base forecasts stay fixed.
    #[default]
    Exogenous,
    /// The level and the free variables are revised together.
    Endogenous,
}

impl FromStr for ConstMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exogenous" => Ok(ConstMode::Exogenous),
            "endogenous" => Ok(ConstMode::Endogenous),
            _ => Err(Error::Options(format!("unknown const mode `{s}` (expected exogenous or endogenous)"))),
        }
    }
}

impl ConstMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstMode::Exogenous => "exogenous",
            ConstMode::Endogenous => "endogenous",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LccOptions<T: Real> {
    /// Add the bottom-up forecast to the average.
    pub ccc: bool,
    pub const_mode: ConstMode,
    /// Replacement bottom base forecasts, `n_b × (m·H)`.
    pub alt_bottom: Option<DMatrix<T>>,
    /// Partition of the upper series (0-based) into cross-sectional levels.
    /// Defaults to grouping by nesting depth.
    pub levels: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct LccComponent<T: Real> {
    pub label: String,
    /// Per-period indices held by this level.
    pub level: Vec<usize>,
    pub forecast: ForecastSet<T>,
}

#[derive(Debug, Clone)]
pub struct LccOutput<T: Real> {
    pub forecast: ForecastSet<T>,
    pub components: Vec<LccComponent<T>>,
}

/// Cross-sectional groups of series: upper levels, then the bottom series.
fn series_groups<T: Real>(structure: &Structure<T>, levels: Option<&Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
    let cs = structure.cs();
    let nu = cs.n_upper();
    let mut groups = match levels {
        Some(parts) => {
            let mut seen = vec![false; nu];
            for &i in parts.iter().flatten() {
                if i >= nu {
                    return Err(Error::Options(format!("level partition names series {} which is not an upper series", i + 1)));
                }
                if seen[i] {
                    return Err(Error::Options(format!("level partition lists series {} twice", i + 1)));
                }
                seen[i] = true;
            }
            if let Some(miss) = seen.iter().position(|s| !s) {
                return Err(Error::Options(format!("level partition misses upper series {}", miss + 1)));
            }
            parts.iter().filter(|p| !p.is_empty()).map(|p| {
                let mut p = p.clone();
                p.sort_unstable();
                p
            }).collect()
        }
        None => {
            let depths = cs.upper_depths();
            let max = depths.iter().copied().max().map_or(0, |d| d + 1);
            (0..max)
                .map(|d| (0..nu).filter(|&i| depths[i] == d).collect::<Vec<_>>())
                .filter(|g: &Vec<usize>| !g.is_empty())
                .collect::<Vec<_>>()
        }
    };
    groups.push((nu..cs.n()).collect());
    Ok(groups)
}

/// Levels as sets of per-period indices, with labels.
pub fn lcc_levels<T: Real>(structure: &Structure<T>, levels: Option<&Vec<Vec<usize>>>) -> Result<Vec<(String, Vec<usize>)>> {
    let groups = series_groups(structure, levels)?;
    let te = structure.te();
    let kt = structure.kt();
    let bottom_group = groups.len() - 1;
    let mut out = Vec::new();
    for (g, series) in groups.iter().enumerate() {
        for &k in te.orders() {
            if g == bottom_group && k == 1 {
                continue;
            }
            let off = te.offset(k).unwrap();
            let idx: Vec<usize> = series
                .iter()
                .flat_map(|&i| (0..te.m() / k).map(move |j| i * kt + off + j))
                .collect();
            let cs_label = if g == bottom_group {
                "bottom".to_string()
            } else {
                format!("level {}", g + 1)
            };
            let label = match structure.framework() {
                crate::structures::Framework::Cs => cs_label,
                crate::structures::Framework::Te => format!("k={k}"),
                crate::structures::Framework::Ct => format!("{cs_label} k={k}"),
            };
            out.push((label, idx));
        }
    }
    Ok(out)
}

/// Constraints of the sub-problem on `level ∪ free`, indexed within that set.
fn sub_constraints<T: Real>(full: &LinearConstraints<T>, level: &[usize]) -> (Vec<usize>, LinearConstraints<T>) {
    let mut idx: Vec<usize> = level.iter().chain(full.free.iter()).copied().collect();
    idx.sort_unstable();
    let pos = |v: usize| idx.binary_search(&v).unwrap();
    let free: Vec<usize> = full.free.iter().map(|&f| pos(f)).collect();
    let bound: Vec<usize> = level.iter().map(|&v| pos(v)).collect();
    let s = select_rows(&full.s, &idx);
    let mut c = DMatrix::zeros(level.len(), idx.len());
    for (r, &v) in level.iter().enumerate() {
        c[(r, pos(v))] = T::one();
        for (col, &f) in free.iter().enumerate() {
            let a = full.s[(v, col)];
            if a != T::zero() {
                c[(r, f)] = -a;
            }
        }
    }
    (idx, LinearConstraints { free, bound, s, c })
}

pub fn reconcile_lcc<T: Real>(
    base: &ForecastSet<T>,
    structure: &Structure<T>,
    omega: &CovarianceMatrix<T>,
    opts: &LccOptions<T>,
) -> Result<LccOutput<T>> {
    check_layout(base, structure)?;
    let d = structure.dim();
    if omega.omega.shape() != (d, d) {
        return Err(Error::dim("covariance matrix", format!("{d} × {d}"), format!("{} × {}", omega.omega.nrows(), omega.omega.ncols())));
    }
    let full = structure.constraints();
    let horizon = base.horizon();
    let bottoms: Vec<DVector<T>> = match &opts.alt_bottom {
        Some(alt) => {
            let b = bottom_periods(alt, structure)?;
            if b.len() != horizon {
                return Err(Error::dim("alternative bottom forecast columns", horizon * structure.m(), alt.ncols()));
            }
            b
        }
        None => (0..horizon)
            .map(|h| {
                let x = base.period(h);
                DVector::from_fn(full.free.len(), |i, _| x[full.free[i]])
            })
            .collect(),
    };

    let mut components = Vec::new();
    for (label, level) in lcc_levels(structure, opts.levels.as_ref())? {
        let (idx, cons) = sub_constraints(full, &level);
        let sub_omega = select(&omega.omega, &idx, &idx);
        let mut ls_opts = ReconciliationOptions::default();
        if opts.const_mode == ConstMode::Exogenous {
            ls_opts.immutable = cons.bound.clone();
        }
        let free_pos = cons.free.clone();
        let bound_pos = cons.bound.clone();
        let rec = LsReconciler::from_constraints(cons, &sub_omega, ls_opts)?;
        let mut periods = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let x = base.period(h);
            let mut sub = DVector::from_fn(idx.len(), |i, _| x[idx[i]]);
            for (j, &p) in free_pos.iter().enumerate() {
                sub[p] = bottoms[h][j];
            }
            let (y, _) = rec.reconcile_vector(&sub)?;
            let b = DVector::from_fn(free_pos.len(), |j, _| y[free_pos[j]]);
            let mut out = &full.s * &b;
            for &p in &bound_pos {
                out[idx[p]] = y[p];
            }
            periods.push(out);
        }
        components.push(LccComponent {
            label,
            level,
            forecast: ForecastSet::from_periods(&periods, structure)?,
        });
    }
    if opts.ccc {
        let periods: Vec<DVector<T>> = bottoms.iter().map(|b| &full.s * b).collect();
        components.push(LccComponent {
            label: "bottom-up".into(),
            level: Vec::new(),
            forecast: ForecastSet::from_periods(&periods, structure)?,
        });
    }
    let forecast = average(&components, base, structure)?;
    Ok(LccOutput { forecast, components })
}

fn average<T: Real>(components: &[LccComponent<T>], base: &ForecastSet<T>, structure: &Structure<T>) -> Result<ForecastSet<T>> {
    if components.is_empty() {
        return Ok(base.clone());
    }
    let mut sum = DMatrix::zeros(base.values().nrows(), base.values().ncols());
    for c in components {
        sum += c.forecast.values();
    }
    ForecastSet::new(sum / lit::<T>(components.len() as f64), structure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{estimate_covariance, Estimator};
    use crate::ls::reconcile_ls;
    use crate::series::{ResidualKind, ResidualSet};
    use crate::structures::{build_cs_from_agg, build_te, AggOrder, Tew};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig_a() -> crate::structures::CrossSectionalStructure<f64> {
        build_cs_from_agg(
            DMatrix::from_row_slice(3, 5, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            None,
        )
        .unwrap()
    }

    fn structures() -> Vec<Structure<f64>> {
        let te = build_te::<f64>(&AggOrder::Max(4), Tew::Sum).unwrap();
        vec![
            Structure::cross_sectional(fig_a()),
            Structure::temporal(te.clone()),
            Structure::cross_temporal(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap(), te),
        ]
    }

    fn random_base(s: &Structure<f64>, h: usize, rng: &mut ChaCha8Rng) -> ForecastSet<f64> {
        ForecastSet::new(DMatrix::from_fn(s.n(), h * s.kt(), |_, _| rng.random_range(1.0..30.0)), s).unwrap()
    }

    fn shr(s: &Structure<f64>, rng: &mut ChaCha8Rng) -> CovarianceMatrix<f64> {
        let res = ResidualSet::new(DMatrix::from_fn(3 * s.dim(), s.dim(), |_, _| rng.random_range(-1.0..1.0)), ResidualKind::InSample);
        estimate_covariance(Estimator::Shr, s, Some(&res), true).unwrap()
    }

    #[test]
    fn single_level_matches_immutable_ls() {
        let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let base = ForecastSet::new(DMatrix::from_row_slice(3, 1, &[10.0, 4.0, 5.0]), &s).unwrap();
        let omega = estimate_covariance(Estimator::Ols, &s, None, true).unwrap();
        let out = reconcile_lcc(&base, &s, &omega, &LccOptions::default()).unwrap();
        let opts = ReconciliationOptions {
            immutable: vec![0],
            ..Default::default()
        };
        let ls = reconcile_ls(&base, &s, &omega, &opts).unwrap().forecast;
        assert!((out.forecast.values() - ls.values()).amax() < 1e-12);
        assert_eq!(out.forecast.values().as_slice(), &[10.0, 4.5, 5.5]);

        let ccc = reconcile_lcc(&base, &s, &omega, &LccOptions { ccc: true, ..Default::default() }).unwrap();
        let expect = (ls.values() + DMatrix::from_row_slice(3, 1, &[9.0, 4.0, 5.0])) / 2.0;
        assert!((ccc.forecast.values() - expect).amax() < 1e-12);
    }

    #[test]
    fn coherent_base_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in structures() {
            let omega = shr(&s, &mut rng);
            let raw = random_base(&s, 2, &mut rng);
            let coherent = reconcile_ls(&raw, &s, &omega, &ReconciliationOptions::default()).unwrap().forecast;
            for mode in [ConstMode::Exogenous, ConstMode::Endogenous] {
                for ccc in [false, true] {
                    let opts = LccOptions {
                        ccc,
                        const_mode: mode,
                        ..Default::default()
                    };
                    let out = reconcile_lcc(&coherent, &s, &omega, &opts).unwrap();
                    assert!((out.forecast.values() - coherent.values()).amax() < 1e-9, "{:?} {mode:?}", s.framework());
                }
            }
        }
    }

    #[test]
    fn exogenous_levels_kept_and_mean_recomputable() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in structures() {
            let omega = shr(&s, &mut rng);
            let base = random_base(&s, 3, &mut rng);
            let opts = LccOptions { ccc: true, ..Default::default() };
            let out = reconcile_lcc(&base, &s, &omega, &opts).unwrap();
            for comp in &out.components {
                for h in 0..base.horizon() {
                    let (x, y) = (base.period(h), comp.forecast.period(h));
                    for &v in &comp.level {
                        assert_eq!(x[v].to_bits(), y[v].to_bits());
                    }
                    assert!(s.constraints().residual_inf(y.as_slice()) < 1e-9 * (1.0 + x.amax()));
                }
            }
            let mut sum = DMatrix::zeros(base.values().nrows(), base.values().ncols());
            out.components.iter().for_each(|c| sum += c.forecast.values());
            let mean = sum / out.components.len() as f64;
            assert!((mean - out.forecast.values()).amax() <= 1e-12 * (1.0 + base.values().amax()));
        }
    }

    #[test]
    fn default_levels_follow_nesting() {
        let s = Structure::cross_sectional(fig_a());
        let levels = lcc_levels(&s, None).unwrap();
        assert_eq!(levels.iter().map(|l| l.1.clone()).collect::<Vec<_>>(), vec![vec![0], vec![1, 2]]);
        let custom = lcc_levels(&s, Some(&vec![vec![0, 1, 2]])).unwrap();
        assert_eq!(custom.len(), 1);
        assert!(lcc_levels(&s, Some(&vec![vec![0, 1]])).is_err());
        assert!(lcc_levels(&s, Some(&vec![vec![0, 1, 2, 3]])).is_err());
    }

    #[test]
    fn alt_bottom_checked_and_used() {
        let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let base = ForecastSet::new(DMatrix::from_row_slice(3, 1, &[10.0, 4.0, 5.0]), &s).unwrap();
        let omega = estimate_covariance(Estimator::Ols, &s, None, true).unwrap();
        let bad = LccOptions {
            alt_bottom: Some(DMatrix::zeros(3, 1)),
            ..Default::default()
        };
        assert!(matches!(reconcile_lcc(&base, &s, &omega, &bad), Err(Error::Dimension { .. })));
        let alt = LccOptions {
            ccc: true,
            alt_bottom: Some(DMatrix::from_row_slice(2, 1, &[6.0, 2.0])),
            ..Default::default()
        };
        let out = reconcile_lcc(&base, &s, &omega, &alt).unwrap();
        assert_eq!(out.components[0].forecast.values().as_slice(), &[10.0, 7.0, 3.0]);
        assert_eq!(out.components[1].forecast.values().as_slice(), &[8.0, 6.0, 2.0]);
    }
}
