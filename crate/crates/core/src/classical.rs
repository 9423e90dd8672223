//! Bottom-up, top-down and middle-out reconciliation.
//!
//! Forecasts for a set of "middle" series at one aggregation order are split
//! over the bottom high-frequency values they cover, proportionally to
//! user weights, and everything is then aggregated back up.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::series::ForecastSet;
use crate::structures::Structure;

/// Disaggregation weights, one per bottom high-frequency value of a period
/// (`n_b` for cs, `m` for te, `n_b · m` bottom-major for ct).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T> {
    pub weights: Vec<T>,
    /// Rescale the weights inside each split so that re-aggregating the
    /// split reproduces the split value.
    pub normalize: bool,
}

impl<T: Real> WeightVector<T> {
    pub fn new(weights: Vec<T>, normalize: bool) -> Self {
        Self { weights, normalize }
    }
}

/// Bottom high-frequency forecasts (`n_b × m·H`, one row per bottom series)
/// aggregated through the structure.
pub fn bottom_up<T: Real>(base: &DMatrix<T>, structure: &Structure<T>, sntz: bool, round: bool) -> Result<ForecastSet<T>> {
    let periods = bottom_periods(base, structure)?;
    let periods: Vec<DVector<T>> = periods
        .into_iter()
        .map(|mut b| {
            if sntz {
                b.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            if round {
                b.iter_mut().for_each(|v| *v = v.round());
            }
            structure.summing_matrix() * b
        })
        .collect();
    ForecastSet::from_periods(&periods, structure)
}

/// Splits `n_b × m·H` bottom data into per-period free vectors.
pub(crate) fn bottom_periods<T: Real>(base: &DMatrix<T>, structure: &Structure<T>) -> Result<Vec<DVector<T>>> {
    let nb = structure.cs().n_bottom();
    let m = structure.m();
    let (rows, cols) = base.shape();
    if rows != nb {
        return Err(Error::dim("bottom forecast rows", nb, rows));
    }
    if cols == 0 || cols % m != 0 {
        return Err(Error::dim("bottom forecast columns", format!("a positive multiple of {m}"), cols));
    }
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "bottom forecasts".into(),
        });
    }
    Ok((0..cols / m)
        .map(|h| DVector::from_fn(nb * m, |f, _| base[(f / m, h * m + f % m)]))
        .collect())
}

/// Top-down: the most aggregated value of series 0 per period (`1 × H`) is
/// split with `weights`.
pub fn top_down<T: Real>(base: &DMatrix<T>, structure: &Structure<T>, weights: &WeightVector<T>) -> Result<ForecastSet<T>> {
    middle_out(base, structure, weights, &[0], structure.m())
}

/// Middle-out from series `id_rows` (0-based series indices) at aggregation
/// order `order`. `base` has one row per id and `H · m/order` columns.
///
/// The bottom supports of the selected rows must partition the bottom
/// high-frequency values.
pub fn middle_out<T: Real>(
    base: &DMatrix<T>,
    structure: &Structure<T>,
    weights: &WeightVector<T>,
    id_rows: &[usize],
    order: usize,
) -> Result<ForecastSet<T>> {
    let m = structure.m();
    let nf = structure.n_free();
    if weights.weights.len() != nf {
        return Err(Error::Weights(format!("expected {nf} weights, found {}", weights.weights.len())));
    }
    if weights.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Weights("weights must be finite".into()));
    }
    if id_rows.is_empty() {
        return Err(Error::IdRows("no rows selected".into()));
    }
    if let Some(&i) = id_rows.iter().find(|&&i| i >= structure.n()) {
        return Err(Error::IdRows(format!("row {} is outside the {} series", i + 1, structure.n())));
    }
    if structure.te().offset(order).is_none() {
        return Err(Error::AggregationOrder(format!(
            "order {order} is not in {:?}",
            structure.te().orders()
        )));
    }
    let per = m / order;
    let (rows, cols) = base.shape();
    if rows != id_rows.len() {
        return Err(Error::dim("middle-level forecast rows", id_rows.len(), rows));
    }
    if cols == 0 || cols % per != 0 {
        return Err(Error::dim("middle-level forecast columns", format!("a positive multiple of {per}"), cols));
    }
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "middle-level forecasts".into(),
        });
    }

    // middle variables in the order of base entries within a period
    let mut middle = Vec::with_capacity(rows * per);
    for &i in id_rows {
        for j in 0..per {
            middle.push(structure.index(i, order, j)?);
        }
    }
    let s = structure.summing_matrix();
    let mut owner = vec![usize::MAX; nf];
    for (r, &v) in middle.iter().enumerate() {
        for f in 0..nf {
            if s[(v, f)] != T::zero() {
                if owner[f] != usize::MAX {
                    return Err(Error::IdRows(format!(
                        "rows {} and {} share bottom value {}",
                        id_rows[owner[f] / per] + 1,
                        id_rows[r / per] + 1,
                        structure.label(structure.constraints().free[f])
                    )));
                }
                owner[f] = r;
            }
        }
    }
    if let Some(f) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::IdRows(format!(
            "bottom value {} is not covered by the selected rows",
            structure.label(structure.constraints().free[f])
        )));
    }
    let w = &weights.weights;
    let scale: Vec<T> = if weights.normalize {
        let mut denom = vec![T::zero(); middle.len()];
        for f in 0..nf {
            denom[owner[f]] += s[(middle[owner[f]], f)] * w[f];
        }
        if let Some(r) = denom.iter().position(|d| *d == T::zero()) {
            return Err(Error::Weights(format!(
                "weights under row {} sum to zero and cannot be normalized",
                id_rows[r / per] + 1
            )));
        }
        denom.iter().map(|d| T::one() / *d).collect()
    } else {
        vec![T::one(); middle.len()]
    };

    let horizon = cols / per;
    let periods: Vec<DVector<T>> = (0..horizon)
        .map(|h| {
            let b = DVector::from_fn(nf, |f, _| {
                let r = owner[f];
                let value = base[(r / per, h * per + r % per)];
                value * w[f] * scale[r]
            });
            s * b
        })
        .collect();
    ForecastSet::from_periods(&periods, structure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{build_cs_from_agg, build_te, AggOrder, Tew};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fig1() -> Structure<f64> {
        let a = DMatrix::from_row_slice(3, 5, &[1., 1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 1., 1., 1.]);
        Structure::cross_sectional(build_cs_from_agg(a, None).unwrap())
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn bottom_up_examples() {
        let s = fig1();
        let out = bottom_up(&col(&[1., 2., 3., 4., 5.]), &s, false, false).unwrap();
        assert_eq!(out.values().as_slice(), &[15., 3., 12., 1., 2., 3., 4., 5.]);

        let s2 = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let out = bottom_up(&col(&[-1.0, 2.0]), &s2, true, false).unwrap();
        assert_eq!(out.values().as_slice(), &[2.0, 0.0, 2.0]);

        let te = Structure::temporal(build_te(&AggOrder::Max(2), Tew::Avg).unwrap());
        let out = bottom_up(&DMatrix::from_row_slice(1, 2, &[2.0, 4.0]), &te, false, false).unwrap();
        assert_eq!(out.values().as_slice(), &[3.0, 2.0, 4.0]);
    }

    #[test]
    fn round_gives_integer_bottoms() {
        let s = fig1();
        let out = bottom_up(&col(&[1.2, 2.5, 3.7, -0.4, 5.0]), &s, false, true).unwrap();
        assert!(out.values().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn top_down_examples() {
        let s = fig1();
        let w = WeightVector::new(vec![0.2; 5], false);
        let out = top_down(&col(&[10.0]), &s, &w).unwrap();
        assert_eq!(out.values().as_slice(), &[10., 4., 6., 2., 2., 2., 2., 2.]);
        let w = WeightVector::new(vec![2.0; 5], true);
        let out = top_down(&col(&[10.0]), &s, &w).unwrap();
        assert_relative_eq!(out.values().as_slice(), [10., 4., 6., 2., 2., 2., 2., 2.].as_slice(), epsilon = 1e-14);

        let s2 = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let out = top_down(&col(&[9.0]), &s2, &WeightVector::new(vec![1.0 / 3.0, 2.0 / 3.0], false)).unwrap();
        assert_relative_eq!(out.values().as_slice(), [9.0, 3.0, 6.0].as_slice(), epsilon = 1e-14);
    }

    #[test]
    fn weight_errors() {
        let s = fig1();
        assert!(matches!(top_down(&col(&[1.0]), &s, &WeightVector::new(vec![1.0; 4], true)), Err(Error::Weights(_))));
        assert!(matches!(top_down(&col(&[1.0]), &s, &WeightVector::new(vec![0.0; 5], true)), Err(Error::Weights(_))));
    }

    #[test]
    fn middle_out_examples() {
        let s = fig1();
        let w = WeightVector::new(vec![0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], true);
        let out = middle_out(&col(&[4.0, 6.0]), &s, &w, &[1, 2], 1).unwrap();
        assert_relative_eq!(out.values().as_slice(), [10., 4., 6., 2., 2., 2., 2., 2.].as_slice(), epsilon = 1e-14);
        let out = middle_out(&col(&[0.0, 0.0]), &s, &w, &[1, 2], 1).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
        let td = top_down(&col(&[7.0]), &s, &w).unwrap();
        let mo = middle_out(&col(&[7.0]), &s, &w, &[0], 1).unwrap();
        assert_eq!(td, mo);
    }

    #[test]
    fn middle_out_rejects_overlap_and_gaps() {
        let s = fig1();
        let w = WeightVector::new(vec![0.2; 5], true);
        assert!(matches!(middle_out(&col(&[1.0, 2.0]), &s, &w, &[0, 1], 1), Err(Error::IdRows(_))));
        assert!(matches!(middle_out(&col(&[1.0]), &s, &w, &[1], 1), Err(Error::IdRows(_))));
    }

    #[test]
    fn temporal_and_cross_temporal_splits() {
        let te = Structure::temporal(build_te(&AggOrder::Max(4), Tew::Avg).unwrap());
        let w = WeightVector::new(vec![1.0, 2.0, 3.0, 4.0], true);
        let out = top_down(&DMatrix::from_row_slice(1, 1, &[10.0]), &te, &w).unwrap();
        assert_relative_eq!(out.values()[(0, 0)], 10.0, epsilon = 1e-12);
        assert!(te.constraints().residual_inf(out.period(0).as_slice()) < 1e-12);

        let cs = build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap();
        let ct = Structure::cross_temporal(cs, build_te(&AggOrder::Max(2), Tew::Sum).unwrap());
        let w = WeightVector::new(vec![0.1, 0.2, 0.3, 0.4], true);
        let out = middle_out(&DMatrix::from_row_slice(2, 2, &[3.0, 5.0, 7.0, 9.0]), &ct, &w, &[1, 2], 1).unwrap();
        // series 2 at k=1 keeps (3, 5), series 3 keeps (7, 9)
        assert_relative_eq!(out.period(0).as_slice(), [24.0, 10.0, 14.0, 8.0, 3.0, 5.0, 16.0, 7.0, 9.0].as_slice(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn outputs_are_coherent(b in prop::collection::vec(-50.0f64..50.0, 5), top in 0.0f64..100.0,
                                w in prop::collection::vec(0.01f64..1.0, 5), sntz: bool, round: bool) {
            let s = fig1();
            let bu = bottom_up(&col(&b), &s, sntz, round).unwrap();
            prop_assert!(s.constraints().residual_inf(bu.period(0).as_slice()) <= 1e-10 * (1.0 + bu.values().amax()));
            if sntz {
                prop_assert!(bu.values().iter().all(|v| *v >= 0.0));
            }
            let td = top_down(&col(&[top]), &s, &WeightVector::new(w.clone(), true)).unwrap();
            prop_assert!(s.constraints().residual_inf(td.period(0).as_slice()) <= 1e-10 * (1.0 + top));
            prop_assert!((td.values()[(0, 0)] - top).abs() <= 1e-12 * (1.0 + top));
        }

        #[test]
        fn top_down_inverts_bottom_up_with_true_shares(b in prop::collection::vec(0.1f64..50.0, 5)) {
            let s = fig1();
            let bu = bottom_up(&col(&b), &s, false, false).unwrap();
            let total = bu.values()[(0, 0)];
            let shares: Vec<f64> = b.iter().map(|v| v / total).collect();
            let td = top_down(&col(&[total]), &s, &WeightVector::new(shares, false)).unwrap();
            for (x, y) in td.values().iter().zip(bu.values().iter()) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
