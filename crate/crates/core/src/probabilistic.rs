//! Reconciliation of forecast distributions: Gaussian moments in closed form
//! and sample paths draw by draw.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, min_eigenvalue, select, select_vec, symmetrize};
use crate::ls::{projection_matrix, Approach};
use crate::scalar::{lit, to_f64, Real};
use crate::series::ForecastSet;
use crate::structures::Structure;

/// Gaussian forecast of one period.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianForecast<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    /// Only the free (bottom, high-frequency) marginal is held.
    pub reduced: bool,
}

/// Covariance of the base forecast distribution.
#[derive(Debug, Clone, Copy)]
pub enum BaseCovariance<'a, T: Real> {
    /// The reconciliation covariance itself.
    Comb,
    Matrix(&'a DMatrix<T>),
}

/// Negative eigenvalues clipped from the reconciled covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenClip {
    pub min_eigenvalue: f64,
    pub clipped: usize,
}

#[derive(Debug, Clone)]
pub struct GaussianOutput<T: Real> {
    pub forecast: GaussianForecast<T>,
    pub clip: Option<EigenClip>,
}

/// Reconciles `N(μ, Σ)` to `N(Mμ, MΣMᵀ)`; with `BaseCovariance::Comb` the
/// covariance is `MΩ`. `reduce_form` keeps the free marginal only.
pub fn reconcile_gaussian<T: Real>(
    mean: &DVector<T>,
    base_cov: BaseCovariance<'_, T>,
    structure: &Structure<T>,
    omega: &DMatrix<T>,
    approach: Approach,
    reduce_form: bool,
) -> Result<GaussianOutput<T>> {
    let d = structure.dim();
    if mean.len() != d {
        return Err(Error::dim("mean vector", d, mean.len()));
    }
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "mean vector".into() });
    }
    let m = projection_matrix(structure.constraints(), omega, approach)?;
    let cov = match base_cov {
        BaseCovariance::Comb => symmetrize(&(&m * omega)),
        BaseCovariance::Matrix(sigma) => {
            if sigma.shape() != (d, d) {
                return Err(Error::dim("base covariance", format!("{d} × {d}"), format!("{} × {}", sigma.nrows(), sigma.ncols())));
            }
            if !sigma.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { what: "base covariance".into() });
            }
            let scale = max_abs(sigma);
            if min_eigenvalue(&symmetrize(sigma)) < -lit::<T>(1e-8) * scale {
                return Err(Error::NotPositiveDefinite {
                    what: "base covariance".into(),
                    index: 0,
                    condition: f64::INFINITY,
                });
            }
            symmetrize(&(&m * sigma * m.transpose()))
        }
    };
    let (cov, clip) = clip_negative(cov);
    let mean = &m * mean;
    let forecast = if reduce_form {
        let free = &structure.constraints().free;
        GaussianForecast {
            mean: select_vec(&mean, free),
            cov: select(&cov, free, free),
            reduced: true,
        }
    } else {
        GaussianForecast { mean, cov, reduced: false }
    };
    Ok(GaussianOutput { forecast, clip })
}

/// Clips eigenvalues below `−1e−10·max|X|` to zero; round-off negatives are left alone.
fn clip_negative<T: Real>(cov: DMatrix<T>) -> (DMatrix<T>, Option<EigenClip>) {
    if cov.nrows() == 0 {
        return (cov, None);
    }
    let tol = lit::<T>(1e-10) * max_abs(&cov);
    let eig = SymmetricEigen::new(cov.clone());
    let min = eig.eigenvalues.iter().fold(T::zero(), |m, v| m.min(*v));
    if min >= -tol {
        return (cov, None);
    }
    let clipped = eig.eigenvalues.iter().filter(|v| **v < T::zero()).count();
    let vals = eig.eigenvalues.map(|v| v.max(T::zero()));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (
        symmetrize(&rebuilt),
        Some(EigenClip {
            min_eigenvalue: to_f64(min),
            clipped,
        }),
    )
}

/// Draws of the base forecasts: one draw per row, each row the per-period
/// vectors of all forecast periods concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleForecast<T: Real> {
    pub draws: DMatrix<T>,
}

impl<T: Real> SampleForecast<T> {
    pub fn new(draws: DMatrix<T>) -> Self {
        Self { draws }
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }
}

/// Applies `method` to every draw. Output rows follow input rows; the
/// error of the lowest failing draw is returned.
pub fn reconcile_samples<T, F>(draws: &SampleForecast<T>, structure: &Structure<T>, method: F) -> Result<SampleForecast<T>>
where
    T: Real,
    F: Fn(&ForecastSet<T>) -> Result<ForecastSet<T>> + Sync,
{
    let d = structure.dim();
    let (b, len) = draws.draws.shape();
    if b == 0 {
        return Err(Error::Empty { what: "draw matrix".into() });
    }
    if len == 0 || len % d != 0 {
        return Err(Error::dim("draw length", format!("a positive multiple of {d}"), len));
    }
    let horizon = len / d;
    let rows: Vec<Result<Vec<T>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let row = draws.draws.row(i);
            let periods: Vec<DVector<T>> = (0..horizon)
                .map(|h| DVector::from_fn(d, |j, _| row[h * d + j]))
                .collect();
            let base = ForecastSet::from_periods(&periods, structure)?;
            let out = method(&base)?;
            Ok(out.periods().iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect())
        })
        .collect();
    let mut out = DMatrix::zeros(b, len);
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Ok(v) => out.row_mut(i).copy_from_slice(&v),
            Err(e) => {
                return Err(Error::Draw {
                    index: i,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(SampleForecast { draws: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{estimate_covariance, Estimator};
    use crate::linalg::rank;
    use crate::ls::{reconcile_ls, ReconciliationOptions};
    use crate::structures::{build_cs_from_agg, build_cs_from_cons};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_series() -> Structure<f64> {
        Structure::cross_sectional(build_cs_from_cons(&DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap())
    }

    #[test]
    fn closed_form_example() {
        let s = two_series();
        let eye = DMatrix::identity(2, 2);
        let out = reconcile_gaussian(&DVector::from_row_slice(&[1.0, 3.0]), BaseCovariance::Matrix(&eye), &s, &eye, Approach::Proj, false).unwrap();
        assert_relative_eq!(out.forecast.mean, DVector::from_row_slice(&[2.0, 2.0]), epsilon = 1e-14);
        assert_relative_eq!(out.forecast.cov, DMatrix::from_element(2, 2, 0.5), epsilon = 1e-14);
        let comb = reconcile_gaussian(&DVector::from_row_slice(&[1.0, 3.0]), BaseCovariance::Comb, &s, &eye, Approach::Strc, false).unwrap();
        assert_relative_eq!(comb.forecast.cov, DMatrix::from_element(2, 2, 0.5), epsilon = 1e-14);
        assert!(out.clip.is_none());
    }

    #[test]
    fn degenerate_distribution_is_fixed() {
        let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let mu = DVector::from_row_slice(&[5.0, 2.0, 3.0]);
        let zero = DMatrix::zeros(3, 3);
        let out = reconcile_gaussian(&mu, BaseCovariance::Matrix(&zero), &s, &DMatrix::identity(3, 3), Approach::Proj, false).unwrap();
        assert_relative_eq!(out.forecast.mean, mu, epsilon = 1e-14);
        assert!(out.forecast.cov.amax() < 1e-15);
        let red = reconcile_gaussian(&mu, BaseCovariance::Matrix(&zero), &s, &DMatrix::identity(3, 3), Approach::Proj, true).unwrap();
        assert!(red.forecast.reduced);
        assert_eq!(red.forecast.mean.as_slice(), &mu.as_slice()[1..]);
    }

    #[test]
    fn reconciled_covariance_rank_and_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Structure::cross_sectional(
            build_cs_from_agg(DMatrix::from_row_slice(3, 5, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]), None).unwrap(),
        );
        for _ in 0..10 {
            let g = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
            let sigma = &g * g.transpose() + DMatrix::identity(8, 8) * 0.1;
            let mu = DVector::from_fn(8, |_, _| rng.random_range(0.0..10.0));
            let omega = estimate_covariance(Estimator::Str, &s, None, true).unwrap();
            let out = reconcile_gaussian(&mu, BaseCovariance::Matrix(&sigma), &s, &omega.omega, Approach::Proj, false).unwrap();
            assert!(rank(&out.forecast.cov, 1e-9) <= 8 - 3);
            let c = s.cons_mat();
            assert!((c * &out.forecast.cov).amax() < 1e-10 * out.forecast.cov.amax());
            assert!((c * &out.forecast.mean).amax() < 1e-10 * (1.0 + mu.amax()));
        }
    }

    #[test]
    fn samples_match_point_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), None).unwrap());
        let omega = estimate_covariance(Estimator::Ols, &s, None, true).unwrap();
        let method = |b: &ForecastSet<f64>| Ok(reconcile_ls(b, &s, &omega, &ReconciliationOptions::default())?.forecast);
        let draws = SampleForecast::new(DMatrix::from_fn(100, 8, |_, _| rng.random_range(0.0..10.0)));
        let out = reconcile_samples(&draws, &s, method).unwrap();
        for i in 0..100 {
            for h in 0..2 {
                let x: Vec<f64> = (0..4).map(|j| out.draws[(i, h * 4 + j)]).collect();
                assert!(s.constraints().residual_inf(&x) < 1e-10);
            }
        }
        let mean_in = draws.draws.row_mean();
        let mean_out = out.draws.row_mean();
        let single = SampleForecast::new(DMatrix::from_row_slice(1, 8, mean_in.as_slice()));
        let rec_mean = reconcile_samples(&single, &s, method).unwrap();
        assert!((rec_mean.draws.row(0) - mean_out).amax() < 1e-9);
    }

    #[test]
    fn failing_draw_is_named() {
        let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
        let draws = SampleForecast::new(DMatrix::from_fn(20, 3, |i, _| i as f64));
        let err = reconcile_samples(&draws, &s, |b| {
            if b.values()[(0, 0)] >= 7.0 {
                Err(Error::Options("boom".into()))
            } else {
                Ok(b.clone())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Draw { index: 7, .. }));
        assert!(reconcile_samples(&SampleForecast::new(DMatrix::zeros(2, 4)), &s, |b| Ok(b.clone())).is_err());
    }
}
