//! Grid search with contiguous K-fold validation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::learners::{target_rng, Learner};
use crate::error::{Error, Result};
use crate::linalg::select_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    /// Parameter ranges in declaration order.
    pub grid: Vec<(String, Vec<f64>)>,
    pub folds: usize,
}

impl Tuning {
    pub fn new(grid: Vec<(String, Vec<f64>)>) -> Self {
        Self { grid, folds: 5 }
    }

    /// Grid points in declaration order; the first parameter varies slowest.
    pub fn points(&self) -> Vec<Vec<(String, f64)>> {
        let mut out: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for (name, values) in &self.grid {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((name.clone(), *v));
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// Result of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub learner: Learner,
    pub params: Vec<(String, f64)>,
    pub cv_mse: f64,
}

/// Picks the grid point with the smallest mean validation error; ties go to
/// the earlier point.
pub fn tune(base: &Learner, tuning: &Tuning, x: &DMatrix<f64>, y: &[f64], seed: u64, stream: usize) -> Result<Tuned> {
    let n = y.len();
    let k = tuning.folds;
    if k < 2 || k > n {
        return Err(Error::Options(format!("cannot run {k}-fold validation on {n} rows")));
    }
    let mut best: Option<Tuned> = None;
    for (g, point) in tuning.points().into_iter().enumerate() {
        let mut learner = base.clone();
        for (name, v) in &point {
            learner.set(name, *v)?;
        }
        let mut sse = 0.0;
        for f in 0..k {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let train: Vec<usize> = (0..lo).chain(hi..n).collect();
            let test: Vec<usize> = (lo..hi).collect();
            let mut rng = target_rng(seed.wrapping_add((1 + g * k + f) as u64), stream);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = learner.fit(&select_rows(x, &train), &yt, &mut rng)?;
            let pred = model.predict_rows(&select_rows(x, &test));
            sse += test.iter().zip(pred).map(|(&i, p)| (p - y[i]).powi(2)).sum::<f64>();
        }
        let mse = sse / n as f64;
        if best.as_ref().is_none_or(|b| mse < b.cv_mse) {
            best = Some(Tuned {
                learner,
                params: point,
                cv_mse: mse,
            });
        }
    }
    best.ok_or_else(|| Error::Options("empty tuning grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order() {
        let t = Tuning::new(vec![("a".into(), vec![1.0, 2.0]), ("b".into(), vec![3.0, 4.0])]);
        let pts: Vec<Vec<f64>> = t.points().iter().map(|p| p.iter().map(|x| x.1).collect()).collect();
        assert_eq!(pts, vec![vec![1.0, 3.0], vec![1.0, 4.0], vec![2.0, 3.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn ties_go_to_first_point() {
        let x = DMatrix::from_fn(20, 1, |i, _| i as f64);
        let t = Tuning::new(vec![("k".into(), vec![3.0, 1.0, 2.0])]);
        let r = tune(&Learner::Knn { k: 1 }, &t, &x, &[7.0; 20], 0, 0).unwrap();
        assert_eq!(r.cv_mse, 0.0);
        assert_eq!(r.params, vec![("k".to_string(), 3.0)]);
    }

    #[test]
    fn ridge_penalty_selected() {
        let x = DMatrix::from_fn(30, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..30).map(|i| 2.0 * i as f64).collect();
        let t = Tuning::new(vec![("lambda".into(), vec![1e4, 1e-8, 1.0])]);
        let r = tune(&Learner::Ridge { lambda: None }, &t, &x, &y, 0, 0).unwrap();
        assert_eq!(r.params, vec![("lambda".to_string(), 1e-8)]);
    }
}
