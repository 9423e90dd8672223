//! Built-in learners. Models are fitted and stored in `f64`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{bootstrap, Tree, TreeParams};
use crate::error::{Error, Result};

/// Learner and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "lowercase")]
pub enum Learner {
    /// Ridge regression with an unpenalized intercept. The default penalty
    /// is `1e−6 · trace(XᵀX) / p` on centred features.
    Ridge { lambda: Option<f64> },
    /// Bagged regression trees with per-split feature subsampling
    /// (`⌈√p⌉` features when `mtry` is unset).
    Forest {
        trees: usize,
        max_depth: usize,
        min_leaf: usize,
        mtry: Option<usize>,
    },
    /// Nearest-neighbour average in Euclidean distance.
    Knn { k: usize },
}

impl Learner {
    pub fn tag(&self) -> &'static str {
        match self {
            Learner::Ridge { .. } => "ridge",
            Learner::Forest { .. } => "forest",
            Learner::Knn { .. } => "knn",
        }
    }

    pub fn forest() -> Self {
        Learner::Forest {
            trees: 100,
            max_depth: 8,
            min_leaf: 5,
            mtry: None,
        }
    }

    /// Sets a hyperparameter by name.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v <= 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::Options(format!("parameter `{name}` must be a positive integer, got {value}")))
            }
        };
        match (self, name) {
            (Learner::Ridge { lambda }, "lambda") => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::Options(format!("parameter `lambda` must be non-negative, got {value}")));
                }
                *lambda = Some(value);
            }
            (Learner::Forest { trees, .. }, "trees") => *trees = count(value)?,
            (Learner::Forest { max_depth, .. }, "max_depth") => *max_depth = count(value)?,
            (Learner::Forest { min_leaf, .. }, "min_leaf") => *min_leaf = count(value)?,
            (Learner::Forest { mtry, .. }, "mtry") => *mtry = Some(count(value)?),
            (Learner::Knn { k }, "k") => *k = count(value)?,
            (l, _) => return Err(Error::Options(format!("learner `{}` has no parameter `{name}`", l.tag()))),
        }
        Ok(())
    }

    /// Fits on the rows of `x` against `y`. A constant target gives a constant model.
    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64], rng: &mut ChaCha8Rng) -> Result<Model> {
        if x.nrows() != y.len() {
            return Err(Error::dim("training rows", y.len(), x.nrows()));
        }
        if y.is_empty() {
            return Err(Error::Empty { what: "training table".into() });
        }
        if y.iter().all(|v| *v == y[0]) {
            return Ok(Model::Constant { value: y[0] });
        }
        Ok(match self {
            Learner::Ridge { lambda } => fit_ridge(x, y, *lambda),
            Learner::Forest {
                trees,
                max_depth,
                min_leaf,
                mtry,
            } => {
                let p = x.ncols().max(1);
                let params = TreeParams {
                    max_depth: *max_depth,
                    min_leaf: *min_leaf,
                    mtry: mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize),
                };
                let trees = (0..*trees)
                    .map(|_| {
                        let rows = bootstrap(y.len(), rng);
                        Tree::grow(x, y, rows, params, rng)
                    })
                    .collect();
                Model::Forest { trees }
            }
            Learner::Knn { k } => Model::Knn {
                k: *k,
                x: (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect(),
                y: y.to_vec(),
            },
        })
    }
}

impl FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(Learner::Ridge { lambda: None }),
            "forest" | "randomForest" => Ok(Learner::forest()),
            "knn" => Ok(Learner::Knn { k: 1 }),
            _ => Err(Error::Options(format!("unknown learner `{s}` (expected ridge, forest or knn)"))),
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Model {
    Constant { value: f64 },
    Ridge { intercept: f64, coef: Vec<f64> },
    Forest { trees: Vec<Tree> },
    Knn { k: usize, x: Vec<Vec<f64>>, y: Vec<f64> },
}

impl Model {
    pub fn predict(&self, row: &[f64]) -> f64 {
        match self {
            Model::Constant { value } => *value,
            Model::Ridge { intercept, coef } => intercept + coef.iter().zip(row).map(|(c, v)| c * v).sum::<f64>(),
            Model::Forest { trees } => trees.iter().map(|t| t.predict(row)).sum::<f64>() / trees.len() as f64,
            Model::Knn { k, x, y } => {
                let mut dist: Vec<(f64, usize)> = x
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = (*k).min(dist.len());
                dist[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64
            }
        }
    }

    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.predict(&x.row(i).iter().copied().collect::<Vec<_>>()))
            .collect()
    }
}

fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: Option<f64>) -> Model {
    let (n, p) = x.shape();
    let means = DVector::from_fn(p, |j, _| x.column(j).sum() / n as f64);
    let ybar = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - ybar);
    let mut gram = xc.transpose() * &xc;
    let lambda = lambda.unwrap_or_else(|| 1e-6 * gram.trace() / p.max(1) as f64);
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(p)),
    };
    Model::Ridge {
        intercept: ybar - means.dot(&coef),
        coef: coef.iter().copied().collect(),
    }
}

/// Generator for target `index` under `seed`.
pub fn target_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}
