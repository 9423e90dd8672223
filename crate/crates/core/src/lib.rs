//! Forecast reconciliation for linearly constrained multiple time series.
//!
//! Base forecasts produced elsewhere are revised so that they satisfy
//! cross-sectional (`cs`), temporal (`te`) or cross-temporal (`ct`)
//! aggregation constraints. All frameworks share one per-period layout: the
//! vector of one top-level period holds, series by series, the temporal
//! levels from the most aggregated down to the high-frequency values.
//!
//! The numerical core is generic over [`Real`] (`f64` or `f32`); the `*64`
//! and `*32` aliases below fix the scalar type.

pub mod classical;
pub mod covariance;
pub mod error;
pub mod heuristics;
pub mod lcc;
pub mod linalg;
pub mod ls;
pub mod ml;
pub mod probabilistic;
pub mod scalar;
pub mod series;
pub mod structures;

pub use classical::{bottom_up, middle_out, top_down, WeightVector};
pub use covariance::{estimate_covariance, CovarianceMatrix, Estimator};
pub use error::{Error, Result};
pub use heuristics::{iterative, two_step, Averaging, IterationReport, StepEstimators, StepOrder};
pub use lcc::{reconcile_lcc, ConstMode, LccOptions, LccOutput};
pub use linalg::Norm;
pub use ls::{build_projection, reconcile_ls, Approach, Bound, LsReconciler, NonNegative, ReconciliationOptions};
pub use ml::{fit, reconcile_ml, FeatureMode, FitOptions, FittedReconciler, Learner, TrainingTable};
pub use probabilistic::{reconcile_gaussian, reconcile_samples, BaseCovariance, GaussianForecast, SampleForecast};
pub use scalar::Real;
pub use series::{ForecastSet, ResidualKind, ResidualSet};
pub use structures::{AggOrder, CrossSectionalStructure, Framework, Structure, TemporalStructure, Tew};

pub type Structure64 = Structure<f64>;
pub type Structure32 = Structure<f32>;
pub type ForecastSet64 = ForecastSet<f64>;
pub type ForecastSet32 = ForecastSet<f32>;
pub type ResidualSet64 = ResidualSet<f64>;
pub type ResidualSet32 = ResidualSet<f32>;
pub type CovarianceMatrix64 = CovarianceMatrix<f64>;
pub type CovarianceMatrix32 = CovarianceMatrix<f32>;
pub type LsReconciler64 = LsReconciler<f64>;
pub type LsReconciler32 = LsReconciler<f32>;
