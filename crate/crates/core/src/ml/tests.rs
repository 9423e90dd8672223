use super::*;
use crate::structures::{build_cs_from_agg, build_te, AggOrder, CrossSectionalStructure, Tew};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fig_a(labels: Option<Vec<String>>) -> CrossSectionalStructure<f64> {
    build_cs_from_agg(
        DMatrix::from_row_slice(3, 5, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
        labels,
    )
    .unwrap()
}

fn names(s: &Structure<f64>, mode: FeatureMode, b: usize, j: usize) -> Vec<String> {
    select_features(s, mode, b, j).unwrap().iter().map(|f| f.name(s.framework())).collect()
}

fn incoherence(s: &Structure<f64>, fs: &ForecastSet<f64>) -> f64 {
    (0..fs.horizon()).map(|h| s.constraints().residual_inf(fs.period(h).as_slice())).fold(0.0, f64::max)
}

#[test]
fn cross_sectional_feature_sets() {
    let s = Structure::cross_sectional(fig_a(None));
    assert_eq!(names(&s, FeatureMode::Str, 0, 0), ["y1", "y2", "y4"]);
    assert_eq!(names(&s, FeatureMode::StrBts, 0, 0), ["y1", "y2", "y4", "y5", "y6", "y7", "y8"]);
    assert_eq!(names(&s, FeatureMode::Str, 4, 0), ["y1", "y3", "y8"]);
    let all = names(&s, FeatureMode::All, 2, 0);
    assert_eq!(all.len(), 8);
    for b in 0..5 {
        let bts = names(&s, FeatureMode::Bts, b, 0);
        let sb = names(&s, FeatureMode::StrBts, b, 0);
        assert!(bts.iter().all(|c| sb.contains(c)));
        assert!(sb.iter().all(|c| all.contains(c)));
    }
    assert!(select_features(&s, FeatureMode::LowHigh, 0, 0).is_err());
}

#[test]
fn temporal_and_cross_temporal_feature_sets() {
    let te = build_te::<f64>(&AggOrder::Max(4), Tew::Sum).unwrap();
    let s = Structure::temporal(te.clone());
    assert_eq!(names(&s, FeatureMode::LowHigh, 0, 2), ["y1_k4_1", "y1_k1_1", "y1_k1_2", "y1_k1_3", "y1_k1_4"]);
    assert_eq!(names(&s, FeatureMode::All, 0, 0).len(), 7);
    let ct = Structure::cross_temporal(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap(), te);
    assert_eq!(names(&ct, FeatureMode::Compact, 1, 3), ["y1_k1", "y2_k1", "y3_k1", "y3_k4", "y3_k2"]);
    let f = select_features(&ct, FeatureMode::Compact, 1, 0).unwrap();
    // position 3 reads y3 at k=2 position 2 (index 1)
    assert_eq!(f[4].resolve(&ct, 3), Some(2 * 7 + 1 + 1));
    assert!(select_features(&ct, FeatureMode::Str, 0, 0).is_err());
}

/// Training table whose bottom columns equal the observations.
fn broadcast_table(s: &Structure<f64>, rows: usize, rng: &mut ChaCha8Rng) -> TrainingTable<f64> {
    let obs = DMatrix::from_fn(rows, s.n_free(), |_, _| rng.random_range(0.0..50.0));
    let mut hat = DMatrix::from_fn(rows, s.dim(), |_, _| rng.random_range(0.0..50.0));
    for r in 0..rows {
        for (c, &f) in s.constraints().free.iter().enumerate() {
            hat[(r, f)] = obs[(r, c)];
        }
    }
    TrainingTable::new(hat, obs)
}

fn row_set(s: &Structure<f64>, t: &TrainingTable<f64>, r: usize) -> ForecastSet<f64> {
    ForecastSet::from_periods(&[t.hat.row(r).transpose()], s).unwrap()
}

#[test]
fn nearest_neighbour_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let te = build_te::<f64>(&AggOrder::Max(2), Tew::Sum).unwrap();
    let structures = [
        (Structure::cross_sectional(fig_a(None)), FeatureMode::Bts),
        (Structure::temporal(te.clone()), FeatureMode::All),
        (Structure::cross_temporal(fig_a(None), te), FeatureMode::Compact),
    ];
    for (s, mode) in structures {
        let table = broadcast_table(&s, 15, &mut rng);
        let opts = FitOptions {
            learner: Learner::Knn { k: 1 },
            mode,
            ..Default::default()
        };
        let fitted = fit(&table, &s, &opts).unwrap();
        for r in 0..15 {
            let out = reconcile_ml(&row_set(&s, &table, r), &fitted, &s, false, false).unwrap();
            let x = out.period(0);
            let expect = &s.constraints().s * table.obs.row(r).transpose();
            assert!((x - expect).amax() < 1e-12);
        }
    }
}

#[test]
fn constant_models_and_sntz() {
    let s = Structure::cross_sectional(fig_a(None));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hat = DMatrix::from_fn(12, 8, |_, _| rng.random_range(0.0..1.0));
    let c = [3.0, -1.0, 2.0, 0.5, 4.0];
    let obs = DMatrix::from_fn(12, 5, |_, j| c[j]);
    let fitted = fit(&TrainingTable::new(hat, obs), &s, &FitOptions::default()).unwrap();
    assert!(fitted.targets.iter().all(|t| matches!(t.model, Model::Constant { .. })));
    let base = ForecastSet::new(DMatrix::from_fn(8, 2, |_, _| rng.random_range(0.0..1.0)), &s).unwrap();
    let out = reconcile_ml(&base, &fitted, &s, false, false).unwrap();
    assert_eq!(out.values().column(0).as_slice(), &[8.5, 2.0, 6.5, 3.0, -1.0, 2.0, 0.5, 4.0]);
    let clamped = reconcile_ml(&base, &fitted, &s, true, false).unwrap();
    assert_eq!(clamped.values().column(1).as_slice(), &[9.5, 3.0, 6.5, 3.0, 0.0, 2.0, 0.5, 4.0]);
}

#[test]
fn ridge_recovers_linear_target() {
    let s = Structure::cross_sectional(fig_a(None));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hat = DMatrix::from_fn(40, 8, |_, _| rng.random_range(0.0..10.0));
    let obs = DMatrix::from_fn(40, 5, |r, b| 2.0 * hat[(r, 3 + b)]);
    let opts = FitOptions {
        learner: Learner::Ridge { lambda: Some(1e-10) },
        mode: FeatureMode::Str,
        ..Default::default()
    };
    let fitted = fit(&TrainingTable::new(hat, obs), &s, &opts).unwrap();
    for t in &fitted.targets {
        let Model::Ridge { coef, .. } = &t.model else { panic!() };
        assert!((coef.last().unwrap() - 2.0).abs() < 1e-6);
    }
}

#[test]
fn forest_fit_is_deterministic_and_coherent() {
    let te = build_te::<f64>(&AggOrder::Max(2), Tew::Sum).unwrap();
    let s = Structure::cross_temporal(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap(), te);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = broadcast_table(&s, 30, &mut rng);
    for mode in [FeatureMode::All, FeatureMode::Compact] {
        let opts = FitOptions {
            learner: Learner::forest(),
            mode,
            seed: 17,
            ..Default::default()
        };
        let a = fit(&table, &s, &opts).unwrap();
        let b = fit(&table, &s, &opts).unwrap();
        assert_eq!(a, b);
        let round_trip = FittedReconciler::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(round_trip, a);
        let base = ForecastSet::new(DMatrix::from_fn(3, 6, |_, _| rng.random_range(-5.0..50.0)), &s).unwrap();
        let out = reconcile_ml(&base, &a, &s, false, false).unwrap();
        assert!(incoherence(&s, &out) <= 1e-10 * (1.0 + out.values().amax()));
        assert_eq!(out.values(), reconcile_ml(&base, &round_trip, &s, false, false).unwrap().values());
    }
}

#[test]
fn tuned_fit_records_parameters() {
    let s = Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hat = DMatrix::from_fn(25, 3, |_, _| rng.random_range(0.0..10.0));
    let obs = DMatrix::from_fn(25, 2, |r, b| hat[(r, 1 + b)]);
    let opts = FitOptions {
        learner: Learner::Ridge { lambda: None },
        tuning: Some(Tuning::new(vec![("lambda".into(), vec![1e5, 1e-9])])),
        ..Default::default()
    };
    let fitted = fit(&TrainingTable::new(hat, obs), &s, &opts).unwrap();
    assert!(fitted.targets.iter().all(|t| t.params == vec![("lambda".to_string(), 1e-9)]));
}

#[test]
fn training_table_validated() {
    let s = Structure::cross_sectional(fig_a(None));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = broadcast_table(&s, 12, &mut rng);
    let short = TrainingTable::new(t.hat.rows(0, 9).into_owned(), t.obs.rows(0, 9).into_owned());
    assert!(matches!(fit(&short, &s, &FitOptions::default()), Err(Error::TooFewRows { .. })));
    t.hat[(4, 2)] = f64::NAN;
    let err = fit(&t, &s, &FitOptions::default()).unwrap_err();
    assert!(err.to_string().contains("row 5"), "{err}");
    let bad_mode = FitOptions {
        mode: FeatureMode::Compact,
        ..Default::default()
    };
    assert!(fit(&broadcast_table(&s, 12, &mut rng), &s, &bad_mode).is_err());
}

#[test]
fn missing_feature_columns_named() {
    let s = Structure::cross_sectional(fig_a(None));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = FitOptions {
        learner: Learner::Knn { k: 1 },
        mode: FeatureMode::Str,
        ..Default::default()
    };
    let fitted = fit(&broadcast_table(&s, 12, &mut rng), &s, &opts).unwrap();
    let labels: Vec<String> = ["y1", "z2", "y3", "y4", "y5", "y6", "y7", "y8"].iter().map(|s| s.to_string()).collect();
    let other = Structure::cross_sectional(fig_a(Some(labels)));
    let base = ForecastSet::new(DMatrix::zeros(8, 1), &other).unwrap();
    match reconcile_ml(&base, &fitted, &other, false, false) {
        Err(Error::FeatureMismatch { missing }) => assert_eq!(missing, ["y2"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn from_layout_matches_row_form() {
    let te = build_te::<f64>(&AggOrder::Max(2), Tew::Sum).unwrap();
    let s = Structure::cross_temporal(build_cs_from_agg(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), None).unwrap(), te);
    let hat = ForecastSet::new(DMatrix::from_fn(3, 6, |i, j| (10 * i + j) as f64), &s).unwrap();
    let obs = DMatrix::from_fn(2, 4, |i, j| (100 * i + j) as f64);
    let t = TrainingTable::from_layout(&hat, &obs, &s).unwrap();
    assert_eq!(t.hat.shape(), (2, 9));
    assert_eq!(t.obs.row(1).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 102.0, 103.0]);
    assert_eq!(t.hat.row(1).transpose(), hat.period(1));
}
