use super::*;
use crate::structures::{build_cs_from_agg, build_te, AggOrder, Tew};
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn cs(agg: &[f64], rows: usize, cols: usize) -> Structure<f64> {
    Structure::cross_sectional(build_cs_from_agg(DMatrix::from_row_slice(rows, cols, agg), None).unwrap())
}

fn fig1() -> Structure<f64> {
    cs(&[1., 1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 1., 1., 1.], 3, 5)
}

fn rec(s: &Structure<f64>, omega: &DMatrix<f64>, opts: ReconciliationOptions<f64>, x: &[f64]) -> Result<DVector<f64>> {
    LsReconciler::new(s, omega, opts).map(|r| r.reconcile_vector(&DVector::from_row_slice(x)).map(|v| v.0))?
}

/// Equality-constrained QP solved through the full KKT system (LU).
fn kkt_oracle(omega: &DMatrix<f64>, c: &DMatrix<f64>, xhat: &DVector<f64>, fixed: &[usize]) -> DVector<f64> {
    let d = xhat.len();
    let winv = omega.clone().try_inverse().unwrap();
    let rows = c.nrows() + fixed.len();
    let mut a = DMatrix::zeros(rows, d);
    let mut b = DVector::zeros(rows);
    a.view_mut((0, 0), (c.nrows(), d)).copy_from(c);
    for (k, &i) in fixed.iter().enumerate() {
        a[(c.nrows() + k, i)] = 1.0;
        b[c.nrows() + k] = xhat[i];
    }
    let mut k = DMatrix::zeros(d + rows, d + rows);
    k.view_mut((0, 0), (d, d)).copy_from(&winv);
    k.view_mut((0, d), (d, rows)).copy_from(&a.transpose());
    k.view_mut((d, 0), (rows, d)).copy_from(&a);
    let mut rhs = DVector::zeros(d + rows);
    rhs.rows_mut(0, d).copy_from(&(&winv * xhat));
    rhs.rows_mut(d, rows).copy_from(&b);
    k.lu().solve(&rhs).unwrap().rows(0, d).into_owned()
}

/// Minimum over all zero patterns of the bottoms.
fn enumerate_nn(omega: &DMatrix<f64>, s: &DMatrix<f64>, xhat: &DVector<f64>) -> DVector<f64> {
    let nb = s.ncols();
    let winv = omega.clone().try_inverse().unwrap();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << nb) {
        let keep: Vec<usize> = (0..nb).filter(|j| mask & (1 << j) != 0).collect();
        let mut b = DVector::zeros(nb);
        if !keep.is_empty() {
            let sp = crate::linalg::select_cols(s, &keep);
            let q = sp.transpose() * &winv * &sp;
            let r = sp.transpose() * &winv * xhat;
            let bp = q.lu().solve(&r).unwrap();
            if bp.iter().any(|v| *v < -1e-12) {
                continue;
            }
            for (k, &j) in keep.iter().enumerate() {
                b[j] = bp[k];
            }
        }
        let x = s * &b;
        let e = &x - xhat;
        let obj = (e.transpose() * &winv * &e)[(0, 0)];
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, x));
        }
    }
    best.unwrap().1
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(d, d + 3, |_, _| StandardNormal.sample(rng));
    let mut o: DMatrix<f64> = &a * a.transpose() / (d as f64);
    for i in 0..d {
        o[(i, i)] += 0.1;
    }
    o
}

#[test]
fn two_variable_projection() {
    let s = cs(&[1.0], 1, 1);
    let x = rec(&s, &DMatrix::identity(2, 2), Default::default(), &[1.0, 3.0]).unwrap();
    assert_relative_eq!(x, DVector::from_row_slice(&[2.0, 2.0]), epsilon = 1e-14);
    let m = build_projection(
        &s,
        &crate::covariance::estimate_covariance(Estimator::Ols, &s, None, false).unwrap(),
        Approach::Proj,
    )
    .unwrap();
    assert_relative_eq!(m.m, DMatrix::from_element(2, 2, 0.5), epsilon = 1e-15);
}

#[test]
fn three_variable_projection_and_immutable() {
    let s = cs(&[1.0, 1.0], 1, 2);
    let id = DMatrix::identity(3, 3);
    let x = rec(&s, &id, Default::default(), &[10.0, 4.0, 5.0]).unwrap();
    assert_relative_eq!(x, DVector::from_row_slice(&[29.0 / 3.0, 13.0 / 3.0, 16.0 / 3.0]), epsilon = 1e-13);
    let opts = ReconciliationOptions {
        immutable: vec![0],
        ..Default::default()
    };
    let x = rec(&s, &id, opts, &[10.0, 4.0, 5.0]).unwrap();
    assert_eq!(x.as_slice(), &[10.0, 4.5, 5.5]);
}

#[test]
fn strc_agrees_with_proj() {
    let s = fig1();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let omega = random_spd(8, &mut rng);
    let xhat: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..20.0)).collect();
    let a = rec(&s, &omega, ReconciliationOptions::with_approach(Approach::Proj), &xhat).unwrap();
    let b = rec(&s, &omega, ReconciliationOptions::with_approach(Approach::Strc), &xhat).unwrap();
    assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-10);
}

#[test]
fn projector_algebra_on_fig1() {
    let s = fig1();
    let omega = crate::covariance::estimate_covariance(Estimator::Ols, &s, None, false).unwrap();
    for approach in [Approach::Proj, Approach::Strc] {
        let m = build_projection(&s, &omega, approach).unwrap().m;
        assert!((&m * &m - &m).amax() <= 1e-12);
        assert!((s.cons_mat() * &m).amax() <= 1e-12);
    }
}

#[test]
fn qp_without_bounds_matches_projection() {
    let s = fig1();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let omega = random_spd(8, &mut rng);
    let xhat: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..20.0)).collect();
    let p = rec(&s, &omega, Default::default(), &xhat).unwrap();
    for approach in [Approach::ProjQp, Approach::StrcQp] {
        let q = rec(&s, &omega, ReconciliationOptions::with_approach(approach), &xhat).unwrap();
        assert_relative_eq!(p, q, epsilon = 1e-9, max_relative = 1e-9);
    }
}

#[test]
fn nn_qp_and_bpv_small_instance() {
    let s = cs(&[1.0, 1.0], 1, 2);
    let id = DMatrix::identity(3, 3);
    let xhat = [1.0, 2.0, -3.0];
    let oracle = enumerate_nn(&id, s.summing_matrix(), &DVector::from_row_slice(&xhat));
    for (nn, approach) in [
        (NonNegative::Qp, Approach::Proj),
        (NonNegative::Qp, Approach::Strc),
        (NonNegative::Bpv, Approach::Proj),
    ] {
        let opts = ReconciliationOptions {
            nn,
            approach,
            ..Default::default()
        };
        let x = rec(&s, &id, opts, &xhat).unwrap();
        assert!(x.iter().all(|v| *v >= 0.0), "{nn:?} {x}");
        assert_relative_eq!(x[0], x[1] + x[2], epsilon = 1e-12);
        assert_relative_eq!(x, oracle, epsilon = 1e-9);
    }
}

#[test]
fn sntz_clamps_reconciled_bottoms() {
    let s = cs(&[1.0, 1.0], 1, 2);
    let x = nn_sntz(&DVector::from_row_slice(&[1.0, -1.0, 2.0]), &s);
    assert_eq!(x.as_slice(), &[2.0, 0.0, 2.0]);
    let opts = ReconciliationOptions {
        nn: NonNegative::Sntz,
        immutable: vec![0],
        ..Default::default()
    };
    assert!(matches!(LsReconciler::new(&s, &DMatrix::identity(3, 3), opts), Err(Error::Options(_))));
}

#[test]
fn sntz_leaves_nonnegative_solution_untouched() {
    let s = fig1();
    let xhat = [15.0, 3.0, 12.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let plain = rec(&s, &DMatrix::identity(8, 8), Default::default(), &xhat).unwrap();
    let opts = ReconciliationOptions {
        nn: NonNegative::Sntz,
        ..Default::default()
    };
    assert_eq!(rec(&s, &DMatrix::identity(8, 8), opts, &xhat).unwrap(), plain);
}

#[test]
fn fixed_bounds_return_coherent_base() {
    let s = fig1();
    let xhat = [15.0, 3.0, 12.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let bounds = (0..8).map(|i| Bound { index: i, lower: xhat[i], upper: xhat[i] }).collect();
    let opts = ReconciliationOptions {
        bounds,
        approach: Approach::StrcQp,
        ..Default::default()
    };
    let x = rec(&s, &DMatrix::identity(8, 8), opts, &xhat).unwrap();
    assert_relative_eq!(x, DVector::from_row_slice(&xhat), epsilon = 1e-12);
}

#[test]
fn infeasible_immutable_reported() {
    let s = cs(&[1.0, 1.0], 1, 2);
    let opts = ReconciliationOptions {
        immutable: vec![0, 1, 2],
        ..Default::default()
    };
    let err = rec(&s, &DMatrix::identity(3, 3), opts, &[10.0, 4.0, 5.0]).unwrap_err();
    assert!(matches!(err, Error::InfeasibleImmutable { .. }));
    assert!(err.is_numerical());
}

#[test]
fn infeasible_bounds_reported() {
    let s = cs(&[1.0, 1.0], 1, 2);
    let opts = ReconciliationOptions {
        bounds: vec![Bound { index: 0, lower: 100.0, upper: 100.0 }, Bound { index: 1, lower: f64::NEG_INFINITY, upper: 1.0 }, Bound { index: 2, lower: f64::NEG_INFINITY, upper: 1.0 }],
        ..Default::default()
    };
    let err = rec(&s, &DMatrix::identity(3, 3), opts, &[10.0, 4.0, 5.0]).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn general_constraint_matrix_entry_point() {
    let c = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, -1.0]);
    let x = solve_constrained_qp(&DMatrix::identity(3, 3), &c, &DVector::from_row_slice(&[1.0, 2.0, -3.0]), &[], &[], &QpSettings::default()).unwrap();
    let p = rec(&cs(&[1.0, 1.0], 1, 2), &DMatrix::identity(3, 3), Default::default(), &[1.0, 2.0, -3.0]).unwrap();
    assert_relative_eq!(x, p, epsilon = 1e-9);
    let (b, _) = nn_bpv(&DMatrix::identity(3, 3), &c, &DVector::from_row_slice(&[1.0, 2.0, -3.0]), 100).unwrap();
    assert!(b.iter().all(|v| *v >= 0.0));
}

fn random_instance(seed: u64) -> (Structure<f64>, DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = rng.random_range(2..6);
    let nu = rng.random_range(1..4);
    let mut a = DMatrix::from_fn(nu, nb, |_, _| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
    for i in 0..nu {
        a[(i, rng.random_range(0..nb))] = 1.0;
    }
    let cs = build_cs_from_agg(a, None).unwrap();
    let s = if rng.random_bool(0.5) {
        Structure::cross_sectional(cs)
    } else {
        let m = [2usize, 4][rng.random_range(0..2)];
        Structure::cross_temporal(cs, build_te(&AggOrder::Max(m), Tew::Sum).unwrap())
    };
    let d = s.dim();
    let omega = random_spd(d, &mut rng);
    let xhat = (0..d).map(|_| rng.random_range(-10.0..30.0)).collect();
    (s, omega, xhat)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn projection_is_optimal_and_approaches_agree(seed in 0u64..100_000) {
        let (s, omega, xhat) = random_instance(seed);
        let x = DVector::from_row_slice(&xhat);
        let proj = rec(&s, &omega, ReconciliationOptions::with_approach(Approach::Proj), &xhat).unwrap();
        let strc = rec(&s, &omega, ReconciliationOptions::with_approach(Approach::Strc), &xhat).unwrap();
        let oracle = kkt_oracle(&omega, s.cons_mat(), &x, &[]);
        let scale = 1.0 + x.amax();
        prop_assert!((&proj - &oracle).amax() <= 1e-7 * scale);
        prop_assert!((&proj - &strc).amax() <= 1e-9 * scale);
        prop_assert!((s.cons_mat() * &proj).amax() <= 1e-8 * scale);
    }

    #[test]
    fn immutable_values_kept_exactly(seed in 0u64..100_000, pick in 0usize..1000) {
        let (s, omega, xhat) = random_instance(seed);
        let d = s.dim();
        let fixed = vec![pick % d];
        let opts = ReconciliationOptions { immutable: fixed.clone(), ..Default::default() };
        let x = rec(&s, &omega, opts, &xhat).unwrap();
        prop_assert_eq!(x[fixed[0]], xhat[fixed[0]]);
        let oracle = kkt_oracle(&omega, s.cons_mat(), &DVector::from_row_slice(&xhat), &fixed);
        let scale = 1.0 + xhat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((&x - &oracle).amax() <= 1e-7 * scale);
        prop_assert!((s.cons_mat() * &x).amax() <= 1e-8 * scale);
    }

    #[test]
    fn ols_is_scale_covariant(seed in 0u64..100_000, c in -10.0f64..10.0) {
        let (s, _, xhat) = random_instance(seed);
        let id = DMatrix::identity(s.dim(), s.dim());
        let x = rec(&s, &id, Default::default(), &xhat).unwrap();
        let scaled: Vec<f64> = xhat.iter().map(|v| v * c).collect();
        let y = rec(&s, &id, Default::default(), &scaled).unwrap();
        prop_assert!((&y - &x * c).amax() <= 1e-10 * (1.0 + y.amax()));
    }

    #[test]
    fn nn_methods_match_enumeration(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = rng.random_range(2..7);
        let a = DMatrix::from_fn(2, nb, |i, j| if i == 0 || j % 2 == 0 { 1.0 } else { 0.0 });
        let s = Structure::cross_sectional(build_cs_from_agg(a, None).unwrap());
        let d = s.dim();
        let omega = random_spd(d, &mut rng);
        let xhat: Vec<f64> = (0..d).map(|_| rng.random_range(-8.0..10.0)).collect();
        let oracle = enumerate_nn(&omega, s.summing_matrix(), &DVector::from_row_slice(&xhat));
        let scale = 1.0 + oracle.amax();
        for nn in [NonNegative::Qp, NonNegative::Bpv] {
            let x = rec(&s, &omega, ReconciliationOptions { nn, ..Default::default() }, &xhat).unwrap();
            prop_assert!((&x - &oracle).amax() <= 1e-7 * scale, "{:?} {} vs {}", nn, x, oracle);
            prop_assert!(x.iter().all(|v| *v >= -1e-10));
        }
    }
}
