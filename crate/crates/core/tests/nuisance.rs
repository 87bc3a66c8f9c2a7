mod common;

use common::rng;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use targeted_msm::msm::{Dataset, Family};
use targeted_msm::nuisance::{design_matrix, fit_linear, fit_logistic, make_nuisance, NuisanceOptions};
use targeted_msm::sim::{generate_dataset, true_outcome, Scenario};

#[test]
fn propensity_coefficients_recovered_at_large_n() {
    let data = generate_dataset(100_000, 5).unwrap();
    let a: Vec<f64> = data.a.iter().map(|&v| v as f64).collect();
    let fit = fit_logistic(&design_matrix(&data.x, &[0, 1, 2, 3], None), &a, None).unwrap();
    assert!(fit.converged);
    let truth = [0.0, 0.5, -0.5, 0.2, -0.1];
    for (c, t) in fit.coef.iter().zip(truth) {
        assert!((c - t).abs() < 0.05, "coef {c} vs {t}");
    }
}

#[test]
fn outcome_regression_close_to_truth_at_large_n() {
    let data = generate_dataset(100_000, 6).unwrap();
    let s = Scenario::A;
    let fit = make_nuisance(&data, s.g_cols(), s.q_cols(), &NuisanceOptions::default()).unwrap();
    let err: f64 = (0..data.n())
        .map(|i| {
            let x: Vec<f64> = data.x.row(i).iter().copied().collect();
            (fit.qbar1[i] - true_outcome(1, &x)).abs()
        })
        .sum::<f64>()
        / data.n() as f64;
    assert!(err < 0.01, "mean abs error {err}");
}

#[test]
fn randomized_treatment_gives_flat_propensity() {
    let mut r = rng(3);
    let n = 20_000;
    let x = DMatrix::from_fn(n, 2, |_, _| r.random_range(-1.0..1.0));
    let a: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.3)))).collect();
    let data = Dataset::new(x, a, y, vec![], Family::Binary).unwrap();
    let fit = make_nuisance(&data, &[0, 1], &[0, 1], &NuisanceOptions::default()).unwrap();
    assert!(fit.g1.iter().all(|g| (g - 0.5).abs() < 0.04));
}

#[test]
fn least_squares_matches_normal_equations() {
    let mut r = rng(4);
    let design = DMatrix::from_fn(50, 3, |_, _| r.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..50).map(|_| r.random_range(-2.0..2.0)).collect();
    let fit = fit_linear(&design, &y).unwrap();
    let xt = design.transpose();
    let oracle = (&xt * &design).try_inverse().unwrap() * xt * DVector::from_vec(y);
    assert!((&fit.coef - &oracle).amax() < 1e-10);
}

#[test]
fn continuous_family_residual_variance() {
    let mut r = rng(8);
    let n = 400;
    let x = DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0));
    let a: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x[(i, 0)] + a[i] as f64 + r.random_range(-0.5..0.5)).collect();
    let data = Dataset::new(x.clone(), a.clone(), y.clone(), vec![], Family::Continuous).unwrap();
    let fit = make_nuisance(&data, &[0], &[0], &NuisanceOptions::default()).unwrap();
    let s2 = fit.sigma2.unwrap();
    for arm in 0..2u8 {
        let rows: Vec<usize> = (0..n).filter(|&i| a[i] == arm).collect();
        let d = design_matrix(&x, &[0], Some(&rows));
        let ya: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let coef = fit_linear(&d, &ya).unwrap().coef;
        let rss: f64 = rows.iter().map(|&i| (y[i] - coef[0] - coef[1] * x[(i, 0)]).powi(2)).sum();
        let expected = rss / (rows.len() - 2) as f64;
        assert!((s2[arm as usize] - expected).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn propensity_respects_truncation(seed in any::<u64>(), bound in 0.001f64..0.2) {
        let data = generate_dataset(300, seed).unwrap();
        let fit = make_nuisance(&data, &[0, 1, 2, 3], &[0, 3], &NuisanceOptions { g_bound: bound }).unwrap();
        prop_assert!(fit.g1.iter().all(|&g| g >= bound && g <= 1.0 - bound));
        prop_assert!(fit.qbar0.iter().chain(&fit.qbar1).all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn permuting_rows_permutes_predictions(seed in any::<u64>(), shift in 1usize..299) {
        let data = generate_dataset(300, seed).unwrap();
        let perm: Vec<usize> = (0..300).map(|i| (i * 7 + shift) % 300).collect();
        let permuted = Dataset::new(
            DMatrix::from_fn(300, 4, |i, j| data.x[(perm[i], j)]),
            perm.iter().map(|&i| data.a[i]).collect(),
            perm.iter().map(|&i| data.y[i]).collect(),
            data.v_cols.clone(),
            Family::Binary,
        ).unwrap();
        let s = Scenario::B;
        let opts = NuisanceOptions::default();
        let f = make_nuisance(&data, s.g_cols(), s.q_cols(), &opts).unwrap();
        let fp = make_nuisance(&permuted, s.g_cols(), s.q_cols(), &opts).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((f.qbar0[i] - fp.qbar0[k]).abs() < 1e-10);
            prop_assert!((f.qbar1[i] - fp.qbar1[k]).abs() < 1e-10);
            prop_assert!((f.g1[i] - fp.g1[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn irls_log_likelihood_never_decreases(seed in any::<u64>(), n in 30usize..400) {
        let data = generate_dataset(n, seed).unwrap();
        let a: Vec<f64> = data.a.iter().map(|&v| v as f64).collect();
        let fit = fit_logistic(&design_matrix(&data.x, &[0, 1, 2, 3], None), &a, None).unwrap();
        prop_assert!(fit.loglik_trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(fit.loglik_trace.len(), fit.iterations + 1);
    }
}
