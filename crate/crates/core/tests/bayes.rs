mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use targeted_msm::bayes::{
    bvm_check, diagnostic_export, ks_distance, metropolis_hastings, posterior_summaries, run_chain, summarize_columns,
    tune_tau, BetaPrior, McmcConfig, PosteriorDraws, PosteriorTarget, TargetedLikelihood, TargetedPosterior,
    TuneConfig,
};
use targeted_msm::msm::{Dataset, Family, LinearModel, MsmSpec, SquaredError};
use targeted_msm::nuisance::{make_nuisance, NuisanceFit, NuisanceOptions};
use targeted_msm::sim::{generate_dataset, Scenario};
use targeted_msm::tmle::{target, TargetedFit, TmleOptions};

type Lik = TargetedLikelihood<LinearModel, SquaredError>;

struct Fixture {
    data: Dataset,
    fit: TargetedFit,
    lik: Lik,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let data = generate_dataset(n, seed).unwrap();
    let s = Scenario::A;
    let nuisance = make_nuisance(&data, s.g_cols(), s.q_cols(), &NuisanceOptions::default()).unwrap();
    let spec = MsmSpec::linear(1);
    let fit = target(&data, &spec, &nuisance, &TmleOptions::default()).unwrap();
    let lik = TargetedLikelihood::new(&data, &spec, &nuisance, &fit).unwrap();
    Fixture { data, fit, lik }
}

fn expit(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Untargeted fit of the intercept model on a hand-built dataset.
fn untargeted(data: &Dataset, nuisance: &NuisanceFit) -> (TargetedFit, Lik) {
    let spec = MsmSpec::linear(0);
    let opts = TmleOptions { max_iter: 0, allow_unconverged: true, ..TmleOptions::default() };
    let fit = target(data, &spec, nuisance, &opts).unwrap();
    let lik = TargetedLikelihood::new(data, &spec, nuisance, &fit).unwrap();
    (fit, lik)
}

#[test]
fn single_row_likelihood_by_hand() {
    let data = Dataset::new(DMatrix::from_element(1, 1, 0.0), vec![1], vec![1.0], vec![], Family::Binary).unwrap();
    let nuisance = NuisanceFit { qbar0: vec![0.4], qbar1: vec![0.7], g1: vec![0.6], sigma2: None };
    let (_, lik) = untargeted(&data, &nuisance);
    for eps in [0.0, 0.3, -1.2] {
        // M^{-1} d/dt Ldot = 1 for the intercept model; h1 = 1 / g1.
        let q = expit(logit(0.7) + eps / 0.6);
        assert!((lik.log_likelihood(&[eps]) - q.ln()).abs() < 1e-12);
    }
}

#[test]
fn three_row_likelihood_by_hand() {
    let data = Dataset::new(
        DMatrix::from_element(3, 1, 0.0),
        vec![1, 0, 1],
        vec![1.0, 0.0, 0.0],
        vec![],
        Family::Binary,
    )
    .unwrap();
    let q0 = [0.2, 0.5, 0.3];
    let q1 = [0.6, 0.55, 0.8];
    let g = [0.5, 0.25, 0.7];
    let nuisance = NuisanceFit { qbar0: q0.to_vec(), qbar1: q1.to_vec(), g1: g.to_vec(), sigma2: None };
    let (_, lik) = untargeted(&data, &nuisance);
    let psi: Vec<f64> = (0..3).map(|i| q1[i] - q0[i]).collect();
    let beta = psi.iter().sum::<f64>() / 3.0;
    for eps in [0.0, 0.05, -0.4] {
        let mut ll = 0.0;
        let raw: Vec<f64> = psi.iter().map(|p| (eps * (p - beta)).exp()).collect();
        let z: f64 = raw.iter().sum();
        for i in 0..3 {
            let (q, h) = if data.a[i] == 1 { (q1[i], 1.0 / g[i]) } else { (q0[i], -1.0 / (1.0 - g[i])) };
            let qe = expit(logit(q) + h * eps);
            let y = data.y[i];
            ll += y * qe.ln() + (1.0 - y) * (1.0 - qe).ln() + (raw[i] / z).ln();
        }
        assert!((lik.log_likelihood(&[eps]) - ll).abs() < 1e-10, "eps {eps}");
    }
}

#[test]
fn likelihood_at_zero_is_the_targeted_fit() {
    let f = fixture(1000, 31);
    let st = &f.fit.state;
    let mut ll = 0.0;
    for i in 0..f.data.n() {
        let q = st.qbar(f.data.a[i])[i];
        let y = f.data.y[i];
        ll += y * q.ln() + (1.0 - y) * (1.0 - q).ln() + st.w[i].ln();
    }
    assert!((f.lik.log_likelihood(&[0.0, 0.0]) - ll).abs() < 1e-8 * ll.abs());
    assert_eq!(f.lik.log_likelihood(&[10.5, 0.0]), f64::NEG_INFINITY);
}

#[test]
fn continuous_likelihood_at_zero() {
    let mut r = common::rng(2);
    let n = 300;
    let x = DMatrix::from_fn(n, 1, |_, _| r.sample::<f64, _>(StandardNormal));
    let a: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * (1.0 + a[i] as f64) + r.sample::<f64, _>(StandardNormal)).collect();
    let data = Dataset::new(x, a, y, vec![0], Family::Continuous).unwrap();
    let nuisance = make_nuisance(&data, &[0], &[0], &NuisanceOptions::default()).unwrap();
    let spec = MsmSpec::linear(1);
    let fit = target(&data, &spec, &nuisance, &TmleOptions::default()).unwrap();
    let lik = TargetedLikelihood::new(&data, &spec, &nuisance, &fit).unwrap();
    let s2 = nuisance.sigma2.unwrap();
    let mut ll = 0.0;
    for i in 0..n {
        let arm = data.a[i];
        let q = fit.state.qbar(arm)[i];
        let v = s2[arm as usize];
        ll += -v.ln() - (data.y[i] - q).powi(2) / (2.0 * v) + fit.state.w[i].ln();
    }
    assert!((lik.log_likelihood(&[0.0, 0.0]) - ll).abs() < 1e-8 * ll.abs());
    assert!(lik.log_likelihood_grad(&[0.0, 0.0]).unwrap().amax() < 1e-4);
}

#[test]
fn likelihood_is_flat_at_zero_after_targeting() {
    for seed in [40, 41, 42] {
        let f = fixture(1000, seed);
        let g = f.lik.log_likelihood_grad(&[0.0, 0.0]).unwrap();
        assert!(g.amax() < 1e-4, "seed {seed}: {g}");
    }
}

#[test]
fn vartheta_at_zero_is_beta_star() {
    let f = fixture(1000, 32);
    let b = f.lik.vartheta(&[0.0, 0.0]).unwrap();
    assert!((&b - &f.fit.beta_star).amax() < 1e-12);
}

#[test]
fn vartheta_is_locally_linear() {
    let f = fixture(1000, 33);
    let (b0, jac) = f.lik.vartheta_jacobian(&[0.0, 0.0]).unwrap();
    assert!(jac.determinant().abs() > 1e-8);
    for dir in [[1.0, 0.0], [0.0, 1.0], [0.6, -0.8]] {
        let e = [1e-3 * dir[0], 1e-3 * dir[1]];
        let actual = f.lik.vartheta(&e).unwrap() - &b0;
        let linear = &jac * DVector::from_row_slice(&e);
        assert!((&actual - &linear).norm() < 1e-2 * linear.norm());
    }
}

#[test]
fn implicit_jacobian_matches_finite_differences() {
    let f = fixture(1000, 34);
    for eps in [[0.0, 0.0], [0.05, -0.03], [-0.2, 0.1]] {
        let (_, jac) = f.lik.vartheta_jacobian(&eps).unwrap();
        let fd = f.lik.vartheta_jacobian_fd(&eps).unwrap();
        let rel = (&jac - &fd).amax() / fd.amax();
        assert!(rel < 1e-3, "eps {eps:?}: {rel}");
    }
}

#[test]
fn jacobian_on_a_small_dataset() {
    let mut checked = 0;
    for seed in 0..50u64 {
        let data = generate_dataset(20, seed).unwrap();
        let Ok(nuisance) = make_nuisance(&data, &[0, 3], &[0, 3], &NuisanceOptions::default()) else { continue };
        let spec = MsmSpec::linear(1);
        let Ok(fit) = target(&data, &spec, &nuisance, &TmleOptions::default()) else { continue };
        let lik = TargetedLikelihood::new(&data, &spec, &nuisance, &fit).unwrap();
        let (_, jac) = lik.vartheta_jacobian(&[0.0, 0.0]).unwrap();
        let fd = lik.vartheta_jacobian_fd(&[0.0, 0.0]).unwrap();
        assert!((&jac - &fd).amax() < 1e-5 * fd.amax(), "seed {seed}");
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} small datasets fitted");
}

#[test]
fn prior_pullback() {
    let f = fixture(1000, 35);
    for eps in [[0.0, 0.0], [0.1, 0.2], [-0.3, 0.05]] {
        let (_, jac) = f.lik.vartheta_jacobian(&eps).unwrap();
        let logdet = jac.determinant().abs().ln();
        let (flat, _) = f.lik.log_prior_eps(&BetaPrior::Flat, &eps).unwrap();
        assert!((flat - logdet).abs() < 1e-12);
    }
    let (lp, beta) = f.lik.log_prior_eps(&BetaPrior::standard_normal(2), &[0.0, 0.0]).unwrap();
    let (_, jac) = f.lik.vartheta_jacobian(&[0.0, 0.0]).unwrap();
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let expected: f64 = beta.iter().map(|b| statrs::distribution::Continuous::ln_pdf(&n01, *b)).sum::<f64>()
        + jac.determinant().abs().ln();
    assert!((lp - expected).abs() < 1e-12);
    assert!((&beta - &f.fit.beta_star).amax() < 1e-12);
}

/// `-eps' eps / (2 s^2)` with `beta = 2 eps`.
struct Gaussian {
    s: f64,
    p: usize,
}

impl PosteriorTarget for Gaussian {
    fn dim(&self) -> usize {
        self.p
    }
    fn log_target(&self, eps: &[f64]) -> Option<(f64, DVector<f64>)> {
        let v = -0.5 * eps.iter().map(|e| e * e).sum::<f64>() / (self.s * self.s);
        Some((v, DVector::from_iterator(eps.len(), eps.iter().map(|e| 2.0 * e))))
    }
}

/// Supports only the starting point, so every proposal is rejected.
struct Point;

impl PosteriorTarget for Point {
    fn dim(&self) -> usize {
        1
    }
    fn log_target(&self, eps: &[f64]) -> Option<(f64, DVector<f64>)> {
        (eps[0] == 0.0).then(|| (0.0, DVector::from_element(1, 0.0)))
    }
}

fn batch_se(x: &[f64], batches: usize) -> f64 {
    let size = x.len() / batches;
    let means: Vec<f64> = x.chunks(size).take(batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    (means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches - 1) as f64 / batches as f64).sqrt()
}

#[test]
fn chain_matches_a_gaussian_target() {
    let s = 0.7;
    let draws = metropolis_hastings(&Gaussian { s, p: 1 }, 1.5, 200_000, 8, &[0.0]).unwrap();
    let x: Vec<f64> = draws.eps.column(0).iter().copied().collect();
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = sq.iter().sum::<f64>() / x.len() as f64;
    assert!(mean.abs() < 3.0 * batch_se(&x, 50), "mean {mean}");
    assert!((var - s * s).abs() < 3.0 * batch_se(&sq, 50), "var {var}");
}

#[test]
fn tiny_proposals_are_always_accepted() {
    let draws = metropolis_hastings(&Gaussian { s: 1.0, p: 2 }, 1e-6, 2000, 3, &[0.0, 0.0]).unwrap();
    assert!(draws.acceptance_ratio > 0.99);
}

#[test]
fn chains_replay_bit_for_bit() {
    let f = fixture(300, 36);
    let post = TargetedPosterior { likelihood: f.lik.clone(), prior: BetaPrior::standard_normal(2) };
    let a = metropolis_hastings(&post, 0.1, 300, 17, &[0.0, 0.0]).unwrap();
    let b = metropolis_hastings(&post, 0.1, 300, 17, &[0.0, 0.0]).unwrap();
    assert_eq!(a, b);
    for t in [0, 99, 299] {
        let row: Vec<f64> = a.eps.row(t).iter().copied().collect();
        let beta = f.lik.vartheta(&row).unwrap();
        assert!((beta - a.beta.row(t).transpose()).amax() < 1e-12);
    }
    let accepted = a.accepted.iter().filter(|&&x| x).count() as f64 / 300.0;
    assert_eq!(accepted, a.acceptance_ratio);
}

#[test]
fn tuning_reaches_the_band_on_a_monotone_mock() {
    let t = tune_tau(&Gaussian { s: 1.0, p: 2 }, &TuneConfig::default(), 5, &[0.0, 0.0]).unwrap();
    assert!(t.acceptance > 0.3 && t.acceptance < 0.4, "{t:?}");
    assert_eq!(t.trace.last().unwrap().0, t.tau);
}

#[test]
fn tuning_stops_at_an_in_band_midpoint() {
    let target = Gaussian { s: 1.0, p: 2 };
    let full = tune_tau(&target, &TuneConfig::default(), 5, &[0.0, 0.0]).unwrap();
    let k = full.trace.len() - 1;
    // Reuse the winning pilot: same midpoint and same pilot seed.
    let seed_k = targeted_msm::sim::mix_seed(5, k as u64);
    let direct = metropolis_hastings(&target, full.tau, 1000, seed_k, &[0.0, 0.0]).unwrap();
    assert_eq!(direct.acceptance_ratio, full.acceptance);
    let cfg = TuneConfig { tau_min: full.tau * 0.5, tau_max: full.tau * 1.5, max_steps: 1, pilot_iters: 1000 };
    let one = tune_tau(&target, &cfg, 5, &[0.0, 0.0]).unwrap();
    assert_eq!(one.trace.len(), 1);
    assert_eq!(one.tau, full.tau);
}

#[test]
fn tuning_exhausts_toward_tau_min() {
    let cfg = TuneConfig::default();
    let t = tune_tau(&Point, &cfg, 1, &[0.0]).unwrap();
    assert_eq!(t.trace.len(), cfg.max_steps);
    let expected = cfg.tau_min + (cfg.tau_max - cfg.tau_min) / 2f64.powi(cfg.max_steps as i32);
    assert!((t.tau - expected).abs() < 1e-15);
    assert_eq!(t.acceptance, 0.0);
}

fn chain(beta: Vec<f64>, eps: Vec<f64>) -> PosteriorDraws {
    let n = beta.len();
    PosteriorDraws {
        eps: DMatrix::from_column_slice(n, 1, &eps),
        beta: DMatrix::from_column_slice(n, 1, &beta),
        accepted: vec![true; n],
        tau: 1.0,
        acceptance_ratio: 1.0,
    }
}

#[test]
fn summaries_of_known_chains() {
    let constant = chain(vec![0.4; 500], vec![0.2; 500]);
    let s = posterior_summaries(&constant, 0.95, 100).unwrap();
    let c = &s.coords[0];
    assert_eq!((c.median, c.lower, c.upper), (0.4, 0.4, 0.4));

    let alternating: Vec<f64> = (0..500).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let s = posterior_summaries(&chain(alternating.clone(), alternating), 0.95, 100).unwrap();
    assert_eq!(s.coords[0].median, 0.0);
    assert_eq!(s.coords[0].prob_positive, 0.5);

    let mut r = common::rng(9);
    let normal: Vec<f64> = (0..200_000).map(|_| r.sample(StandardNormal)).collect();
    let s = summarize_columns(&DMatrix::from_column_slice(normal.len(), 1, &normal), 0.95, 0).unwrap();
    assert!((s.coords[0].lower + 1.96).abs() < 0.05 && (s.coords[0].upper - 1.96).abs() < 0.05);

    assert!(posterior_summaries(&chain(vec![0.0; 150], vec![0.0; 150]), 0.95, 100).is_err());
}

#[test]
fn plateau_flag() {
    let eps: Vec<f64> = (0..2000).map(|t| -3.0 + 6.0 * t as f64 / 1999.0).collect();
    let linear = chain(eps.iter().map(|e| 2.0 * e).collect(), eps.clone());
    assert!(!diagnostic_export(&linear).flagged);
    let capped = chain(eps.iter().map(|e| e.min(1.0)).collect(), eps);
    assert!(diagnostic_export(&capped).flagged);
}

#[test]
fn ks_against_the_sampling_distribution() {
    let mut r = common::rng(10);
    let sample: Vec<f64> = (0..5000).map(|_| 0.3 + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
    let n = Normal::new(0.3, 0.1).unwrap();
    assert!(ks_distance(sample, |x| n.cdf(x)) < 0.03);
}

#[test]
fn real_chain_tunes_and_concentrates() {
    let widths: Vec<f64> = [250usize, 1000]
        .iter()
        .map(|&n| {
            let f = fixture(n, 50 + n as u64);
            let post = TargetedPosterior { likelihood: f.lik.clone(), prior: BetaPrior::standard_normal(2) };
            let run = run_chain(&post, &McmcConfig { iters: 6000, seed: 4, ..McmcConfig::default() }).unwrap();
            let acc = run.tune.as_ref().unwrap().acceptance;
            assert!(acc > 0.25 && acc < 0.45, "pilot acceptance {acc}");
            assert!(!diagnostic_export(&run.draws).flagged);
            let bvm = bvm_check(&run.draws, &f.fit, run.summary.burn_in).unwrap();
            assert!(bvm.ks.iter().all(|k| k.is_finite()));
            run.summary.coords[1].upper - run.summary.coords[1].lower
        })
        .collect();
    let ratio = widths[0] / widths[1];
    assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "width ratio {ratio}");
}
