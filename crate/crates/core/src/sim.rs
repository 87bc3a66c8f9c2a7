//! Simulation study: data-generating process, nuisance-specification
//! scenarios, the Monte Carlo oracle for the true projection, and
//! replication with coverage and bias aggregation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::logistic;
use crate::bayes::{run_chain, BetaPrior, McmcConfig, TargetedLikelihood, TargetedPosterior};
use crate::error::{Error, Result};
use crate::msm::{Dataset, Family, MsmSpec};
use crate::nuisance::{make_nuisance, NuisanceOptions};
use crate::tmle::{target, wald_ci, TmleOptions};

/// Number of covariates in the simulation design.
pub const COVARIATES: usize = 4;
/// Column of `X4`, the effect modifier.
pub const MODIFIER_COL: usize = 3;
/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "TARGETED_MSM_THREADS";

/// SplitMix64 finalizer of `master` combined with `stream`.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `P(A = 1 | X)` in the simulation design.
pub fn true_propensity(x: &[f64]) -> f64 {
    logistic(0.5 * x[0] - 0.5 * x[1] + 0.2 * x[2] - 0.1 * x[3])
}

/// `E[Y | A = a, X]` in the simulation design.
pub fn true_outcome(a: u8, x: &[f64]) -> f64 {
    let a = f64::from(a);
    logistic(x[1] + x[2] + 3.0 * a + 1.5 * a * x[3])
}

/// Draws `n` observations; `V = {X4}`.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, COVARIATES);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut row = [0.0; COVARIATES];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rng.sample(StandardNormal);
            x[(i, j)] = *v;
        }
        let ai = u8::from(rng.random::<f64>() < true_propensity(&row));
        let yi = f64::from(u8::from(rng.random::<f64>() < true_outcome(ai, &row)));
        a.push(ai);
        y.push(yi);
    }
    Dataset::new(x, a, y, vec![MODIFIER_COL], Family::Binary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    A,
    B,
    C,
    D,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];

    const FULL: &'static [usize] = &[0, 1, 2, 3];
    const REDUCED: &'static [usize] = &[0, 3];

    /// Covariate columns of the propensity model.
    pub fn g_cols(self) -> &'static [usize] {
        match self {
            Scenario::A | Scenario::B => Self::FULL,
            Scenario::C | Scenario::D => Self::REDUCED,
        }
    }

    /// Covariate columns of the outcome model.
    pub fn q_cols(self) -> &'static [usize] {
        match self {
            Scenario::A | Scenario::C => Self::FULL,
            Scenario::B | Scenario::D => Self::REDUCED,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::D => "d",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "d" => Ok(Scenario::D),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Monte Carlo value of the true projection with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBeta {
    pub beta: [f64; 2],
    pub se: [f64; 2],
    pub draws: u64,
}

pub const ORACLE_DRAWS: u64 = 10_000_000;
pub const ORACLE_SEED: u64 = 20_240_601;
const ORACLE_CHUNK: u64 = 1 << 16;

/// Streaming sums for OLS of `psi` on `(1, x)` with a sandwich variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    /// `sum x^k`, k = 0..=4.
    x: [f64; 5],
    /// `sum psi x^k`, k = 0..=3.
    px: [f64; 4],
    /// `sum psi^2 x^k`, k = 0..=2.
    ppx: [f64; 3],
}

impl Moments {
    fn push(&mut self, x: f64, psi: f64) {
        let mut xk = 1.0;
        for k in 0..5 {
            self.x[k] += xk;
            if k < 4 {
                self.px[k] += psi * xk;
            }
            if k < 3 {
                self.ppx[k] += psi * psi * xk;
            }
            xk *= x;
        }
    }

    fn merge(mut self, o: &Self) -> Self {
        (0..5).for_each(|k| self.x[k] += o.x[k]);
        (0..4).for_each(|k| self.px[k] += o.px[k]);
        (0..3).for_each(|k| self.ppx[k] += o.ppx[k]);
        self
    }

    fn solve(&self) -> ([f64; 2], [f64; 2]) {
        let xtx = nalgebra::Matrix2::new(self.x[0], self.x[1], self.x[1], self.x[2]);
        let inv = xtx.try_inverse().expect("oracle design is nonsingular");
        let b = inv * nalgebra::Vector2::new(self.px[0], self.px[1]);
        let (b0, b1) = (b[0], b[1]);
        // sum e^2 x^k with e = psi - b0 - b1 x
        let e2 = |k: usize| {
            self.ppx[k] - 2.0 * b0 * self.px[k] - 2.0 * b1 * self.px[k + 1]
                + b0 * b0 * self.x[k]
                + 2.0 * b0 * b1 * self.x[k + 1]
                + b1 * b1 * self.x[k + 2]
        };
        let meat = nalgebra::Matrix2::new(e2(0), e2(1), e2(1), e2(2));
        let cov = inv * meat * inv;
        (b.into(), [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()])
    }
}

/// `psi(X) = E[Y | A=1, X] - E[Y | A=0, X]` in the simulation design.
pub fn true_psi(x2: f64, x3: f64, x4: f64) -> f64 {
    logistic(x2 + x3 + 3.0 + 1.5 * x4) - logistic(x2 + x3)
}

/// OLS of the analytic `psi(X)` on `(1, X4)` over `draws` covariate draws.
/// Chunks are seeded independently, so the result does not depend on the
/// thread count.
pub fn true_beta_oracle(draws: u64, seed: u64) -> OracleBeta {
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let total = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c));
            let len = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut m = Moments::default();
            for _ in 0..len {
                let x: [f64; COVARIATES] = std::array::from_fn(|_| rng.sample(StandardNormal));
                m.push(x[3], true_psi(x[1], x[2], x[3]));
            }
            m
        })
        .collect::<Vec<_>>()
        .iter()
        .fold(Moments::default(), |acc, m| acc.merge(m));
    let (beta, se) = total.solve();
    OracleBeta { beta, se, draws }
}

/// Which estimators a replication runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Frequentist,
    Bayesian,
    Both,
}

impl Method {
    fn frequentist(self) -> bool {
        matches!(self, Method::Frequentist | Method::Both)
    }
    fn bayesian(self) -> bool {
        matches!(self, Method::Bayesian | Method::Both)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequentist" => Ok(Method::Frequentist),
            "bayesian" => Ok(Method::Bayesian),
            "both" => Ok(Method::Both),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub method: Method,
    pub seed: u64,
    pub level: f64,
    pub mcmc: McmcConfig,
    pub tmle: TmleOptions,
    pub nuisance: NuisanceOptions,
    pub prior: BetaPrior,
    /// Worker threads; falls back to the environment cap, then all cores.
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(scenario: Scenario, n: usize, reps: usize) -> Self {
        Self {
            scenario,
            n,
            reps,
            method: Method::Frequentist,
            seed: 1,
            level: 0.95,
            mcmc: McmcConfig::default(),
            tmle: TmleOptions::default(),
            nuisance: NuisanceOptions::default(),
            prior: BetaPrior::standard_normal(2),
            threads: None,
        }
    }
}

/// Point estimate and interval from one estimator on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub beta: [f64; 2],
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub frequentist: Estimate,
    pub bayesian: Option<Estimate>,
    pub eif_mean_norm: f64,
    pub iterations: usize,
    pub acceptance: Option<f64>,
    pub tau: Option<f64>,
}

/// Runs one replication: generate, fit nuisances, target, optionally sample.
pub fn run_replication(cfg: &SimConfig, rep: usize) -> Result<Replication> {
    let seed = mix_seed(cfg.seed, rep as u64);
    let data = generate_dataset(cfg.n, seed)?;
    let spec = MsmSpec::linear(1);
    let nuisance = make_nuisance(&data, cfg.scenario.g_cols(), cfg.scenario.q_cols(), &cfg.nuisance)?;
    let fit = target(&data, &spec, &nuisance, &cfg.tmle)?;
    let ci = wald_ci(&fit, cfg.level);
    let frequentist = Estimate {
        beta: [fit.beta_star[0], fit.beta_star[1]],
        lower: [ci[0].0, ci[1].0],
        upper: [ci[0].1, ci[1].1],
    };
    let (mut bayesian, mut acceptance, mut tau) = (None, None, None);
    if cfg.method.bayesian() {
        let posterior = TargetedPosterior {
            likelihood: TargetedLikelihood::new(&data, &spec, &nuisance, &fit)?,
            prior: cfg.prior.clone(),
        };
        let mut mcmc = cfg.mcmc.clone();
        mcmc.seed = mix_seed(seed, 0xB4E5);
        mcmc.level = cfg.level;
        let run = run_chain(&posterior, &mcmc)?;
        let c = &run.summary.coords;
        bayesian = Some(Estimate {
            beta: [c[0].median, c[1].median],
            lower: [c[0].lower, c[1].lower],
            upper: [c[0].upper, c[1].upper],
        });
        acceptance = Some(run.draws.acceptance_ratio);
        tau = Some(run.draws.tau);
    }
    Ok(Replication {
        rep,
        seed,
        frequentist,
        bayesian,
        eif_mean_norm: fit.eif_mean_norm,
        iterations: fit.iterations,
        acceptance,
        tau,
    })
}

/// Coverage and error summaries of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub coverage: [f64; 2],
    pub coverage_se: [f64; 2],
    /// Mean absolute error `mean |beta_hat - beta0|`.
    pub bias: [f64; 2],
    pub bias_se: [f64; 2],
    /// `mean(beta_hat) - beta0`.
    pub signed_bias: [f64; 2],
    pub mean: [f64; 2],
    pub sd: [f64; 2],
}

impl EstimatorSummary {
    pub fn from_estimates(estimates: &[&Estimate], beta0: [f64; 2]) -> Self {
        let r = estimates.len() as f64;
        let mut s = EstimatorSummary {
            coverage: [0.0; 2],
            coverage_se: [0.0; 2],
            bias: [0.0; 2],
            bias_se: [0.0; 2],
            signed_bias: [0.0; 2],
            mean: [0.0; 2],
            sd: [0.0; 2],
        };
        for j in 0..2 {
            let cover = estimates
                .iter()
                .filter(|e| e.lower[j] <= beta0[j] && beta0[j] <= e.upper[j])
                .count() as f64
                / r;
            let abs: Vec<f64> = estimates.iter().map(|e| (e.beta[j] - beta0[j]).abs()).collect();
            let mae = abs.iter().sum::<f64>() / r;
            let mean = estimates.iter().map(|e| e.beta[j]).sum::<f64>() / r;
            let var = estimates.iter().map(|e| (e.beta[j] - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
            let abs_var = abs.iter().map(|a| (a - mae).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
            s.coverage[j] = cover;
            s.coverage_se[j] = (cover * (1.0 - cover) / r).sqrt();
            s.bias[j] = mae;
            s.bias_se[j] = (abs_var / r).sqrt();
            s.signed_bias[j] = mean - beta0[j];
            s.mean[j] = mean;
            s.sd[j] = var.sqrt();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub completed: usize,
    pub failed: usize,
    pub beta0: [f64; 2],
    pub frequentist: Option<EstimatorSummary>,
    pub bayesian: Option<EstimatorSummary>,
    pub max_eif_mean_norm: f64,
    pub replications: Vec<Replication>,
    /// `(rep, error code, message)` for dropped replications.
    pub failures: Vec<(usize, String, String)>,
}

/// Failure share above which a scenario run is an error.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Number of worker threads: explicit value, else the environment cap,
/// else all available cores.
pub fn worker_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool sized by [`worker_threads`].
pub fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads(threads))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs all replications of a scenario against `beta0`.
pub fn run_scenario(cfg: &SimConfig, beta0: [f64; 2]) -> Result<SimResult> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if cfg.n < 10 {
        return Err(Error::Config("sample size must be at least 10".into()));
    }
    let outcomes: Vec<Result<Replication>> =
        with_pool(cfg.threads, || (0..cfg.reps).into_par_iter().map(|r| run_replication(cfg, r)).collect())?;
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => replications.push(r),
            Err(e) => {
                log::warn!("replication {rep} failed: {e}");
                failures.push((rep, e.code().to_string(), e.to_string()));
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            reps: cfg.reps,
        });
    }
    let freq: Vec<&Estimate> = replications.iter().map(|r| &r.frequentist).collect();
    let bayes: Vec<&Estimate> = replications.iter().filter_map(|r| r.bayesian.as_ref()).collect();
    Ok(SimResult {
        scenario: cfg.scenario,
        n: cfg.n,
        reps: cfg.reps,
        completed: replications.len(),
        failed: failures.len(),
        beta0,
        frequentist: (cfg.method.frequentist() && !freq.is_empty()).then(|| EstimatorSummary::from_estimates(&freq, beta0)),
        bayesian: (cfg.method.bayesian() && !bayes.is_empty()).then(|| EstimatorSummary::from_estimates(&bayes, beta0)),
        max_eif_mean_norm: replications.iter().map(|r| r.eif_mean_norm).fold(0.0, f64::max),
        replications,
        failures,
    })
}

/// Gauss-Hermite nodes and weights for `int f(x) exp(-x^2) dx`
/// (Golub-Welsch).
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// The true projection by quadrature over `(X2 + X3, X4)`; `X2 + X3` is
/// `N(0, 2)` and `X4` is `N(0, 1)`, so `E[(1, X4)'(1, X4)] = I`.
pub fn true_beta_quadrature(order: usize) -> [f64; 2] {
    let (z, w) = gauss_hermite(order);
    let norm = std::f64::consts::PI;
    let mut m = Vector3::zeros();
    for (zi, wi) in z.iter().zip(&w) {
        let s = 2.0 * zi;
        for (zj, wj) in z.iter().zip(&w) {
            let x4 = std::f64::consts::SQRT_2 * zj;
            let psi = logistic(s + 3.0 + 1.5 * x4) - logistic(s);
            let wt = wi * wj / norm;
            m += Vector3::new(psi, psi * x4, x4 * x4) * wt;
        }
    }
    [m[0], m[1] / m[2]]
}
