//! Targeted Bayesian inference: the targeted likelihood over the
//! fluctuation parameter, the map to `beta`, the pulled-back prior and a
//! random-walk Metropolis-Hastings sampler with proposal-scale tuning.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{self, logit, BivariateFn, Scalar, ScalarFn};
use crate::error::{Error, Result};
use crate::msm::{solve_beta, Dataset, Family, Loss, Modifiers, MsmSpec, WorkingModel};
use crate::nuisance::NuisanceFit;
use crate::tmle::{
    arm_covariate, fluctuate_qbar, tilt_log_weights, FluctuationObjective, FluctuationState, TargetedFit,
};

/// Half-width `C` of the compact fluctuation domain `[-C, C]^p`.
pub const EPS_BOUND: f64 = 10.0;
/// `|det J|` below this makes the prior pull-back degenerate.
pub const MIN_ABS_DET: f64 = 1e-12;
/// Condition number of the inner risk Hessian above which the Jacobian of
/// the map falls back to finite differences.
const IMPLICIT_MAX_CONDITION: f64 = 1e10;
const FD_STEP: f64 = 1e-5;

/// Prior on `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BetaPrior {
    /// Independent normals.
    Normal { mean: Vec<f64>, var: Vec<f64> },
    /// Improper flat prior.
    Flat,
}

impl BetaPrior {
    pub fn standard_normal(p: usize) -> Self {
        BetaPrior::Normal {
            mean: vec![0.0; p],
            var: vec![1.0; p],
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let BetaPrior::Normal { mean, var } = self {
            if mean.len() != p || var.len() != p {
                return Err(Error::Config(format!("prior needs {p} means and variances")));
            }
            if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("prior variances must be positive and finite".into()));
            }
        }
        Ok(())
    }

    pub fn log_density(&self, beta: &[f64]) -> f64 {
        match self {
            BetaPrior::Flat => 0.0,
            BetaPrior::Normal { mean, var } => beta
                .iter()
                .zip(mean)
                .zip(var)
                .map(|((b, m), v)| -0.5 * ((b - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
                .sum(),
        }
    }
}

/// Likelihood of the fluctuation parameter, frozen at the targeted state.
#[derive(Debug, Clone)]
pub struct TargetedLikelihood<M, L> {
    spec: MsmSpec<M, L>,
    family: Family,
    v: Modifiers,
    g1: Vec<f64>,
    base: FluctuationState,
    beta_star: DVector<f64>,
    /// `M^{-1} d/dt Ldot_i`, direction of the outcome fluctuation.
    q_dir: Vec<DVector<f64>>,
    /// `M^{-1} Ldot_i`, direction of the tilt.
    tilt_dir: Vec<DVector<f64>>,
    q_scale: [f64; 2],
    objective: FluctuationObjective,
    constant: f64,
}

impl<M: WorkingModel + Clone, L: Loss + Clone> TargetedLikelihood<M, L> {
    pub fn new(data: &Dataset, spec: &MsmSpec<M, L>, nuisance: &NuisanceFit, fit: &TargetedFit) -> Result<Self> {
        let m_inv = &fit.eif.m.inverse;
        let q_dir: Vec<DVector<f64>> = fit.rows.iter().map(|r| m_inv * &r.grad_t_ldot).collect();
        let tilt_dir: Vec<DVector<f64>> = fit.rows.iter().map(|r| m_inv * &r.ldot).collect();
        let (q_scale, loss_weight, log_sigma2) = match data.family {
            Family::Binary => ([1.0; 2], [1.0; 2], [0.0; 2]),
            Family::Continuous => {
                let s = nuisance
                    .sigma2
                    .ok_or_else(|| Error::InvalidInput("continuous family needs sigma2".into()))?;
                (s, [1.0 / s[0], 1.0 / s[1]], [s[0].ln(), s[1].ln()])
            }
        };
        let objective =
            FluctuationObjective::new(data, &fit.state, &nuisance.g1, &q_dir, &tilt_dir, q_scale, loss_weight);
        let constant = fit.state.tilt_logw.iter().sum::<f64>()
            - data.a.iter().map(|&a| log_sigma2[a as usize]).sum::<f64>();
        Ok(Self {
            spec: spec.clone(),
            family: data.family,
            v: data.modifiers(),
            g1: nuisance.g1.clone(),
            base: fit.state.clone(),
            beta_star: fit.beta_star.clone(),
            q_dir,
            tilt_dir,
            q_scale,
            objective,
            constant,
        })
    }
}

impl<M: WorkingModel, L: Loss> TargetedLikelihood<M, L> {
    pub fn dim(&self) -> usize {
        self.beta_star.len()
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn beta_star(&self) -> &DVector<f64> {
        &self.beta_star
    }

    pub fn in_domain(eps: &[f64]) -> bool {
        eps.iter().all(|e| e.abs() <= EPS_BOUND)
    }

    /// `sum_i log f(O_i | eps)` up to a constant free of `eps`; `-inf`
    /// outside the compact domain.
    pub fn log_likelihood(&self, eps: &[f64]) -> f64 {
        if !Self::in_domain(eps) {
            return f64::NEG_INFINITY;
        }
        let v = self.log_likelihood_generic(eps);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_likelihood_generic<S: Scalar>(&self, eps: &[S]) -> S {
        self.objective.risk(eps) * -(self.n() as f64) + self.constant
    }

    /// Gradient of the log-likelihood.
    pub fn log_likelihood_grad(&self, eps: &[f64]) -> Result<DVector<f64>> {
        struct Wrap<'a, M, L>(&'a TargetedLikelihood<M, L>);
        impl<M: WorkingModel, L: Loss> ScalarFn for Wrap<'_, M, L> {
            fn eval<S: Scalar>(&self, x: &[S]) -> S {
                self.0.log_likelihood_generic(x)
            }
        }
        Ok(autodiff::grad(&Wrap(self), eps)?.1)
    }

    /// Fluctuated `Psi` and normalized weights at `eps`.
    fn fluctuated(&self, eps: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (q0, q1) = fluctuate_qbar(&self.base, eps, &self.q_dir, &self.g1, self.q_scale, self.family);
        let psi = q1.iter().zip(&q0).map(|(a, b)| a - b).collect();
        let w = tilt_log_weights(&self.base.tilt_logw, eps, &self.tilt_dir)
            .into_iter()
            .map(f64::exp)
            .collect();
        (psi, w)
    }

    /// `vartheta(eps) = B(F_eps)`.
    pub fn vartheta(&self, eps: &[f64]) -> Result<DVector<f64>> {
        let (psi, w) = self.fluctuated(eps);
        Ok(solve_beta(&psi, &w, &self.v, &self.spec)?.beta)
    }

    /// `vartheta(eps)` and its Jacobian, by implicit differentiation of the
    /// inner stationarity condition, or by central differences when the
    /// inner Hessian is ill-conditioned.
    pub fn vartheta_jacobian(&self, eps: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (psi, w) = self.fluctuated(eps);
        let fit = solve_beta(&psi, &w, &self.v, &self.spec)?;
        let sv = fit.hessian.singular_values();
        if sv.min() > sv.max() / IMPLICIT_MAX_CONDITION {
            if let Some(inv) = fit.hessian.clone().try_inverse() {
                let risk = ShiftedRisk {
                    lik: self,
                    eps0: eps,
                    w0: &w,
                };
                let cp = autodiff::cross_partials(&risk, fit.beta.as_slice(), eps)?;
                let jac = -(inv * cp.cross);
                return Ok((fit.beta, jac));
            }
        }
        let jac = self.vartheta_jacobian_fd(eps)?;
        Ok((fit.beta, jac))
    }

    /// Central finite-difference Jacobian of `vartheta`.
    pub fn vartheta_jacobian_fd(&self, eps: &[f64]) -> Result<DMatrix<f64>> {
        let p = eps.len();
        let mut jac = DMatrix::zeros(p, p);
        let mut e = eps.to_vec();
        for k in 0..p {
            e[k] = eps[k] + FD_STEP;
            let up = self.vartheta(&e)?;
            e[k] = eps[k] - FD_STEP;
            let dn = self.vartheta(&e)?;
            e[k] = eps[k];
            jac.set_column(k, &((up - dn) / (2.0 * FD_STEP)));
        }
        Ok(jac)
    }

    /// `log pi_beta(vartheta(eps)) + log |det vartheta'(eps)|`, with the image.
    pub fn log_prior_eps(&self, prior: &BetaPrior, eps: &[f64]) -> Result<(f64, DVector<f64>)> {
        let (beta, jac) = self.vartheta_jacobian(eps)?;
        let det = jac.determinant();
        if !(det.abs() >= MIN_ABS_DET) {
            return Err(Error::DegenerateMap { det });
        }
        Ok((prior.log_density(beta.as_slice()) + det.abs().ln(), beta))
    }
}

/// `R(beta, eps) = sum_i w_i(eps0) exp((eps - eps0)' d_i) L(Psi_i(eps), m_beta(v_i))`.
/// Its normalizing constant is dropped, which leaves the cross derivative at
/// the inner root unchanged.
struct ShiftedRisk<'a, M, L> {
    lik: &'a TargetedLikelihood<M, L>,
    eps0: &'a [f64],
    w0: &'a [f64],
}

impl<M: WorkingModel, L: Loss> BivariateFn for ShiftedRisk<'_, M, L> {
    fn eval<S: Scalar>(&self, beta: &[S], eps: &[S]) -> S {
        let lik = self.lik;
        let base = &lik.base;
        let de: Vec<S> = eps.iter().zip(self.eps0).map(|(e, e0)| *e - *e0).collect();
        let mut total = S::zero();
        for i in 0..base.n() {
            let c = &lik.q_dir[i];
            let d = &lik.tilt_dir[i];
            let mut s = eps[0] * c[0];
            let mut t = de[0] * d[0];
            for k in 1..eps.len() {
                s += eps[k] * c[k];
                t += de[k] * d[k];
            }
            let g = lik.g1[i];
            let q0 = fluctuate_generic(base.qbar0[i], s * (lik.q_scale[0] * arm_covariate(0, g)), lik.family);
            let q1 = fluctuate_generic(base.qbar1[i], s * (lik.q_scale[1] * arm_covariate(1, g)), lik.family);
            let m = lik.spec.model.eval(beta, lik.v.row(i));
            total += t.exp() * lik.spec.loss.eval(q1 - q0, m) * self.w0[i];
        }
        total
    }
}

fn fluctuate_generic<S: Scalar>(q: f64, shift: S, family: Family) -> S {
    match family {
        Family::Binary => (shift + logit(q)).logistic(),
        Family::Continuous => shift + q,
    }
}

/// A log posterior over the fluctuation parameter, with the `beta` image of
/// each point.
pub trait PosteriorTarget: Sync {
    fn dim(&self) -> usize;

    /// `None` when the point is outside the support or cannot be evaluated.
    fn log_target(&self, eps: &[f64]) -> Option<(f64, DVector<f64>)>;
}

/// Targeted likelihood times the pulled-back prior.
#[derive(Debug, Clone)]
pub struct TargetedPosterior<M, L> {
    pub likelihood: TargetedLikelihood<M, L>,
    pub prior: BetaPrior,
}

impl<M: WorkingModel, L: Loss> PosteriorTarget for TargetedPosterior<M, L> {
    fn dim(&self) -> usize {
        self.likelihood.dim()
    }

    fn log_target(&self, eps: &[f64]) -> Option<(f64, DVector<f64>)> {
        let ll = self.likelihood.log_likelihood(eps);
        if !ll.is_finite() {
            return None;
        }
        let (lp, beta) = self.likelihood.log_prior_eps(&self.prior, eps).ok()?;
        let total = ll + lp;
        total.is_finite().then_some((total, beta))
    }
}

/// Joint chain of `(eps, beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// `iters x p`.
    pub eps: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub accepted: Vec<bool>,
    pub tau: f64,
    pub acceptance_ratio: f64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }
}

/// Random-walk Metropolis-Hastings with proposal `N(eps, tau^2 I)`,
/// accepting when `l' - l > log u`.
pub fn metropolis_hastings<T: PosteriorTarget + ?Sized>(
    target: &T,
    tau: f64,
    iters: usize,
    seed: u64,
    eps0: &[f64],
) -> Result<PosteriorDraws> {
    let p = target.dim();
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("proposal scale must be positive, got {tau}")));
    }
    if iters == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    if eps0.len() != p {
        return Err(Error::InvalidInput(format!("starting point has {} entries, expected {p}", eps0.len())));
    }
    let (mut ll, mut beta) = target.log_target(eps0).ok_or(Error::ChainInit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = eps0.to_vec();
    let mut eps_out = DMatrix::zeros(iters, p);
    let mut beta_out = DMatrix::zeros(iters, beta.len());
    let mut accepted = Vec::with_capacity(iters);
    let mut proposal = vec![0.0; p];

    for t in 0..iters {
        for (prop, cur) in proposal.iter_mut().zip(&current) {
            let z: f64 = rng.sample(StandardNormal);
            *prop = cur + tau * z;
        }
        let u: f64 = rng.random();
        let accept = match target.log_target(&proposal) {
            Some((l_new, b_new)) if l_new - ll > u.ln() => {
                ll = l_new;
                beta = b_new;
                current.copy_from_slice(&proposal);
                true
            }
            _ => false,
        };
        accepted.push(accept);
        eps_out.row_mut(t).copy_from_slice(&current);
        beta_out.row_mut(t).copy_from_slice(beta.as_slice());
    }
    let acceptance_ratio = accepted.iter().filter(|&&a| a).count() as f64 / iters as f64;
    Ok(PosteriorDraws {
        eps: eps_out,
        beta: beta_out,
        accepted,
        tau,
        acceptance_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub max_steps: usize,
    pub pilot_iters: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            tau_min: 1e-4,
            tau_max: 10.0,
            max_steps: 20,
            pilot_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub tau: f64,
    /// Acceptance ratio of the pilot at the returned `tau`.
    pub acceptance: f64,
    /// `(tau_k, acceptance_k)` for every pilot run.
    pub trace: Vec<(f64, f64)>,
}

/// Bisection on the proposal scale until a pilot chain's acceptance ratio
/// lands in `(0.3, 0.4)`; returns the last midpoint if it never does.
pub fn tune_tau<T: PosteriorTarget + ?Sized>(target: &T, cfg: &TuneConfig, seed: u64, eps0: &[f64]) -> Result<TuneResult> {
    if !(cfg.tau_min > 0.0 && cfg.tau_min < cfg.tau_max) {
        return Err(Error::Config(format!(
            "need 0 < tau_min < tau_max, got ({}, {})",
            cfg.tau_min, cfg.tau_max
        )));
    }
    if cfg.max_steps == 0 {
        return Err(Error::Config("tuning needs at least one step".into()));
    }
    let (mut lo, mut hi) = (cfg.tau_min, cfg.tau_max);
    let mut trace = Vec::with_capacity(cfg.max_steps);
    for k in 0..cfg.max_steps {
        let tau = 0.5 * (lo + hi);
        let pilot = metropolis_hastings(target, tau, cfg.pilot_iters, crate::sim::mix_seed(seed, k as u64), eps0)?;
        let a = pilot.acceptance_ratio;
        trace.push((tau, a));
        if a > 0.3 && a < 0.4 {
            break;
        }
        if a <= 0.3 {
            hi = tau;
        } else {
            lo = tau;
        }
    }
    let &(tau, acceptance) = trace.last().expect("at least one pilot");
    Ok(TuneResult { tau, acceptance, trace })
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Posterior probability that the coordinate is positive.
    pub prob_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub level: f64,
    pub burn_in: usize,
    pub kept: usize,
    pub coords: Vec<CoordinateSummary>,
}

pub const MIN_KEPT_DRAWS: usize = 100;

/// Default burn-in, a fifth of the chain.
pub fn default_burn_in(iters: usize) -> usize {
    iters / 5
}

/// Medians, equal-tailed credible intervals and tail probabilities of the
/// post-burn-in `beta` draws.
pub fn posterior_summaries(draws: &PosteriorDraws, level: f64, burn_in: usize) -> Result<PosteriorSummary> {
    summarize_columns(&draws.beta, level, burn_in)
}

pub fn summarize_columns(samples: &DMatrix<f64>, level: f64, burn_in: usize) -> Result<PosteriorSummary> {
    let total = samples.nrows();
    if burn_in >= total || total - burn_in < MIN_KEPT_DRAWS {
        return Err(Error::Config(format!(
            "need at least {MIN_KEPT_DRAWS} draws after burn-in, have {}",
            total.saturating_sub(burn_in)
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("credible level {level} not in (0, 1)")));
    }
    let kept = total - burn_in;
    let coords = (0..samples.ncols())
        .map(|j| {
            let mut col: Vec<f64> = samples.column(j).iter().skip(burn_in).copied().collect();
            let mean = col.iter().sum::<f64>() / kept as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (kept - 1) as f64).sqrt();
            let prob_positive = col.iter().filter(|&&v| v > 0.0).count() as f64 / kept as f64;
            col.sort_by(f64::total_cmp);
            let alpha = 1.0 - level;
            CoordinateSummary {
                median: quantile_sorted(&col, 0.5),
                mean,
                sd,
                lower: quantile_sorted(&col, alpha / 2.0),
                upper: quantile_sorted(&col, 1.0 - alpha / 2.0),
                prob_positive,
            }
        })
        .collect();
    Ok(PosteriorSummary {
        level,
        burn_in,
        kept,
        coords,
    })
}

/// Paired `(t, eps_t, beta_t)` samples with a flag for a bounded map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub eps: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    /// Per `beta` coordinate: the top or bottom 1% of draws sit on a plateau
    /// while the matching `eps` draws still move.
    pub plateau: Vec<bool>,
    pub flagged: bool,
}

const PLATEAU_TOL: f64 = 1e-6;

pub fn diagnostic_export(draws: &PosteriorDraws) -> Diagnostic {
    let plateau: Vec<bool> = (0..draws.beta.ncols())
        .map(|j| plateau_in_column(&draws.eps, &draws.beta, j))
        .collect();
    Diagnostic {
        eps: draws.eps.clone(),
        beta: draws.beta.clone(),
        flagged: plateau.iter().any(|&f| f),
        plateau,
    }
}

fn plateau_in_column(eps: &DMatrix<f64>, beta: &DMatrix<f64>, j: usize) -> bool {
    let n = beta.nrows();
    if n < 2 {
        return false;
    }
    let k = ((n as f64 * 0.01).ceil() as usize).max(2);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| beta[(a, j)].total_cmp(&beta[(b, j)]));
    let tails = [&order[..k.min(n)], &order[n - k.min(n)..]];
    tails.iter().any(|idx| {
        let values = idx.iter().map(|&i| beta[(i, j)]);
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if hi - lo > PLATEAU_TOL {
            return false;
        }
        (0..eps.ncols()).any(|c| {
            let col = idx.iter().map(|&i| eps[(i, c)]);
            let (l, h) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            h - l > PLATEAU_TOL
        })
    })
}

/// Kolmogorov-Smirnov distances between post-burn-in `beta` draws and
/// `Normal(beta*_j, cov_jj / n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvmReport {
    pub ks: Vec<f64>,
    pub reference_sd: Vec<f64>,
    pub posterior_sd: Vec<f64>,
}

pub fn bvm_check(draws: &PosteriorDraws, fit: &TargetedFit, burn_in: usize) -> Result<BvmReport> {
    let n = fit.n() as f64;
    let p = draws.beta.ncols();
    let mut ks = Vec::with_capacity(p);
    let mut reference_sd = Vec::with_capacity(p);
    let mut posterior_sd = Vec::with_capacity(p);
    for j in 0..p {
        let sd = (fit.cov[(j, j)] / n).sqrt();
        let reference = Normal::new(fit.beta_star[j], sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let col: Vec<f64> = draws.beta.column(j).iter().skip(burn_in).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        posterior_sd.push((col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt());
        ks.push(ks_distance(col, |x| reference.cdf(x)));
        reference_sd.push(sd);
    }
    Ok(BvmReport {
        ks,
        reference_sd,
        posterior_sd,
    })
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n - F|`.
pub fn ks_distance(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < sample.len() {
        let x = sample[i];
        let mut j = i;
        while j < sample.len() && sample[j] == x {
            j += 1;
        }
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max((j as f64 / n - f).abs());
        i = j;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub iters: usize,
    /// Defaults to a fifth of `iters`.
    pub burn_in: Option<usize>,
    pub seed: u64,
    /// Fixed proposal scale; tuned when absent.
    pub tau: Option<f64>,
    pub tune: TuneConfig,
    pub level: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iters: 10_000,
            burn_in: None,
            seed: 1,
            tau: None,
            tune: TuneConfig::default(),
            level: 0.95,
        }
    }
}

impl McmcConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or_else(|| default_burn_in(self.iters))
    }
}

#[derive(Debug, Clone)]
pub struct BayesRun {
    pub tune: Option<TuneResult>,
    pub draws: PosteriorDraws,
    pub summary: PosteriorSummary,
}

/// Tunes (unless `tau` is fixed), samples from `eps = 0` and summarizes.
pub fn run_chain<T: PosteriorTarget + ?Sized>(target: &T, cfg: &McmcConfig) -> Result<BayesRun> {
    let eps0 = vec![0.0; target.dim()];
    let burn_in = cfg.burn_in();
    if cfg.iters == 0 || cfg.iters < burn_in + MIN_KEPT_DRAWS {
        return Err(Error::Config(format!(
            "{} iterations leave fewer than {MIN_KEPT_DRAWS} draws after a burn-in of {burn_in}",
            cfg.iters
        )));
    }
    let tune = match cfg.tau {
        Some(_) => None,
        None => Some(tune_tau(target, &cfg.tune, crate::sim::mix_seed(cfg.seed, u64::MAX), &eps0)?),
    };
    let tau = cfg.tau.or(tune.as_ref().map(|t| t.tau)).expect("tau fixed or tuned");
    let draws = metropolis_hastings(target, tau, cfg.iters, cfg.seed, &eps0)?;
    let summary = posterior_summaries(&draws, cfg.level, burn_in)?;
    Ok(BayesRun { tune, draws, summary })
}
