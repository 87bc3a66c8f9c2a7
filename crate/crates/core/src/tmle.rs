//! Iterative targeting: fluctuation submodels, the epsilon risk, the
//! stopping rule and Wald intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{self, logistic, logit, Scalar, ScalarFn};
use crate::error::{Error, Result};
use crate::msm::{
    delta_star, eif_covariance, newton_direction, row_derivatives, solve_beta, Dataset, EifRows, Family, Loss,
    LossDerivatives, Modifiers, MsmSpec, WorkingModel,
};
use crate::nuisance::NuisanceFit;

/// Clever covariates `(h0, h1) = (-1{a=0} / (1 - g1), 1{a=1} / g1)`.
pub fn clever_covariates(a: u8, g1: f64) -> (f64, f64) {
    if a == 1 {
        (0.0, 1.0 / g1)
    } else {
        (-1.0 / (1.0 - g1), 0.0)
    }
}

/// Covariate of arm `j` evaluated at `A = j`, which is what the fluctuated
/// regression `Qbar^(j)(X)` uses at every row.
pub fn arm_covariate(arm: u8, g1: f64) -> f64 {
    let (h0, h1) = clever_covariates(arm, g1);
    h0 + h1
}

/// `phi^{-1}(phi(q) + shift)` with `phi = logit` (binary) or the identity.
pub fn fluctuate_value(q: f64, shift: f64, family: Family) -> f64 {
    // The logit round trip is not exact; a zero shift must be.
    if shift == 0.0 {
        return q;
    }
    match family {
        Family::Binary => logistic(logit(q) + shift),
        Family::Continuous => q + shift,
    }
}

/// Current targeted estimates of the outcome regressions and the tilted
/// empirical covariate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationState {
    pub qbar0: Vec<f64>,
    pub qbar1: Vec<f64>,
    /// Normalized log weights, `log w`.
    pub tilt_logw: Vec<f64>,
    pub w: Vec<f64>,
    pub beta: DVector<f64>,
    pub eps_history: Vec<DVector<f64>>,
}

impl FluctuationState {
    /// Untargeted state: the initial regressions and the empirical distribution.
    pub fn initial(nuisance: &NuisanceFit, p: usize) -> Self {
        let n = nuisance.n();
        Self {
            qbar0: nuisance.qbar0.clone(),
            qbar1: nuisance.qbar1.clone(),
            tilt_logw: vec![-(n as f64).ln(); n],
            w: vec![1.0 / n as f64; n],
            beta: DVector::zeros(p),
            eps_history: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn qbar(&self, arm: u8) -> &[f64] {
        if arm == 1 {
            &self.qbar1
        } else {
            &self.qbar0
        }
    }

    /// Per-row `Psi = Qbar^(1) - Qbar^(0)`.
    pub fn psi(&self) -> Vec<f64> {
        self.qbar1.iter().zip(&self.qbar0).map(|(a, b)| a - b).collect()
    }
}

/// `w_i proportional to exp(log w_prev_i + eps' dir_i)`, normalized in log space.
pub fn tilt_log_weights(logw_prev: &[f64], eps: &[f64], dirs: &[DVector<f64>]) -> Vec<f64> {
    let mut lw: Vec<f64> = logw_prev
        .iter()
        .zip(dirs)
        .map(|(l, d)| l + d.iter().zip(eps).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let lse = log_sum_exp(&lw);
    lw.iter_mut().for_each(|v| *v -= lse);
    lw
}

/// Normalized tilt weights from `w_prev`.
pub fn tilt_weights(w_prev: &[f64], eps: &[f64], ldot: &[DVector<f64>]) -> Vec<f64> {
    let lw: Vec<f64> = w_prev.iter().map(|w| w.ln()).collect();
    tilt_log_weights(&lw, eps, ldot).into_iter().map(f64::exp).collect()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Fluctuation objective shared by the frequentist epsilon risk and the
/// targeted likelihood.
///
/// `risk(eps) = (1/n) sum_i loss_weight[A_i] L_{A_i}(q_i(eps))
///              - (1/n) sum_i log(n w_i(eps))`, up to an additive constant,
/// where `q_i(eps) = phi^{-1}(phi(q_i) + q_scale[A_i] h_i eps' q_dir_i)` and
/// `w(eps)` tilts the base weights along `tilt_dir`.
#[derive(Debug, Clone)]
pub(crate) struct FluctuationObjective {
    pub p: usize,
    pub family: Family,
    pub y: Vec<f64>,
    pub arm: Vec<u8>,
    /// `logit(q_obs)` for the binary family, `q_obs` otherwise.
    pub link_obs: Vec<f64>,
    /// Observed-arm clever covariate.
    pub h_obs: Vec<f64>,
    /// Row-major `n x p`.
    pub q_dir: Vec<f64>,
    pub tilt_dir: Vec<f64>,
    pub logw: Vec<f64>,
    pub tilt_mean: Vec<f64>,
    pub q_scale: [f64; 2],
    pub loss_weight: [f64; 2],
}

impl FluctuationObjective {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: &Dataset,
        state: &FluctuationState,
        g1: &[f64],
        q_dir: &[DVector<f64>],
        tilt_dir: &[DVector<f64>],
        q_scale: [f64; 2],
        loss_weight: [f64; 2],
    ) -> Self {
        let n = data.n();
        let p = q_dir.first().map_or(0, |d| d.len());
        let q_obs: Vec<f64> = (0..n).map(|i| state.qbar(data.a[i])[i]).collect();
        let link_obs = match data.family {
            Family::Binary => q_obs.iter().map(|&q| logit(q)).collect(),
            Family::Continuous => q_obs.clone(),
        };
        let h_obs = (0..n).map(|i| arm_covariate(data.a[i], g1[i])).collect();
        let flat = |rows: &[DVector<f64>]| rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>();
        let mut tilt_mean = vec![0.0; p];
        for d in tilt_dir {
            for (m, v) in tilt_mean.iter_mut().zip(d.iter()) {
                *m += v / n as f64;
            }
        }
        Self {
            p,
            family: data.family,
            y: data.y.clone(),
            arm: data.a.clone(),
            link_obs,
            h_obs,
            q_dir: flat(q_dir),
            tilt_dir: flat(tilt_dir),
            logw: state.tilt_logw.clone(),
            tilt_mean,
            q_scale,
            loss_weight,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    fn dot<S: Scalar>(eps: &[S], dir: &[f64]) -> S {
        let mut s = eps[0] * dir[0];
        for k in 1..eps.len() {
            s += eps[k] * dir[k];
        }
        s
    }

    /// Observed-arm loss at row `i`, weighted.
    #[inline]
    fn outcome_loss<S: Scalar>(&self, i: usize, eps: &[S]) -> S {
        let p = self.p;
        let arm = self.arm[i] as usize;
        let shift = Self::dot(eps, &self.q_dir[i * p..(i + 1) * p]) * (self.q_scale[arm] * self.h_obs[i]);
        let u = shift + self.link_obs[i];
        let y = self.y[i];
        let loss = match self.family {
            Family::Binary => -(u.ln_logistic() * y + (-u).ln_logistic() * (1.0 - y)),
            Family::Continuous => {
                let r = -u + y;
                r * r * 0.5
            }
        };
        loss * self.loss_weight[arm]
    }

    /// `log sum_k exp(log w_k + eps' d_k) - eps' mean(d)`.
    fn tilt_term<S: Scalar>(&self, eps: &[S]) -> S {
        let p = self.p;
        let n = self.n();
        let mut exps: Vec<S> = Vec::with_capacity(n);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let e = Self::dot(eps, &self.tilt_dir[i * p..(i + 1) * p]) + self.logw[i];
            max = max.max(e.value());
            exps.push(e);
        }
        let mut sum = S::zero();
        for e in exps {
            sum += (e - max).exp();
        }
        sum.ln() + max - Self::dot(eps, &self.tilt_mean)
    }

    /// Per-observation mean risk.
    pub fn risk<S: Scalar>(&self, eps: &[S]) -> S {
        let n = self.n();
        let mut total = S::zero();
        for i in 0..n {
            total += self.outcome_loss(i, eps);
        }
        total / n as f64 + self.tilt_term(eps)
    }
}

impl ScalarFn for FluctuationObjective {
    fn eval<S: Scalar>(&self, eps: &[S]) -> S {
        self.risk(eps)
    }
}

pub const EPS_GRAD_TOL: f64 = 1e-9;
const EPS_MAX_ITER: usize = 100;

/// Minimizes a fluctuation objective by damped Newton from `eps = 0`.
pub(crate) fn minimize_objective(obj: &FluctuationObjective) -> Result<DVector<f64>> {
    let p = obj.p;
    let mut eps = DVector::<f64>::zeros(p);
    let mut trace = Vec::new();
    let mut grad_norm = f64::INFINITY;
    for _ in 0..EPS_MAX_ITER {
        let second = autodiff::hessian(obj, eps.as_slice())?;
        grad_norm = second.gradient.amax();
        trace.push(second.value);
        if grad_norm < EPS_GRAD_TOL {
            return Ok(eps);
        }
        let step = newton_direction(&second.hessian, &second.gradient)
            .ok_or_else(|| Error::RankDeficient("epsilon risk Hessian is singular".into()))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=30 {
            let cand = &eps + &step * t;
            if let Ok(f) = autodiff::value(obj, cand.as_slice()) {
                if f <= second.value + 1e-14 * (1.0 + second.value.abs()) {
                    eps = cand;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "epsilon step",
        iterations: EPS_MAX_ITER,
        grad_norm,
        last: trace,
    })
}

/// `argmin_eps` of the targeting risk at the current state, holding
/// `state.beta` and the loss derivatives `rows` fixed.
pub fn eps_step(data: &Dataset, state: &FluctuationState, nuisance: &NuisanceFit, rows: &[LossDerivatives]) -> Result<DVector<f64>> {
    let q_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.grad_t_ldot.clone()).collect();
    let tilt_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.ldot.clone()).collect();
    let obj = FluctuationObjective::new(data, state, &nuisance.g1, &q_dir, &tilt_dir, [1.0; 2], [1.0; 2]);
    minimize_objective(&obj)
}

/// Value and gradient of the targeting risk minimized by [`eps_step`].
pub fn eps_risk(
    data: &Dataset,
    state: &FluctuationState,
    nuisance: &NuisanceFit,
    rows: &[LossDerivatives],
    eps: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let q_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.grad_t_ldot.clone()).collect();
    let tilt_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.ldot.clone()).collect();
    let obj = FluctuationObjective::new(data, state, &nuisance.g1, &q_dir, &tilt_dir, [1.0; 2], [1.0; 2]);
    Ok(autodiff::grad(&obj, eps)?)
}

/// Fluctuated `(qbar0, qbar1)` at every row: arm `j` moves along
/// `q_scale[j] h_j eps' q_dir_i` on the link scale.
pub fn fluctuate_qbar(
    state: &FluctuationState,
    eps: &[f64],
    q_dir: &[DVector<f64>],
    g1: &[f64],
    q_scale: [f64; 2],
    family: Family,
) -> (Vec<f64>, Vec<f64>) {
    let n = state.n();
    let mut q0 = Vec::with_capacity(n);
    let mut q1 = Vec::with_capacity(n);
    for i in 0..n {
        let s: f64 = q_dir[i].iter().zip(eps).map(|(a, b)| a * b).sum();
        q0.push(fluctuate_value(state.qbar0[i], q_scale[0] * arm_covariate(0, g1[i]) * s, family));
        q1.push(fluctuate_value(state.qbar1[i], q_scale[1] * arm_covariate(1, g1[i]) * s, family));
    }
    (q0, q1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TmleOptions {
    /// Stop when `|eps|_inf` falls below this; defaults to `1e-4 / sqrt(n)`.
    pub stop_tol: Option<f64>,
    pub max_iter: usize,
    /// Also require `|mean D|_inf` below this before stopping.
    pub eif_tol: f64,
    /// Return the last iterate instead of an error when not converged.
    pub allow_unconverged: bool,
}

impl Default for TmleOptions {
    fn default() -> Self {
        Self {
            stop_tol: None,
            max_iter: 50,
            eif_tol: 1e-6,
            allow_unconverged: false,
        }
    }
}

impl TmleOptions {
    pub fn stop_tol_for(&self, n: usize) -> f64 {
        self.stop_tol.unwrap_or(1e-4 / (n as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct TargetedFit {
    pub beta_star: DVector<f64>,
    pub eif: EifRows,
    /// Covariance of the EIF rows; `cov / n` estimates the variance of `beta_star`.
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub eif_mean_norm: f64,
    pub converged: bool,
    pub state: FluctuationState,
    /// Loss derivatives at the final state.
    pub rows: Vec<LossDerivatives>,
    /// Per-row conditional influence values at the final state.
    pub delta: Vec<f64>,
}

impl TargetedFit {
    pub fn n(&self) -> usize {
        self.state.n()
    }

    /// Standard errors `sqrt(cov_jj / n)`.
    pub fn std_errors(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.cov.diagonal().iter().map(|v| (v.max(0.0) / n).sqrt()).collect()
    }
}

fn check_inputs(data: &Dataset, nuisance: &NuisanceFit, state: &FluctuationState) -> Result<()> {
    let n = data.n();
    if nuisance.n() != n || state.n() != n {
        return Err(Error::InvalidInput("nuisance fit and dataset differ in length".into()));
    }
    nuisance.validate(data.family)
}

/// Runs the targeting loop from the untargeted state.
pub fn target<M: WorkingModel, L: Loss>(
    data: &Dataset,
    spec: &MsmSpec<M, L>,
    nuisance: &NuisanceFit,
    opts: &TmleOptions,
) -> Result<TargetedFit> {
    target_from(data, spec, nuisance, FluctuationState::initial(nuisance, spec.dim()), opts)
}

/// Runs the targeting loop from `state`.
///
/// Each iteration recomputes `Psi` and `beta = B(P)` at the current state,
/// then fits and applies one fluctuation. The loop stops once the last
/// `|eps|_inf` is below the stop tolerance and the EIF mean is below
/// `eif_tol`, both checked at the state the EIF is assembled on.
pub fn target_from<M: WorkingModel, L: Loss>(
    data: &Dataset,
    spec: &MsmSpec<M, L>,
    nuisance: &NuisanceFit,
    mut state: FluctuationState,
    opts: &TmleOptions,
) -> Result<TargetedFit> {
    check_inputs(data, nuisance, &state)?;
    let n = data.n();
    let v: Modifiers = data.modifiers();
    let stop_tol = opts.stop_tol_for(n);
    let mut last_eps = f64::INFINITY;
    let mut iterations = 0;

    loop {
        let psi = state.psi();
        let beta_fit = solve_beta(&psi, &state.w, &v, spec)?;
        state.beta = beta_fit.beta;
        let rows = row_derivatives(&psi, state.beta.as_slice(), &v, spec)?;
        let delta = (0..n)
            .map(|i| delta_star(data.a[i], data.y[i], state.qbar(data.a[i])[i], nuisance.g1[i]))
            .collect::<Result<Vec<_>>>()?;
        let eif = EifRows::from_derivatives(&rows, &state.w, &delta)?;
        let eif_mean_norm = eif.mean().amax();
        let converged = last_eps < stop_tol && eif_mean_norm <= opts.eif_tol;
        if converged || iterations >= opts.max_iter {
            if !converged && !opts.allow_unconverged {
                return Err(Error::TargetingNotConverged { iterations, eif_mean_norm });
            }
            let cov = eif_covariance(&eif);
            return Ok(TargetedFit {
                beta_star: state.beta.clone(),
                eif,
                cov,
                iterations,
                eif_mean_norm,
                converged,
                state,
                rows,
                delta,
            });
        }

        let eps = eps_step(data, &state, nuisance, &rows)?;
        let q_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.grad_t_ldot.clone()).collect();
        let tilt_dir: Vec<DVector<f64>> = rows.iter().map(|r| r.ldot.clone()).collect();
        let (q0, q1) = fluctuate_qbar(&state, eps.as_slice(), &q_dir, &nuisance.g1, [1.0; 2], data.family);
        state.qbar0 = q0;
        state.qbar1 = q1;
        if data.family == Family::Binary {
            clamp_probabilities(&mut state.qbar0);
            clamp_probabilities(&mut state.qbar1);
        }
        state.tilt_logw = tilt_log_weights(&state.tilt_logw, eps.as_slice(), &tilt_dir);
        state.w = state.tilt_logw.iter().map(|l| l.exp()).collect();
        last_eps = eps.amax();
        state.eps_history.push(eps);
        iterations += 1;
    }
}

fn clamp_probabilities(q: &mut [f64]) {
    const LIM: f64 = 1e-12;
    q.iter_mut().for_each(|v| *v = v.clamp(LIM, 1.0 - LIM));
}

/// Wald intervals `beta_j +/- z sqrt(cov_jj / n)`.
pub fn wald_ci(fit: &TargetedFit, level: f64) -> Vec<(f64, f64)> {
    wald_intervals(fit.beta_star.as_slice(), &fit.cov, fit.n(), level)
}

pub fn wald_intervals(beta: &[f64], cov: &DMatrix<f64>, n: usize, level: f64) -> Vec<(f64, f64)> {
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    beta.iter()
        .enumerate()
        .map(|(j, &b)| {
            let half = z * (cov[(j, j)].max(0.0) / n as f64).sqrt();
            (b - half, b + half)
        })
        .collect()
}
