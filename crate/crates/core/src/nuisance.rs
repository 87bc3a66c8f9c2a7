//! Initial nuisance estimators: propensity score, arm-specific outcome
//! regressions and per-arm residual variances, all fitted by GLMs.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, softplus};
use crate::error::{Error, Result};
use crate::msm::{Dataset, Family};

pub const IRLS_MAX_ITER: usize = 50;
/// Tolerance on the sup-norm of the per-observation mean score.
pub const IRLS_TOL: f64 = 1e-8;
/// Coefficients beyond this magnitude on the logit scale signal separation.
pub const SEPARATION_BOUND: f64 = 30.0;
/// Default propensity truncation bound.
pub const DEFAULT_G_BOUND: f64 = 0.01;
/// Outcome predictions stay this far from 0 and 1.
pub const Q_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub coef: DVector<f64>,
    pub link: Link,
    /// Covariate columns behind the non-intercept coefficients, when the
    /// design was built by [`design_matrix`].
    pub columns: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when a logit coefficient exceeded [`SEPARATION_BOUND`] and was clamped.
    pub separated: bool,
    /// Log-likelihood after each accepted IRLS step, starting at zero
    /// coefficients; empty for least squares.
    pub loglik_trace: Vec<f64>,
}

impl GlmFit {
    /// Linear predictor for one design row.
    pub fn eta(&self, row: &[f64]) -> f64 {
        self.coef.iter().zip(row).map(|(c, x)| c * x).sum()
    }

    /// Mean prediction for every row of `design`.
    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        let eta = design * &self.coef;
        match self.link {
            Link::Logit => eta.iter().map(|&e| logistic(e)).collect(),
            Link::Identity => eta.iter().copied().collect(),
        }
    }
}

/// Design matrix `[1, X[rows, cols]]`.
pub fn design_matrix(x: &DMatrix<f64>, cols: &[usize], rows: Option<&[usize]>) -> DMatrix<f64> {
    let n = rows.map_or(x.nrows(), <[usize]>::len);
    DMatrix::from_fn(n, cols.len() + 1, |i, j| {
        let r = rows.map_or(i, |rs| rs[i]);
        if j == 0 {
            1.0
        } else {
            x[(r, cols[j - 1])]
        }
    })
}

fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    if design.nrows() < design.ncols() {
        return Err(Error::RankDeficient(format!(
            "design has {} rows for {} columns",
            design.nrows(),
            design.ncols()
        )));
    }
    let sv = design.singular_values();
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(Error::RankDeficient("design columns are collinear".into()));
    }
    Ok(())
}

fn bernoulli_loglik(design: &DMatrix<f64>, y: &[f64], offset: Option<&[f64]>, coef: &DVector<f64>) -> f64 {
    let eta = design * coef;
    eta.iter()
        .enumerate()
        .map(|(i, &e)| {
            let e = e + offset.map_or(0.0, |o| o[i]);
            // y e - log(1 + e^e)
            y[i] * e - softplus(e)
        })
        .sum()
}

/// Logistic regression by iteratively reweighted least squares with step
/// halving, so the log-likelihood never decreases.
pub fn fit_logistic(design: &DMatrix<f64>, y: &[f64], offset: Option<&[f64]>) -> Result<GlmFit> {
    let (n, k) = design.shape();
    if y.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::InvalidInput("design, outcome and offset differ in length".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("logistic outcome must be 0/1".into()));
    }
    check_rank(design)?;

    let mut coef = DVector::<f64>::zeros(k);
    let mut ll = bernoulli_loglik(design, y, offset, &coef);
    let mut loglik_trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut separated = false;

    while iterations < IRLS_MAX_ITER {
        let eta = design * &coef;
        let mut score = DVector::<f64>::zeros(k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let p = logistic(eta[i] + offset.map_or(0.0, |o| o[i]));
            let row = design.row(i);
            let r = y[i] - p;
            let w = p * (1.0 - p);
            for a in 0..k {
                score[a] += row[a] * r;
                for b in 0..=a {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        if score.amax() / (n as f64) < IRLS_TOL {
            converged = true;
            break;
        }
        if coef.amax() > SEPARATION_BOUND {
            separated = true;
            break;
        }
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                separated = true;
                break;
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &coef + &step * t;
            let cand_ll = bernoulli_loglik(design, y, offset, &cand);
            if cand_ll >= ll {
                coef = cand;
                ll = cand_ll;
                loglik_trace.push(ll);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if coef.amax() > SEPARATION_BOUND {
        separated = true;
    }
    if separated {
        warn!("logistic fit: quasi-separation, coefficients clamped to +/-{SEPARATION_BOUND}");
        coef.apply(|c| *c = c.clamp(-SEPARATION_BOUND, SEPARATION_BOUND));
        converged = false;
    }
    Ok(GlmFit {
        coef,
        link: Link::Logit,
        columns: Vec::new(),
        converged,
        iterations,
        separated,
        loglik_trace,
    })
}

/// Ordinary least squares.
pub fn fit_linear(design: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit> {
    if y.len() != design.nrows() {
        return Err(Error::InvalidInput("design and outcome differ in length".into()));
    }
    check_rank(design)?;
    let svd = design.clone().svd(true, true);
    let coef = svd
        .solve(&DVector::from_column_slice(y), 1e-12)
        .map_err(|e| Error::RankDeficient(e.into()))?;
    Ok(GlmFit {
        coef,
        link: Link::Identity,
        columns: Vec::new(),
        converged: true,
        iterations: 1,
        separated: false,
        loglik_trace: Vec::new(),
    })
}

/// Per-observation nuisance predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub qbar0: Vec<f64>,
    pub qbar1: Vec<f64>,
    /// `P(A = 1 | X)`, truncated.
    pub g1: Vec<f64>,
    /// Per-arm residual variances `(sigma2_0, sigma2_1)`, continuous family only.
    pub sigma2: Option<[f64; 2]>,
}

impl NuisanceFit {
    pub fn n(&self) -> usize {
        self.g1.len()
    }

    pub fn qbar(&self, arm: u8) -> &[f64] {
        if arm == 1 {
            &self.qbar1
        } else {
            &self.qbar0
        }
    }

    /// Checks lengths and ranges against `family`.
    pub fn validate(&self, family: Family) -> Result<()> {
        let n = self.n();
        if self.qbar0.len() != n || self.qbar1.len() != n {
            return Err(Error::InvalidInput("nuisance vectors differ in length".into()));
        }
        if let Some(&g) = self.g1.iter().find(|&&g| !(g > 0.0 && g < 1.0)) {
            return Err(Error::Positivity { g1: g });
        }
        let q = self.qbar0.iter().chain(&self.qbar1);
        match family {
            Family::Binary => {
                if q.clone().any(|&v| !(v > 0.0 && v < 1.0)) {
                    return Err(Error::InvalidInput("binary outcome predictions must lie in (0, 1)".into()));
                }
            }
            Family::Continuous => {
                if q.clone().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("non-finite outcome prediction".into()));
                }
                match self.sigma2 {
                    Some(s) if s.iter().all(|&v| v > 0.0 && v.is_finite()) => {}
                    _ => return Err(Error::InvalidInput("continuous family needs positive sigma2 per arm".into())),
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceOptions {
    /// Propensities are truncated to `[g_bound, 1 - g_bound]`.
    pub g_bound: f64,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        Self {
            g_bound: DEFAULT_G_BOUND,
        }
    }
}

/// Fits `g` on `X[g_cols]` and, within each arm, `Qbar` on `X[q_cols]`.
pub fn make_nuisance(data: &Dataset, g_cols: &[usize], q_cols: &[usize], opts: &NuisanceOptions) -> Result<NuisanceFit> {
    let d = data.x.ncols();
    if let Some(&c) = g_cols.iter().chain(q_cols).find(|&&c| c >= d) {
        return Err(Error::InvalidInput(format!("nuisance column {c} out of range")));
    }
    if !(opts.g_bound > 0.0 && opts.g_bound < 0.5) {
        return Err(Error::Config(format!("g truncation bound {} not in (0, 0.5)", opts.g_bound)));
    }

    let a: Vec<f64> = data.a.iter().map(|&v| f64::from(v)).collect();
    let g_design = design_matrix(&data.x, g_cols, None);
    let mut g_fit = fit_logistic(&g_design, &a, None)?;
    g_fit.columns = g_cols.to_vec();
    let g1 = g_fit
        .predict(&g_design)
        .into_iter()
        .map(|g| g.clamp(opts.g_bound, 1.0 - opts.g_bound))
        .collect();

    let q_design = design_matrix(&data.x, q_cols, None);
    let needed = q_design.ncols() + 1;
    let mut preds: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut sigma2 = [0.0; 2];
    for arm in 0..2u8 {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.a[i] == arm).collect();
        if rows.len() < needed {
            return Err(Error::InsufficientData {
                arm,
                count: rows.len(),
                needed,
            });
        }
        let arm_design = design_matrix(&data.x, q_cols, Some(&rows));
        let arm_y: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
        let mut fit = match data.family {
            Family::Binary => fit_logistic(&arm_design, &arm_y, None)?,
            Family::Continuous => fit_linear(&arm_design, &arm_y)?,
        };
        fit.columns = q_cols.to_vec();
        if data.family == Family::Continuous {
            let fitted = fit.predict(&arm_design);
            let rss: f64 = arm_y.iter().zip(&fitted).map(|(y, f)| (y - f).powi(2)).sum();
            sigma2[arm as usize] = rss / (rows.len() - arm_design.ncols()) as f64;
        }
        let mut p = fit.predict(&q_design);
        if data.family == Family::Binary {
            p.iter_mut().for_each(|v| *v = v.clamp(Q_CLAMP, 1.0 - Q_CLAMP));
        }
        preds[arm as usize] = p;
    }
    let [qbar0, qbar1] = preds;
    let fit = NuisanceFit {
        qbar0,
        qbar1,
        g1,
        sigma2: (data.family == Family::Continuous).then_some(sigma2),
    };
    fit.validate(data.family)?;
    Ok(fit)
}
