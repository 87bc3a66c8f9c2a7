//! Working models, losses, the projection `B(P)` and the efficient
//! influence function of the projected parameter.
//!
//! Everything here is driven by the user's working model and loss through
//! [`crate::autodiff`]; no derivative is written by hand.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Scalar, ScalarFn};
use crate::error::{Error, Result};

/// Outcome family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Binary,
    Continuous,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Family::Binary),
            "continuous" => Ok(Family::Continuous),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

/// Observation table `(X, A, Y)` with designated effect-modifier columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Covariates, `n x d`.
    pub x: DMatrix<f64>,
    /// Binary treatment.
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    /// Columns of `x` used as effect modifiers `V`; empty means the ATE.
    pub v_cols: Vec<usize>,
    pub family: Family,
    /// Covariate names, one per column of `x`.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, a: Vec<u8>, y: Vec<f64>, v_cols: Vec<usize>, family: Family) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("X{j}")).collect();
        Self::with_names(x, a, y, v_cols, family, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        a: Vec<u8>,
        y: Vec<f64>,
        v_cols: Vec<usize>,
        family: Family,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if a.len() != n || y.len() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: {} covariate rows, {} treatments, {} outcomes",
                n,
                a.len(),
                y.len()
            )));
        }
        if names.len() != x.ncols() {
            return Err(Error::InvalidInput("one name per covariate column required".into()));
        }
        if let Some(&c) = v_cols.iter().find(|&&c| c >= x.ncols()) {
            return Err(Error::InvalidInput(format!("effect modifier column {c} out of range")));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::InvalidInput(format!("treatment at row {i} is not 0/1")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in covariates or outcome".into()));
        }
        if family == Family::Binary {
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidInput(format!(
                    "binary outcome at row {i} is {}, expected 0 or 1",
                    y[i]
                )));
            }
        }
        Ok(Self {
            x,
            a,
            y,
            v_cols,
            family,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Row-major copy of the effect-modifier columns.
    pub fn modifiers(&self) -> Modifiers {
        let q = self.v_cols.len();
        let mut data = Vec::with_capacity(self.n() * q);
        for i in 0..self.n() {
            data.extend(self.v_cols.iter().map(|&c| self.x[(i, c)]));
        }
        Modifiers { n: self.n(), q, data }
    }
}

/// Effect-modifier values stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Modifiers {
    n: usize,
    q: usize,
    data: Vec<f64>,
}

impl Modifiers {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let q = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == q), "ragged modifier rows");
        Self {
            n: rows.len(),
            q,
            data: rows.concat(),
        }
    }

    /// `n` rows without modifiers, for intercept-only models.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            q: 0,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn width(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }
}

/// A parametric working model `m_beta(v)`.
pub trait WorkingModel: Send + Sync {
    /// Parameter dimension `p`.
    fn dim(&self) -> usize;

    fn eval<S: Scalar>(&self, beta: &[S], v: &[f64]) -> S;

    /// Basis `x(v)` when the model is linear, `m_beta(v) = beta' x(v)`.
    fn linear_basis(&self, _v: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// A loss `L(t, m)` comparing the target value `t` with the model value `m`.
pub trait Loss: Send + Sync {
    fn eval<S: Scalar>(&self, t: S, m: S) -> S;
}

/// Linear model with intercept, `beta' (1, v)`. With zero modifiers this is
/// the intercept-only model of the average treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearModel {
    pub modifiers: usize,
}

impl WorkingModel for LinearModel {
    fn dim(&self) -> usize {
        self.modifiers + 1
    }

    #[inline]
    fn eval<S: Scalar>(&self, beta: &[S], v: &[f64]) -> S {
        let mut m = beta[0];
        for (b, &vk) in beta[1..].iter().zip(v) {
            m += *b * vk;
        }
        m
    }

    fn linear_basis(&self, v: &[f64]) -> Option<Vec<f64>> {
        let mut x = Vec::with_capacity(v.len() + 1);
        x.push(1.0);
        x.extend_from_slice(v);
        Some(x)
    }
}

/// `(t - m)^2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SquaredError;

impl Loss for SquaredError {
    #[inline]
    fn eval<S: Scalar>(&self, t: S, m: S) -> S {
        let r = t - m;
        r * r
    }
}

/// Smooth Huber-type loss `delta^2 (sqrt(1 + ((t - m) / delta)^2) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoHuber {
    pub delta: f64,
}

impl Loss for PseudoHuber {
    fn eval<S: Scalar>(&self, t: S, m: S) -> S {
        let r = (t - m) / self.delta;
        ((r * r + 1.0).sqrt() - 1.0) * (self.delta * self.delta)
    }
}

/// A loss times a positive constant. Used to check that constants cancel in
/// the influence function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled<L> {
    pub loss: L,
    pub factor: f64,
}

impl<L: Loss> Loss for Scaled<L> {
    fn eval<S: Scalar>(&self, t: S, m: S) -> S {
        self.loss.eval(t, m) * self.factor
    }
}

/// Working model paired with its loss.
#[derive(Debug, Clone, Copy)]
pub struct MsmSpec<M, L> {
    pub model: M,
    pub loss: L,
}

impl<M: WorkingModel, L: Loss> MsmSpec<M, L> {
    pub fn new(model: M, loss: L) -> Self {
        Self { model, loss }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Sampled check of `L(t, t) <= L(t, m)`; returns the first violating
    /// `(t, m)` pair.
    pub fn check_loss(&self, t_values: &[f64], m_values: &[f64]) -> Option<(f64, f64)> {
        for &t in t_values {
            let at_t = self.loss.eval(t, t);
            for &m in m_values {
                if self.loss.eval(t, m) < at_t {
                    return Some((t, m));
                }
            }
        }
        None
    }
}

impl MsmSpec<LinearModel, SquaredError> {
    /// Linear model in `q` modifiers with squared-error loss.
    pub fn linear(q: usize) -> Self {
        Self::new(LinearModel { modifiers: q }, SquaredError)
    }
}

/// Weighted empirical risk `sum_i w_i L(psi_i, m_beta(v_i))` as a function
/// of `beta`.
pub(crate) struct WeightedRisk<'a, M, L> {
    pub psi: &'a [f64],
    pub w: &'a [f64],
    pub v: &'a Modifiers,
    pub spec: &'a MsmSpec<M, L>,
}

impl<M: WorkingModel, L: Loss> ScalarFn for WeightedRisk<'_, M, L> {
    fn eval<S: Scalar>(&self, beta: &[S]) -> S {
        let mut total = S::zero();
        for (i, (&psi, &w)) in self.psi.iter().zip(self.w).enumerate() {
            if w == 0.0 {
                continue;
            }
            let m = self.spec.model.eval(beta, self.v.row(i));
            total += self.spec.loss.eval(S::cst(psi), m) * w;
        }
        total
    }
}

/// Result of the projection `B(P)`.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: DVector<f64>,
    /// Hessian of the weighted risk at `beta`.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

const NEWTON_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;

/// Weighted least squares of `psi` on the model basis, if the model is linear.
fn wls_start<M: WorkingModel>(model: &M, psi: &[f64], w: &[f64], v: &Modifiers) -> Option<DVector<f64>> {
    let p = model.dim();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..psi.len() {
        let x = model.linear_basis(v.row(i))?;
        if x.len() != p {
            return None;
        }
        for r in 0..p {
            xty[r] += w[i] * x[r] * psi[i];
            for c in 0..p {
                xtx[(r, c)] += w[i] * x[r] * x[c];
            }
        }
    }
    xtx.cholesky().map(|ch| ch.solve(&xty))
}

/// Solves `B(P) = argmin_beta sum_i w_i L(psi_i, m_beta(v_i))` by damped
/// Newton iterations on the autodiff Hessian.
///
/// Starts from weighted least squares when the model exposes a linear basis,
/// otherwise from zero. Converges when the gradient sup-norm drops below
/// `1e-10 * max(1, |beta|)`.
pub fn solve_beta<M: WorkingModel, L: Loss>(
    psi: &[f64],
    w: &[f64],
    v: &Modifiers,
    spec: &MsmSpec<M, L>,
) -> Result<BetaFit> {
    let p = spec.dim();
    if psi.len() != w.len() || psi.len() != v.len() {
        return Err(Error::InvalidInput("psi, weights and modifiers differ in length".into()));
    }
    if v.width() + 1 != p && spec.model.linear_basis(&vec![0.0; v.width()]).is_some() {
        return Err(Error::InvalidInput(format!(
            "model dimension {p} does not match {} modifiers",
            v.width()
        )));
    }
    let total: f64 = w.iter().sum();
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("weights must be non-negative and sum to 1 (sum {total})")));
    }
    let risk = WeightedRisk { psi, w, v, spec };
    let mut beta = wls_start(&spec.model, psi, w, v).unwrap_or_else(|| DVector::zeros(p));
    let mut grad_norm = f64::INFINITY;

    for it in 0..=NEWTON_MAX_ITER {
        let second = autodiff::hessian(&risk, beta.as_slice())?;
        grad_norm = second.gradient.amax();
        if grad_norm < 1e-10 * beta.norm().max(1.0) {
            let sv = second.hessian.singular_values();
            if !(sv.min() > 1e-12 * sv.max()) {
                return Err(Error::RankDeficient("risk Hessian is singular at the beta solution".into()));
            }
            return Ok(BetaFit {
                beta,
                hessian: second.hessian,
                iterations: it,
                grad_norm,
            });
        }
        if it == NEWTON_MAX_ITER {
            break;
        }
        let step = newton_direction(&second.hessian, &second.gradient)
            .ok_or_else(|| Error::RankDeficient("risk Hessian is singular in the beta solve".into()))?;
        let f0 = second.value;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * t;
            let f = autodiff::value(&risk, cand.as_slice());
            if let Ok(f) = f {
                if f <= f0 + 1e-14 * (1.0 + f0.abs()) {
                    accepted = Some(cand);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(b) => beta = b,
            None => break,
        }
    }
    Err(Error::NonConvergence {
        what: "beta solver",
        iterations: NEWTON_MAX_ITER,
        grad_norm,
        last: beta.iter().copied().collect(),
    })
}

/// Newton step `-H^{-1} g`; Cholesky first, LU when `H` is indefinite.
pub(crate) fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        let d = ch.solve(g);
        if d.iter().all(|v| v.is_finite()) {
            return Some(-d);
        }
    }
    let d = h.clone().lu().solve(g)?;
    d.iter().all(|v| v.is_finite()).then(|| -d)
}

/// Per-row derivatives of `(t, beta) -> L(t, m_beta(v))`.
#[derive(Debug, Clone)]
pub struct LossDerivatives {
    /// `dL / dbeta`.
    pub ldot: DVector<f64>,
    /// `d2L / dbeta2`.
    pub lddot: DMatrix<f64>,
    /// `d/dt dL/dbeta`.
    pub grad_t_ldot: DVector<f64>,
}

struct RowLoss<'a, M, L> {
    v: &'a [f64],
    spec: &'a MsmSpec<M, L>,
}

impl<M: WorkingModel, L: Loss> ScalarFn for RowLoss<'_, M, L> {
    fn eval<S: Scalar>(&self, z: &[S]) -> S {
        let m = self.spec.model.eval(&z[1..], self.v);
        self.spec.loss.eval(z[0], m)
    }
}

pub fn loss_derivatives<M: WorkingModel, L: Loss>(
    t: f64,
    beta: &[f64],
    v: &[f64],
    spec: &MsmSpec<M, L>,
) -> Result<LossDerivatives> {
    let p = beta.len();
    let mut z = Vec::with_capacity(p + 1);
    z.push(t);
    z.extend_from_slice(beta);
    let second = autodiff::hessian(&RowLoss { v, spec }, &z)?;
    Ok(LossDerivatives {
        ldot: second.gradient.rows(1, p).into_owned(),
        lddot: second.hessian.view((1, 1), (p, p)).into_owned(),
        grad_t_ldot: second.hessian.view((1, 0), (p, 1)).column(0).into_owned(),
    })
}

/// Loss derivatives at every row for a common `beta`.
pub fn row_derivatives<M: WorkingModel, L: Loss>(
    psi: &[f64],
    beta: &[f64],
    v: &Modifiers,
    spec: &MsmSpec<M, L>,
) -> Result<Vec<LossDerivatives>> {
    psi.iter()
        .enumerate()
        .map(|(i, &t)| loss_derivatives(t, beta, v.row(i), spec))
        .collect()
}

/// `M = -sum_i w_i Lddot_i` with its inverse and condition number.
#[derive(Debug, Clone)]
pub struct NormalizingMatrix {
    pub m: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub condition: f64,
}

pub const MAX_CONDITION: f64 = 1e12;

impl NormalizingMatrix {
    pub fn from_rows(rows: &[LossDerivatives], w: &[f64]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.ldot.len());
        let mut m = DMatrix::<f64>::zeros(p, p);
        for (r, &wi) in rows.iter().zip(w) {
            m -= &r.lddot * wi;
        }
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let m = (&m + m.transpose()) * 0.5;
        let sv = m.singular_values();
        let (max, min) = (sv.max(), sv.min());
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularNormalizingMatrix { condition });
        }
        let inverse = m
            .clone()
            .try_inverse()
            .ok_or(Error::SingularNormalizingMatrix { condition })?;
        Ok(Self { m, inverse, condition })
    }
}

pub fn normalizing_matrix<M: WorkingModel, L: Loss>(
    psi: &[f64],
    w: &[f64],
    beta: &[f64],
    v: &Modifiers,
    spec: &MsmSpec<M, L>,
) -> Result<NormalizingMatrix> {
    NormalizingMatrix::from_rows(&row_derivatives(psi, beta, v, spec)?, w)
}

/// Conditional influence function of the conditional treatment effect,
/// `(1{a=1}/g1 - 1{a=0}/(1-g1)) (y - qbar_a)`.
pub fn delta_star(a: u8, y: f64, qbar_a: f64, g1: f64) -> Result<f64> {
    if !(g1 > 0.0 && g1 < 1.0) {
        return Err(Error::Positivity { g1 });
    }
    let weight = if a == 1 { 1.0 / g1 } else { -1.0 / (1.0 - g1) };
    Ok(weight * (y - qbar_a))
}

/// Per-observation efficient influence function values.
#[derive(Debug, Clone)]
pub struct EifRows {
    /// `n x p`, row `i` is `M^{-1} (D1_i + D2_i)`.
    pub d: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub m: NormalizingMatrix,
}

impl EifRows {
    pub fn from_derivatives(rows: &[LossDerivatives], w: &[f64], delta: &[f64]) -> Result<Self> {
        let m = NormalizingMatrix::from_rows(rows, w)?;
        let n = rows.len();
        let p = m.m.nrows();
        let mut d1 = DMatrix::zeros(n, p);
        let mut d2 = DMatrix::zeros(n, p);
        for (i, r) in rows.iter().enumerate() {
            d1.row_mut(i).copy_from(&(&r.grad_t_ldot * delta[i]).transpose());
            d2.row_mut(i).copy_from(&r.ldot.transpose());
        }
        let d = (&d1 + &d2) * m.inverse.transpose();
        Ok(Self { d, d1, d2, m })
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    /// Column means of `D`.
    pub fn mean(&self) -> DVector<f64> {
        self.d.row_mean().transpose()
    }
}

/// Assembles `D_i = M^{-1} (grad_t Ldot_i * delta_i + Ldot_i)`.
pub fn assemble_eif<M: WorkingModel, L: Loss>(
    psi: &[f64],
    w: &[f64],
    beta: &[f64],
    v: &Modifiers,
    spec: &MsmSpec<M, L>,
    delta: &[f64],
) -> Result<EifRows> {
    if delta.len() != psi.len() {
        return Err(Error::InvalidInput("delta and psi differ in length".into()));
    }
    EifRows::from_derivatives(&row_derivatives(psi, beta, v, spec)?, w, delta)
}

/// Sample covariance of the rows of `D` (divisor `n`).
pub fn eif_covariance(eif: &EifRows) -> DMatrix<f64> {
    let n = eif.n() as f64;
    let mean = eif.d.row_mean();
    let mut centered = eif.d.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    centered.transpose() * &centered / n
}
