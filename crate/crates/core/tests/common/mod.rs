//! Oracles coded independently of the library paths they check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use targeted_msm::autodiff::{Scalar, ScalarFn};
use targeted_msm::msm::{Dataset, Modifiers};
use targeted_msm::nuisance::NuisanceFit;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Composite of every supported primitive with random coefficients.
#[derive(Debug, Clone)]
pub struct Composite {
    pub c: [f64; 6],
}

impl ScalarFn for Composite {
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let c = &self.c;
        let (x0, x1, x2) = (x[0], x[1], x[2]);
        x0 * x1 * c[0]
            + (x1 * c[1]).exp()
            + (x0 * x0 + 1.0).ln()
            + (x0 * c[2] - x1).logistic()
            + (x1 * x1 + 1.0).sqrt() * x2
            + x2.powi(3) / (x0 * x0 + 2.0)
            + (x2 * x2 + 1.0).powf(1.5) * c[3]
            + (x0 * c[4] + x2 * c[5]).ln_logistic()
    }
}

/// A small weighted regression problem with one modifier.
#[derive(Debug, Clone)]
pub struct Instance {
    pub psi: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl Instance {
    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let v: Vec<f64> = (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64 + rng.random_range(-0.1..0.1)).collect();
        let psi = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w = raw.iter().map(|r| r / total).collect();
        Self { psi, w, v }
    }

    pub fn modifiers(&self) -> Modifiers {
        Modifiers::from_rows(&self.v.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    pub fn risk(&self, loss: impl Fn(f64, f64) -> f64, b0: f64, b1: f64) -> f64 {
        (0..self.psi.len())
            .map(|i| self.w[i] * loss(self.psi[i], b0 + b1 * self.v[i]))
            .sum()
    }
}

/// Exhaustive grid minimum of a convex `f` on `[-4, 4]^2`: a 1e-2 grid
/// locates the basin, then a 1e-3 grid covers a window around it.
pub fn grid_argmin(f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let scan = |c0: f64, c1: f64, half: f64, step: f64| {
        let k = (half / step).round() as i64;
        let mut best = (f64::INFINITY, c0, c1);
        for i in -k..=k {
            for j in -k..=k {
                let (b0, b1) = (c0 + i as f64 * step, c1 + j as f64 * step);
                let r = f(b0, b1);
                if r < best.0 {
                    best = (r, b0, b1);
                }
            }
        }
        (best.1, best.2)
    };
    let (c0, c1) = scan(0.0, 0.0, 4.0, 1e-2);
    scan(c0, c1, 0.03, 1e-3)
}

/// Weighted least squares of `psi` on `(1, v)` by normal equations.
pub fn wls(psi: &[f64], w: &[f64], v: &[Vec<f64>]) -> DVector<f64> {
    let p = v[0].len() + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..psi.len() {
        let x = basis(&v[i]);
        xtx += &x * x.transpose() * w[i];
        xty += &x * (w[i] * psi[i]);
    }
    xtx.lu().solve(&xty).expect("nonsingular design")
}

pub fn basis(v: &[f64]) -> DVector<f64> {
    let mut x = vec![1.0];
    x.extend_from_slice(v);
    DVector::from_vec(x)
}

/// Influence function of the linear working model under squared error:
/// `D_i = E_w[x x']^{-1} x_i (delta_i + psi_i - x_i' beta)`.
pub fn hand_linear_eif(psi: &[f64], w: &[f64], beta: &[f64], v: &[Vec<f64>], delta: &[f64]) -> DMatrix<f64> {
    let p = beta.len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for i in 0..psi.len() {
        let x = basis(&v[i]);
        gram += &x * x.transpose() * w[i];
    }
    let inv = gram.try_inverse().expect("invertible gram");
    let mut d = DMatrix::zeros(psi.len(), p);
    for i in 0..psi.len() {
        let x = basis(&v[i]);
        let fitted: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        let row = &inv * &x * (delta[i] + psi[i] - fitted);
        d.row_mut(i).copy_from(&row.transpose());
    }
    d
}

fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Result of the scalar targeting oracle.
#[derive(Debug, Clone)]
pub struct AteOracle {
    pub beta: f64,
    pub eif: Vec<f64>,
    pub iterations: usize,
    /// Textbook targeted ATE: uniform weights, no tilt.
    pub textbook: f64,
}

/// Scalar ATE targeting with closed-form derivatives.
///
/// The working model is the intercept under squared error, so
/// `Ldot_i = -2 (psi_i - beta)` and `d/dt Ldot = -2`. Each iteration fits one
/// `eps` by Newton on the Bernoulli risk of the observed arm plus the log
/// normalizer of the tilt `exp(eps Ldot_i)`, then moves both regressions
/// along `-2 H_j eps` on the logit scale.
pub fn ate_oracle(data: &Dataset, nuisance: &NuisanceFit) -> AteOracle {
    let n = data.a.len();
    let nf = n as f64;
    let g = &nuisance.g1;
    let h = |arm: u8, gi: f64| if arm == 1 { 1.0 / gi } else { -1.0 / (1.0 - gi) };
    let mut q0 = nuisance.qbar0.clone();
    let mut q1 = nuisance.qbar1.clone();
    let mut w = vec![1.0 / nf; n];
    let stop = 1e-4 / nf.sqrt();
    let mut last = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let psi: Vec<f64> = (0..n).map(|i| q1[i] - q0[i]).collect();
        let beta: f64 = (0..n).map(|i| w[i] * psi[i]).sum();
        let eif: Vec<f64> = (0..n)
            .map(|i| {
                let qa = if data.a[i] == 1 { q1[i] } else { q0[i] };
                h(data.a[i], g[i]) * (data.y[i] - qa) + psi[i] - beta
            })
            .collect();
        let mean = eif.iter().sum::<f64>() / nf;
        if (last < stop && mean.abs() <= 1e-6) || iterations >= 50 {
            let textbook = psi.iter().sum::<f64>() / nf;
            return AteOracle { beta, eif, iterations, textbook };
        }
        let ldot: Vec<f64> = psi.iter().map(|p| -2.0 * (p - beta)).collect();
        let lbar = ldot.iter().sum::<f64>() / nf;
        let c: Vec<f64> = (0..n).map(|i| -2.0 * h(data.a[i], g[i])).collect();
        let base: Vec<f64> = (0..n).map(|i| logit(if data.a[i] == 1 { q1[i] } else { q0[i] })).collect();
        let mut eps = 0.0f64;
        for _ in 0..100 {
            let (mut d1, mut d2) = (0.0, 0.0);
            for i in 0..n {
                let p = expit(base[i] + c[i] * eps);
                d1 += (p - data.y[i]) * c[i] / nf;
                d2 += p * (1.0 - p) * c[i] * c[i] / nf;
            }
            let m = ldot.iter().map(|l| eps * l).fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = (0..n).map(|k| w[k] * (eps * ldot[k] - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            let e1: f64 = (0..n).map(|k| ex[k] * ldot[k]).sum::<f64>() / z;
            let e2: f64 = (0..n).map(|k| ex[k] * ldot[k] * ldot[k]).sum::<f64>() / z;
            d1 += e1 - lbar;
            d2 += e2 - e1 * e1;
            if d1.abs() < 1e-13 {
                break;
            }
            eps -= d1 / d2;
        }
        for i in 0..n {
            q0[i] = expit(logit(q0[i]) + h(0, g[i]) * -2.0 * eps).clamp(1e-12, 1.0 - 1e-12);
            q1[i] = expit(logit(q1[i]) + h(1, g[i]) * -2.0 * eps).clamp(1e-12, 1.0 - 1e-12);
        }
        let tilted: Vec<f64> = (0..n).map(|k| w[k] * (eps * ldot[k]).exp()).collect();
        let z: f64 = tilted.iter().sum();
        w = tilted.iter().map(|t| t / z).collect();
        last = eps.abs();
        iterations += 1;
    }
}
