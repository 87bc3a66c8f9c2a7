//! Forward-mode automatic differentiation over dual numbers.
//!
//! Functions to be differentiated are written once, generically over the
//! [`Scalar`] trait, and evaluated with `f64` (plain values), [`Dual`]
//! (gradients) or a dual-over-dual nesting (Hessians and cross partials).
//! The seed dimension is a const generic, so every derivative lives on the
//! stack; the public entry points dispatch a runtime dimension onto the
//! matching monomorphized kernel.

use std::fmt::{self, Debug};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};

/// Largest seed dimension supported by the dispatching entry points.
pub const MAX_DIM: usize = 10;

/// Primitive operation that produced a non-finite intermediate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Log,
    Div,
    Sqrt,
    Pow,
    Exp,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Primitive::Log => "log",
            Primitive::Div => "division",
            Primitive::Sqrt => "sqrt",
            Primitive::Pow => "pow",
            Primitive::Exp => "exp",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("non-finite intermediate produced by `{0}`")]
    Primitive(Primitive),
    #[error("function evaluated to a non-finite value or derivative")]
    NonFinite,
    #[error("seed dimension {0} is outside the supported range 1..={MAX_DIM}")]
    Dimension(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Mismatch { expected: usize, got: usize },
}

/// Numeric type a differentiable function can be evaluated with.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// A constant (zero partials).
    fn cst(c: f64) -> Self;
    /// The underlying real value.
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, k: i32) -> Self;
    fn powf(self, e: f64) -> Self;
    /// `1 / (1 + exp(-u))`, evaluated without overflow for large `|u|`.
    fn logistic(self) -> Self;
    /// `log(logistic(u))`, evaluated without underflow.
    fn ln_logistic(self) -> Self;
    /// First primitive that went non-finite during the evaluation, if any.
    fn fault(&self) -> Option<Primitive>;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn square(self) -> Self {
        self * self
    }
}

/// Numerically stable logistic function.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Scalar for f64 {
    #[inline]
    fn cst(c: f64) -> Self {
        c
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    #[inline]
    fn logistic(self) -> Self {
        logistic(self)
    }
    #[inline]
    fn ln_logistic(self) -> Self {
        -softplus(-self)
    }
    #[inline]
    fn fault(&self) -> Option<Primitive> {
        None
    }
}

/// Dual number carrying `N` first-order partials of type `T`.
///
/// `Dual<f64, N>` yields gradients; `Dual<Dual<f64, N>, N>` yields Hessians.
#[derive(Clone, Copy, Debug)]
pub struct Dual<T, const N: usize> {
    pub value: T,
    pub partials: [T; N],
    fault: Option<Primitive>,
}

/// Second-order dual: the outer level differentiates the inner one.
pub type Dual2<const N: usize> = Dual<Dual<f64, N>, N>;

impl<T: Scalar, const N: usize> Dual<T, N> {
    pub fn new(value: T, partials: [T; N]) -> Self {
        Self {
            value,
            partials,
            fault: None,
        }
    }

    /// Independent variable `i` with unit seed.
    pub fn variable(value: T, i: usize) -> Self {
        let mut partials = [T::zero(); N];
        partials[i] = T::one();
        Self::new(value, partials)
    }

    #[inline]
    fn chain(self, value: T, deriv: T, fault: Option<Primitive>) -> Self {
        let mut partials = self.partials;
        for d in partials.iter_mut() {
            *d *= deriv;
        }
        Self {
            value,
            partials,
            fault: self.fault.or(fault),
        }
    }
}

impl<T: Scalar, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut partials = self.partials;
        for (d, r) in partials.iter_mut().zip(rhs.partials.iter()) {
            *d += *r;
        }
        Self {
            value: self.value + rhs.value,
            partials,
            fault: self.fault.or(rhs.fault),
        }
    }
}

impl<T: Scalar, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut partials = self.partials;
        for (d, r) in partials.iter_mut().zip(rhs.partials.iter()) {
            *d -= *r;
        }
        Self {
            value: self.value - rhs.value,
            partials,
            fault: self.fault.or(rhs.fault),
        }
    }
}

impl<T: Scalar, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut partials = self.partials;
        for (d, r) in partials.iter_mut().zip(rhs.partials.iter()) {
            *d = *d * rhs.value + self.value * *r;
        }
        Self {
            value: self.value * rhs.value,
            partials,
            fault: self.fault.or(rhs.fault),
        }
    }
}

impl<T: Scalar, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let fault = if rhs.value.value() == 0.0 {
            Some(Primitive::Div)
        } else {
            None
        };
        // Same formula at every nesting level keeps gradients bitwise equal.
        let value = self.value / rhs.value;
        let mut partials = self.partials;
        for (d, r) in partials.iter_mut().zip(rhs.partials.iter()) {
            *d = (*d - value * *r) / rhs.value;
        }
        Self {
            value,
            partials,
            fault: self.fault.or(rhs.fault).or(fault),
        }
    }
}

impl<T: Scalar, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut partials = self.partials;
        for d in partials.iter_mut() {
            *d = -*d;
        }
        Self {
            value: -self.value,
            partials,
            fault: self.fault,
        }
    }
}

impl<T: Scalar, const N: usize> Add<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.value = self.value + rhs;
        self
    }
}

impl<T: Scalar, const N: usize> Sub<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.value = self.value - rhs;
        self
    }
}

impl<T: Scalar, const N: usize> Mul<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.value = self.value * rhs;
        for d in self.partials.iter_mut() {
            *d = *d * rhs;
        }
        self
    }
}

impl<T: Scalar, const N: usize> Div<f64> for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            let mut out = self * f64::INFINITY;
            out.fault = out.fault.or(Some(Primitive::Div));
            return out;
        }
        self * (1.0 / rhs)
    }
}

impl<T: Scalar, const N: usize> Add<Dual<T, N>> for f64 {
    type Output = Dual<T, N>;
    #[inline]
    fn add(self, rhs: Dual<T, N>) -> Dual<T, N> {
        rhs + self
    }
}

impl<T: Scalar, const N: usize> Sub<Dual<T, N>> for f64 {
    type Output = Dual<T, N>;
    #[inline]
    fn sub(self, rhs: Dual<T, N>) -> Dual<T, N> {
        -rhs + self
    }
}

impl<T: Scalar, const N: usize> Mul<Dual<T, N>> for f64 {
    type Output = Dual<T, N>;
    #[inline]
    fn mul(self, rhs: Dual<T, N>) -> Dual<T, N> {
        rhs * self
    }
}

impl<T: Scalar, const N: usize> Div<Dual<T, N>> for f64 {
    type Output = Dual<T, N>;
    #[inline]
    fn div(self, rhs: Dual<T, N>) -> Dual<T, N> {
        Dual::cst(self) / rhs
    }
}

impl<T: Scalar, const N: usize> AddAssign for Dual<T, N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Scalar, const N: usize> SubAssign for Dual<T, N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<T: Scalar, const N: usize> MulAssign for Dual<T, N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<T: Scalar, const N: usize> Scalar for Dual<T, N> {
    #[inline]
    fn cst(c: f64) -> Self {
        Self::new(T::cst(c), [T::zero(); N])
    }

    #[inline]
    fn value(&self) -> f64 {
        self.value.value()
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        let fault = (!e.value().is_finite()).then_some(Primitive::Exp);
        self.chain(e, e, fault)
    }

    fn ln(self) -> Self {
        let fault = (self.value.value() <= 0.0).then_some(Primitive::Log);
        self.chain(self.value.ln(), T::one() / self.value, fault)
    }

    fn sqrt(self) -> Self {
        let fault = (self.value.value() <= 0.0).then_some(Primitive::Sqrt);
        let s = self.value.sqrt();
        self.chain(s, T::one() / (s * 2.0), fault)
    }

    fn powi(self, k: i32) -> Self {
        match k {
            0 => Self::cst(1.0).with_fault(self.fault),
            1 => self,
            _ => {
                let lower = self.value.powi(k - 1);
                self.chain(lower * self.value, lower * k as f64, None)
            }
        }
    }

    fn powf(self, e: f64) -> Self {
        let x = self.value.value();
        let fault = ((x < 0.0 && e.fract() != 0.0) || (x == 0.0 && e < 1.0)).then_some(Primitive::Pow);
        self.chain(self.value.powf(e), self.value.powf(e - 1.0) * e, fault)
    }

    fn logistic(self) -> Self {
        let s = self.value.logistic();
        self.chain(s, s * (T::one() - s), None)
    }

    fn ln_logistic(self) -> Self {
        let d = (-self.value).logistic();
        self.chain(self.value.ln_logistic(), d, None)
    }

    fn fault(&self) -> Option<Primitive> {
        self.fault.or_else(|| self.value.fault())
    }
}

impl<T: Scalar, const N: usize> Dual<T, N> {
    fn with_fault(mut self, fault: Option<Primitive>) -> Self {
        self.fault = self.fault.or(fault);
        self
    }
}

/// A scalar function `R^p -> R` written once for every [`Scalar`].
pub trait ScalarFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

/// A vector function `R^p -> R^m`.
pub trait VectorFn {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

/// A scalar function of two blocks of arguments, `f(x, y)`, with `x` and
/// `y` of equal length.
pub trait BivariateFn {
    fn eval<S: Scalar>(&self, x: &[S], y: &[S]) -> S;
}

impl<F: ScalarFn + ?Sized> ScalarFn for &F {
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        (**self).eval(x)
    }
}

impl<F: VectorFn + ?Sized> VectorFn for &F {
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        (**self).eval(x)
    }
}

impl<F: BivariateFn + ?Sized> BivariateFn for &F {
    fn eval<S: Scalar>(&self, x: &[S], y: &[S]) -> S {
        (**self).eval(x, y)
    }
}

/// Value, gradient and Hessian of a scalar function at a point.
#[derive(Debug, Clone)]
pub struct SecondOrder {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Gradients of `f(x, y)` together with the cross block `d2f / dx dy`.
#[derive(Debug, Clone)]
pub struct CrossPartials {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_y: DVector<f64>,
    /// Row `i`, column `j`: `d2f / dx_i dy_j`.
    pub cross: DMatrix<f64>,
}

macro_rules! dispatch {
    ($p:expr, $n:ident => $body:expr) => {
        match $p {
            1 => {
                const $n: usize = 1;
                $body
            }
            2 => {
                const $n: usize = 2;
                $body
            }
            3 => {
                const $n: usize = 3;
                $body
            }
            4 => {
                const $n: usize = 4;
                $body
            }
            5 => {
                const $n: usize = 5;
                $body
            }
            6 => {
                const $n: usize = 6;
                $body
            }
            7 => {
                const $n: usize = 7;
                $body
            }
            8 => {
                const $n: usize = 8;
                $body
            }
            9 => {
                const $n: usize = 9;
                $body
            }
            10 => {
                const $n: usize = 10;
                $body
            }
            other => Err(AdError::Dimension(other)),
        }
    };
}

fn check<S: Scalar>(out: &S) -> Result<(), AdError> {
    match out.fault() {
        Some(p) => Err(AdError::Primitive(p)),
        None => Ok(()),
    }
}

fn finite(values: impl IntoIterator<Item = f64>) -> Result<(), AdError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(AdError::NonFinite)
    }
}

fn grad_n<F: ScalarFn, const N: usize>(f: &F, x: &[f64]) -> Result<(f64, DVector<f64>), AdError> {
    let seeds: Vec<Dual<f64, N>> = (0..N).map(|i| Dual::variable(x[i], i)).collect();
    let out = f.eval(&seeds);
    check(&out)?;
    finite(std::iter::once(out.value).chain(out.partials.iter().copied()))?;
    Ok((out.value, DVector::from_row_slice(&out.partials)))
}

fn seed2<const N: usize>(x: &[f64]) -> Vec<Dual2<N>> {
    (0..N)
        .map(|i| {
            let mut outer = [Dual::<f64, N>::cst(0.0); N];
            outer[i] = Dual::cst(1.0);
            Dual::new(Dual::variable(x[i], i), outer)
        })
        .collect()
}

fn hessian_n<F: ScalarFn, const N: usize>(f: &F, x: &[f64]) -> Result<SecondOrder, AdError> {
    let out = f.eval(&seed2::<N>(x));
    check(&out)?;
    let value = out.value.value;
    let gradient = DVector::from_row_slice(&out.value.partials);
    // Mixed partials agree up to rounding; average them for exact symmetry.
    let hessian = DMatrix::from_fn(N, N, |i, j| 0.5 * (out.partials[i].partials[j] + out.partials[j].partials[i]));
    finite(std::iter::once(value).chain(gradient.iter().copied()).chain(hessian.iter().copied()))?;
    Ok(SecondOrder {
        value,
        gradient,
        hessian,
    })
}

fn jacobian_n<F: VectorFn, const N: usize>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, AdError> {
    let seeds: Vec<Dual<f64, N>> = (0..N).map(|i| Dual::variable(x[i], i)).collect();
    let out = f.eval(&seeds);
    for o in &out {
        check(o)?;
    }
    let jac = DMatrix::from_fn(out.len(), N, |i, j| out[i].partials[j]);
    finite(jac.iter().copied().chain(out.iter().map(|o| o.value)))?;
    Ok(jac)
}

fn cross_n<F: BivariateFn, const N: usize>(f: &F, x: &[f64], y: &[f64]) -> Result<CrossPartials, AdError> {
    let xs: Vec<Dual2<N>> = (0..N)
        .map(|i| {
            let mut outer = [Dual::<f64, N>::cst(0.0); N];
            outer[i] = Dual::cst(1.0);
            Dual::new(Dual::cst(x[i]), outer)
        })
        .collect();
    let ys: Vec<Dual2<N>> = (0..N)
        .map(|j| Dual::new(Dual::variable(y[j], j), [Dual::cst(0.0); N]))
        .collect();
    let out = f.eval(&xs, &ys);
    check(&out)?;
    let value = out.value.value;
    let grad_x = DVector::from_fn(N, |i, _| out.partials[i].value);
    let grad_y = DVector::from_row_slice(&out.value.partials);
    let cross = DMatrix::from_fn(N, N, |i, j| out.partials[i].partials[j]);
    finite(
        std::iter::once(value)
            .chain(grad_x.iter().copied())
            .chain(grad_y.iter().copied())
            .chain(cross.iter().copied()),
    )?;
    Ok(CrossPartials {
        value,
        grad_x,
        grad_y,
        cross,
    })
}

/// Value and gradient of `f` at `x`.
pub fn grad<F: ScalarFn>(f: &F, x: &[f64]) -> Result<(f64, DVector<f64>), AdError> {
    dispatch!(x.len(), N => grad_n::<F, N>(f, x))
}

/// Value, gradient and Hessian of `f` at `x`.
///
/// The gradient is read from the inner level of the nesting, which performs
/// exactly the arithmetic of [`grad`], so both agree bit for bit.
pub fn hessian<F: ScalarFn>(f: &F, x: &[f64]) -> Result<SecondOrder, AdError> {
    dispatch!(x.len(), N => hessian_n::<F, N>(f, x))
}

/// Jacobian of `f` at `x`; row `i` is the gradient of the `i`-th output.
pub fn jacobian<F: VectorFn>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, AdError> {
    dispatch!(x.len(), N => jacobian_n::<F, N>(f, x))
}

/// First derivatives and the mixed second-derivative block of `f(x, y)`.
pub fn cross_partials<F: BivariateFn>(f: &F, x: &[f64], y: &[f64]) -> Result<CrossPartials, AdError> {
    if x.len() != y.len() {
        return Err(AdError::Mismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    dispatch!(x.len(), N => cross_n::<F, N>(f, x, y))
}

/// Plain evaluation with a finiteness check.
pub fn value<F: ScalarFn>(f: &F, x: &[f64]) -> Result<f64, AdError> {
    let v = f.eval(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AdError::NonFinite)
    }
}
