//! Forward-mode derivative propagation with respect to `(log T1, log T2)`.
//!
//! The EPG simulators are written once, generically over a [`Real`] scalar.
//! Running them with `f64` gives the plain signal; running them with
//! [`Dual2`] carries the two log-space tangents alongside the primal value.
//! Note that `d/d(log T) = T * d/dT`, so seeding `T1` with tangent `T1`
//! yields derivatives in log space directly.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_complex::{Complex, Complex64};
use num_traits::{Num, One, Zero};

use crate::epgbloch::{self, EpgBlochConfig};
use crate::error::{Error, Result};
use crate::seqmodel::{SequenceParams, TissueParams};
use crate::epg;

/// Scalar type the simulators are generic over.
pub trait Real: Copy + Send + Sync + fmt::Debug + Num + Neg<Output = Self> + 'static {
    fn from_f64(v: f64) -> Self;
    /// Primal value.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    /// Multiplication by a constant, cheaper than a full product for duals.
    fn scale(self, c: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Complex number with constant (tangent-free) coefficients times a generic one.
#[inline]
pub(crate) fn cmul_const<T: Real>(c: Complex64, v: Complex<T>) -> Complex<T> {
    Complex::new(
        v.re.scale(c.re) - v.im.scale(c.im),
        v.im.scale(c.re) + v.re.scale(c.im),
    )
}

/// Relaxation factor `exp(-dt / T)` for a time constant carried in `T`.
#[inline]
pub(crate) fn decay<T: Real>(dt_ms: f64, time_constant_ms: T) -> T {
    (T::from_f64(-dt_ms) / time_constant_ms).exp()
}

/// Two-tangent forward-mode dual number.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual2 {
    pub value: f64,
    pub d_logt1: f64,
    pub d_logt2: f64,
}

impl Dual2 {
    pub const fn new(value: f64, d_logt1: f64, d_logt2: f64) -> Self {
        Self { value, d_logt1, d_logt2 }
    }

    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0, 0.0)
    }

    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        Self::new(f, df * self.d_logt1, df * self.d_logt2)
    }

    pub fn sin(self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }

    pub fn ln(self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }

    pub fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.value;
        self.chain(r, -r * r)
    }
}

impl Add for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.value + o.value, self.d_logt1 + o.d_logt1, self.d_logt2 + o.d_logt2)
    }
}

impl Sub for Dual2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.value - o.value, self.d_logt1 - o.d_logt1, self.d_logt2 - o.d_logt2)
    }
}

impl Mul for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.value * o.value,
            self.d_logt1 * o.value + self.value * o.d_logt1,
            self.d_logt2 * o.value + self.value * o.d_logt2,
        )
    }
}

impl Div for Dual2 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.value / o.value;
        Self::new(
            q,
            (self.d_logt1 - q * o.d_logt1) / o.value,
            (self.d_logt2 - q * o.d_logt2) / o.value,
        )
    }
}

impl Rem for Dual2 {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // a % b = a - b * trunc(a / b); trunc is piecewise constant.
        let t = (self.value / o.value).trunc();
        Self::new(
            self.value % o.value,
            self.d_logt1 - t * o.d_logt1,
            self.d_logt2 - t * o.d_logt2,
        )
    }
}

impl Neg for Dual2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.value, -self.d_logt1, -self.d_logt2)
    }
}

impl AddAssign for Dual2 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Dual2 {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Dual2 {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Zero for Dual2 {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.value == 0.0 && self.d_logt1 == 0.0 && self.d_logt2 == 0.0
    }
}

impl One for Dual2 {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl Num for Dual2 {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> std::result::Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::constant)
    }
}

impl Real for Dual2 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Self::new(self.value * c, self.d_logt1 * c, self.d_logt2 * c)
    }
}

/// A simulated signal together with its log-space tissue derivatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalWithGrad {
    pub s: Vec<Complex64>,
    pub ds_dlogt1: Vec<Complex64>,
    pub ds_dlogt2: Vec<Complex64>,
}

impl SignalWithGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            s: vec![Complex64::zero(); n],
            ds_dlogt1: vec![Complex64::zero(); n],
            ds_dlogt2: vec![Complex64::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub(crate) fn from_duals(v: &[Complex<Dual2>]) -> Self {
        Self {
            s: v.iter().map(|c| Complex64::new(c.re.value, c.im.value)).collect(),
            ds_dlogt1: v.iter().map(|c| Complex64::new(c.re.d_logt1, c.im.d_logt1)).collect(),
            ds_dlogt2: v.iter().map(|c| Complex64::new(c.re.d_logt2, c.im.d_logt2)).collect(),
        }
    }
}

/// Which configuration-state model to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpgModel {
    /// Instantaneous RF with small-tip-angle slice-profile correction.
    Conventional,
    /// Sub-stepped RF excitation lifted into configuration space.
    Bloch,
}

/// Relaxation times in milliseconds, in whatever scalar is being propagated.
#[derive(Debug, Clone, Copy)]
pub struct RelaxTimes<T> {
    pub t1_ms: T,
    pub t2_ms: T,
}

impl RelaxTimes<f64> {
    pub fn plain(tissue: &TissueParams) -> Self {
        Self { t1_ms: tissue.t1 * 1e3, t2_ms: tissue.t2 * 1e3 }
    }
}

impl RelaxTimes<Dual2> {
    /// Seeds `d/d(log T1)` and `d/d(log T2)` on their own tangents.
    pub fn seeded(tissue: &TissueParams) -> Self {
        let t1 = tissue.t1 * 1e3;
        let t2 = tissue.t2 * 1e3;
        Self { t1_ms: Dual2::new(t1, t1, 0.0), t2_ms: Dual2::new(t2, 0.0, t2) }
    }
}

fn run_model<T: Real>(
    relax: RelaxTimes<T>,
    tissue: &TissueParams,
    seq: &SequenceParams,
    cfg: &EpgBlochConfig,
    model: EpgModel,
) -> Result<Vec<Complex<T>>> {
    match model {
        EpgModel::Conventional => epg::simulate_conventional_with(relax, tissue, seq, cfg.n_k),
        EpgModel::Bloch => epgbloch::simulate_epg_bloch_with(relax, tissue, seq, cfg),
    }
}

/// Signal plus exact forward-mode derivatives in `(log T1, log T2)`.
pub fn simulate_with_grad(
    tissue: &TissueParams,
    seq: &SequenceParams,
    cfg: &EpgBlochConfig,
    model: EpgModel,
) -> Result<SignalWithGrad> {
    let out = run_model(RelaxTimes::seeded(tissue), tissue, seq, cfg, model)?;
    Ok(SignalWithGrad::from_duals(&out))
}

/// Central finite differences in log-parameter space; the independent check
/// on [`simulate_with_grad`].
pub fn finite_diff_grad(
    tissue: &TissueParams,
    seq: &SequenceParams,
    cfg: &EpgBlochConfig,
    model: EpgModel,
    rel_step: f64,
) -> Result<SignalWithGrad> {
    if !(rel_step > 0.0 && rel_step < 0.1) {
        return Err(Error::InvalidConfig(format!("rel_step {rel_step} outside (0, 0.1)")));
    }
    let eval = |t1: f64, t2: f64| -> Result<Vec<Complex64>> {
        let t = TissueParams { t1, t2, ..*tissue };
        run_model(RelaxTimes::plain(&t), &t, seq, cfg, model)
    };
    let up = rel_step.exp();
    let down = (-rel_step).exp();
    let s = eval(tissue.t1, tissue.t2)?;
    let t1p = eval(tissue.t1 * up, tissue.t2)?;
    let t1m = eval(tissue.t1 * down, tissue.t2)?;
    let t2p = eval(tissue.t1, tissue.t2 * up)?;
    let t2m = eval(tissue.t1, tissue.t2 * down)?;
    let h2 = 2.0 * rel_step;
    let diff = |p: &[Complex64], m: &[Complex64]| -> Vec<Complex64> {
        p.iter().zip(m).map(|(a, b)| (a - b) / h2).collect()
    };
    Ok(SignalWithGrad { ds_dlogt1: diff(&t1p, &t1m), ds_dlogt2: diff(&t2p, &t2m), s })
}
