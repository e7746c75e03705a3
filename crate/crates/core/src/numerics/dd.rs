//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s
//! carrying roughly 106 bits of significand.
//!
//! Used as a high-precision scalar for the finite-difference oracle, where
//! plain `f64` roundoff (about `eps * |f| / h`) would swamp small partials.
//! `+ - * /`, `sqrt`, `exp`, `ln` and `erf` are accurate to double-double
//! precision. The remaining transcendental functions fall back to `f64`.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Default)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Dekker split of `a` into two 26-bit halves.
#[inline]
fn split(a: f64) -> (f64, f64) {
    const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl DoubleDouble {
    pub const fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::renorm(p, e + self.lo * b)
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    const LN2: Self = Self {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };
    const FRAC_2_SQRT_PI: Self = Self {
        hi: std::f64::consts::FRAC_2_SQRT_PI,
        lo: 1.533_545_961_316_588_1e-17,
    };
    const EPS: f64 = 4.93038065763132e-32; // 2^-104

    fn exp_dd(self) -> Self {
        if self.hi > 709.8 {
            return Self::from_f64(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Self::zero();
        }
        if self.hi == 0.0 && self.lo == 0.0 {
            return Self::one();
        }
        // x = k ln2 + r, then exp(r) = exp(r / 2^9)^(2^9).
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Self::LN2.mul_f64(k)).ldexp(-9);
        // Work with s = exp(r) - 1 so the squarings, (1 + s)^2 = 1 + (2s + s^2),
        // never round away the small part.
        let mut term = r;
        let mut s = r;
        for n in 2..30 {
            term = term * r / Self::from_f64(n as f64);
            s += term;
            if term.hi.abs() < Self::EPS * 1e-3 * s.hi.abs() {
                break;
            }
        }
        for _ in 0..9 {
            s = s.mul_f64(2.0) + s * s;
        }
        (Self::one() + s).ldexp(k as i32)
    }

    fn ln_dd(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 {
                Self::from_f64(f64::NEG_INFINITY)
            } else {
                Self::from_f64(f64::NAN)
            };
        }
        if !self.hi.is_finite() {
            return self;
        }
        // Newton on exp(y) = x; two steps double the f64 seed's precision.
        let mut y = Self::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp_dd() - Self::one();
        }
        y
    }

    fn sqrt_dd(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 {
                Self::zero()
            } else {
                Self::from_f64(f64::NAN)
            };
        }
        if !self.hi.is_finite() {
            return self;
        }
        let g = self.hi.sqrt();
        let (p, e) = two_prod(g, g);
        let resid = (Self::from_f64(self.hi) - Self::from_f64(p)) + Self::from_f64(self.lo - e);
        Self::from_f64(g) + resid / Self::from_f64(2.0 * g)
    }

    fn erf_dd(self) -> Self {
        let x = self.abs();
        let value = if x.hi < 3.0 {
            // Maclaurin series: 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1)).
            let x2 = x * x;
            let mut power = x;
            let mut sum = x;
            let mut n = 1.0;
            loop {
                power = -(power * x2) / Self::from_f64(n);
                let term = power / Self::from_f64(2.0 * n + 1.0);
                sum += term;
                if term.hi.abs() < Self::EPS * 1e-2 * sum.hi.abs() {
                    break;
                }
                n += 1.0;
            }
            Self::FRAC_2_SQRT_PI * sum
        } else if x.hi < 27.0 {
            Self::one() - erfc_continued_fraction(x)
        } else {
            Self::one()
        };
        if self.hi < 0.0 {
            -value
        } else {
            value
        }
    }
}

/// `erfc(x)` for `x >= 3` by the Lentz-evaluated continued fraction
/// `exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`.
fn erfc_continued_fraction(x: DoubleDouble) -> DoubleDouble {
    let tiny = DoubleDouble::from_f64(1e-300);
    let mut f = x;
    let mut c = x;
    let mut d = DoubleDouble::zero();
    for n in 1..2000 {
        let a = DoubleDouble::from_f64(n as f64 / 2.0);
        d = x + a * d;
        if d.hi == 0.0 {
            d = tiny;
        }
        c = x + a / c;
        if c.hi == 0.0 {
            c = tiny;
        }
        d = DoubleDouble::one() / d;
        let delta = c * d;
        f *= delta;
        if (delta - DoubleDouble::one()).hi.abs() < DoubleDouble::EPS {
            break;
        }
    }
    let inv_sqrt_pi = DoubleDouble::FRAC_2_SQRT_PI.mul_f64(0.5);
    (-(x * x)).exp_dd() * inv_sqrt_pi / f
}

impl fmt::Debug for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DoubleDouble({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl PartialEq for DoubleDouble {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Self::from_f64(s);
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::renorm(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Self::from_f64(p);
        }
        Self::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi == 0.0 {
            return Self::from_f64(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::from_f64(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - b * (self / b).trunc()
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for DoubleDouble {
            fn $m(&mut self, b: Self) {
                *self = *self $op b;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::renorm(hi, (n - hi as i64) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Self::from_f64(x))
    }
}

impl NumCast for DoubleDouble {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
}

/// Applies an `f64` function to the leading component.
fn via_f64(x: DoubleDouble, f: impl Fn(f64) -> f64) -> DoubleDouble {
    DoubleDouble::from_f64(f(x.hi + x.lo))
}

impl Float for DoubleDouble {
    fn nan() -> Self {
        Self::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        Self::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::from_f64(-0.0)
    }
    fn min_value() -> Self {
        Self::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::from_f64(f64::MAX)
    }
    fn epsilon() -> Self {
        Self::from_f64(Self::EPS)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Self::renorm(hi, self.lo.floor())
        } else {
            Self::from_f64(hi)
        }
    }
    fn ceil(self) -> Self {
        let hi = self.hi.ceil();
        if hi == self.hi {
            Self::renorm(hi, self.lo.ceil())
        } else {
            Self::from_f64(hi)
        }
    }
    fn round(self) -> Self {
        (self + Self::from_f64(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln_dd()).exp_dd()
    }
    fn sqrt(self) -> Self {
        self.sqrt_dd()
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn exp2(self) -> Self {
        (self * Self::LN2).exp_dd()
    }
    fn ln(self) -> Self {
        self.ln_dd()
    }
    fn log(self, base: Self) -> Self {
        self.ln_dd() / base.ln_dd()
    }
    fn log2(self) -> Self {
        self.ln_dd() / Self::LN2
    }
    fn log10(self) -> Self {
        self.ln_dd() / Self::from_f64(10.0).ln_dd()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        via_f64(self, f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt_dd()
    }
    fn sin(self) -> Self {
        via_f64(self, f64::sin)
    }
    fn cos(self) -> Self {
        via_f64(self, f64::cos)
    }
    fn tan(self) -> Self {
        via_f64(self, f64::tan)
    }
    fn asin(self) -> Self {
        via_f64(self, f64::asin)
    }
    fn acos(self) -> Self {
        via_f64(self, f64::acos)
    }
    fn atan(self) -> Self {
        via_f64(self, f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Self::from_f64((self.hi + self.lo).atan2(other.hi + other.lo))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp_dd() - Self::one()
    }
    fn ln_1p(self) -> Self {
        (Self::one() + self).ln_dd()
    }
    fn sinh(self) -> Self {
        (self.exp_dd() - (-self).exp_dd()).mul_f64(0.5)
    }
    fn cosh(self) -> Self {
        (self.exp_dd() + (-self).exp_dd()).mul_f64(0.5)
    }
    fn tanh(self) -> Self {
        let e = self.mul_f64(2.0).exp_dd();
        (e - Self::one()) / (e + Self::one())
    }
    fn asinh(self) -> Self {
        via_f64(self, f64::asinh)
    }
    fn acosh(self) -> Self {
        via_f64(self, f64::acosh)
    }
    fn atanh(self) -> Self {
        via_f64(self, f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for DoubleDouble {
    fn erf(self) -> Self {
        self.erf_dd()
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Self::zero();
                for p in 0..k as isize {
                    acc += *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta.is_zero() { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D = DoubleDouble;

    fn close(a: D, hi: f64, lo: f64, tol: f64) -> bool {
        ((a - D { hi, lo }).hi).abs() <= tol * hi.abs().max(1e-300)
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let third = D::one() / D::from_f64(3.0);
        let back = third * D::from_f64(3.0);
        assert!((back - D::one()).hi.abs() < 1e-31);
        let tiny = D::from_f64(1.0) + D::from_f64(1e-20);
        assert_eq!(tiny.hi, 1.0);
        assert!((tiny.lo - 1e-20).abs() < 1e-36);
        assert!(((tiny - D::one()).hi - 1e-20).abs() < 1e-36);
    }

    // Reference values are 50-digit mpmath results split into hi + lo.
    #[test]
    fn transcendental_functions() {
        // e
        assert!(close(D::one().exp(), 2.718281828459045, 1.4456468917292502e-16, 1e-30));
        // ln 10
        assert!(close(D::from_f64(10.0).ln(), 2.302585092994046, -2.1707562233822494e-16, 1e-30));
        // sqrt 2
        assert!(close(D::from_f64(2.0).sqrt(), 1.4142135623730951, -9.667293313452913e-17, 1e-30));
        // erf(0.3 as f64), erf(1), erf(-1), erf(3.5), erf(5)
        assert!(close(D::from_f64(0.3).erf(), 0.3286267594591274, 2.2908254446982777e-17, 1e-29));
        assert!(close(D::one().erf(), 0.8427007929497149, -2.4801011789118602e-17, 1e-29));
        assert!(close(D::from_f64(-1.0).erf(), -0.8427007929497149, 2.4801011789118602e-17, 1e-29));
        assert!(close(D::from_f64(3.5).erf(), 0.9999992569016276, 4.9647279187212204e-17, 1e-29));
        assert!(close(D::from_f64(5.0).erf(), 0.9999999999984626, -2.294992711807301e-17, 1e-29));
        // exp(-20)
        assert!(close(D::from_f64(-20.0).exp(), 2.061153622438558e-09, -4.19755767595054e-26, 1e-29));
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<D> = (0..6).map(|i| D::from_f64(i as f64 + 0.5)).collect();
        let b: Vec<D> = (0..6).map(|i| D::from_f64(1.0 - i as f64)).collect();
        let mut c = vec![D::zero(); 4];
        unsafe { D::gemm(2, 3, 2, D::one(), a.as_ptr(), 3, 1, b.as_ptr(), 2, 1, D::zero(), c.as_mut_ptr(), 2, 1) };
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| (i * 3 + p) as f64 + 0.5).zip((0..3).map(|p| 1.0 - (p * 2 + j) as f64)).map(|(x, y)| x * y).sum();
                assert_eq!(c[i * 2 + j].hi, want);
            }
        }
    }
}
