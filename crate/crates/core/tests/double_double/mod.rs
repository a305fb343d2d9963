//! Double-double scalar for evaluating the loss with ~32 significant digits.
//!
//! Arithmetic, `sqrt` and `tanh` are accurate to double-double precision; the
//! remaining transcendental functions delegate to `twofloat` and are not
//! used on the loss path.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use ndarray::{NdFloat, ScalarOperand};
use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use pn_closure::scalar::Real;
use twofloat::TwoFloat;

#[derive(Debug, Default, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd(pub TwoFloat);

impl Dd {
    fn exp_dd(self) -> Self {
        let x = self.0;
        if x.hi() > 709.0 {
            return Dd(TwoFloat::from_f64(f64::INFINITY));
        }
        if x.hi() < -745.0 {
            return Dd(TwoFloat::from_f64(0.0));
        }
        let ln2 = twofloat::consts::LN_2;
        let k = (x.hi() / ln2.hi()).round();
        let r = (x - ln2 * k) / 1024.0;
        let mut term = TwoFloat::from_f64(1.0);
        let mut sum = TwoFloat::from_f64(1.0);
        for n in 1..=24 {
            term = term * r / n as f64;
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        Dd(sum * 2f64.powi(k as i32))
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::LowerExp for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerExp::fmt(&self.0, f)
    }
}

impl fmt::UpperExp for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::UpperExp::fmt(&self.0, f)
    }
}

macro_rules! binary_ops {
    ($($tr:ident $m:ident $tra:ident $ma:ident),*) => {$(
        impl $tr for Dd {
            type Output = Dd;
            #[inline]
            fn $m(self, rhs: Dd) -> Dd {
                Dd($tr::$m(self.0, rhs.0))
            }
        }
        impl $tra for Dd {
            #[inline]
            fn $ma(&mut self, rhs: Dd) {
                *self = $tr::$m(*self, rhs);
            }
        }
    )*};
}

binary_ops!(
    Add add AddAssign add_assign,
    Sub sub SubAssign sub_assign,
    Mul mul MulAssign mul_assign,
    Div div DivAssign div_assign,
    Rem rem RemAssign rem_assign
);

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl<'a> Sum<&'a Dd> for Dd {
    fn sum<I: Iterator<Item = &'a Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + *b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd(TwoFloat::from_f64(0.0))
    }
    fn is_zero(&self) -> bool {
        self.0.hi() == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd(TwoFloat::from_f64(1.0))
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(|v| Dd(TwoFloat::from_f64(v)))
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.0.hi().to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.hi().to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0.hi() + self.0.lo())
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Dd(<TwoFloat as From<_>>::from(n)))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd(<TwoFloat as From<_>>::from(n)))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd(<TwoFloat as From<_>>::from(n)))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(|v| Dd(TwoFloat::from_f64(v)))
    }
}

impl ScalarOperand for Dd {}
impl NdFloat for Dd {}
impl Real for Dd {}

fn dd(v: f64) -> Dd {
    Dd(TwoFloat::from_f64(v))
}

macro_rules! unary {
    ($($m:ident),*) => {$(
        #[inline]
        fn $m(self) -> Self {
            Dd(self.0.$m())
        }
    )*};
}

impl Float for Dd {
    unary!(floor, ceil, round, trunc, fract, sqrt, exp2, ln, log2, log10, cbrt, sin, cos, tan, asin, acos, atan,
        exp_m1, ln_1p, sinh, cosh, asinh, acosh, atanh, recip);

    fn nan() -> Self {
        dd(f64::NAN)
    }
    fn infinity() -> Self {
        dd(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        dd(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        dd(-0.0)
    }
    fn min_value() -> Self {
        dd(f64::MIN)
    }
    fn min_positive_value() -> Self {
        dd(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        dd(f64::EPSILON * f64::EPSILON)
    }
    fn max_value() -> Self {
        dd(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.0.hi().is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.hi().is_infinite()
    }
    fn is_finite(self) -> bool {
        self.0.hi().is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.hi().is_normal()
    }
    fn classify(self) -> FpCategory {
        self.0.hi().classify()
    }
    fn abs(self) -> Self {
        Dd(self.0.abs())
    }
    fn signum(self) -> Self {
        Dd(self.0.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.0.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn powi(self, n: i32) -> Self {
        Dd(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        Dd(self.0.powf(n.0))
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn log(self, base: Self) -> Self {
        Dd(self.0.log(base.0))
    }
    fn max(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Less) => other,
            _ if other.is_nan() => self,
            _ if self.is_nan() => other,
            _ => self,
        }
    }
    fn min(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Greater) => other,
            _ if other.is_nan() => self,
            _ if self.is_nan() => other,
            _ => self,
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn atan2(self, other: Self) -> Self {
        Dd(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.0.sin_cos();
        (Dd(s), Dd(c))
    }
    fn tanh(self) -> Self {
        let e = (-(self.abs() + self.abs())).exp_dd();
        let t = (Self::one() - e) / (Self::one() + e);
        if self.is_sign_negative() {
            -t
        } else {
            t
        }
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.0.hi().integer_decode()
    }
}
