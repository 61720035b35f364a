//! Scalar abstraction over the two float widths the pipeline runs in:
//! `f32` for training and inference, `f64` for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn maxs(self, o: Self) -> Self;
    fn mins(self, o: Self) -> Self;
    fn is_finite(self) -> bool;

    /// In-place exp over a slice. The f32 path uses a vectorizable
    /// polynomial; the f64 path stays exact for oracle work.
    fn exp_slice(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }

    fn tanh_slice(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = x.tanh();
        }
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }

    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline(always)]
    fn maxs(self, o: Self) -> Self {
        f64::max(self, o)
    }
    #[inline(always)]
    fn mins(self, o: Self) -> Self {
        f64::min(self, o)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }

    #[inline(always)]
    fn exp(self) -> Self {
        fast_exp_f32(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        fast_tanh_f32(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f32::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f32::cos(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
    #[inline(always)]
    fn maxs(self, o: Self) -> Self {
        f32::max(self, o)
    }
    #[inline(always)]
    fn mins(self, o: Self) -> Self {
        f32::min(self, o)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn exp_slice(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = fast_exp_f32(*x);
        }
    }

    fn tanh_slice(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = fast_tanh_f32(*x);
        }
    }
}

/// Branch-free exp for f32, ~2e-7 relative error on [-87, 88].
/// Splits x = k*ln2 + r and evaluates a degree-5 polynomial on r.
#[inline(always)]
fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let kf = (x * LOG2E).round();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // exp(r) on |r| <= ln2/2, Horner degree 5
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_345_2e-3;
    let p = p * r + 4.166_657_8e-2;
    let p = p * r + 1.666_666_6e-1;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    // scale by 2^k via exponent bits
    let bits = ((kf as i32 + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

#[inline(always)]
fn fast_tanh_f32(x: f32) -> f32 {
    // tanh(x) = 1 - 2/(exp(2x)+1); saturates well before the exp clamp
    if x.abs() > 9.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let e = fast_exp_f32(2.0 * x);
    (e - 1.0) / (e + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f64;
        let mut x = -40.0f32;
        while x < 40.0 {
            let got = fast_exp_f32(x) as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.0173;
        }
        assert!(worst < 3e-6, "worst rel err {worst}");
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut x = -12.0f32;
        while x < 12.0 {
            let got = fast_tanh_f32(x) as f64;
            let want = (x as f64).tanh();
            assert!((got - want).abs() < 3e-6, "x={x} got={got} want={want}");
            x += 0.0211;
        }
    }
}
