//! Software IEEE 754-2008 binary16.
//!
//! Every FP16 value in the crate goes through [`Half`]. Conversion from
//! single precision is round-to-nearest-even with full subnormal support;
//! arithmetic widens both operands exactly to `f32`, operates there and
//! rounds once. Single precision carries 24 significand bits, which is at
//! least `2p + 2` for the 11-bit binary16 significand, so the double
//! rounding is innocuous and add/sub/mul are correctly rounded.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MAN_MASK: u16 = 0x03FF;

/// One binary16 bit pattern: 1 sign bit, 5 exponent bits, 10 mantissa bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Half(u16);

/// IEEE class of a binary16 pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Class {
    Zero,
    Subnormal,
    Normal,
    Infinite,
    Nan,
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Class::Zero => "zero",
            Class::Subnormal => "subnormal",
            Class::Normal => "normal",
            Class::Infinite => "infinity",
            Class::Nan => "nan",
        };
        f.write_str(name)
    }
}

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const NEG_ZERO: Half = Half(0x8000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// The canonical quiet NaN every NaN input collapses to.
    pub const NAN: Half = Half(0x7E00);
    /// Largest finite value, 65504.
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE_NORMAL: Half = Half(0x0400);
    /// Smallest positive subnormal value, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);
    /// Distance from 1.0 to the next larger value, 2^-10.
    pub const EPSILON: Half = Half(0x1400);

    /// Largest finite magnitude as `f32`.
    pub const MAX_F32: f32 = 65504.0;
    /// Smallest and largest unbiased exponent of a normal value.
    pub const MIN_NORMAL_EXP: i32 = -14;
    pub const MAX_NORMAL_EXP: i32 = 15;
    /// Binary exponent of the smallest subnormal.
    pub const MIN_SUBNORMAL_EXP: i32 = -24;

    #[inline]
    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Rounds a single-precision value to the nearest binary16 value, ties to even.
    ///
    /// Magnitudes at or above 65520 become infinity, magnitudes at or below
    /// 2^-25 become a signed zero and everything in between that falls
    /// under 2^-14 is produced as an exact subnormal.
    pub fn from_f32(x: f32) -> Half {
        let bits = x.to_bits();
        let sign = ((bits >> 16) & 0x8000) as u16;
        let exp = ((bits >> 23) & 0xFF) as i32;
        let man = bits & 0x007F_FFFF;

        if exp == 0xFF {
            return if man == 0 { Half(sign | EXP_MASK) } else { Half::NAN };
        }
        Half(sign | round_magnitude(exp - 127, (man | 0x0080_0000) as u64, 23, exp == 0))
    }

    /// Rounds a double-precision value to the nearest binary16 value, ties to even.
    pub fn from_f64(x: f64) -> Half {
        let bits = x.to_bits();
        let sign = ((bits >> 48) & 0x8000) as u16;
        let exp = ((bits >> 52) & 0x7FF) as i32;
        let man = bits & 0x000F_FFFF_FFFF_FFFF;

        if exp == 0x7FF {
            return if man == 0 { Half(sign | EXP_MASK) } else { Half::NAN };
        }
        Half(sign | round_magnitude(exp - 1023, man | (1 << 52), 52, exp == 0))
    }

    /// Exact widening to single precision. NaN widens to the canonical `f32` NaN.
    pub fn to_f32(self) -> f32 {
        let sign = ((self.0 & SIGN_MASK) as u32) << 16;
        let exp = ((self.0 & EXP_MASK) >> 10) as u32;
        let man = (self.0 & MAN_MASK) as u32;
        match exp {
            0 => {
                // man * 2^-24 is exact: man has at most 10 bits.
                let mag = man as f32 * f32::from_bits(0x3380_0000);
                f32::from_bits(sign | mag.to_bits())
            }
            0x1F if man == 0 => f32::from_bits(sign | 0x7F80_0000),
            0x1F => f32::NAN,
            _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
        }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn classify(self) -> Class {
        let exp = self.0 & EXP_MASK;
        let man = self.0 & MAN_MASK;
        match (exp, man) {
            (0, 0) => Class::Zero,
            (0, _) => Class::Subnormal,
            (EXP_MASK, 0) => Class::Infinite,
            (EXP_MASK, _) => Class::Nan,
            _ => Class::Normal,
        }
    }

    /// `floor(log2(|value|))` for finite nonzero values, subnormals included.
    pub fn exponent_of(self) -> Result<i32> {
        let man = self.0 & MAN_MASK;
        match self.classify() {
            Class::Normal => Ok(((self.0 & EXP_MASK) >> 10) as i32 - 15),
            Class::Subnormal => Ok((15 - man.leading_zeros() as i32) + Half::MIN_SUBNORMAL_EXP),
            class => Err(Error::Domain(format!("binary16 {class} has no binary exponent"))),
        }
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.classify() == Class::Nan
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    #[inline]
    pub fn abs(self) -> Half {
        Half(self.0 & !SIGN_MASK)
    }

    /// Fused multiply-add `self * b + c` with a single rounding.
    ///
    /// The product of two binary16 values is exact in `f64` and the sum is
    /// either exact or rounded far away from any binary16 rounding boundary.
    pub fn mul_add(self, b: Half, c: Half) -> Half {
        Half::from_f64(self.to_f64() * b.to_f64() + c.to_f64())
    }
}

/// Rounds `sig * 2^(exp - frac_bits)` (with `sig` holding the implicit bit)
/// to a binary16 magnitude pattern. `denormal_src` flags a source subnormal,
/// which is always far below the binary16 range.
fn round_magnitude(exp: i32, sig: u64, frac_bits: u32, denormal_src: bool) -> u16 {
    if denormal_src || exp < -25 {
        return 0;
    }
    if exp > 15 {
        return EXP_MASK;
    }
    if exp >= -14 {
        let drop = frac_bits - 10;
        let frac = sig & ((1u64 << frac_bits) - 1);
        let kept = (frac >> drop) as u16;
        let rem = frac & ((1u64 << drop) - 1);
        let half = 1u64 << (drop - 1);
        let mut h = (((exp + 15) as u16) << 10) | kept;
        if rem > half || (rem == half && h & 1 == 1) {
            // Carry may ripple into the exponent, up to infinity.
            h += 1;
        }
        return h;
    }
    // Subnormal result: count units of 2^-24.
    let shift = (frac_bits as i32 - 24 - exp) as u32;
    let q = (sig >> shift) as u16;
    let rem = sig & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

impl From<f32> for Half {
    fn from(x: f32) -> Half {
        Half::from_f32(x)
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        h.to_f32()
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {:e})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Correctly rounded binary16 sum.
#[inline]
pub fn h_add(a: Half, b: Half) -> Half {
    Half::from_f32(a.to_f32() + b.to_f32())
}

/// Correctly rounded binary16 difference.
#[inline]
pub fn h_sub(a: Half, b: Half) -> Half {
    Half::from_f32(a.to_f32() - b.to_f32())
}

/// Correctly rounded binary16 product.
#[inline]
pub fn h_mul(a: Half, b: Half) -> Half {
    Half::from_f32(a.to_f32() * b.to_f32())
}

impl Add for Half {
    type Output = Half;
    fn add(self, rhs: Half) -> Half {
        h_add(self, rhs)
    }
}

impl Sub for Half {
    type Output = Half;
    fn sub(self, rhs: Half) -> Half {
        h_sub(self, rhs)
    }
}

impl Mul for Half {
    type Output = Half;
    fn mul(self, rhs: Half) -> Half {
        h_mul(self, rhs)
    }
}

impl Neg for Half {
    type Output = Half;
    fn neg(self) -> Half {
        if self.is_nan() {
            self
        } else {
            Half(self.0 ^ SIGN_MASK)
        }
    }
}
