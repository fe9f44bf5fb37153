//! Reference implementations used only by tests.
//!
//! Nothing here calls into the conversion or arithmetic code under test:
//! conversion searches the sorted table of every positive binary16 value,
//! arithmetic is exact integer math followed by an integer rounding step.

#![allow(dead_code)]

use std::sync::OnceLock;

/// Positive binary16 values in bit order (monotone), with 0x7C00 standing
/// in as 65536 so that the overflow midpoint falls out of the tie rule.
fn table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0u32..=0x7C00)
            .map(|bits| {
                let e = (bits >> 10) as i32;
                let m = (bits & 0x3FF) as f64;
                if e == 0 {
                    m * 2f64.powi(-24)
                } else {
                    (1.0 + m / 1024.0) * 2f64.powi(e - 15)
                }
            })
            .collect()
    })
}

/// Value of a binary16 pattern as `f64`, decoded field by field.
pub fn half_value(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let mag = bits & 0x7FFF;
    if mag > 0x7C00 {
        f64::NAN
    } else if mag == 0x7C00 {
        sign * f64::INFINITY
    } else {
        sign * table()[mag as usize]
    }
}

/// Nearest-even binary16 pattern for `x`, by binary search over all values.
pub fn ref_from_f64(x: f64) -> u16 {
    if x.is_nan() {
        return 0x7E00;
    }
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    let v = x.abs();
    let t = table();
    if v >= t[0x7C00] {
        return sign | 0x7C00;
    }
    // Largest index with t[i] <= v.
    let i = t.partition_point(|&y| y <= v) - 1;
    let (lo, hi) = (t[i], t[i + 1]);
    let pick = if v - lo < hi - v {
        i
    } else if v - lo > hi - v {
        i + 1
    } else if i % 2 == 0 {
        i
    } else {
        i + 1
    };
    sign | pick as u16
}

pub fn ref_from_f32(x: f32) -> u16 {
    ref_from_f64(x as f64)
}

#[derive(Clone, Copy, Debug)]
enum Decoded {
    Nan,
    Inf(bool),
    /// Finite value `(-1)^neg * sig * 2^exp`.
    Finite { neg: bool, sig: u64, exp: i32 },
}

fn decode(bits: u16) -> Decoded {
    let neg = bits & 0x8000 != 0;
    let e = ((bits >> 10) & 0x1F) as i32;
    let m = (bits & 0x3FF) as u64;
    match e {
        0x1F if m == 0 => Decoded::Inf(neg),
        0x1F => Decoded::Nan,
        0 => Decoded::Finite { neg, sig: m, exp: -24 },
        _ => Decoded::Finite { neg, sig: 1024 | m, exp: e - 25 },
    }
}

/// Rounds `(-1)^neg * mag * 2^exp` to binary16 with integer arithmetic only.
pub fn round_exact(neg: bool, mag: u128, exp: i32) -> u16 {
    let sign: u16 = if neg { 0x8000 } else { 0 };
    if mag == 0 {
        return sign;
    }
    let msb = 127 - mag.leading_zeros() as i32;
    let mut quantum = (msb + exp - 10).max(-24);
    let mut m = if exp >= quantum {
        mag << (exp - quantum)
    } else {
        let s = (quantum - exp) as u32;
        if s > 127 {
            0
        } else {
            let q = mag >> s;
            let rem = mag & ((1u128 << s) - 1);
            let half = 1u128 << (s - 1);
            if rem > half || (rem == half && q & 1 == 1) {
                q + 1
            } else {
                q
            }
        }
    };
    if m == 2048 {
        m = 1024;
        quantum += 1;
    }
    if m < 1024 {
        return sign | m as u16;
    }
    let e = quantum + 10;
    if e > 15 {
        return sign | 0x7C00;
    }
    sign | (((e + 15) as u16) << 10) | (m as u16 - 1024)
}

fn signed_sum(terms: &[(bool, u128, i32)]) -> u16 {
    let emin = terms.iter().map(|t| t.2).min().unwrap();
    let total: i128 = terms
        .iter()
        .map(|&(neg, sig, exp)| {
            let v = (sig << (exp - emin)) as i128;
            if neg {
                -v
            } else {
                v
            }
        })
        .sum();
    if total == 0 {
        // Exact zero sums are +0 unless every term is -0.
        let all_neg = terms.iter().all(|t| t.0);
        return if all_neg { 0x8000 } else { 0 };
    }
    round_exact(total < 0, total.unsigned_abs(), emin)
}

pub fn soft_add(a: u16, b: u16) -> u16 {
    match (decode(a), decode(b)) {
        (Decoded::Nan, _) | (_, Decoded::Nan) => 0x7E00,
        (Decoded::Inf(x), Decoded::Inf(y)) if x != y => 0x7E00,
        (Decoded::Inf(x), _) | (_, Decoded::Inf(x)) => if x { 0xFC00 } else { 0x7C00 },
        (Decoded::Finite { neg: na, sig: sa, exp: ea }, Decoded::Finite { neg: nb, sig: sb, exp: eb }) => {
            signed_sum(&[(na, sa as u128, ea), (nb, sb as u128, eb)])
        }
    }
}

pub fn soft_mul(a: u16, b: u16) -> u16 {
    match (decode(a), decode(b)) {
        (Decoded::Nan, _) | (_, Decoded::Nan) => 0x7E00,
        (Decoded::Inf(_), Decoded::Finite { sig: 0, .. }) | (Decoded::Finite { sig: 0, .. }, Decoded::Inf(_)) => 0x7E00,
        (Decoded::Inf(x), Decoded::Inf(y)) => if x != y { 0xFC00 } else { 0x7C00 },
        (Decoded::Inf(x), Decoded::Finite { neg, .. }) | (Decoded::Finite { neg, .. }, Decoded::Inf(x)) => {
            if x != neg { 0xFC00 } else { 0x7C00 }
        }
        (Decoded::Finite { neg: na, sig: sa, exp: ea }, Decoded::Finite { neg: nb, sig: sb, exp: eb }) => {
            let neg = na != nb;
            if sa == 0 || sb == 0 {
                return if neg { 0x8000 } else { 0 };
            }
            round_exact(neg, sa as u128 * sb as u128, ea + eb)
        }
    }
}

/// Exact `a * b + c` rounded once; finite operands only.
pub fn soft_fma(a: u16, b: u16, c: u16) -> Option<u16> {
    match (decode(a), decode(b), decode(c)) {
        (
            Decoded::Finite { neg: na, sig: sa, exp: ea },
            Decoded::Finite { neg: nb, sig: sb, exp: eb },
            Decoded::Finite { neg: nc, sig: sc, exp: ec },
        ) => Some(signed_sum(&[(na != nb, sa as u128 * sb as u128, ea + eb), (nc, sc as u128, ec)])),
        _ => None,
    }
}

/// Small deterministic generator for test inputs (SplitMix64).
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Random `f32` concentrated around the binary16 range: exponent in [-30, 20].
    pub fn f32_near_half_range(&mut self) -> f32 {
        let r = self.next_u64();
        let sign = (r >> 63) as u32;
        let exp = (r >> 32) % 51;
        let man = (r as u32) & 0x7F_FFFF;
        f32::from_bits((sign << 31) | (((exp as u32) + 127 - 30) << 23) | man)
    }

    pub fn f32_any_bits(&mut self) -> f32 {
        f32::from_bits(self.next_u64() as u32)
    }

    pub fn half_bits(&mut self) -> u16 {
        self.next_u64() as u16
    }
}

/// Boundary inputs for conversion: overflow and subnormal midpoints and their neighbours.
pub fn conversion_boundaries() -> Vec<f32> {
    let mut v = vec![
        0.0, -0.0, 1.0, -1.0, 65504.0, 65519.0, 65520.0, 65536.0, -65520.0, f32::MAX, f32::INFINITY,
        f32::NEG_INFINITY, f32::MIN_POSITIVE, f32::from_bits(1),
    ];
    for e in -26..=-13 {
        v.push(2f32.powi(e));
    }
    // Every binary16 subnormal midpoint and the midpoints just above each power of two.
    for m in 0..1024u32 {
        v.push((m as f32 + 0.5) * 2f32.powi(-24));
    }
    for e in -14..=15 {
        let ulp = 2f32.powi(e - 10);
        v.push(2f32.powi(e) + ulp / 2.0);
        v.push(2f32.powi(e) + 1.5 * ulp);
        v.push(2f32.powi(e) - ulp / 4.0);
    }
    let mut with_neighbours = Vec::new();
    for x in v {
        for y in [x, -x] {
            with_neighbours.push(y);
            if y.is_finite() {
                with_neighbours.push(f32::from_bits(y.to_bits().wrapping_add(1)));
                if y.to_bits() & 0x7FFF_FFFF != 0 {
                    with_neighbours.push(f32::from_bits(y.to_bits() - 1));
                }
            }
        }
    }
    with_neighbours.retain(|x| !x.is_nan());
    with_neighbours
}
