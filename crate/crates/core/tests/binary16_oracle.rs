mod common;

use common::{conversion_boundaries, half_value, ref_from_f32, soft_add, soft_fma, soft_mul, SplitMix};
use mixprec::binary16::{h_add, h_mul, h_sub, Class, Half};
use proptest::prelude::*;

#[test]
fn reference_table_decodes_like_widening() {
    for bits in 0..=u16::MAX {
        let h = Half::from_bits(bits);
        let expect = half_value(bits);
        if expect.is_nan() {
            assert!(h.to_f32().is_nan());
        } else {
            assert_eq!(h.to_f32() as f64, expect, "{bits:#06x}");
        }
    }
}

#[test]
fn round_trip_every_pattern() {
    for bits in 0..=u16::MAX {
        let h = Half::from_bits(bits);
        let back = Half::from_f32(h.to_f32());
        if h.is_nan() {
            assert_eq!(back, Half::NAN);
        } else {
            assert_eq!(back, h, "{bits:#06x}");
        }
    }
}

#[test]
fn classify_partitions_all_patterns() {
    let mut counts = std::collections::HashMap::new();
    for bits in 0..=u16::MAX {
        *counts.entry(Half::from_bits(bits).classify()).or_insert(0u32) += 1;
    }
    assert_eq!(counts[&Class::Zero], 2);
    assert_eq!(counts[&Class::Subnormal], 2 * 1023);
    assert_eq!(counts[&Class::Normal], 2 * 30 * 1024);
    assert_eq!(counts[&Class::Infinite], 2);
    assert_eq!(counts[&Class::Nan], 2 * 1023);
}

#[test]
fn conversion_matches_reference_on_boundaries() {
    for x in conversion_boundaries() {
        assert_eq!(Half::from_f32(x).to_bits(), ref_from_f32(x), "x = {x:e} ({:#010x})", x.to_bits());
    }
}

#[test]
fn conversion_matches_reference_on_random_inputs() {
    let mut rng = SplitMix(0x5EED);
    for i in 0..1_000_000 {
        let x = if i % 4 == 0 { rng.f32_any_bits() } else { rng.f32_near_half_range() };
        if x.is_nan() {
            assert_eq!(Half::from_f32(x), Half::NAN);
            continue;
        }
        assert_eq!(Half::from_f32(x).to_bits(), ref_from_f32(x), "x = {x:e}");
    }
}

#[test]
fn double_precision_conversion_matches_reference() {
    let mut rng = SplitMix(77);
    for _ in 0..200_000 {
        let r = rng.next_u64();
        let x = f64::from_bits((r & 0x800F_FFFF_FFFF_FFFF) | ((1023 - 30 + (r >> 52) % 50) << 52));
        assert_eq!(Half::from_f64(x).to_bits(), common::ref_from_f64(x), "x = {x:e}");
    }
}

fn same(a: Half, b: u16) -> bool {
    if a.is_nan() {
        Half::from_bits(b).is_nan()
    } else {
        a.to_bits() == b
    }
}

#[test]
fn widened_arithmetic_is_correctly_rounded() {
    let mut rng = SplitMix(2024);
    for _ in 0..1_000_000 {
        let (a, b) = (rng.half_bits(), rng.half_bits());
        let (ha, hb) = (Half::from_bits(a), Half::from_bits(b));
        assert!(same(h_add(ha, hb), soft_add(a, b)), "{ha:?} + {hb:?}");
        assert!(same(h_mul(ha, hb), soft_mul(a, b)), "{ha:?} * {hb:?}");
        assert!(same(h_sub(ha, hb), soft_add(a, b ^ 0x8000)), "{ha:?} - {hb:?}");
    }
}

#[test]
fn addition_with_near_operands_is_correctly_rounded() {
    // Operands with close exponents exercise cancellation and carries.
    let mut rng = SplitMix(99);
    for _ in 0..500_000 {
        let a = rng.half_bits() & 0x7FFF;
        let delta = (rng.next_u64() % 64) as u16;
        let b = (a.saturating_add(delta) & 0x7FFF) | ((rng.next_u64() as u16) & 0x8000);
        let (ha, hb) = (Half::from_bits(a), Half::from_bits(b));
        assert!(same(h_add(ha, hb), soft_add(a, b)), "{ha:?} + {hb:?}");
    }
}

#[test]
fn fused_multiply_add_is_correctly_rounded() {
    let mut rng = SplitMix(4242);
    let mut checked = 0;
    while checked < 300_000 {
        let (a, b, c) = (rng.half_bits(), rng.half_bits(), rng.half_bits());
        if let Some(expect) = soft_fma(a, b, c) {
            let got = Half::from_bits(a).mul_add(Half::from_bits(b), Half::from_bits(c));
            assert_eq!(got.to_bits(), expect, "{a:#06x} * {b:#06x} + {c:#06x}");
            checked += 1;
        }
    }
}

#[test]
fn swamping_ratio() {
    // An update 4096x smaller than the weight vanishes; 1024x survives.
    let one = Half::ONE;
    assert_eq!(h_add(one, Half::from_f32(2f32.powi(-12))), one);
    assert_ne!(h_add(one, Half::from_f32(2f32.powi(-10))), one);
    // At exactly 2048x the addend is a tie that rounds back to the even weight,
    // while a hair more recovers it.
    assert_eq!(h_add(one, Half::from_f32(2f32.powi(-11))), one);
    let above_tie = Half::from_f32(2f32.powi(-11) + 2f32.powi(-21));
    assert_ne!(h_add(one, above_tie), one);
}

proptest! {
    #[test]
    fn conversion_is_monotone(a in any::<f32>(), b in any::<f32>()) {
        prop_assume!(a.is_finite() && b.is_finite());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(Half::from_f32(lo).to_f32() <= Half::from_f32(hi).to_f32());
    }

    #[test]
    fn multiplicative_identity(bits in any::<u16>()) {
        let h = Half::from_bits(bits);
        prop_assume!(h.is_finite());
        prop_assert_eq!(h_mul(h, Half::ONE), h);
    }
}
