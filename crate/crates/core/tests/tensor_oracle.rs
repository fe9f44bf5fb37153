mod common;

use common::{half_value, SplitMix};
use mixprec::binary16::{h_add, h_mul, Half};
use mixprec::tensor::{matmul, read_tensor, write_tensor, AccumMode, DType, Tensor};
use proptest::prelude::*;

/// Random binary16 values with few significant bits and a narrow exponent
/// range, so every product and partial sum is exact in `f32`.
fn coarse_half(rng: &mut SplitMix) -> Half {
    let r = rng.next_u64();
    let sig = (r % 16) as f32;
    let exp = ((r >> 8) % 7) as i32 - 3;
    let sign = if r >> 63 == 1 { -1.0 } else { 1.0 };
    Half::from_f32(sign * sig * 2f32.powi(exp))
}

/// Exact dot product as a scaled integer: values are multiples of 2^-24.
fn exact_dot(a: &[u16], b: &[u16]) -> i128 {
    let scale = 2f64.powi(24);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (half_value(x) * scale) as i128 * (half_value(y) * scale) as i128)
        .sum()
}

#[test]
fn acc32_matches_exact_rational_oracle() {
    let mut rng = SplitMix(31);
    for _ in 0..2000 {
        let (m, k, n) = (1 + rng.next_u64() as usize % 8, 1 + rng.next_u64() as usize % 8, 1 + rng.next_u64() as usize % 8);
        let av: Vec<Half> = (0..m * k).map(|_| coarse_half(&mut rng)).collect();
        let bv: Vec<Half> = (0..k * n).map(|_| coarse_half(&mut rng)).collect();
        let a = Tensor::from_halves(&[m, k], av.clone()).unwrap();
        let b = Tensor::from_halves(&[k, n], bv.clone()).unwrap();
        let c = matmul(&a, &b, AccumMode::Acc32, DType::F32).unwrap();
        for i in 0..m {
            for j in 0..n {
                let row: Vec<u16> = (0..k).map(|p| av[i * k + p].to_bits()).collect();
                let col: Vec<u16> = (0..k).map(|p| bv[p * n + j].to_bits()).collect();
                let exact = exact_dot(&row, &col) as f64 * 2f64.powi(-48);
                assert_eq!(c.get(i * n + j) as f64, exact);
            }
        }
    }
}

#[test]
fn acc16_matches_scalar_loop() {
    // The accumulator rounds once per multiply-add; where every product is
    // exact in binary16 this is the same as an h_mul / h_add loop.
    let mut rng = SplitMix(32);
    for _ in 0..2000 {
        let (m, k, n) = (1 + rng.next_u64() as usize % 8, 1 + rng.next_u64() as usize % 64, 1 + rng.next_u64() as usize % 8);
        let av: Vec<Half> = (0..m * k).map(|_| coarse_half(&mut rng)).collect();
        let bv: Vec<Half> = (0..k * n).map(|_| coarse_half(&mut rng)).collect();
        let a = Tensor::from_halves(&[m, k], av.clone()).unwrap();
        let b = Tensor::from_halves(&[k, n], bv.clone()).unwrap();
        let c = matmul(&a, &b, AccumMode::Acc16, DType::F16).unwrap();
        let c = c.as_f16().unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = Half::ZERO;
                let mut fused = Half::ZERO;
                for p in 0..k {
                    acc = h_add(acc, h_mul(av[i * k + p], bv[p * n + j]));
                    fused = av[i * k + p].mul_add(bv[p * n + j], fused);
                }
                assert_eq!(c[i * n + j], fused);
                assert_eq!(c[i * n + j], acc);
            }
        }
    }
}

#[test]
fn acc16_matches_fused_loop_on_arbitrary_values() {
    let mut rng = SplitMix(33);
    for _ in 0..500 {
        let (m, k, n) = (1 + rng.next_u64() as usize % 6, 1 + rng.next_u64() as usize % 300, 1 + rng.next_u64() as usize % 6);
        let a = Tensor::random_normal(&[m, k], DType::F16, 0.0, 1.0, rng.next_u64()).unwrap();
        let b = Tensor::random_normal(&[k, n], DType::F16, 0.0, 1.0, rng.next_u64()).unwrap();
        let (av, bv) = (a.as_f16().unwrap(), b.as_f16().unwrap());
        let c = matmul(&a, &b, AccumMode::Acc16, DType::F16).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = Half::ZERO;
                for p in 0..k {
                    acc = av[i * k + p].mul_add(bv[p * n + j], acc);
                }
                assert_eq!(c.as_f16().unwrap()[i * n + j], acc);
            }
        }
    }
}

#[test]
fn acc32_stores_once() {
    let mut rng = SplitMix(34);
    for _ in 0..200 {
        let k = 1 + rng.next_u64() as usize % 500;
        let a = Tensor::random_normal(&[1, k], DType::F16, 0.0, 1.0, rng.next_u64()).unwrap();
        let b = Tensor::random_normal(&[k, 1], DType::F16, 0.0, 1.0, rng.next_u64()).unwrap();
        let mut acc = 0f32;
        for p in 0..k {
            acc += a.get(p) * b.get(p);
        }
        let c = matmul(&a, &b, AccumMode::Acc32, DType::F16).unwrap();
        assert_eq!(c.as_f16().unwrap()[0], Half::from_f32(acc));
    }
}

#[test]
fn f16_storage_reads_back_every_pattern() {
    let all: Vec<Half> = (0..=u16::MAX).map(Half::from_bits).collect();
    let t = Tensor::from_halves(&[256, 256], all.clone()).unwrap();
    for (i, h) in all.iter().enumerate() {
        assert_eq!(t.as_f16().unwrap()[i].to_bits(), h.to_bits());
    }
    let mut buf = Vec::new();
    write_tensor(&mut buf, &t).unwrap();
    let back = read_tensor(&mut &buf[..]).unwrap();
    assert!(back.bit_eq(&t));
    let widened = t.cast(DType::F32).cast(DType::F16);
    for (a, b) in widened.as_f16().unwrap().iter().zip(&all) {
        if b.is_nan() {
            assert!(a.is_nan());
        } else {
            assert_eq!(a, b);
        }
    }
}

proptest! {
    #[test]
    fn transpose_is_an_involution(m in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let t = Tensor::random_normal(&[m, n], DType::F16, 0.0, 3.0, seed).unwrap();
        prop_assert!(t.transpose().unwrap().transpose().unwrap().bit_eq(&t));
    }

    #[test]
    fn matmul_transpose_identity(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        // (A B)^T = B^T A^T holds bit-exactly because the k order is unchanged.
        let a = Tensor::random_normal(&[m, k], DType::F16, 0.0, 1.0, seed).unwrap();
        let b = Tensor::random_normal(&[k, n], DType::F16, 0.0, 1.0, seed ^ 1).unwrap();
        for mode in [AccumMode::Acc16, AccumMode::Acc32] {
            let ab = matmul(&a, &b, mode, DType::F16).unwrap().transpose().unwrap();
            let ba = matmul(&b.transpose().unwrap(), &a.transpose().unwrap(), mode, DType::F16).unwrap();
            prop_assert!(ab.bit_eq(&ba));
        }
    }

    #[test]
    fn reduce_sum_matches_sequential_f32(rows in 1usize..40, cols in 1usize..6, seed in any::<u64>()) {
        let t = Tensor::random_normal(&[rows, cols], DType::F16, 0.0, 10.0, seed).unwrap();
        let s = t.reduce_sum(0, DType::F32).unwrap();
        for j in 0..cols {
            let mut acc = 0f32;
            for i in 0..rows {
                acc += t.get(i * cols + j);
            }
            prop_assert_eq!(s.get(j), acc);
        }
    }

    #[test]
    fn random_tensors_are_deterministic(seed in any::<u64>(), n in 1usize..64) {
        let a = Tensor::random_normal(&[n], DType::F32, 0.5, 2.0, seed).unwrap();
        let b = Tensor::random_normal(&[n], DType::F32, 0.5, 2.0, seed).unwrap();
        prop_assert!(a.bit_eq(&b));
        if n > 1 {
            let c = Tensor::random_normal(&[n], DType::F32, 0.5, 2.0, seed.wrapping_add(1)).unwrap();
            prop_assert!(!a.bit_eq(&c));
        }
    }
}
