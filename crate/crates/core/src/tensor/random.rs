//! Portable sample streams.
//!
//! Generator: ChaCha8 (`rand_chacha`), seeded with `SeedableRng::seed_from_u64`.
//! Uniforms take the top 53 bits of one `u64` draw. Normals use the
//! Box-Muller transform on consecutive uniform pairs, emitting both the
//! cosine and sine branch. The transform runs in `f64` and callers round
//! to `f32`, so platform libm differences do not reach stored values.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

pub(super) fn unit_samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.next_u64() >> 11) as f64 * TWO_POW_M53).collect()
}

pub(super) fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (rng.next_u64() >> 11) as f64 * TWO_POW_M53;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_are_plausible() {
        let z = normal_samples(20_000, 3);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        let u = unit_samples(10_000, 3);
        assert!(u.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn prefix_stable() {
        assert_eq!(normal_samples(5, 11)[..], normal_samples(6, 11)[..5]);
    }
}
