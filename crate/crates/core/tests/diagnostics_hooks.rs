mod common;

use std::collections::BTreeMap;

use common::SplitMix;
use mixprec::diagnostics::{ExponentHistogram, HistogramHook, Role};
use mixprec::engine::{LossScaler, MetricsWriter, SgdConfig, Trainer, TrainingPolicy};
use mixprec::nn::{LayerSpec, Model, Targets};
use mixprec::{DType, Tensor};
use proptest::prelude::*;

/// Exponent by repeated halving/doubling in `f64`, no bit tricks.
fn slow_exponent(v: f64) -> i32 {
    let mut a = v.abs();
    let mut e = 0;
    while a >= 2.0 {
        a /= 2.0;
        e += 1;
    }
    while a < 1.0 {
        a *= 2.0;
        e -= 1;
    }
    e
}

struct Recount {
    zero: u64,
    nonfinite: u64,
    bins: BTreeMap<i32, u64>,
}

fn recount(values: &[f64]) -> Recount {
    let mut r = Recount { zero: 0, nonfinite: 0, bins: BTreeMap::new() };
    for &v in values {
        if v == 0.0 {
            r.zero += 1;
        } else if !v.is_finite() {
            r.nonfinite += 1;
        } else {
            *r.bins.entry(slow_exponent(v)).or_default() += 1;
        }
    }
    r
}

/// Values spread over many binades, with zeros, subnormals and specials mixed in.
fn random_tensor(rng: &mut SplitMix, dtype: DType) -> (Tensor, Vec<f64>) {
    let n = 1 + (rng.next_u64() % 700) as usize;
    let vals: Vec<f32> = (0..n)
        .map(|_| match rng.next_u64() % 20 {
            0 => 0.0,
            1 => f32::INFINITY,
            2 => f32::NAN,
            3 => f32::from_bits((rng.next_u64() as u32) & 0x807F_FFFF),
            _ => {
                let m = (rng.next_u64() % 1_000_000) as f32 / 1_000_000.0 + 0.5;
                let e = (rng.next_u64() % 80) as i32 - 50;
                let s = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
                s * m * 2f32.powi(e)
            }
        })
        .collect();
    let t = Tensor::from_values(&[n], dtype, &vals).unwrap();
    let stored = t.to_f32_vec().into_iter().map(f64::from).collect();
    (t, stored)
}

#[test]
fn bins_match_brute_force_recount() {
    let mut rng = SplitMix(0xD1A6);
    for i in 0..100 {
        let dtype = if i % 2 == 0 { DType::F16 } else { DType::F32 };
        let (t, stored) = random_tensor(&mut rng, dtype);
        let h = ExponentHistogram::of(&t);
        let r = recount(&stored);
        assert_eq!(h.zero_count(), r.zero, "tensor {i}");
        assert_eq!(h.nonfinite_count(), r.nonfinite, "tensor {i}");
        assert_eq!(h.bins(), &r.bins, "tensor {i}");
        assert_eq!(h.total(), stored.len() as u64);
        let below = stored.iter().filter(|v| v.is_finite() && v.abs() < 2f64.powi(-24)).count();
        assert_eq!((h.fraction_below(-24) * h.total() as f64).round() as usize, below, "tensor {i}");
    }
}

#[test]
fn csv_round_trip() {
    let mut rng = SplitMix(7);
    let (t, _) = random_tensor(&mut rng, DType::F16);
    let h = ExponentHistogram::of(&t);
    let mut buf = Vec::new();
    h.write_csv(&mut buf).unwrap();
    let back = ExponentHistogram::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.bins(), h.bins());
    assert_eq!(back.zero_count(), h.zero_count());
    assert_eq!(back.nonfinite_count(), h.nonfinite_count());
    assert_eq!(back.total(), h.total());
}

proptest! {
    #[test]
    fn merge_is_order_independent(seeds in proptest::collection::vec(any::<u64>(), 1..8), rot in 0usize..8) {
        let parts: Vec<ExponentHistogram> = seeds.iter().map(|&s| ExponentHistogram::of(&random_tensor(&mut SplitMix(s), DType::F16).0)).collect();
        let fold = |hs: &[ExponentHistogram]| hs.iter().fold(ExponentHistogram::default(), |a, h| a.merge(h).unwrap());
        let mut rotated = parts.clone();
        rotated.rotate_left(rot % parts.len());
        let mut reversed = parts.clone();
        reversed.reverse();
        let a = fold(&parts);
        prop_assert_eq!(&a, &fold(&rotated));
        prop_assert_eq!(&a, &fold(&reversed));
        prop_assert_eq!(a.total(), parts.iter().map(|h| h.total()).sum::<u64>());
    }
}

#[test]
fn merge_rejects_mixed_sources() {
    let a = ExponentHistogram::of(&Tensor::from_values(&[1], DType::F16, &[1.0]).unwrap());
    let b = ExponentHistogram::of(&Tensor::from_values(&[1], DType::F32, &[1.0]).unwrap());
    assert!(a.merge(&b).is_err());
    assert_eq!(a.merge(&ExponentHistogram::default()).unwrap(), a);
}

fn training_metrics(hook: Option<&mut HistogramHook>) -> String {
    let model = Model::new(vec![
        LayerSpec::Linear { inputs: 5, outputs: 7, bias: true },
        LayerSpec::Relu,
        LayerSpec::Linear { inputs: 7, outputs: 3, bias: true },
        LayerSpec::SoftmaxCrossEntropy,
    ])
    .unwrap();
    let init = model.init_params(4, DType::F32).unwrap();
    let mut t = Trainer::new(model, &init, TrainingPolicy::mixed(LossScaler::dynamic(65536.0)), SgdConfig::plain(0.2)).unwrap();
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    let mut hook = hook;
    for i in 0..40u64 {
        let x = Tensor::random_normal(&[8, 5], DType::F32, 0.0, 2.0, i).unwrap();
        let y = Targets::Classes((0..8).map(|k| (k + i as usize) % 3).collect());
        let r = match hook.as_deref_mut() {
            Some(h) => t.train_step_observed(&x, &y, h).unwrap(),
            None => t.train_step(&x, &y).unwrap(),
        };
        w.write(&r).unwrap();
    }
    for p in t.params() {
        w.write(&mixprec::engine::StepReport {
            iteration: 0,
            loss: p.master().sum_f32(),
            scaled_loss: 0.0,
            overflow: false,
            skipped: false,
            scale: 0.0,
            grad_norm: 0.0,
        })
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[test]
fn hooks_do_not_change_training() {
    let plain = training_metrics(None);
    let mut hook = HistogramHook::new(3).with_unscaled();
    let observed = training_metrics(Some(&mut hook));
    assert_eq!(plain, observed);
    assert_eq!(hook.records().iter().filter(|r| r.role == Role::ActGrad).count(), 14);
    assert!(hook.records().iter().any(|r| r.role == Role::WeightGradUnscaled));
    let merged = hook.merged(Role::WeightGrad).unwrap();
    assert_eq!(merged.source(), Some(DType::F16));
}

#[test]
fn underflow_task_flushes_activation_gradients_without_scaling() {
    let (data, layers) = mixprec::harness::gen_underflow_task(7, 2048, 16).unwrap();
    let model = Model::new(layers).unwrap();
    let init: Vec<Tensor> = model.init_params(7, DType::F32).unwrap().iter().map(|t| t.scale(0.0)).collect();
    let mut zero = Vec::new();
    for scale in [1.0, 8.0] {
        let mut t = Trainer::new(model.clone(), &init, TrainingPolicy::mixed(LossScaler::constant(scale)), SgdConfig::plain(4.0)).unwrap();
        let mut hook = HistogramHook::new(1);
        for step in 0..2 {
            let idx: Vec<usize> = (step * 1024..(step + 1) * 1024).collect();
            let (x, y) = data.train.batch(&idx).unwrap();
            t.train_step_observed(&x, &y, &mut hook).unwrap();
        }
        let act = hook.merged(Role::ActGrad).unwrap();
        let report = act.report(&mixprec::diagnostics::DEFAULT_THRESHOLDS);
        assert_eq!(report.fraction_below[0].0, -24);
        assert!(act.fraction_below(-24) >= 0.5, "S={scale}\n{report}");
        zero.push(act.fraction_zero());
    }
    assert!(zero[0] > 0.99, "{zero:?}");
    assert!(zero[1] < zero[0] - 0.25, "{zero:?}");
}
