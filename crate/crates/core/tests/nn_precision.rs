use mixprec::binary16::{Class, Half};
use mixprec::nn::{LayerSpec, Mode, Model, Precision, Targets};
use mixprec::tensor::{AccumMode, DType, Tensor};

fn mixed_model() -> (Model, Vec<Tensor>, Tensor, Targets) {
    let model = Model::new(vec![
        LayerSpec::Lstm { inputs: 3, hidden: 5 },
        LayerSpec::Linear { inputs: 5, outputs: 6, bias: true },
        LayerSpec::BatchNorm { features: 6, momentum: 0.1, epsilon: 1e-5 },
        LayerSpec::LeakyRelu { slope: 0.01 },
        LayerSpec::Linear { inputs: 6, outputs: 4, bias: true },
        LayerSpec::SoftmaxCrossEntropy,
    ])
    .unwrap();
    let params = model.init_params(11, DType::F16).unwrap();
    let x = Tensor::random_normal(&[8, 4, 3], DType::F16, 0.0, 1.0, 12).unwrap();
    let t = Targets::Classes((0..8).map(|i| i % 4).collect());
    (model, params, x, t)
}

#[test]
fn mixed_precision_tape_placement() {
    let (mut model, params, x, t) = mixed_model();
    let (loss, tape) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
    assert!(loss.is_finite());
    assert_eq!(tape.len(), model.layers().len());
    for s in tape.saved_tensors() {
        assert_eq!(s.tensor.dtype(), DType::F16, "layer {} {}", s.layer, s.name);
    }
    let side: Vec<(usize, &str)> = tape.side_band().iter().map(|s| (s.layer, s.name)).collect();
    assert_eq!(side, vec![(2, "mean"), (2, "inv_std"), (5, "log_normalizer")]);

    let grads = model.backward(&params, &tape, 1024.0).unwrap();
    for (g, spec) in grads.params.iter().zip(model.param_specs()) {
        assert_eq!(g.dtype(), DType::F16);
        assert_eq!(g.shape(), spec.shape.as_slice());
    }
    let layers: Vec<usize> = grads.activations.iter().map(|a| a.0).collect();
    assert_eq!(layers, vec![0, 1, 2, 3, 4]);
    assert!(grads.activations.iter().all(|(_, a)| a.dtype() == DType::F16));
    assert_eq!(grads.activations[0].1.shape(), &[8, 5]);
}

#[test]
fn seed_scaling_is_linear_in_f32() {
    let (mut model, params, x, t) = mixed_model();
    let params: Vec<Tensor> = params.iter().map(|p| p.cast(DType::F32)).collect();
    let x = x.cast(DType::F32);
    let (_, tape) = model.forward(&params, &x, &t, Precision::FP32, Mode::Train).unwrap();
    let base = model.backward(&params, &tape, 1.0).unwrap();
    for s in [2.0f32, 8.0, 1024.0, 32768.0] {
        let scaled = model.backward(&params, &tape, s).unwrap();
        for (a, b) in base.params.iter().zip(&scaled.params) {
            for (u, v) in a.iter_f32().zip(b.iter_f32()) {
                let ulps = ((u * s).to_bits() as i64 - v.to_bits() as i64).abs();
                assert!(ulps <= 4, "s = {s}: {u} * s vs {v}");
            }
        }
    }
}

#[test]
fn scale_of_eight_shifts_exponents_by_three() {
    let mut model = Model::new(vec![
        LayerSpec::Linear { inputs: 16, outputs: 8, bias: true },
        LayerSpec::Tanh,
        LayerSpec::Linear { inputs: 8, outputs: 4, bias: true },
        LayerSpec::SoftmaxCrossEntropy,
    ])
    .unwrap();
    let params = model.init_params(5, DType::F16).unwrap();
    let x = Tensor::random_normal(&[32, 16], DType::F16, 0.0, 1.0, 6).unwrap();
    let t = Targets::Classes((0..32).map(|i| i % 4).collect());
    let (_, tape) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
    let g1 = model.backward(&params, &tape, 1.0).unwrap();
    let g8 = model.backward(&params, &tape, 8.0).unwrap();
    let mut compared = 0;
    for (a, b) in g1.params.iter().zip(&g8.params) {
        for (u, v) in a.as_f16().unwrap().iter().zip(b.as_f16().unwrap()) {
            if u.classify() == Class::Normal && v.is_finite() {
                assert_eq!(v.exponent_of().unwrap(), u.exponent_of().unwrap() + 3, "{u:?} vs {v:?}");
                assert_eq!(v.to_f32(), 8.0 * u.to_f32());
                compared += 1;
            }
        }
    }
    assert!(compared > 100);
}

#[test]
fn long_reduction_in_backward_depends_on_accumulator() {
    // x = 1, w = 1, t = -2047: every dL/dy = (1 + 2047) * 2 / 4096 = 1, so
    // dL/dw sums 4096 ones. The exact value is 4096.
    let mut model = Model::new(vec![LayerSpec::Linear { inputs: 1, outputs: 1, bias: false }, LayerSpec::MeanSquaredError]).unwrap();
    let params = vec![Tensor::full(&[1, 1], DType::F16, 1.0).unwrap()];
    let x = Tensor::full(&[4096, 1], DType::F16, 1.0).unwrap();
    let t = Targets::Values(Tensor::full(&[4096, 1], DType::F16, -2047.0).unwrap());
    let mut results = Vec::new();
    for accum in [AccumMode::Acc32, AccumMode::Acc16] {
        let (_, tape) = model.forward(&params, &x, &t, Precision::new(DType::F16, accum), Mode::Train).unwrap();
        let g = model.backward(&params, &tape, 1.0).unwrap();
        assert!(g.activations[0].1.iter_f32().all(|v| v == 1.0));
        results.push(g.params[0].get(0));
    }
    assert_eq!(results, vec![4096.0, 2048.0]);
}

#[test]
fn forward_is_bit_reproducible() {
    let (mut model, params, x, t) = mixed_model();
    let (l1, tape1) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
    let g1 = model.backward(&params, &tape1, 8.0).unwrap();
    let (mut model2, ..) = mixed_model();
    let (l2, tape2) = model2.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
    let g2 = model2.backward(&params, &tape2, 8.0).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.params.iter().zip(&g2.params).all(|(a, b)| a.bit_eq(b)));
}

#[test]
fn eval_mode_uses_running_statistics() {
    let (mut model, params, x, t) = mixed_model();
    let before = model.predict(&params, &x, Precision::MIXED).unwrap();
    model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
    let after = model.predict(&params, &x, Precision::MIXED).unwrap();
    assert!(!before.bit_eq(&after));
    assert_eq!(Half::from_f32(model.running_stats(2).unwrap().1[0]).classify(), Class::Normal);
    let (_, tape) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Eval).unwrap();
    let g = model.backward(&params, &tape, 1.0).unwrap();
    assert!(g.params.iter().all(Tensor::all_finite));
}
