use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Activation, ConvGeom, LstmStep};
use super::{LayerSpec, Mode, Precision, Targets};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// One parameter slot of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub layer: usize,
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    /// Stable key such as `0.weight`, used in checkpoints.
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer, self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    mean: Vec<f32>,
    var: Vec<f32>,
}

/// Layer list plus the state that is not a trainable parameter
/// (batch-norm running statistics).
#[derive(Debug)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<ParamSpec>,
    first_param: Vec<usize>,
    running: Vec<Option<RunningStats>>,
    id: u64,
    generation: u64,
}

impl Clone for Model {
    fn clone(&self) -> Model {
        Model {
            layers: self.layers.clone(),
            params: self.params.clone(),
            first_param: self.first_param.clone(),
            running: self.running.clone(),
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Saved {
    Linear { x2: Tensor, input_shape: Vec<usize> },
    Conv { cols: Tensor, geom: ConvGeom },
    Act { kind: Activation, saved: Tensor },
    BatchNorm { x: Tensor, mean: Vec<f32>, inv_std: Vec<f32>, spatial: usize, batch_stats: bool },
    Lstm { steps: Vec<LstmStep>, input_shape: Vec<usize> },
    SoftmaxCe { logits: Tensor, log_norm: Vec<f32>, labels: Vec<usize> },
    Mse { pred: Tensor, target: Tensor },
}

/// Tensors saved by one forward pass, one entry per executed layer.
#[derive(Clone, Debug)]
pub struct Tape {
    model_id: u64,
    generation: u64,
    precision: Precision,
    loss: f32,
    entries: Vec<Saved>,
}

/// A saved tensor on the tape, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SavedTensor<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub tensor: &'a Tensor,
}

/// Values the tape keeps in `f32` regardless of precision.
#[derive(Clone, Copy, Debug)]
pub struct SideBand<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub values: &'a [f32],
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn loss(&self) -> f32 {
        self.loss
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn saved_tensors(&self) -> Vec<SavedTensor<'_>> {
        let mut out = Vec::new();
        for (layer, e) in self.entries.iter().enumerate() {
            let mut push = |name, tensor| out.push(SavedTensor { layer, name, tensor });
            match e {
                Saved::Linear { x2, .. } => push("input", x2),
                Saved::Conv { cols, .. } => push("cols", cols),
                Saved::Act { kind, saved } => push(if kind.saves_input() { "input" } else { "output" }, saved),
                Saved::BatchNorm { x, .. } => push("input", x),
                Saved::Lstm { steps, .. } => {
                    for s in steps {
                        push("z", &s.z);
                        push("gates", &s.gates);
                        push("c_prev", &s.c_prev);
                        push("c", &s.c);
                    }
                }
                Saved::SoftmaxCe { logits, .. } => push("logits", logits),
                Saved::Mse { pred, target } => {
                    push("pred", pred);
                    push("target", target);
                }
            }
        }
        out
    }

    pub fn side_band(&self) -> Vec<SideBand<'_>> {
        let mut out = Vec::new();
        for (layer, e) in self.entries.iter().enumerate() {
            match e {
                Saved::BatchNorm { mean, inv_std, .. } => {
                    out.push(SideBand { layer, name: "mean", values: mean });
                    out.push(SideBand { layer, name: "inv_std", values: inv_std });
                }
                Saved::SoftmaxCe { log_norm, .. } => out.push(SideBand { layer, name: "log_normalizer", values: log_norm }),
                _ => {}
            }
        }
        out
    }
}

/// Result of a backward pass, stored in the tape's storage dtype.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// One gradient per parameter, in [`Model::param_specs`] order.
    pub params: Vec<Tensor>,
    /// `(layer, dL/d output)` for every layer before the loss, ascending.
    pub activations: Vec<(usize, Tensor)>,
}

impl Model {
    /// A model whose last layer, and only its last layer, is a loss.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Model> {
        for l in &layers {
            l.validate()?;
        }
        match layers.iter().position(LayerSpec::is_loss) {
            Some(i) if i + 1 == layers.len() && i > 0 => {}
            Some(i) if i + 1 == layers.len() => return Err(Error::Config("model needs at least one layer before the loss".into())),
            Some(_) => return Err(Error::Config("the loss must be the last layer".into())),
            None => return Err(Error::Config("model has no loss layer".into())),
        }
        let mut params = Vec::new();
        let mut first_param = Vec::new();
        for (layer, spec) in layers.iter().enumerate() {
            first_param.push(params.len());
            for (name, shape) in spec.param_shapes() {
                params.push(ParamSpec { layer, name, shape });
            }
        }
        let running = layers
            .iter()
            .map(|l| match *l {
                LayerSpec::BatchNorm { features, .. } => Some(RunningStats { mean: vec![0.0; features], var: vec![1.0; features] }),
                _ => None,
            })
            .collect();
        Ok(Model {
            layers,
            params,
            first_param,
            running,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    /// Running `(mean, variance)` of a batch-norm layer.
    pub fn running_stats(&self, layer: usize) -> Option<(&[f32], &[f32])> {
        self.running.get(layer)?.as_ref().map(|r| (&r.mean[..], &r.var[..]))
    }

    pub fn set_running_stats(&mut self, layer: usize, mean: Vec<f32>, var: Vec<f32>) -> Result<()> {
        match (self.running.get_mut(layer), &self.layers.get(layer)) {
            (Some(Some(r)), Some(LayerSpec::BatchNorm { features, .. })) if mean.len() == *features && var.len() == *features => {
                *r = RunningStats { mean, var };
                Ok(())
            }
            _ => Err(Error::shape(format!("layer {layer} has no running statistics of that size"))),
        }
    }

    /// Seeded LeCun-normal weights (stddev `1/sqrt(fan_in)`), zero biases,
    /// unit batch-norm scales. Each parameter draws from its own stream.
    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let stream = seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                match (&self.layers[p.layer], p.name) {
                    (_, "bias") | (_, "beta") => Tensor::zeros(&p.shape, dtype),
                    (_, "gamma") => Tensor::full(&p.shape, dtype, 1.0),
                    (spec, _) => {
                        let fan_in = match *spec {
                            LayerSpec::Linear { inputs, .. } => inputs,
                            LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => in_channels * kernel_h * kernel_w,
                            LayerSpec::Lstm { inputs, hidden } => inputs + hidden,
                            _ => p.shape[0],
                        };
                        Tensor::random_normal(&p.shape, dtype, 0.0, 1.0 / (fan_in as f32).sqrt(), stream)
                    }
                }
            })
            .collect()
    }

    fn check_params(&self, params: &[Tensor], p: Precision) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!("model has {} parameters, got {}", self.params.len(), params.len())));
        }
        for (spec, t) in self.params.iter().zip(params) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!("parameter {} expects {:?}, got {:?}", spec.key(), spec.shape, t.shape())));
            }
            if t.dtype() != p.storage {
                return Err(Error::shape(format!("parameter {} is {}, precision stores {}", spec.key(), t.dtype(), p.storage)));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor, p: Precision) -> Result<()> {
        if input.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if input.dtype() != p.storage {
            return Err(Error::shape(format!("input is {}, precision stores {}", input.dtype(), p.storage)));
        }
        Ok(())
    }

    /// Runs every layer before the loss.
    fn run_layers(&self, params: &[Tensor], input: &Tensor, p: Precision, mode: Mode) -> Result<(Tensor, Vec<Saved>, Vec<(usize, RunningStats)>)> {
        let mut x = input.clone();
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (i, spec) in self.layers.iter().enumerate().take(self.layers.len() - 1) {
            let w = &params[self.first_param[i]..];
            let (y, entry) = match *spec {
                LayerSpec::Linear { bias, .. } => {
                    let (y, x2) = ops::linear_forward(&x, &w[0], if bias { Some(&w[1]) } else { None }, p)?;
                    (y, Saved::Linear { x2, input_shape: x.shape().to_vec() })
                }
                LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, stride, padding, .. } => {
                    let geom = ConvGeom::new(x.shape(), in_channels, kernel_h, kernel_w, stride, padding)?;
                    let (y, cols) = ops::conv2d_forward(&x, &w[0], &w[1], &geom, p)?;
                    (y, Saved::Conv { cols, geom })
                }
                LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                    let kind = activation(spec);
                    let y = kind.forward(&x, p);
                    let keep = if kind.saves_input() { x.clone() } else { y.clone() };
                    (y, Saved::Act { kind, saved: keep })
                }
                LayerSpec::BatchNorm { features, momentum, epsilon } => {
                    let (batch, spatial) = ops::bn_layout(x.shape(), features)?;
                    let (mean, var, batch_stats) = match mode {
                        Mode::Train => {
                            let (mean, var) = ops::bn_stats(&x.to_f32_vec(), batch, features, spatial);
                            let old = self.running[i].as_ref().expect("batchnorm has running stats");
                            let blend = |r: &[f32], b: &[f32]| r.iter().zip(b).map(|(r, b)| (1.0 - momentum) * r + momentum * b).collect();
                            stats.push((i, RunningStats { mean: blend(&old.mean, &mean), var: blend(&old.var, &var) }));
                            (mean, var, true)
                        }
                        Mode::Eval => {
                            let r = self.running[i].as_ref().expect("batchnorm has running stats");
                            (r.mean.clone(), r.var.clone(), false)
                        }
                    };
                    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let y = ops::bn_apply(&x, &mean, &inv_std, &w[0], &w[1], spatial, p)?;
                    (y, Saved::BatchNorm { x: x.clone(), mean, inv_std, spatial, batch_stats })
                }
                LayerSpec::Lstm { hidden, .. } => {
                    let (h, steps) = ops::lstm_forward(&x, &w[0], &w[1], hidden, p)?;
                    (h, Saved::Lstm { steps, input_shape: x.shape().to_vec() })
                }
                LayerSpec::SoftmaxCrossEntropy | LayerSpec::MeanSquaredError => unreachable!("loss is last"),
            };
            saved.push(entry);
            x = y;
        }
        Ok((x, saved, stats))
    }

    fn loss_forward(&self, out: &Tensor, targets: &Targets, p: Precision) -> Result<(f32, Saved)> {
        if targets.len() != out.shape()[0] {
            return Err(Error::shape(format!("{} targets for a batch of {}", targets.len(), out.shape()[0])));
        }
        match (self.layers.last().expect("model has a loss"), targets) {
            (LayerSpec::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                let (loss, log_norm) = ops::softmax_ce_forward(out, labels)?;
                Ok((loss, Saved::SoftmaxCe { logits: out.clone(), log_norm, labels: labels.clone() }))
            }
            (LayerSpec::MeanSquaredError, Targets::Values(t)) => {
                let target = t.cast(p.storage);
                let loss = ops::mse_forward(out, &target)?;
                Ok((loss, Saved::Mse { pred: out.clone(), target }))
            }
            (LayerSpec::SoftmaxCrossEntropy, _) => Err(Error::Config("softmax_ce needs class targets".into())),
            _ => Err(Error::Config("mse needs value targets".into())),
        }
    }

    /// Forward pass through every layer including the loss. Returns the
    /// unscaled `f32` loss and the tape for [`Model::backward`]. In
    /// [`Mode::Train`] batch-norm running statistics are updated.
    pub fn forward(&mut self, params: &[Tensor], input: &Tensor, targets: &Targets, p: Precision, mode: Mode) -> Result<(f32, Tape)> {
        self.check_params(params, p)?;
        self.check_input(input, p)?;
        let (out, mut entries, stats) = self.run_layers(params, input, p, mode)?;
        let (loss, entry) = self.loss_forward(&out, targets, p)?;
        entries.push(entry);
        for (i, s) in stats {
            self.running[i] = Some(s);
        }
        self.generation += 1;
        Ok((loss, Tape { model_id: self.id, generation: self.generation, precision: p, loss, entries }))
    }

    /// Output of the last layer before the loss, in evaluation mode.
    pub fn predict(&self, params: &[Tensor], input: &Tensor, p: Precision) -> Result<Tensor> {
        self.check_params(params, p)?;
        self.check_input(input, p)?;
        Ok(self.run_layers(params, input, p, Mode::Eval)?.0)
    }

    /// Loss in evaluation mode, without recording a tape.
    pub fn evaluate(&self, params: &[Tensor], input: &Tensor, targets: &Targets, p: Precision) -> Result<f32> {
        let out = self.predict(params, input, p)?;
        Ok(self.loss_forward(&out, targets, p)?.0)
    }

    /// Back-propagates from the loss seeded with `loss_scale`.
    ///
    /// The tape must come from the most recent forward pass of this model.
    pub fn backward(&self, params: &[Tensor], tape: &Tape, loss_scale: f32) -> Result<Gradients> {
        if tape.model_id != self.id {
            return Err(Error::StaleTape("tape was recorded by a different model".into()));
        }
        if tape.generation != self.generation {
            return Err(Error::StaleTape(format!(
                "tape is from forward pass {}, model has run {}",
                tape.generation, self.generation
            )));
        }
        if !(loss_scale > 0.0 && loss_scale.is_finite()) {
            return Err(Error::Domain(format!("loss scale must be positive and finite, got {loss_scale}")));
        }
        let p = tape.precision;
        self.check_params(params, p)?;

        let mut dy = match tape.entries.last().expect("tape has a loss entry") {
            Saved::SoftmaxCe { logits, log_norm, labels } => ops::softmax_ce_backward(logits, log_norm, labels, loss_scale, p)?,
            Saved::Mse { pred, target } => ops::mse_backward(pred, target, loss_scale, p)?,
            _ => unreachable!("last tape entry is a loss"),
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut activations = Vec::with_capacity(tape.len() - 1);
        for i in (0..tape.len() - 1).rev() {
            activations.push((i, dy.clone()));
            let k = self.first_param[i];
            let need_input = i > 0;
            let dx = match (&self.layers[i], &tape.entries[i]) {
                (LayerSpec::Linear { bias, .. }, Saved::Linear { x2, input_shape }) => {
                    let g = ops::linear_backward(&dy, x2, input_shape, &params[k], *bias, need_input, p)?;
                    grads[k] = Some(g.weight);
                    if let Some(b) = g.bias {
                        grads[k + 1] = Some(b);
                    }
                    g.input
                }
                (LayerSpec::Conv2d { .. }, Saved::Conv { cols, geom }) => {
                    let g = ops::conv2d_backward(&dy, cols, &params[k], geom, need_input, p)?;
                    grads[k] = Some(g.weight);
                    grads[k + 1] = Some(g.bias);
                    g.input
                }
                (_, Saved::Act { kind, saved }) => Some(kind.backward(&dy, saved, p)?),
                (LayerSpec::BatchNorm { .. }, Saved::BatchNorm { x, mean, inv_std, spatial, batch_stats }) => {
                    let g = if *batch_stats {
                        ops::bn_backward(&dy, x, mean, inv_std, &params[k], *spatial, p)?
                    } else {
                        ops::bn_backward_fixed(&dy, x, mean, inv_std, &params[k], *spatial, p)?
                    };
                    grads[k] = Some(g.gamma);
                    grads[k + 1] = Some(g.beta);
                    Some(g.input)
                }
                (LayerSpec::Lstm { hidden, .. }, Saved::Lstm { steps, input_shape }) => {
                    let g = ops::lstm_backward(&dy, steps, input_shape, &params[k], *hidden, need_input, p)?;
                    grads[k] = Some(g.weight);
                    grads[k + 1] = Some(g.bias);
                    g.input
                }
                _ => return Err(Error::StaleTape(format!("tape entry {i} does not match layer {}", self.layers[i]))),
            };
            if let Some(dx) = dx {
                dy = dx;
            }
        }
        activations.reverse();
        let params = grads.into_iter().map(|g| g.expect("every parameter receives a gradient")).collect();
        Ok(Gradients { params, activations })
    }
}

fn activation(spec: &LayerSpec) -> Activation {
    match *spec {
        LayerSpec::Relu => Activation::Relu,
        LayerSpec::LeakyRelu { slope } => Activation::LeakyRelu(slope),
        LayerSpec::Tanh => Activation::Tanh,
        LayerSpec::Sigmoid => Activation::Sigmoid,
        _ => unreachable!("not an activation"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AccumMode;

    fn linear_1x1() -> (Model, Vec<Tensor>) {
        let model = Model::new(vec![LayerSpec::Linear { inputs: 1, outputs: 1, bias: false }, LayerSpec::MeanSquaredError]).unwrap();
        (model, vec![Tensor::from_values(&[1, 1], DType::F16, &[2.0]).unwrap()])
    }

    #[test]
    fn hand_computed_linear_example() {
        let (mut model, params) = linear_1x1();
        let x = Tensor::from_values(&[1, 1], DType::F16, &[3.0]).unwrap();
        let t = Targets::Values(Tensor::from_values(&[1, 1], DType::F32, &[0.0]).unwrap());
        let (loss, tape) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
        assert_eq!(loss, 36.0);
        let g = model.backward(&params, &tape, 1.0).unwrap();
        assert_eq!(g.params[0].get(0), 36.0);
        let g8 = model.backward(&params, &tape, 8.0).unwrap();
        assert_eq!(g8.params[0].get(0), 288.0);
    }

    #[test]
    fn small_gradients_survive_only_with_scaling() {
        // pred = 2^3 * 2^-15 = 2^-12, dL/dpred = 2^-11, dL/dw = 2^-15 * 2^-11 = 2^-26.
        let mut model = Model::new(vec![LayerSpec::Linear { inputs: 1, outputs: 1, bias: false }, LayerSpec::MeanSquaredError]).unwrap();
        let params = vec![Tensor::from_values(&[1, 1], DType::F16, &[8.0]).unwrap()];
        let x = Tensor::from_values(&[1, 1], DType::F16, &[2f32.powi(-15)]).unwrap();
        let t = Targets::Values(Tensor::zeros(&[1, 1], DType::F16).unwrap());
        let (_, tape) = model.forward(&params, &x, &t, Precision::new(DType::F16, AccumMode::Acc32), Mode::Train).unwrap();
        assert_eq!(model.backward(&params, &tape, 1.0).unwrap().params[0].get(0), 0.0);
        assert_eq!(model.backward(&params, &tape, 8.0).unwrap().params[0].get(0), 2f32.powi(-23));
    }

    #[test]
    fn stale_and_foreign_tapes_are_rejected() {
        let (mut model, params) = linear_1x1();
        let x = Tensor::from_values(&[1, 1], DType::F16, &[1.0]).unwrap();
        let t = Targets::Values(Tensor::from_values(&[1, 1], DType::F16, &[0.0]).unwrap());
        let (_, old) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
        let (_, new) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
        assert!(matches!(model.backward(&params, &old, 1.0), Err(Error::StaleTape(_))));
        assert!(model.backward(&params, &new, 1.0).is_ok());
        let other = model.clone();
        assert!(matches!(other.backward(&params, &new, 1.0), Err(Error::StaleTape(_))));
    }

    #[test]
    fn rejects_bad_models_and_inputs() {
        assert!(Model::new(vec![LayerSpec::Relu]).is_err());
        assert!(Model::new(vec![LayerSpec::MeanSquaredError]).is_err());
        assert!(Model::new(vec![LayerSpec::Relu, LayerSpec::MeanSquaredError, LayerSpec::Relu]).is_err());
        let (mut model, params) = linear_1x1();
        let x32 = Tensor::from_values(&[1, 1], DType::F32, &[1.0]).unwrap();
        let t = Targets::Values(Tensor::zeros(&[1, 1], DType::F32).unwrap());
        assert!(model.forward(&params, &x32, &t, Precision::MIXED, Mode::Train).is_err());
        let x = Tensor::from_values(&[2, 2], DType::F16, &[1.0; 4]).unwrap();
        assert!(matches!(model.forward(&params, &x, &t, Precision::MIXED, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let mut model = Model::new(vec![LayerSpec::Relu, LayerSpec::SoftmaxCrossEntropy]).unwrap();
        let logits = Tensor::random_uniform(&[16, 10], DType::F16, 0.0, 10.0, 3).unwrap();
        let (_, tape) = model.forward(&[], &logits, &Targets::Classes(vec![1; 16]), Precision::MIXED, Mode::Train).unwrap();
        let lse = tape.side_band()[0].values;
        let x = logits.to_f32_vec();
        for (row, l) in x.chunks(10).zip(lse) {
            let s: f64 = row.iter().map(|&v| ((v - l) as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn batchnorm_constant_batch_is_finite() {
        let mut model = Model::new(vec![LayerSpec::BatchNorm { features: 3, momentum: 0.1, epsilon: 1e-5 }, LayerSpec::MeanSquaredError]).unwrap();
        let params = model.init_params(0, DType::F16).unwrap();
        let x = Tensor::full(&[4, 3], DType::F16, 7.0).unwrap();
        let t = Targets::Values(Tensor::zeros(&[4, 3], DType::F16).unwrap());
        let (loss, tape) = model.forward(&params, &x, &t, Precision::MIXED, Mode::Train).unwrap();
        assert!(loss.is_finite());
        let g = model.backward(&params, &tape, 1.0).unwrap();
        assert!(g.params.iter().all(Tensor::all_finite));
        let (mean, _) = model.running_stats(0).unwrap();
        assert!((mean[0] - 0.7).abs() < 1e-6);
    }
}
