//! Finite-difference gradient checking against a double-precision forward pass.

use super::{LayerSpec, Mode, Model, Precision, Targets};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor of the relative error, so that entries whose true
/// gradient is close to zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compares `Model::backward` under [`Precision::FP32`] with central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` of a double-precision reference forward.
///
/// Batch-norm layers use batch statistics in both passes.
pub fn grad_check(model: &Model, params: &[Tensor], input: &Tensor, targets: &Targets, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if input.dtype() != DType::F32 || params.iter().any(|p| p.dtype() != DType::F32) {
        return Err(Error::Config("grad_check runs in f32; cast parameters and input first".into()));
    }
    let mut m = model.clone();
    let (_, tape) = m.forward(params, input, targets, Precision::FP32, Mode::Train)?;
    let analytic = m.backward(params, &tape, 1.0)?.params;

    let mut p64: Vec<Vec<f64>> = params.iter().map(|t| t.iter_f32().map(f64::from).collect()).collect();
    let x64: Vec<f64> = input.iter_f32().map(f64::from).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0 };
    for k in 0..p64.len() {
        for j in 0..p64[k].len() {
            let orig = p64[k][j];
            p64[k][j] = orig + epsilon;
            let up = reference_loss(model.layers(), &p64, &x64, input.shape(), targets)?;
            p64[k][j] = orig - epsilon;
            let down = reference_loss(model.layers(), &p64, &x64, input.shape(), targets)?;
            p64[k][j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[k].get(j) as f64;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

struct Arr {
    shape: Vec<usize>,
    v: Vec<f64>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Training-mode loss of `layers` computed entirely in `f64` with direct loops.
pub fn reference_loss(layers: &[LayerSpec], params: &[Vec<f64>], input: &[f64], input_shape: &[usize], targets: &Targets) -> Result<f64> {
    let mut x = Arr { shape: input_shape.to_vec(), v: input.to_vec() };
    let mut k = 0;
    let mut take = || {
        k += 1;
        params.get(k - 1).map(Vec::as_slice).ok_or_else(|| Error::shape("too few parameters"))
    };
    for spec in layers {
        x = match *spec {
            LayerSpec::Linear { inputs, outputs, bias } => {
                let w = take()?;
                let b = if bias { Some(take()?) } else { None };
                let batch = x.shape[0];
                let mut y = vec![0.0; batch * outputs];
                for n in 0..batch {
                    for o in 0..outputs {
                        let mut s = b.map_or(0.0, |b| b[o]);
                        for i in 0..inputs {
                            s += x.v[n * inputs + i] * w[i * outputs + o];
                        }
                        y[n * outputs + o] = s;
                    }
                }
                Arr { shape: vec![batch, outputs], v: y }
            }
            LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel_h: kh, kernel_w: kw, stride, padding } => {
                let (w, b) = (take()?, take()?);
                let (batch, h, wd) = (x.shape[0], x.shape[2], x.shape[3]);
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (wd + 2 * padding - kw) / stride + 1;
                let mut y = vec![0.0; batch * co * oh * ow];
                for n in 0..batch {
                    for o in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut s = b[o];
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (oy * stride + ky) as isize - padding as isize;
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            s += x.v[((n * ci + c) * h + iy as usize) * wd + ix as usize] * w[((o * ci + c) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                                y[((n * co + o) * oh + oy) * ow + ox] = s;
                            }
                        }
                    }
                }
                Arr { shape: vec![batch, co, oh, ow], v: y }
            }
            LayerSpec::Relu => Arr { v: x.v.iter().map(|&v| v.max(0.0)).collect(), shape: x.shape },
            LayerSpec::LeakyRelu { slope } => Arr {
                v: x.v.iter().map(|&v| if v > 0.0 { v } else { slope as f64 * v }).collect(),
                shape: x.shape,
            },
            LayerSpec::Tanh => Arr { v: x.v.iter().map(|v| v.tanh()).collect(), shape: x.shape },
            LayerSpec::Sigmoid => Arr { v: x.v.iter().map(|&v| sig(v)).collect(), shape: x.shape },
            LayerSpec::BatchNorm { features, epsilon, .. } => {
                let (g, b) = (take()?, take()?);
                let spatial: usize = x.shape[2..].iter().product();
                let count = (x.shape[0] * spatial) as f64;
                let feat = |i: usize| (i / spatial) % features;
                let mut mean = vec![0.0; features];
                let mut var = vec![0.0; features];
                for (i, v) in x.v.iter().enumerate() {
                    mean[feat(i)] += v / count;
                }
                for (i, v) in x.v.iter().enumerate() {
                    var[feat(i)] += (v - mean[feat(i)]).powi(2) / count;
                }
                let v = x
                    .v
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let c = feat(i);
                        g[c] * (v - mean[c]) / (var[c] + epsilon as f64).sqrt() + b[c]
                    })
                    .collect();
                Arr { shape: x.shape, v }
            }
            LayerSpec::Lstm { inputs, hidden } => {
                let (w, b) = (take()?, take()?);
                let (batch, steps) = (x.shape[0], x.shape[1]);
                let mut h = vec![0.0; batch * hidden];
                let mut c = vec![0.0; batch * hidden];
                for t in 0..steps {
                    let mut h_next = vec![0.0; batch * hidden];
                    for n in 0..batch {
                        let z: Vec<f64> = (0..inputs)
                            .map(|i| x.v[(n * steps + t) * inputs + i])
                            .chain((0..hidden).map(|j| h[n * hidden + j]))
                            .collect();
                        let pre = |col: usize| b[col] + z.iter().enumerate().map(|(r, zr)| zr * w[r * 4 * hidden + col]).sum::<f64>();
                        for j in 0..hidden {
                            let i_g = sig(pre(j));
                            let f_g = sig(pre(hidden + j));
                            let g_g = pre(2 * hidden + j).tanh();
                            let o_g = sig(pre(3 * hidden + j));
                            let cn = f_g * c[n * hidden + j] + i_g * g_g;
                            c[n * hidden + j] = cn;
                            h_next[n * hidden + j] = o_g * cn.tanh();
                        }
                    }
                    h = h_next;
                }
                Arr { shape: vec![batch, hidden], v: h }
            }
            LayerSpec::SoftmaxCrossEntropy => {
                let Targets::Classes(labels) = targets else {
                    return Err(Error::Config("softmax_ce needs class targets".into()));
                };
                let batch = x.shape[0];
                let classes = x.v.len() / batch;
                let mut total = 0.0;
                for (row, &label) in x.v.chunks(classes).zip(labels) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - row[label];
                }
                return Ok(total / batch as f64);
            }
            LayerSpec::MeanSquaredError => {
                let Targets::Values(t) = targets else {
                    return Err(Error::Config("mse needs value targets".into()));
                };
                let n = x.v.len() as f64;
                return Ok(x.v.iter().zip(t.iter_f32()).map(|(y, t)| (y - t as f64).powi(2)).sum::<f64>() / n);
            }
        };
    }
    Err(Error::Config("model has no loss layer".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_has_zero_gradients() {
        let model = Model::new(vec![LayerSpec::Linear { inputs: 3, outputs: 2, bias: true }, LayerSpec::MeanSquaredError]).unwrap();
        let params = vec![Tensor::zeros(&[3, 2], DType::F32).unwrap(), Tensor::zeros(&[2], DType::F32).unwrap()];
        let x = Tensor::zeros(&[4, 3], DType::F32).unwrap();
        let t = Targets::Values(Tensor::zeros(&[4, 2], DType::F32).unwrap());
        let r = grad_check(&model, &params, &x, &t, 1e-4).unwrap();
        assert!(r.max_abs_error < 1e-12, "{r:?}");
    }

    #[test]
    fn rejects_half_inputs() {
        let model = Model::new(vec![LayerSpec::Relu, LayerSpec::MeanSquaredError]).unwrap();
        let x = Tensor::zeros(&[1, 1], DType::F16).unwrap();
        let t = Targets::Values(Tensor::zeros(&[1, 1], DType::F32).unwrap());
        assert!(grad_check(&model, &[], &x, &t, 1e-4).is_err());
    }
}
