//! Per-layer forward and backward kernels.
//!
//! Stored tensors use the precision's storage dtype. Dot products go through
//! [`matmul_acc`] with the precision's accumulation mode; statistics,
//! exponentials, logarithms and point-wise math run in `f32` and round once
//! on store.

use super::Precision;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_acc, Tensor};

pub(super) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn flatten_batch(x: &Tensor, features: usize, layer: &str) -> Result<Tensor> {
    let b = x.shape()[0];
    if x.rank() < 2 || x.len() != b * features {
        return Err(Error::shape(format!("{layer} expects [batch, {features}] input, got {:?}", x.shape())));
    }
    x.reshape(&[b, features])
}

fn check_len(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.len() != n {
        return Err(Error::shape(format!("{what}: expected {n} elements, got {:?}", t.shape())));
    }
    Ok(())
}

/// Adds a per-column bias to `[m, n]` accumulators.
fn add_bias(acc: &mut [f32], n: usize, bias: &Tensor) {
    let b = bias.to_f32_vec();
    for row in acc.chunks_mut(n) {
        for (a, bj) in row.iter_mut().zip(&b) {
            *a += bj;
        }
    }
}

// ---------------------------------------------------------------- linear

pub(super) fn linear_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    p: Precision,
) -> Result<(Tensor, Tensor)> {
    let (inputs, outputs) = w.dims2()?;
    let x2 = flatten_batch(x, inputs, "linear")?;
    let (m, n, mut acc) = matmul_acc(&x2, w, p.accum)?;
    if let Some(b) = bias {
        check_len(b, outputs, "linear bias")?;
        add_bias(&mut acc, n, b);
    }
    Ok((Tensor::store(&[m, n], acc, p.storage)?, x2))
}

pub(super) struct LinearGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub input: Option<Tensor>,
}

pub(super) fn linear_backward(
    dy: &Tensor,
    x2: &Tensor,
    input_shape: &[usize],
    w: &Tensor,
    has_bias: bool,
    need_input: bool,
    p: Precision,
) -> Result<LinearGrads> {
    let weight = matmul(&x2.transpose()?, dy, p.accum, p.storage)?;
    let bias = if has_bias { Some(dy.reduce_sum(0, p.storage)?) } else { None };
    let input = if need_input {
        Some(matmul(dy, &w.transpose()?, p.accum, p.storage)?.reshape(input_shape)?)
    } else {
        None
    };
    Ok(LinearGrads { weight, bias, input })
}

// ---------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], in_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize) -> Result<ConvGeom> {
        let [batch, channels, height, width] = input[..] else {
            return Err(Error::shape(format!("conv2d expects [B, C, H, W] input, got {input:?}")));
        };
        if channels != in_channels {
            return Err(Error::shape(format!("conv2d expects {in_channels} channels, got {channels}")));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::shape(format!("conv2d kernel {kernel_h}x{kernel_w} larger than padded input {input:?}")));
        }
        Ok(ConvGeom {
            batch,
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Visits `(row, col, input_index)` for every in-bounds tap, row-major.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw, pad) = (self.kernel_h, self.kernel_w, self.padding as isize);
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for c in 0..self.channels {
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let col = (c * kh + ky) * kw + kx;
                                let src = ((b * self.channels + c) * self.height + iy as usize) * self.width + ix as usize;
                                f(row, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, g: &ConvGeom, p: Precision) -> Result<(Tensor, Tensor)> {
    let out_ch = w.shape()[0];
    let patch = g.patch_len();
    check_len(w, out_ch * patch, "conv2d weight")?;
    check_len(bias, out_ch, "conv2d bias")?;
    let xv = x.to_f32_vec();
    let mut cols = vec![0f32; g.positions() * patch];
    g.for_each_tap(|row, col, src| cols[row * patch + col] = xv[src]);
    // Copies of stored values: re-storing them is exact.
    let cols = Tensor::store(&[g.positions(), patch], cols, x.dtype())?;
    let wt = w.reshape(&[out_ch, patch])?.transpose()?;
    let (_, _, mut acc) = matmul_acc(&cols, &wt, p.accum)?;
    add_bias(&mut acc, out_ch, bias);
    let y = positions_to_nchw(&acc, g, out_ch);
    Ok((Tensor::store(&[g.batch, out_ch, g.out_h, g.out_w], y, p.storage)?, cols))
}

fn positions_to_nchw(v: &[f32], g: &ConvGeom, ch: usize) -> Vec<f32> {
    let hw = g.out_h * g.out_w;
    let mut out = vec![0f32; v.len()];
    for b in 0..g.batch {
        for s in 0..hw {
            for c in 0..ch {
                out[(b * ch + c) * hw + s] = v[(b * hw + s) * ch + c];
            }
        }
    }
    out
}

fn nchw_to_positions(v: &[f32], g: &ConvGeom, ch: usize) -> Vec<f32> {
    let hw = g.out_h * g.out_w;
    let mut out = vec![0f32; v.len()];
    for b in 0..g.batch {
        for c in 0..ch {
            for s in 0..hw {
                out[(b * hw + s) * ch + c] = v[(b * ch + c) * hw + s];
            }
        }
    }
    out
}

pub(super) struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Option<Tensor>,
}

pub(super) fn conv2d_backward(dy: &Tensor, cols: &Tensor, w: &Tensor, g: &ConvGeom, need_input: bool, p: Precision) -> Result<ConvGrads> {
    let out_ch = w.shape()[0];
    let patch = g.patch_len();
    let dy2 = Tensor::store(&[g.positions(), out_ch], nchw_to_positions(&dy.to_f32_vec(), g, out_ch), dy.dtype())?;
    let weight = matmul(&cols.transpose()?, &dy2, p.accum, p.storage)?
        .transpose()?
        .reshape(w.shape())?;
    let bias = dy2.reduce_sum(0, p.storage)?;
    let input = if need_input {
        let w2 = w.reshape(&[out_ch, patch])?;
        let (_, _, dcols) = matmul_acc(&dy2, &w2, p.accum)?;
        // Overlapping taps are summed in f32 and rounded once.
        let mut dx = vec![0f32; g.batch * g.channels * g.height * g.width];
        g.for_each_tap(|row, col, src| dx[src] += dcols[row * patch + col]);
        Some(Tensor::store(&[g.batch, g.channels, g.height, g.width], dx, p.storage)?)
    } else {
        None
    };
    Ok(ConvGrads { weight, bias, input })
}

// ---------------------------------------------------------------- activations

#[derive(Clone, Copy, Debug)]
pub(super) enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn forward(self, x: &Tensor, p: Precision) -> Tensor {
        match self {
            Activation::Relu => x.map_to(p.storage, |v| if v > 0.0 { v } else { 0.0 }),
            Activation::LeakyRelu(s) => x.map_to(p.storage, |v| if v > 0.0 { v } else { s * v }),
            Activation::Tanh => x.map_to(p.storage, f32::tanh),
            Activation::Sigmoid => x.map_to(p.storage, sigmoid),
        }
    }

    /// Whether backward needs the layer input (otherwise the output).
    pub fn saves_input(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }

    /// `saved` is the input for rectifiers and the output for squashing functions.
    pub fn backward(self, dy: &Tensor, saved: &Tensor, p: Precision) -> Result<Tensor> {
        let out = match self {
            Activation::Relu => dy.zip_map(saved, |g, x| if x > 0.0 { g } else { 0.0 })?,
            Activation::LeakyRelu(s) => dy.zip_map(saved, |g, x| if x > 0.0 { g } else { s * g })?,
            Activation::Tanh => dy.zip_map(saved, |g, y| g * (1.0 - y * y))?,
            Activation::Sigmoid => dy.zip_map(saved, |g, y| g * y * (1.0 - y))?,
        };
        Ok(out.cast(p.storage))
    }
}

// ---------------------------------------------------------------- batch norm

/// Feature count and per-feature element layout of a batch-norm input.
pub(super) fn bn_layout(shape: &[usize], features: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != features || !(shape.len() == 2 || shape.len() == 4) {
        return Err(Error::shape(format!("batchnorm({features}) expects [B, {features}] or [B, {features}, H, W], got {shape:?}")));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], spatial))
}

/// Per-feature mean and biased variance, accumulated sequentially in `f32`.
pub(super) fn bn_stats(x: &[f32], batch: usize, features: usize, spatial: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (batch * spatial) as f32;
    let mut mean = vec![0f32; features];
    let mut var = vec![0f32; features];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut s = 0f32;
        for b in 0..batch {
            for &v in &x[(b * features + c) * spatial..(b * features + c + 1) * spatial] {
                s += v;
            }
        }
        *m = s / n;
    }
    for (c, vr) in var.iter_mut().enumerate() {
        let mut s = 0f32;
        for b in 0..batch {
            for &v in &x[(b * features + c) * spatial..(b * features + c + 1) * spatial] {
                let d = v - mean[c];
                s += d * d;
            }
        }
        *vr = s / n;
    }
    (mean, var)
}

pub(super) fn bn_apply(x: &Tensor, mean: &[f32], inv_std: &[f32], gamma: &Tensor, beta: &Tensor, spatial: usize, p: Precision) -> Result<Tensor> {
    let features = mean.len();
    let (g, b) = (gamma.to_f32_vec(), beta.to_f32_vec());
    let mut y = x.to_f32_vec();
    for (i, v) in y.iter_mut().enumerate() {
        let c = (i / spatial) % features;
        *v = g[c] * ((*v - mean[c]) * inv_std[c]) + b[c];
    }
    Tensor::store(x.shape(), y, p.storage)
}

pub(super) struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub input: Tensor,
}

pub(super) fn bn_backward(dy: &Tensor, x: &Tensor, mean: &[f32], inv_std: &[f32], gamma: &Tensor, spatial: usize, p: Precision) -> Result<BnGrads> {
    let features = mean.len();
    let batch = x.shape()[0];
    let n = (batch * spatial) as f32;
    let (xv, dyv, g) = (x.to_f32_vec(), dy.to_f32_vec(), gamma.to_f32_vec());
    let feature_of = |i: usize| (i / spatial) % features;
    let xhat: Vec<f32> = xv.iter().enumerate().map(|(i, &v)| (v - mean[feature_of(i)]) * inv_std[feature_of(i)]).collect();

    let mut dgamma = vec![0f32; features];
    let mut dbeta = vec![0f32; features];
    let mut sum_dxhat = vec![0f32; features];
    let mut sum_dxhat_xhat = vec![0f32; features];
    for i in 0..xv.len() {
        let c = feature_of(i);
        dgamma[c] += dyv[i] * xhat[i];
        dbeta[c] += dyv[i];
        let dxhat = dyv[i] * g[c];
        sum_dxhat[c] += dxhat;
        sum_dxhat_xhat[c] += dxhat * xhat[i];
    }
    let dx: Vec<f32> = (0..xv.len())
        .map(|i| {
            let c = feature_of(i);
            let dxhat = dyv[i] * g[c];
            inv_std[c] / n * (n * dxhat - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
        })
        .collect();
    Ok(BnGrads {
        gamma: Tensor::store(&[features], dgamma, p.storage)?,
        beta: Tensor::store(&[features], dbeta, p.storage)?,
        input: Tensor::store(x.shape(), dx, p.storage)?,
    })
}

/// Backward through batch norm with fixed (running) statistics.
pub(super) fn bn_backward_fixed(dy: &Tensor, x: &Tensor, mean: &[f32], inv_std: &[f32], gamma: &Tensor, spatial: usize, p: Precision) -> Result<BnGrads> {
    let features = mean.len();
    let (xv, dyv, g) = (x.to_f32_vec(), dy.to_f32_vec(), gamma.to_f32_vec());
    let mut dgamma = vec![0f32; features];
    let mut dbeta = vec![0f32; features];
    let mut dx = vec![0f32; xv.len()];
    for i in 0..xv.len() {
        let c = (i / spatial) % features;
        dgamma[c] += dyv[i] * (xv[i] - mean[c]) * inv_std[c];
        dbeta[c] += dyv[i];
        dx[i] = dyv[i] * g[c] * inv_std[c];
    }
    Ok(BnGrads {
        gamma: Tensor::store(&[features], dgamma, p.storage)?,
        beta: Tensor::store(&[features], dbeta, p.storage)?,
        input: Tensor::store(x.shape(), dx, p.storage)?,
    })
}

// ---------------------------------------------------------------- lstm

/// Saved state of one time step. `gates` holds activated `[i | f | g | o]`.
#[derive(Clone, Debug)]
pub(super) struct LstmStep {
    pub z: Tensor,
    pub gates: Tensor,
    pub c_prev: Tensor,
    pub c: Tensor,
}

pub(super) fn lstm_forward(x: &Tensor, w: &Tensor, bias: &Tensor, hidden: usize, p: Precision) -> Result<(Tensor, Vec<LstmStep>)> {
    let [batch, steps, inputs] = x.shape()[..] else {
        return Err(Error::shape(format!("lstm expects [B, T, in] input, got {:?}", x.shape())));
    };
    if w.shape() != [inputs + hidden, 4 * hidden] {
        return Err(Error::shape(format!("lstm weight {:?} does not match input {inputs} / hidden {hidden}", w.shape())));
    }
    check_len(bias, 4 * hidden, "lstm bias")?;
    let mut h = Tensor::zeros(&[batch, hidden], p.storage)?;
    let mut c = Tensor::zeros(&[batch, hidden], p.storage)?;
    let mut saved = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = x.slice(1, t, t + 1)?.reshape(&[batch, inputs])?.cast(p.storage);
        let z = xt.concat_cols(&h)?;
        let (_, n, mut pre) = matmul_acc(&z, w, p.accum)?;
        add_bias(&mut pre, n, bias);
        for row in pre.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j / hidden == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let gates = Tensor::store(&[batch, 4 * hidden], pre, p.storage)?;
        let gv = gates.to_f32_vec();
        let cv = c.to_f32_vec();
        let mut c_new = vec![0f32; batch * hidden];
        for b in 0..batch {
            let row = &gv[b * 4 * hidden..(b + 1) * 4 * hidden];
            for j in 0..hidden {
                let (i, f, g) = (row[j], row[hidden + j], row[2 * hidden + j]);
                c_new[b * hidden + j] = f * cv[b * hidden + j] + i * g;
            }
        }
        let c_new = Tensor::store(&[batch, hidden], c_new, p.storage)?;
        let cn = c_new.to_f32_vec();
        let h_new: Vec<f32> = (0..batch * hidden)
            .map(|k| {
                let (b, j) = (k / hidden, k % hidden);
                gv[b * 4 * hidden + 3 * hidden + j] * cn[k].tanh()
            })
            .collect();
        h = Tensor::store(&[batch, hidden], h_new, p.storage)?;
        saved.push(LstmStep { z, gates, c_prev: c, c: c_new.clone() });
        c = c_new;
    }
    Ok((h, saved))
}

pub(super) struct LstmGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Option<Tensor>,
}

pub(super) fn lstm_backward(dh_out: &Tensor, steps: &[LstmStep], input_shape: &[usize], w: &Tensor, hidden: usize, need_input: bool, p: Precision) -> Result<LstmGrads> {
    let [batch, _, inputs] = input_shape[..] else {
        return Err(Error::shape("lstm tape has a malformed input shape"));
    };
    let h4 = 4 * hidden;
    let wt = w.transpose()?;
    let mut dw_acc = vec![0f32; (inputs + hidden) * h4];
    let mut db_acc = vec![0f32; h4];
    let mut dx = vec![0f32; input_shape.iter().product()];
    let mut dh = dh_out.cast(p.storage);
    let mut dc = Tensor::zeros(&[batch, hidden], p.storage)?;

    for (t, step) in steps.iter().enumerate().rev() {
        let (gv, cp, cn) = (step.gates.to_f32_vec(), step.c_prev.to_f32_vec(), step.c.to_f32_vec());
        let (dhv, dcv) = (dh.to_f32_vec(), dc.to_f32_vec());
        let mut dpre = vec![0f32; batch * h4];
        let mut dc_prev = vec![0f32; batch * hidden];
        for b in 0..batch {
            let row = &gv[b * h4..(b + 1) * h4];
            for j in 0..hidden {
                let k = b * hidden + j;
                let (i, f, g, o) = (row[j], row[hidden + j], row[2 * hidden + j], row[3 * hidden + j]);
                let tc = cn[k].tanh();
                let d_o = dhv[k] * tc;
                let dct = dcv[k] + dhv[k] * o * (1.0 - tc * tc);
                let out = &mut dpre[b * h4..(b + 1) * h4];
                out[j] = dct * g * i * (1.0 - i);
                out[hidden + j] = dct * cp[k] * f * (1.0 - f);
                out[2 * hidden + j] = dct * i * (1.0 - g * g);
                out[3 * hidden + j] = d_o * o * (1.0 - o);
                dc_prev[k] = dct * f;
            }
        }
        let dpre = Tensor::store(&[batch, h4], dpre, p.storage)?;
        // Reductions across time stay in f32 and are rounded once at the end.
        let (_, _, dw_t) = matmul_acc(&step.z.transpose()?, &dpre, p.accum)?;
        for (a, v) in dw_acc.iter_mut().zip(&dw_t) {
            *a += v;
        }
        let dpv = dpre.to_f32_vec();
        for row in dpv.chunks(h4) {
            for (a, v) in db_acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let dz = matmul(&dpre, &wt, p.accum, p.storage)?;
        let dzv = dz.to_f32_vec();
        if need_input {
            for b in 0..batch {
                for k in 0..inputs {
                    dx[(b * input_shape[1] + t) * inputs + k] = dzv[b * (inputs + hidden) + k];
                }
            }
        }
        dh = dz.slice(1, inputs, inputs + hidden)?;
        dc = Tensor::store(&[batch, hidden], dc_prev, p.storage)?;
    }
    Ok(LstmGrads {
        weight: Tensor::store(w.shape(), dw_acc, p.storage)?,
        bias: Tensor::store(&[h4], db_acc, p.storage)?,
        input: if need_input { Some(Tensor::store(input_shape, dx, p.storage)?) } else { None },
    })
}

// ---------------------------------------------------------------- losses

/// Mean softmax cross-entropy over rows of `[B, C]` logits, all in `f32`.
/// Returns the loss and each row's log-normalizer.
pub(super) fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!("label {bad} out of range for {c} classes")));
    }
    let x = logits.to_f32_vec();
    let mut log_norm = Vec::with_capacity(b);
    let mut total = 0f32;
    for (row, &label) in x.chunks(c).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let sum = row.iter().fold(0f32, |s, &v| s + (v - max).exp());
        let lse = max + sum.ln();
        log_norm.push(lse);
        total += lse - row[label];
    }
    Ok((total / b as f32, log_norm))
}

pub(super) fn softmax_ce_backward(logits: &Tensor, log_norm: &[f32], labels: &[usize], scale: f32, p: Precision) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    let x = logits.to_f32_vec();
    let inv_b = 1.0 / b as f32;
    let mut g = vec![0f32; b * c];
    for i in 0..b {
        for j in 0..c {
            let prob = (x[i * c + j] - log_norm[i]).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            g[i * c + j] = (prob - target) * inv_b * scale;
        }
    }
    Tensor::store(&[b, c], g, p.storage)
}

pub(super) fn mse_forward(pred: &Tensor, target: &Tensor) -> Result<f32> {
    if pred.len() != target.len() || pred.shape()[0] != target.shape()[0] {
        return Err(Error::shape(format!("mse prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f32;
    let sum = pred.iter_f32().zip(target.iter_f32()).fold(0f32, |s, (y, t)| {
        let d = y - t;
        s + d * d
    });
    Ok(sum / n)
}

pub(super) fn mse_backward(pred: &Tensor, target: &Tensor, scale: f32, p: Precision) -> Result<Tensor> {
    let k = 2.0 / pred.len() as f32;
    let g = pred.iter_f32().zip(target.iter_f32()).map(|(y, t)| (y - t) * k * scale).collect();
    Tensor::store(pred.shape(), g, p.storage)
}
