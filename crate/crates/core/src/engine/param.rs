use crate::binary16::{h_sub, Half};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// One weight: `f32` master, binary16 shadow and `f32` momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    master: Tensor,
    shadow: Tensor,
    momentum: Tensor,
}

impl Parameter {
    /// Master from `init` (widened if needed), fresh shadow, zero momentum.
    pub fn new(init: &Tensor) -> Parameter {
        let master = init.cast(DType::F32);
        let shadow = master.cast(DType::F16);
        let momentum = Tensor::zeros(master.shape(), DType::F32).expect("shape of an existing tensor");
        Parameter { master, shadow, momentum }
    }

    pub fn from_parts(master: Tensor, shadow: Tensor, momentum: Tensor) -> Result<Parameter> {
        if master.dtype() != DType::F32 || shadow.dtype() != DType::F16 || momentum.dtype() != DType::F32 {
            return Err(Error::shape("parameter parts must be f32 master, f16 shadow, f32 momentum"));
        }
        if master.shape() != shadow.shape() || master.shape() != momentum.shape() {
            return Err(Error::shape(format!(
                "parameter parts disagree: {:?} / {:?} / {:?}",
                master.shape(),
                shadow.shape(),
                momentum.shape()
            )));
        }
        Ok(Parameter { master, shadow, momentum })
    }

    pub fn master(&self) -> &Tensor {
        &self.master
    }

    pub fn shadow(&self) -> &Tensor {
        &self.shadow
    }

    pub fn momentum(&self) -> &Tensor {
        &self.momentum
    }

    pub fn shape(&self) -> &[usize] {
        self.master.shape()
    }

    /// `shadow = cast(master, F16)`.
    pub fn sync_shadow(&mut self) {
        self.shadow = self.master.cast(DType::F16);
    }
}

/// SGD with optional (Nesterov) momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn plain(lr: f32) -> SgdConfig {
        SgdConfig { lr, momentum: 0.0, nesterov: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Weight gradients widened to `f32` and multiplied by `1 / scale`.
pub fn unscale(grads: &[Tensor], scale: f32) -> Vec<Tensor> {
    let inv = 1.0 / scale;
    grads.iter().map(|g| g.map_to(DType::F32, |v| v * inv)).collect()
}

/// True iff any element is infinite or NaN.
pub fn detect_overflow(grads: &[Tensor]) -> bool {
    grads.iter().any(|g| !g.all_finite())
}

/// Global L2 norm, accumulated sequentially in `f32`.
pub fn global_norm(grads: &[Tensor]) -> f32 {
    grads.iter().flat_map(|g| g.iter_f32()).fold(0f32, |s, v| s + v * v).sqrt()
}

/// Rescales `grads` so that their global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], threshold: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > threshold {
        let k = threshold / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

fn momentum_update(buf: &mut Tensor, g: &Tensor, cfg: &SgdConfig) -> Result<Tensor> {
    // buf = momentum * buf + g; update = g + momentum * buf (Nesterov) or buf.
    let mu = cfg.momentum;
    *buf = buf.zip_map(g, |b, g| mu * b + g)?;
    if cfg.nesterov {
        g.zip_map(buf, |g, b| g + mu * b)
    } else {
        Ok(buf.clone())
    }
}

fn check_step_inputs(params: &[Parameter], grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("optimizer received a non-finite gradient".into()));
        }
    }
    Ok(())
}

/// One step on the `f32` masters, then `sync_shadow`. Everything runs in `f32`.
pub fn sgd_step(params: &mut [Parameter], grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    check_step_inputs(params, grads, cfg)?;
    for (p, g) in params.iter_mut().zip(grads) {
        let g = g.cast(DType::F32);
        let update = momentum_update(&mut p.momentum, &g, cfg)?;
        let lr = cfg.lr;
        p.master = p.master.zip_map(&update, |w, u| w - lr * u)?;
        p.sync_shadow();
    }
    Ok(())
}

/// The same step applied to the binary16 weight directly (no master copy):
/// `lr * update` is rounded to binary16 and subtracted in binary16. The
/// master mirrors the shadow afterwards.
pub fn sgd_step_half(params: &mut [Parameter], grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    check_step_inputs(params, grads, cfg)?;
    for (p, g) in params.iter_mut().zip(grads) {
        let g = g.cast(DType::F32);
        let update = momentum_update(&mut p.momentum, &g, cfg)?;
        let lr = cfg.lr;
        let w = p.shadow.as_f16().expect("shadow is f16");
        let next: Vec<Half> = w.iter().zip(update.iter_f32()).map(|(&w, u)| h_sub(w, Half::from_f32(lr * u))).collect();
        p.shadow = Tensor::from_halves(p.shadow.shape(), next)?;
        p.master = p.shadow.cast(DType::F32);
    }
    Ok(())
}
