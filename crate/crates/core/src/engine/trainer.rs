use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;

use super::param::{clip_global_norm, detect_overflow, global_norm, sgd_step, sgd_step_half, unscale, Parameter, SgdConfig};
use super::scaler::LossScaler;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Gradients, Mode, Model, Precision, Targets};
use crate::tensor::{AccumMode, DType, Tensor};

/// Which arithmetic a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrecisionMode {
    /// Everything in `f32`, no loss scaling.
    Fp32Baseline,
    /// Everything in `f32` but with the loss-scaling pipeline active, to
    /// check that scaling by itself changes nothing.
    Fp32Reference,
    /// Binary16 weights, activations and gradients.
    MixedPrecision,
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecisionMode::Fp32Baseline => "fp32",
            PrecisionMode::Fp32Reference => "fp32_reference",
            PrecisionMode::MixedPrecision => "mixed",
        })
    }
}

impl FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PrecisionMode> {
        match s.trim() {
            "fp32" | "baseline" => Ok(PrecisionMode::Fp32Baseline),
            "fp32_reference" | "reference" => Ok(PrecisionMode::Fp32Reference),
            "mixed" | "mp" => Ok(PrecisionMode::MixedPrecision),
            other => Err(Error::Config(format!("unknown precision mode `{other}` (fp32, fp32_reference, mixed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPolicy {
    pub mode: PrecisionMode,
    /// Keep an `f32` master copy (mixed precision only).
    pub use_master: bool,
    pub accum: AccumMode,
    pub scaler: LossScaler,
    /// Global-norm clipping threshold applied to unscaled gradients.
    pub clip_threshold: Option<f32>,
}

impl TrainingPolicy {
    pub fn baseline() -> TrainingPolicy {
        TrainingPolicy { mode: PrecisionMode::Fp32Baseline, use_master: true, accum: AccumMode::Acc32, scaler: LossScaler::constant(1.0), clip_threshold: None }
    }

    pub fn mixed(scaler: LossScaler) -> TrainingPolicy {
        TrainingPolicy { mode: PrecisionMode::MixedPrecision, scaler, ..TrainingPolicy::baseline() }
    }

    pub fn reference(scaler: LossScaler) -> TrainingPolicy {
        TrainingPolicy { mode: PrecisionMode::Fp32Reference, scaler, ..TrainingPolicy::baseline() }
    }

    pub fn validate(&self) -> Result<()> {
        self.scaler.validate()?;
        if self.mode != PrecisionMode::MixedPrecision {
            if self.accum != AccumMode::Acc32 {
                return Err(Error::Config(format!("{} runs require acc32", self.mode)));
            }
            if !self.use_master {
                return Err(Error::Config(format!("{} runs always update f32 weights", self.mode)));
            }
        }
        if self.mode == PrecisionMode::Fp32Baseline && self.scaler != LossScaler::constant(1.0) {
            return Err(Error::Config("the fp32 baseline does not scale the loss".into()));
        }
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        match self.mode {
            PrecisionMode::MixedPrecision => Precision::new(DType::F16, self.accum),
            _ => Precision::FP32,
        }
    }
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f32,
    pub scaled_loss: f32,
    pub overflow: bool,
    pub skipped: bool,
    /// Scale used by this step.
    pub scale: f32,
    /// Norm of the unscaled gradients before clipping.
    pub grad_norm: f32,
}

pub const METRICS_HEADER: &str = "iteration,loss,scale,overflow,skipped,grad_norm";

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.loss, self.scale, self.overflow as u8, self.skipped as u8, self.grad_norm
        )
    }
}

/// Appends step reports to a metrics CSV.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<MetricsWriter<W>> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, r: &StepReport) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Read-only view of a step's gradients, handed to observers.
pub struct StepView<'a> {
    pub iteration: u64,
    pub scale: f32,
    /// Weight and activation gradients as produced by backward (still scaled).
    pub grads: &'a Gradients,
    /// Weight gradients after unscaling, in `f32`.
    pub unscaled: &'a [Tensor],
}

pub trait StepObserver {
    fn observe(&mut self, view: &StepView<'_>);
}

/// A model, its parameters and the optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    params: Vec<Parameter>,
    policy: TrainingPolicy,
    sgd: SgdConfig,
    iteration: u64,
}

/// Gradients of one batch before they are applied.
#[derive(Clone, Debug)]
pub struct ComputedGradients {
    pub loss: f32,
    pub scaled_loss: f32,
    pub scale: f32,
    pub grads: Gradients,
}

impl Trainer {
    pub fn new(model: Model, init: &[Tensor], policy: TrainingPolicy, sgd: SgdConfig) -> Result<Trainer> {
        policy.validate()?;
        sgd.validate()?;
        let specs = model.param_specs();
        if init.len() != specs.len() {
            return Err(Error::shape(format!("model has {} parameters, got {}", specs.len(), init.len())));
        }
        let mut params: Vec<Parameter> = init.iter().map(Parameter::new).collect();
        if policy.mode == PrecisionMode::MixedPrecision && !policy.use_master {
            // Without a master the binary16 weight is the only copy.
            for p in &mut params {
                *p = Parameter::from_parts(p.shadow().cast(DType::F32), p.shadow().clone(), p.momentum().clone())?;
            }
        }
        Ok(Trainer { model, params, policy, sgd, iteration: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn policy(&self) -> &TrainingPolicy {
        &self.policy
    }

    pub fn sgd(&self) -> &SgdConfig {
        &self.sgd
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn scale(&self) -> f32 {
        self.policy.scaler.scale()
    }

    /// The tensors the forward pass consumes: shadows in mixed precision,
    /// masters otherwise.
    pub fn working_params(&self) -> Vec<Tensor> {
        match self.policy.mode {
            PrecisionMode::MixedPrecision => self.params.iter().map(|p| p.shadow().clone()).collect(),
            _ => self.params.iter().map(|p| p.master().clone()).collect(),
        }
    }

    /// Stages 1 to 4: sync shadows, forward, scale the loss, backward seeded with the scale.
    pub fn compute_gradients(&mut self, input: &Tensor, targets: &Targets) -> Result<ComputedGradients> {
        if self.policy.use_master {
            for p in &mut self.params {
                p.sync_shadow();
            }
        }
        let precision = self.policy.precision();
        let working = self.working_params();
        let input = input.cast(precision.storage);
        let (loss, tape) = self.model.forward(&working, &input, targets, precision, Mode::Train)?;
        if !loss.is_finite() && self.policy.mode == PrecisionMode::Fp32Baseline {
            return Err(Error::NonFinite(format!("baseline loss is {loss} at iteration {}", self.iteration)));
        }
        let scale = self.scale();
        let grads = self.model.backward(&working, &tape, scale)?;
        Ok(ComputedGradients { loss, scaled_loss: loss * scale, scale, grads })
    }

    /// Stages 5 to 8: unscale, detect overflow, skip or clip and update, scaler bookkeeping.
    pub fn apply_gradients(&mut self, computed: &ComputedGradients, observer: Option<&mut dyn StepObserver>) -> Result<StepReport> {
        let scale = computed.scale;
        let mut unscaled = unscale(&computed.grads.params, scale);
        if let Some(obs) = observer {
            obs.observe(&StepView { iteration: self.iteration, scale, grads: &computed.grads, unscaled: &unscaled });
        }
        let overflow = detect_overflow(&unscaled) || !computed.loss.is_finite();
        let grad_norm;
        if overflow {
            grad_norm = global_norm(&unscaled);
            if !self.policy.scaler.is_dynamic() {
                warn!("gradient overflow at iteration {} with constant scale {scale}; update skipped", self.iteration);
            }
        } else {
            grad_norm = match self.policy.clip_threshold {
                Some(c) => clip_global_norm(&mut unscaled, c),
                None => global_norm(&unscaled),
            };
            if self.policy.mode == PrecisionMode::MixedPrecision && !self.policy.use_master {
                sgd_step_half(&mut self.params, &unscaled, &self.sgd)?;
            } else {
                sgd_step(&mut self.params, &unscaled, &self.sgd)?;
            }
        }
        self.policy.scaler.update(overflow);
        let report = StepReport {
            iteration: self.iteration,
            loss: computed.loss,
            scaled_loss: computed.scaled_loss,
            overflow,
            skipped: overflow,
            scale,
            grad_norm,
        };
        self.iteration += 1;
        Ok(report)
    }

    pub fn train_step(&mut self, input: &Tensor, targets: &Targets) -> Result<StepReport> {
        let computed = self.compute_gradients(input, targets)?;
        self.apply_gradients(&computed, None)
    }

    pub fn train_step_observed(&mut self, input: &Tensor, targets: &Targets, observer: &mut dyn StepObserver) -> Result<StepReport> {
        let computed = self.compute_gradients(input, targets)?;
        self.apply_gradients(&computed, Some(observer))
    }

    /// Evaluation-mode output of the last layer before the loss.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let precision = self.policy.precision();
        self.model.predict(&self.working_params(), &input.cast(precision.storage), precision)
    }

    pub fn evaluate(&self, input: &Tensor, targets: &Targets) -> Result<f32> {
        let precision = self.policy.precision();
        self.model.evaluate(&self.working_params(), &input.cast(precision.storage), targets, precision)
    }

    /// Model checkpoint with master, shadow and momentum per parameter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model, &self.working_params())?;
        for (spec, p) in self.model.param_specs().iter().zip(&self.params) {
            ck.insert(format!("master.{}", spec.key()), p.master().clone());
            ck.insert(format!("shadow.{}", spec.key()), p.shadow().clone());
            ck.insert(format!("momentum.{}", spec.key()), p.momentum().clone());
        }
        ck.meta.insert("iteration".into(), self.iteration.to_string());
        ck.meta.insert("mode".into(), self.policy.mode.to_string());
        ck.meta.insert("use_master".into(), self.policy.use_master.to_string());
        ck.meta.insert("accum".into(), self.policy.accum.to_string());
        ck.meta.insert("loss_scale".into(), self.policy.scaler.to_string());
        if let LossScaler::Dynamic(d) = &self.policy.scaler {
            ck.meta.insert("steps_since_overflow".into(), d.steps_since_overflow.to_string());
        }
        Ok(ck)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output. The policy and
    /// optimizer settings come from the caller; the dynamic scaler state and
    /// iteration count come from the checkpoint.
    pub fn restore(ck: &Checkpoint, mut policy: TrainingPolicy, sgd: SgdConfig) -> Result<Trainer> {
        let (model, working) = ck.restore()?;
        let bad = |detail: String| Error::Format { what: "checkpoint", detail };
        let mut params = Vec::with_capacity(working.len());
        for spec in model.param_specs() {
            let get = |prefix: &str| ck.get(&format!("{prefix}.{}", spec.key())).cloned().ok_or_else(|| bad(format!("missing {prefix}.{}", spec.key())));
            params.push(Parameter::from_parts(get("master")?, get("shadow")?, get("momentum")?)?);
        }
        let number = |key: &str| -> Result<Option<u64>> {
            ck.meta.get(key).map(|v| v.parse::<u64>().map_err(|_| bad(format!("meta.{key} = `{v}` is not an integer")))).transpose()
        };
        let iteration = number("iteration")?.unwrap_or(0);
        if let (LossScaler::Dynamic(d), Some(saved)) = (&mut policy.scaler, ck.meta.get("loss_scale")) {
            if let LossScaler::Dynamic(s) = saved.parse::<LossScaler>()? {
                d.scale = s.scale;
            }
            d.steps_since_overflow = number("steps_since_overflow")?.unwrap_or(0) as u32;
        }
        policy.validate()?;
        sgd.validate()?;
        Ok(Trainer { model, params, policy, sgd, iteration })
    }
}
