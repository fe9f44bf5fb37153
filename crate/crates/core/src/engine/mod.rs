//! The mixed-precision training step.
//!
//! Each [`Trainer::train_step`] runs these stages in order:
//!
//! 1. copy every `f32` master into its binary16 shadow
//! 2. forward pass on the shadows
//! 3. multiply the loss by the current scale `S`
//! 4. backward pass seeded with `S`
//! 5. widen weight gradients to `f32` and multiply by `1/S`
//! 6. look for infinities and NaNs in the unscaled gradients
//! 7. on overflow skip the update, otherwise clip (optional) and run SGD on the masters
//! 8. update the loss scaler

mod param;
mod scaler;
mod trainer;

pub use param::{clip_global_norm, detect_overflow, global_norm, sgd_step, sgd_step_half, unscale, Parameter, SgdConfig};
pub use scaler::{suggest_constant_scale, DynamicScaler, LossScaler, DEFAULT_DYNAMIC_SCALE};
pub use trainer::{
    ComputedGradients, MetricsWriter, PrecisionMode, StepObserver, StepReport, StepView, Trainer, TrainingPolicy, METRICS_HEADER,
};
