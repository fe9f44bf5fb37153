use std::fmt;
use std::str::FromStr;

use crate::binary16::Half;
use crate::error::{Error, Result};

/// Default initial scale of the dynamic scaler.
pub const DEFAULT_DYNAMIC_SCALE: f32 = 32768.0;

fn is_power_of_two(x: f32) -> bool {
    x > 0.0 && x.is_finite() && {
        let bits = x.to_bits();
        (bits >> 23) & 0xFF != 0 && bits & 0x7F_FFFF == 0
    }
}

/// State of the dynamic scaler.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicScaler {
    pub scale: f32,
    pub growth_factor: f32,
    pub backoff_factor: f32,
    pub growth_interval: u32,
    pub steps_since_overflow: u32,
    /// Backoff never takes the scale below this.
    pub min_scale: f32,
}

impl DynamicScaler {
    pub fn new(scale: f32) -> DynamicScaler {
        DynamicScaler { scale, growth_factor: 2.0, backoff_factor: 0.5, growth_interval: 2000, steps_since_overflow: 0, min_scale: 1.0 }
    }
}

impl Default for DynamicScaler {
    fn default() -> DynamicScaler {
        DynamicScaler::new(DEFAULT_DYNAMIC_SCALE)
    }
}

/// Loss-scale factor, fixed or adjusted from overflow feedback.
#[derive(Clone, Debug, PartialEq)]
pub enum LossScaler {
    Constant { scale: f32 },
    Dynamic(DynamicScaler),
}

impl Default for LossScaler {
    fn default() -> LossScaler {
        LossScaler::Constant { scale: 1.0 }
    }
}

impl LossScaler {
    pub fn constant(scale: f32) -> LossScaler {
        LossScaler::Constant { scale }
    }

    pub fn dynamic(scale: f32) -> LossScaler {
        LossScaler::Dynamic(DynamicScaler::new(scale))
    }

    pub fn scale(&self) -> f32 {
        match self {
            LossScaler::Constant { scale } => *scale,
            LossScaler::Dynamic(d) => d.scale,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, LossScaler::Dynamic(_))
    }

    /// Scales and factors must be powers of two so that scaling only moves exponents.
    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, v: f32| {
            if is_power_of_two(v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be a positive power of two, got {v}")))
            }
        };
        match self {
            LossScaler::Constant { scale } => check("loss scale", *scale),
            LossScaler::Dynamic(d) => {
                check("loss scale", d.scale)?;
                check("min_scale", d.min_scale)?;
                check("growth_factor", d.growth_factor)?;
                check("backoff_factor", d.backoff_factor)?;
                if d.growth_factor <= 1.0 || d.backoff_factor >= 1.0 {
                    return Err(Error::Config("growth_factor must exceed 1 and backoff_factor must be below 1".into()));
                }
                if d.growth_interval == 0 {
                    return Err(Error::Config("growth_interval must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Bookkeeping after a step. Constant scalers never change.
    pub fn update(&mut self, overflow: bool) {
        let LossScaler::Dynamic(d) = self else { return };
        if overflow {
            d.scale = (d.scale * d.backoff_factor).max(d.min_scale);
            d.steps_since_overflow = 0;
        } else {
            d.steps_since_overflow += 1;
            if d.steps_since_overflow >= d.growth_interval {
                let grown = d.scale * d.growth_factor;
                if grown.is_finite() {
                    d.scale = grown;
                }
                d.steps_since_overflow = 0;
            }
        }
    }
}

/// Text form: `none`, `constant:S`, `dynamic` or `dynamic:S`.
impl fmt::Display for LossScaler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossScaler::Constant { scale } if *scale == 1.0 => f.write_str("none"),
            LossScaler::Constant { scale } => write!(f, "constant:{scale}"),
            LossScaler::Dynamic(d) => write!(f, "dynamic:{}", d.scale),
        }
    }
}

impl FromStr for LossScaler {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossScaler> {
        let s = s.trim();
        let number = |v: &str| v.trim().parse::<f32>().map_err(|_| Error::Config(format!("loss scale `{s}`: `{v}` is not a number")));
        let scaler = match s.split_once(':') {
            None if s == "none" => LossScaler::constant(1.0),
            None if s == "dynamic" => LossScaler::Dynamic(DynamicScaler::default()),
            Some(("constant", v)) => LossScaler::constant(number(v)?),
            Some(("dynamic", v)) => LossScaler::dynamic(number(v)?),
            _ => return Err(Error::Config(format!("loss scale `{s}`: expected none, constant:S, dynamic or dynamic:S"))),
        };
        scaler.validate()?;
        Ok(scaler)
    }
}

/// Largest power of two `P` with `P * max_abs_grad < 65504`.
pub fn suggest_constant_scale(max_abs_grad: f32) -> Result<f32> {
    if !max_abs_grad.is_finite() {
        return Err(Error::NonFinite(format!("cannot suggest a scale for max |grad| = {max_abs_grad}")));
    }
    if max_abs_grad <= 0.0 {
        return Err(Error::Domain(format!("max |grad| must be positive, got {max_abs_grad}")));
    }
    let limit = Half::MAX_F32 as f64;
    let m = max_abs_grad as f64;
    let mut e = (limit / m).log2().floor() as i32;
    while 2f64.powi(e) * m >= limit {
        e -= 1;
    }
    while 2f64.powi(e + 1) * m < limit {
        e += 1;
    }
    Ok(2f32.powi(e.clamp(-126, 127)))
}
