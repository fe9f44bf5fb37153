//! Run configuration files.
//!
//! A config is a TOML document with four sections plus an optional `[data]`:
//!
//! ```toml
//! [run]
//! name = "mp_scale8"
//! task = "synthetic_regress_small_grads"   # synthetic_classify | synthetic_regress_small_grads | mnist
//! seed = 7
//! epochs = 12
//! batch_size = 1024
//! output_dir = "runs"          # optional
//! histogram_every = 0          # optional; 0 disables gradient histograms
//!
//! [data]                       # optional; defaults depend on the task
//! train_samples = 8192
//! test_samples = 2048
//!
//! [model]
//! layers = ["linear(4,4,nobias)", "mse"]
//! init_scale = 0.0             # optional; multiplies the LeCun stddev
//!
//! [optimizer]
//! lr = 4.0
//! momentum = 0.0               # optional
//! nesterov = false             # optional
//!
//! [policy]
//! mode = "mixed"               # fp32 | fp32_reference | mixed
//! use_master = true            # optional
//! accum = "acc32"              # optional; acc32 | acc16
//! loss_scale = "constant:8"    # optional; none | constant:S | dynamic | dynamic:S
//! clip_threshold = 5.0         # optional
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{LossScaler, PrecisionMode, SgdConfig, TrainingPolicy};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::tensor::AccumMode;

mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

mod text_list {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::ser::SerializeSeq;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for item in v {
            seq.serialize_element(&item.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        Vec::<String>::deserialize(d)?.iter().map(|s| s.parse().map_err(de::Error::custom)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    SyntheticClassify,
    SyntheticRegressSmallGrads,
    Mnist,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::SyntheticClassify => "synthetic_classify",
            Task::SyntheticRegressSmallGrads => "synthetic_regress_small_grads",
            Task::Mnist => "mnist",
        })
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

fn default_one() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub task: Task,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub histogram_every: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// MNIST directory; overrides the environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(with = "text_list")]
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_one")]
    pub init_scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub nesterov: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(with = "text")]
    pub mode: PrecisionMode,
    #[serde(default = "default_true")]
    pub use_master: bool,
    #[serde(default, with = "text")]
    pub accum: AccumMode,
    #[serde(default, with = "text")]
    pub loss_scale: LossScaler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_threshold: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub policy: PolicySection,
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        text.parse().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn policy(&self) -> TrainingPolicy {
        TrainingPolicy {
            mode: self.policy.mode,
            use_master: self.policy.use_master,
            accum: self.policy.accum,
            scaler: self.policy.loss_scale.clone(),
            clip_threshold: self.policy.clip_threshold,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.optimizer.lr, momentum: self.optimizer.momentum, nesterov: self.optimizer.nesterov }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{name}: {msg}")),
            other => other,
        };
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name `{}` must be a non-empty file name", self.run.name)));
        }
        if self.run.epochs == 0 {
            return Err(Error::Config("run.epochs must be positive".into()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be positive".into()));
        }
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            return Err(Error::Config("model.init_scale must be finite and >= 0".into()));
        }
        crate::nn::Model::new(self.model.layers.clone()).map_err(|e| field("model.layers", e))?;
        self.sgd().validate().map_err(|e| field("optimizer", e))?;
        self.policy().validate().map_err(|e| field("policy", e))
    }

    /// This config switched to one arm of the ablation matrix:
    ///
    /// - `fp32`: baseline, no scaling
    /// - `fp32_reference`: `f32` with this config's loss scale
    /// - `mp`: binary16 with master weights and this config's loss scale
    /// - `mp_noscale`: binary16 with master weights, no scaling
    /// - `mp_nomaster`: binary16 without master weights, this config's loss scale
    pub fn with_arm(&self, arm: &str) -> Result<RunConfig> {
        let mut c = self.clone();
        let p = &mut c.policy;
        let (mode, master) = match arm {
            "fp32" => {
                p.loss_scale = LossScaler::default();
                (PrecisionMode::Fp32Baseline, true)
            }
            "fp32_reference" => (PrecisionMode::Fp32Reference, true),
            "mp" => (PrecisionMode::MixedPrecision, true),
            "mp_noscale" => {
                p.loss_scale = LossScaler::default();
                (PrecisionMode::MixedPrecision, true)
            }
            "mp_nomaster" => (PrecisionMode::MixedPrecision, false),
            other => {
                return Err(Error::Config(format!(
                    "unknown arm `{other}` (fp32, fp32_reference, mp, mp_noscale, mp_nomaster)"
                )))
            }
        };
        p.mode = mode;
        p.use_master = master;
        c.run.name = format!("{}_{arm}", self.run.name);
        c.validate()?;
        Ok(c)
    }

    /// Copies of this config with one dotted field (`section.key`) set to
    /// each of `values`. Values are read as TOML literals when they parse as
    /// one and as strings otherwise. Run names get a `_<key>=<value>` suffix.
    /// The field `policy` takes arm names, see [`RunConfig::with_arm`].
    pub fn vary(&self, field: &str, values: &[&str]) -> Result<Vec<RunConfig>> {
        if field == "policy" {
            return values.iter().map(|arm| self.with_arm(arm)).collect();
        }
        let (section, key) = field
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("--vary field `{field}` must look like section.key")))?;
        let base = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        values
            .iter()
            .map(|raw| {
                let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                    .ok()
                    .and_then(|mut t| t.remove("v"))
                    .unwrap_or_else(|| toml::Value::String(raw.to_string()));
                let mut doc = base.clone();
                let table = doc
                    .get_mut(section)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("--vary: no section `{section}`")))?;
                table.insert(key.to_string(), value);
                let mut config: RunConfig = doc
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("--vary {field}={raw}: {}", e.message())))?;
                if field != "run.name" {
                    config.run.name = format!("{}_{key}={raw}", self.run.name).replace(['/', '\\', ':'], "-");
                }
                config.validate().map_err(|e| field_err(field, raw, e))?;
                Ok(config)
            })
            .collect()
    }
}

fn field_err(field: &str, raw: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("--vary {field}={raw}: {msg}")),
        other => other,
    }
}
