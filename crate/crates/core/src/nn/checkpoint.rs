//! Model checkpoints: a `key=value` text manifest followed by tensor containers.
//!
//! ```text
//! mixprec-checkpoint 1
//! layer.0=linear(4,2)
//! layer.1=mse
//! meta.iteration=120
//! entry.0=param.0.weight
//! entry.1=param.0.bias
//! end
//! <one tensor container per entry, in entry order>
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{LayerSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

const HEADER: &str = "mixprec-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<LayerSpec>,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

impl Checkpoint {
    /// Parameters as `param.<key>` plus batch-norm running statistics as
    /// `running.<layer>.mean` / `running.<layer>.var`.
    pub fn from_model(model: &Model, params: &[Tensor]) -> Result<Checkpoint> {
        if params.len() != model.param_specs().len() {
            return Err(Error::shape(format!("model has {} parameters, got {}", model.param_specs().len(), params.len())));
        }
        let mut entries: Vec<(String, Tensor)> =
            model.param_specs().iter().zip(params).map(|(s, t)| (format!("param.{}", s.key()), t.clone())).collect();
        for layer in 0..model.layers().len() {
            if let Some((mean, var)) = model.running_stats(layer) {
                entries.push((format!("running.{layer}.mean"), Tensor::from_values(&[mean.len()], DType::F32, mean)?));
                entries.push((format!("running.{layer}.var"), Tensor::from_values(&[var.len()], DType::F32, var)?));
            }
        }
        Ok(Checkpoint { layers: model.layers().to_vec(), meta: BTreeMap::new(), entries })
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) {
        let key = key.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((key, tensor)),
        }
    }

    /// Rebuilds the model (with running statistics) and its parameters.
    pub fn restore(&self) -> Result<(Model, Vec<Tensor>)> {
        let mut model = Model::new(self.layers.clone())?;
        let params = model
            .param_specs()
            .iter()
            .map(|s| {
                let key = format!("param.{}", s.key());
                let t = self.get(&key).ok_or_else(|| bad(format!("missing entry `{key}`")))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(bad(format!("`{key}` has shape {:?}, layer expects {:?}", t.shape(), s.shape)));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        for layer in 0..self.layers.len() {
            if model.running_stats(layer).is_some() {
                if let (Some(m), Some(v)) = (self.get(&format!("running.{layer}.mean")), self.get(&format!("running.{layer}.var"))) {
                    model.set_running_stats(layer, m.to_f32_vec(), v.to_f32_vec())?;
                }
            }
        }
        Ok((model, params))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(w, "layer.{i}={l}")?;
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("meta entry `{k}` cannot be written on one line")));
            }
            writeln!(w, "meta.{k}={v}")?;
        }
        for (i, (k, _)) in self.entries.iter().enumerate() {
            writeln!(w, "entry.{i}={k}")?;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.entries {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Checkpoint> {
        let mut line = String::new();
        let mut next_line = |line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(bad("manifest ends before `end`"));
            }
            let trimmed = line.trim_end_matches(['\n', '\r']).len();
            line.truncate(trimmed);
            Ok(())
        };
        next_line(&mut line)?;
        if line != HEADER {
            return Err(bad(format!("expected `{HEADER}`, found `{line}`")));
        }
        let mut layers = Vec::new();
        let mut meta = BTreeMap::new();
        let mut keys = Vec::new();
        loop {
            next_line(&mut line)?;
            if line == "end" {
                break;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("malformed manifest line `{line}`")))?;
            let indexed = |prefix: &str, len: usize| -> Result<Option<()>> {
                match key.strip_prefix(prefix) {
                    Some(i) if i.parse::<usize>().ok() == Some(len) => Ok(Some(())),
                    Some(_) => Err(bad(format!("`{key}` out of order"))),
                    None => Ok(None),
                }
            };
            if indexed("layer.", layers.len())?.is_some() {
                layers.push(value.parse::<LayerSpec>()?);
            } else if indexed("entry.", keys.len())?.is_some() {
                keys.push(value.to_string());
            } else if let Some(k) = key.strip_prefix("meta.") {
                meta.insert(k.to_string(), value.to_string());
            } else {
                return Err(bad(format!("unknown manifest key `{key}`")));
            }
        }
        let entries = keys
            .into_iter()
            .map(|k| {
                let t = read_tensor(r).map_err(|e| bad(format!("entry `{k}`: {e}")))?;
                Ok((k, t))
            })
            .collect::<Result<_>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after the last entry"));
        }
        Ok(Checkpoint { layers, meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
    }
}
