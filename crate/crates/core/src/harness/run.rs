use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use super::config::{RunConfig, Task};
use super::data::{gen_underflow_task, load_mnist, mnist_dir, synthetic_classify, Dataset, Split};
use crate::diagnostics::{HistogramHook, HistogramRecord};
use crate::engine::{MetricsWriter, StepReport, Trainer};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{DType, Tensor};

const EVAL_BATCH: usize = 1024;

pub const EPOCHS_HEADER: &str = "epoch,train_loss,test_loss,test_accuracy,skipped_steps,scale";

/// End-of-epoch metrics. `train_loss` is the mean loss of the epoch's
/// finite steps; test metrics come from an evaluation-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub skipped_steps: u64,
    pub scale: f32,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.test_loss, self.test_accuracy, self.skipped_steps, self.scale
        )
    }
}

/// A finished run held in memory.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochRecord>,
    pub histograms: Vec<HistogramRecord>,
    pub trainer: Trainer,
}

impl RunOutcome {
    pub fn final_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("runs have at least one epoch")
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.final_epoch();
        RunSummary {
            name: self.config.run.name.clone(),
            mode: self.config.policy.mode.to_string(),
            use_master: self.config.policy.use_master,
            loss_scale: self.config.policy.loss_scale.to_string(),
            final_train_loss: last.train_loss,
            final_test_loss: last.test_loss,
            final_accuracy: last.test_accuracy,
            best_accuracy: self.epochs.iter().map(|e| e.test_accuracy).fold(f64::NEG_INFINITY, f64::max),
            skipped_steps: self.steps.iter().filter(|s| s.skipped).count() as u64,
            final_scale: self.trainer.scale(),
            config_hash: self.config.hash(),
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut w = MetricsWriter::new(Vec::new()).expect("writing to memory");
        for s in &self.steps {
            w.write(s).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("ascii")
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{EPOCHS_HEADER}\n");
        for e in &self.epochs {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Default split sizes per task, overridable from `[data]`.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let d = &config.data;
    let seed = config.run.seed;
    match config.run.task {
        Task::SyntheticClassify => synthetic_classify(
            seed,
            d.train_samples.unwrap_or(4096),
            d.test_samples.unwrap_or(1024),
            d.features.unwrap_or(32),
            d.classes.unwrap_or(8),
        ),
        Task::SyntheticRegressSmallGrads => {
            Ok(gen_underflow_task(seed, d.train_samples.unwrap_or(8192), d.test_samples.unwrap_or(2048))?.0)
        }
        Task::Mnist => {
            let dir = d.dir.clone().unwrap_or_else(mnist_dir);
            let mut set = load_mnist(&dir)?;
            if let Some(n) = d.train_samples {
                set.train = set.train.truncate(n)?;
            }
            if let Some(n) = d.test_samples {
                set.test = set.test.truncate(n)?;
            }
            Ok(set)
        }
    }
}

/// Index of the largest entry in each row; ties go to the lower index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.to_f32_vec()
        .chunks(cols)
        .map(|row| row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

/// Evaluation-mode loss and accuracy over a whole split.
pub fn evaluate_split(trainer: &Trainer, split: &Split) -> Result<(f64, f64)> {
    let mut loss = 0f64;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, t) = split.batch(chunk)?;
        loss += f64::from(trainer.evaluate(&x, &t)?) * chunk.len() as f64;
        let pred = argmax_rows(&trainer.predict(&x)?);
        correct += pred.iter().zip(chunk).filter(|(p, &i)| **p == split.labels[i]).count();
    }
    let n = split.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `config` on `dataset` without touching the filesystem.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let model = Model::new(config.model.layers.clone())?;
    let mut init = model.init_params(config.run.seed, DType::F32)?;
    if config.model.init_scale != 1.0 {
        let k = config.model.init_scale;
        for (t, spec) in init.iter_mut().zip(model.param_specs()) {
            if spec.name == "weight" {
                *t = t.scale(k);
            }
        }
    }
    let mut trainer = Trainer::new(model, &init, config.policy(), config.sgd())?;
    let mut hook = (config.run.histogram_every > 0).then(|| HistogramHook::new(config.run.histogram_every));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let batch = config.run.batch_size;
    for epoch in 0..config.run.epochs {
        let order = dataset.train.epoch_order(config.run.seed, epoch);
        let (mut sum, mut finite) = (0f64, 0usize);
        let mut skipped = 0;
        for chunk in order.chunks(batch) {
            let (x, t) = dataset.train.batch(chunk)?;
            let report = match hook.as_mut() {
                Some(h) => trainer.train_step_observed(&x, &t, h)?,
                None => trainer.train_step(&x, &t)?,
            };
            if report.loss.is_finite() {
                sum += f64::from(report.loss);
                finite += 1;
            }
            skipped += u64::from(report.skipped);
            steps.push(report);
        }
        let (test_loss, test_accuracy) = evaluate_split(&trainer, &dataset.test)?;
        let record = EpochRecord {
            epoch,
            train_loss: if finite > 0 { sum / finite as f64 } else { f64::NAN },
            test_loss,
            test_accuracy,
            skipped_steps: skipped,
            scale: trainer.scale(),
        };
        info!(
            "{} epoch {epoch}: train_loss {:.6e} test_loss {:.6e} accuracy {:.4} skipped {skipped}",
            config.run.name, record.train_loss, record.test_loss, record.test_accuracy
        );
        epochs.push(record);
    }
    Ok(RunOutcome {
        config: config.clone(),
        steps,
        epochs,
        histograms: hook.map(|mut h| h.take_records()).unwrap_or_default(),
        trainer,
    })
}

/// Paths written by [`run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub epochs: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub histograms: Vec<PathBuf>,
    pub summary: RunSummary,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(contents.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Loads the dataset, trains, and writes everything under
/// `<output_dir>/<name>/`: `config.toml`, `metrics.csv`, `epochs.csv`,
/// `checkpoint.mxc`, `histograms/*.csv` and `manifest.txt`.
pub fn run(config: &RunConfig) -> Result<RunArtifacts> {
    let dataset = load_dataset(config)?;
    let outcome = train(config, &dataset)?;
    write_outcome(&outcome)
}

pub fn write_outcome(outcome: &RunOutcome) -> Result<RunArtifacts> {
    let config = &outcome.config;
    let dir = config.run.output_dir.join(&config.run.name);
    fs::create_dir_all(&dir)?;
    write_file(&dir.join("config.toml"), &config.to_toml())?;
    let metrics = dir.join("metrics.csv");
    write_file(&metrics, &outcome.metrics_csv())?;
    let epochs = dir.join("epochs.csv");
    write_file(&epochs, &outcome.epochs_csv())?;
    let checkpoint = dir.join("checkpoint.mxc");
    outcome.trainer.checkpoint()?.save(&checkpoint)?;

    let mut histograms = Vec::new();
    if !outcome.histograms.is_empty() {
        let hdir = dir.join("histograms");
        fs::create_dir_all(&hdir)?;
        for rec in &outcome.histograms {
            let path = hdir.join(rec.file_name(&config.run.name));
            let mut f = BufWriter::new(File::create(&path)?);
            rec.histogram.write_csv(&mut f)?;
            f.flush()?;
            histograms.push(path);
        }
    }

    let summary = outcome.summary();
    let mut manifest = String::new();
    let mut kv = |k: &str, v: &dyn fmt::Display| manifest.push_str(&format!("{k}={v}\n"));
    kv("name", &config.run.name);
    kv("config_sha256", &summary.config_hash);
    kv("version", &env!("CARGO_PKG_VERSION"));
    kv("task", &config.run.task);
    kv("steps", &outcome.steps.len());
    kv("skipped_steps", &summary.skipped_steps);
    kv("final_train_loss", &format!("{:e}", summary.final_train_loss));
    kv("final_test_loss", &format!("{:e}", summary.final_test_loss));
    kv("final_accuracy", &summary.final_accuracy);
    kv("best_accuracy", &summary.best_accuracy);
    kv("final_scale", &summary.final_scale);
    kv("histogram_files", &histograms.len());
    let manifest_path = dir.join("manifest.txt");
    write_file(&manifest_path, &manifest)?;
    Ok(RunArtifacts { dir, metrics, epochs, checkpoint, manifest: manifest_path, histograms, summary })
}

/// Final and best metrics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub mode: String,
    pub use_master: bool,
    pub loss_scale: String,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub skipped_steps: u64,
    pub final_scale: f32,
    pub config_hash: String,
}

pub const SUMMARY_HEADER: &str =
    "name,mode,use_master,loss_scale,final_train_loss,final_test_loss,final_accuracy,best_accuracy,skipped_steps,final_scale,config_sha256";

impl RunSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.mode,
            self.use_master,
            self.loss_scale,
            self.final_train_loss,
            self.final_test_loss,
            self.final_accuracy,
            self.best_accuracy,
            self.skipped_steps,
            self.final_scale,
            self.config_hash
        )
    }
}

/// Summaries of several runs. The first row is the reference for the
/// `loss_ratio` and `accuracy_gap` columns of the text table.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<RunSummary>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Some(base) = self.rows.first() else { return Ok(()) };
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>14}  {:>10}  {:>10}  {:>10}  {:>8}  {:>8}",
            "name", "train_loss", "test_loss", "loss_ratio", "accuracy", "acc_gap", "best", "skipped"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {:>10.3}  {:>10.4}  {:>+10.4}  {:>8.4}  {:>8}",
                r.name,
                r.final_train_loss,
                r.final_test_loss,
                r.final_test_loss / base.final_test_loss,
                r.final_accuracy,
                r.final_accuracy - base.final_accuracy,
                r.best_accuracy,
                r.skipped_steps
            )?;
        }
        Ok(())
    }
}

/// Runs every config on its own thread and collects the summaries in input
/// order. Each run writes its own artifacts.
pub fn compare(configs: &[RunConfig]) -> Result<Comparison> {
    let results: Vec<Result<RunArtifacts>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("run panicked".into())))).collect()
    });
    Ok(Comparison { rows: results.into_iter().map(|r| r.map(|a| a.summary)).collect::<Result<_>>()? })
}
