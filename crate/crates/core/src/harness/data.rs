use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Targets};
use crate::tensor::{DType, Tensor};

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "MIXPREC_DATA_DIR";
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

/// Inputs (`f32`, first axis is the sample), targets and class labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub tag: SplitTag,
    pub inputs: Tensor,
    pub targets: Targets,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(tag: SplitTag, inputs: Tensor, targets: Targets, labels: Vec<usize>) -> Result<Split> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if targets.len() != n || labels.len() != n {
            return Err(Error::Data(format!(
                "{tag} split has {n} inputs, {} targets and {} labels",
                targets.len(),
                labels.len()
            )));
        }
        Ok(Split { tag, inputs, targets, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        Ok((self.inputs.gather_rows(indices)?, self.targets.gather(indices)?))
    }

    /// The first `n` samples.
    pub fn truncate(self, n: usize) -> Result<Split> {
        if n >= self.len() {
            return Ok(self);
        }
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, targets) = self.batch(&idx)?;
        Split::new(self.tag, inputs, targets, self.labels[..n].to_vec())
    }

    /// Sample order for one epoch: a seeded permutation.
    pub fn epoch_order(&self, seed: u64, epoch: u32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(epoch) + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

fn one_hot_targets(labels: &[usize], classes: usize, scale: f32, noise: &[f32]) -> Result<Tensor> {
    let mut v = noise.to_vec();
    for (i, &c) in labels.iter().enumerate() {
        v[i * classes + c] += scale;
    }
    Tensor::store(&[labels.len(), classes], v, DType::F32)
}

fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| i % classes).collect();
    l.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    l
}

/// Gaussian clusters: class centres drawn from `N(0, 1)` per feature,
/// samples are centre plus `N(0, 1)` noise. Balanced classes.
pub fn synthetic_classify(seed: u64, train: usize, test: usize, features: usize, classes: usize) -> Result<Dataset> {
    if classes < 2 || features == 0 || train == 0 || test == 0 {
        return Err(Error::Config("synthetic_classify needs >= 2 classes and non-empty splits".into()));
    }
    let centres = Tensor::random_normal(&[classes, features], DType::F32, 0.0, 1.0, seed)?;
    let make = |tag: SplitTag, n: usize, stream: u64| -> Result<Split> {
        let y = labels(n, classes, seed ^ stream);
        let noise = Tensor::random_normal(&[n, features], DType::F32, 0.0, 1.0, seed ^ stream.rotate_left(17))?;
        let x = centres.gather_rows(&y)?.add(&noise)?;
        Split::new(tag, x, Targets::Classes(y.clone()), y)
    };
    Ok(Dataset {
        name: "synthetic_classify".into(),
        classes,
        train: make(SplitTag::Train, train, 0x1111)?,
        test: make(SplitTag::Test, test, 0x2222)?,
    })
}

/// Batch size the underflow task is calibrated for.
pub const UNDERFLOW_BATCH: usize = 1024;
pub const UNDERFLOW_CLASSES: usize = 4;
/// Height of the one-hot regression target.
pub const UNDERFLOW_TARGET: f32 = 2.5 / 65536.0;
/// Stddev of the noise added to every target element.
pub const UNDERFLOW_TARGET_NOISE: f32 = 1.0 / 131072.0;
/// Stddev of the noise added to the one-hot inputs.
pub const UNDERFLOW_INPUT_NOISE: f32 = 1.0 / 16.0;

/// Regression onto tiny one-hot targets.
///
/// Inputs are `e_c + N(0, 1/16^2)` and targets `2.5 * 2^-16 * e_c` plus
/// `N(0, 2^-34)` noise, for `C = 4` classes. The paired model is a bias-free
/// `linear(4,4)` under MSE, initialised at zero. With batch 1024 the MSE seed
/// gradient is `2 r / 4096` per element, so every residual `r` the task
/// produces maps below `2^-25` and flushes to zero in binary16 unless the loss
/// is scaled. Scaling by 8 lifts the same values into the subnormal range,
/// where the target noise is about half a quantum and keeps the rounding
/// unbiased.
pub fn gen_underflow_task(seed: u64, train: usize, test: usize) -> Result<(Dataset, Vec<LayerSpec>)> {
    let c = UNDERFLOW_CLASSES;
    if train == 0 || test == 0 {
        return Err(Error::Config("underflow task needs non-empty splits".into()));
    }
    let make = |tag: SplitTag, n: usize, stream: u64| -> Result<Split> {
        let y = labels(n, c, seed ^ stream);
        let eye = Tensor::store(&[c, c], (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect(), DType::F32)?;
        let jitter = Tensor::random_normal(&[n, c], DType::F32, 0.0, UNDERFLOW_INPUT_NOISE, seed ^ stream.rotate_left(7))?;
        let x = eye.gather_rows(&y)?.add(&jitter)?;
        let noise = Tensor::random_normal(&[n, c], DType::F32, 0.0, UNDERFLOW_TARGET_NOISE, seed ^ stream.rotate_left(29))?;
        let t = one_hot_targets(&y, c, UNDERFLOW_TARGET, &noise.to_f32_vec())?;
        Split::new(tag, x, Targets::Values(t), y)
    };
    let dataset = Dataset {
        name: "synthetic_regress_small_grads".into(),
        classes: c,
        train: make(SplitTag::Train, train, 0x3333)?,
        test: make(SplitTag::Test, test, 0x4444)?,
    };
    let layers = vec![LayerSpec::Linear { inputs: c, outputs: c, bias: false }, LayerSpec::MeanSquaredError];
    Ok((dataset, layers))
}

/// Directory holding the MNIST IDX files: `$MIXPREC_DATA_DIR` or `data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
}

/// Reads `name` or `name.gz` from `dir`.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let mut bytes = Vec::new();
    if plain.is_file() {
        File::open(&plain)?.read_to_end(&mut bytes)?;
    } else if gz.is_file() {
        GzDecoder::new(File::open(&gz)?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", gz.display())))?;
    } else {
        return Err(Error::Data(format!("missing {} (or .gz); set {DATA_DIR_ENV} to the MNIST directory", plain.display())));
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `[count, rows, cols]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("{what}: bad magic, expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::Data(format!("{what}: header promises {n}x{rows}x{cols} = {want} pixels, file has {}", body.len())));
    }
    Tensor::store(&[n, rows, cols], body.iter().map(|&p| f32::from(p) / 255.0).collect(), DType::F32)
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("{what}: bad magic, expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!("{what}: header promises {n} labels, file has {}", body.len())));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("{what}: label {bad} outside 0..=9")));
    }
    Ok(body.iter().map(|&l| usize::from(l)).collect())
}

fn load_split(dir: &Path, prefix: &str, tag: SplitTag) -> Result<Split> {
    let img_name = format!("{prefix}-images-idx3-ubyte");
    let lbl_name = format!("{prefix}-labels-idx1-ubyte");
    let images = parse_idx_images(&read_maybe_gz(dir, &img_name)?, &img_name)?;
    let labels = parse_idx_labels(&read_maybe_gz(dir, &lbl_name)?, &lbl_name)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Data(format!("{prefix}: {} images but {} labels", images.shape()[0], labels.len())));
    }
    Split::new(tag, images, Targets::Classes(labels.clone()), labels)
}

/// Loads `train-*` and `t10k-*` IDX files (optionally gzipped) from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    Ok(Dataset {
        name: "mnist".into(),
        classes: 10,
        train: load_split(dir, "train", SplitTag::Train)?,
        test: load_split(dir, "t10k", SplitTag::Test)?,
    })
}
