//! Dense row-major tensors holding either binary16 patterns or `f32` values.
//!
//! Tensors are values: every operation returns a new tensor. Any F16
//! result is computed in `f32` and rounded exactly once when it is stored.
//! Reductions always accumulate in `f32`, sequentially along the reduced
//! axis, so results are reproducible bit for bit.

mod container;
mod matmul;
mod random;

use std::fmt;
use std::str::FromStr;

use crate::binary16::Half;
use crate::error::{Error, Result};

pub use container::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use matmul::{matmul, matmul_acc};

/// Element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F16,
    F32,
}

impl DType {
    /// Code used in the binary tensor container.
    pub fn code(self) -> u8 {
        match self {
            DType::F16 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F16),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F16 => "f16",
            DType::F32 => "f32",
        })
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<DType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f16" | "fp16" | "half" => Ok(DType::F16),
            "f32" | "fp32" | "single" => Ok(DType::F32),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Accumulator precision for dot products.
///
/// `Acc32` sums exact products in `f32` and rounds once on store. `Acc16`
/// rounds the running sum to binary16 after every multiply-add, which is
/// how FP16-only multiply-add hardware behaves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AccumMode {
    Acc16,
    #[default]
    Acc32,
}

impl fmt::Display for AccumMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccumMode::Acc16 => "acc16",
            AccumMode::Acc32 => "acc32",
        })
    }
}

impl FromStr for AccumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<AccumMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acc16" | "f16" => Ok(AccumMode::Acc16),
            "acc32" | "f32" => Ok(AccumMode::Acc32),
            other => Err(Error::Config(format!("unknown accumulation mode `{other}`"))),
        }
    }
}

/// Element buffer of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F16(Vec<Half>),
    F32(Vec<f32>),
}

impl Storage {
    /// Rounds `values` into `dtype` storage, once per element.
    pub fn from_f32(values: Vec<f32>, dtype: DType) -> Storage {
        match dtype {
            DType::F32 => Storage::F32(values),
            DType::F16 => Storage::F16(values.into_iter().map(Half::from_f32).collect()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Storage::F16(v) => v.len(),
            Storage::F32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!("dimension {d} in {shape:?} must be positive")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], storage: Storage) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if storage.len() != n {
            return Err(Error::shape(format!(
                "{} elements do not fill shape {shape:?} ({n} elements)",
                storage.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), storage })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Tensor::full(shape, dtype, 0.0)
    }

    /// Every element set to `value`, rounded to binary16 on store for F16.
    pub fn full(shape: &[usize], dtype: DType, value: f32) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let storage = match dtype {
            DType::F32 => Storage::F32(vec![value; n]),
            DType::F16 => Storage::F16(vec![Half::from_f32(value); n]),
        };
        Tensor::new(shape, storage)
    }

    pub fn from_values(shape: &[usize], dtype: DType, values: &[f32]) -> Result<Tensor> {
        Tensor::store(shape, values.to_vec(), dtype)
    }

    /// Builds a tensor from `f32` results, rounding each once into `dtype`.
    pub fn store(shape: &[usize], values: Vec<f32>, dtype: DType) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if values.len() != n {
            return Err(Error::shape(format!(
                "{} values do not fill shape {shape:?} ({n} elements)",
                values.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), storage: Storage::from_f32(values, dtype) })
    }

    pub fn from_halves(shape: &[usize], values: Vec<Half>) -> Result<Tensor> {
        Tensor::new(shape, Storage::F16(values))
    }

    pub fn scalar(dtype: DType, value: f32) -> Tensor {
        Tensor { shape: vec![1], storage: Storage::from_f32(vec![value], dtype) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F16(_) => DType::F16,
            Storage::F32(_) => DType::F32,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[Half]> {
        match &self.storage {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Element at flat index `i`, widened to `f32`.
    pub fn get(&self, i: usize) -> f32 {
        match &self.storage {
            Storage::F16(v) => v[i].to_f32(),
            Storage::F32(v) => v[i],
        }
    }

    pub fn iter_f32(&self) -> Box<dyn Iterator<Item = f32> + '_> {
        match &self.storage {
            Storage::F16(v) => Box::new(v.iter().map(|h| h.to_f32())),
            Storage::F32(v) => Box::new(v.iter().copied()),
        }
    }

    /// All elements widened to `f32` (exact for F16).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
            Storage::F32(v) => v.clone(),
        }
    }

    /// Same shape and dtype, identical bit patterns (NaNs included).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::F16(a), Storage::F16(b)) => a == b,
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let storage = match &self.storage {
            Storage::F16(v) => Storage::F32(v.iter().map(|h| h.to_f32()).collect()),
            Storage::F32(v) => Storage::F16(v.iter().map(|&x| Half::from_f32(x)).collect()),
        };
        Tensor { shape: self.shape.clone(), storage }
    }

    /// Point-wise `f` computed in `f32`, stored in this tensor's dtype.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        self.map_to(self.dtype(), f)
    }

    pub fn map_to(&self, dtype: DType, f: impl Fn(f32) -> f32) -> Tensor {
        let values = self.iter_f32().map(f).collect();
        Tensor { shape: self.shape.clone(), storage: Storage::from_f32(values, dtype) }
    }

    /// Point-wise binary op on equal shapes, computed in `f32`, stored in `self`'s dtype.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "element-wise operands {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let values = self.iter_f32().zip(other.iter_f32()).map(|(a, b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), storage: Storage::from_f32(values, self.dtype()) })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    /// Adds a length-N bias to every row of an `[M, N]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if bias.len() != n {
            return Err(Error::shape(format!("bias of {} elements for rows of {n}", bias.len())));
        }
        let b = bias.to_f32_vec();
        let mut values = self.to_f32_vec();
        for row in values.chunks_mut(n).take(m) {
            for (x, bj) in row.iter_mut().zip(&b) {
                *x += bj;
            }
        }
        Tensor::store(&self.shape, values, self.dtype())
    }

    /// Sum along `axis`, accumulated in `f32` in index order, stored as `out`.
    ///
    /// The axis is removed from the shape; a rank-1 input reduces to shape `[1]`.
    pub fn reduce_sum(&self, axis: usize, out: DType) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let src = self.to_f32_vec();
        let mut acc = vec![0f32; outer * inner];
        for o in 0..outer {
            let dst = &mut acc[o * inner..(o + 1) * inner];
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::store(&shape, acc, out)
    }

    /// Sequential `f32` sum of every element.
    pub fn sum_f32(&self) -> f32 {
        self.iter_f32().fold(0.0, |acc, x| acc + x)
    }

    pub fn max_abs(&self) -> f32 {
        self.iter_f32().fold(0.0, |m, x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::F16(v) => v.iter().all(|h| h.is_finite()),
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let storage = match &self.storage {
            Storage::F16(v) => Storage::F16(transpose_buf(v, m, n)),
            Storage::F32(v) => Storage::F32(transpose_buf(v, m, n)),
        };
        Ok(Tensor { shape: vec![n, m], storage })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), storage: self.storage.clone() })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if start >= end || end > self.shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of bounds for axis {axis} of {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let pick = |o: usize| (o * len + start) * inner..(o * len + end) * inner;
        let storage = match &self.storage {
            Storage::F16(v) => Storage::F16((0..outer).flat_map(|o| v[pick(o)].to_vec()).collect()),
            Storage::F32(v) => Storage::F32((0..outer).flat_map(|o| v[pick(o)].to_vec()).collect()),
        };
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor { shape, storage })
    }

    /// Rows (entries along axis 0) at `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rows = self.shape[0];
        let inner = self.len() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} out of bounds for {rows} rows")));
        }
        let storage = match &self.storage {
            Storage::F16(v) => Storage::F16(
                indices.iter().flat_map(|&i| v[i * inner..(i + 1) * inner].to_vec()).collect(),
            ),
            Storage::F32(v) => Storage::F32(
                indices.iter().flat_map(|&i| v[i * inner..(i + 1) * inner].to_vec()).collect(),
            ),
        };
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, storage })
    }

    /// `[M, P]` and `[M, Q]` side by side as `[M, P + Q]`, in `self`'s dtype.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = self.dims2()?;
        let (m2, q) = other.dims2()?;
        if m != m2 {
            return Err(Error::shape(format!("concat of {m} rows with {m2} rows")));
        }
        let a = self.to_f32_vec();
        let b = other.to_f32_vec();
        let mut values = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            values.extend_from_slice(&a[i * p..(i + 1) * p]);
            values.extend_from_slice(&b[i * q..(i + 1) * q]);
        }
        Tensor::store(&[m, p + q], values, self.dtype())
    }

    /// Deterministic normal samples: ChaCha8 stream seeded from `seed`, Box-Muller transform.
    pub fn random_normal(shape: &[usize], dtype: DType, mean: f32, stddev: f32, seed: u64) -> Result<Tensor> {
        if !(stddev >= 0.0) || !stddev.is_finite() {
            return Err(Error::Domain(format!("stddev must be finite and >= 0, got {stddev}")));
        }
        let n = check_shape(shape)?;
        let values = random::normal_samples(n, seed)
            .into_iter()
            .map(|z| (mean as f64 + stddev as f64 * z) as f32)
            .collect();
        Tensor::store(shape, values, dtype)
    }

    /// Deterministic samples uniform on `[low, high)`.
    pub fn random_uniform(shape: &[usize], dtype: DType, low: f32, high: f32, seed: u64) -> Result<Tensor> {
        if !(low <= high) {
            return Err(Error::Domain(format!("empty range [{low}, {high})")));
        }
        let n = check_shape(shape)?;
        let values = random::unit_samples(n, seed)
            .into_iter()
            .map(|u| (low as f64 + (high as f64 - low as f64) * u) as f32)
            .collect();
        Tensor::store(shape, values, dtype)
    }
}

fn transpose_buf<T: Copy>(v: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for j in 0..n {
        out.extend((0..m).map(|i| v[i * n + j]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction() {
        let z = Tensor::zeros(&[2, 3], DType::F16).unwrap();
        assert!(z.as_f16().unwrap().iter().all(|h| h.to_bits() == 0));
        let tiny = Tensor::full(&[1], DType::F16, 1e-9).unwrap();
        assert_eq!(tiny.as_f16().unwrap()[0].to_bits(), 0x0000);
        let exact = Tensor::from_values(&[2], DType::F32, &[1.5, -2.0]).unwrap();
        assert_eq!(exact.as_f32().unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(Tensor::zeros(&[2, 0], DType::F32), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[], DType::F32), Err(Error::Shape(_))));
        assert!(matches!(Tensor::from_values(&[3], DType::F16, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn casts() {
        let x = Tensor::from_values(&[3], DType::F16, &[0.1, -7.3, 1e-6]).unwrap();
        assert!(x.cast(DType::F32).cast(DType::F16).bit_eq(&x));
        let big = Tensor::from_values(&[1], DType::F32, &[65536.0]).unwrap().cast(DType::F16);
        assert_eq!(big.as_f16().unwrap()[0], Half::INFINITY);
        let small = Tensor::from_values(&[1], DType::F32, &[2f32.powi(-26)]).unwrap().cast(DType::F16);
        assert_eq!(small.as_f16().unwrap()[0].to_bits(), 0x0000);
        assert!(x.cast(DType::F16).bit_eq(&x));
    }

    #[test]
    fn reduce_sum_accumulates_in_f32() {
        let ones = Tensor::full(&[4096], DType::F16, 1.0).unwrap();
        let s = ones.reduce_sum(0, DType::F16).unwrap();
        assert_eq!(s.shape(), &[1]);
        assert_eq!(s.get(0), 4096.0);

        let m = Tensor::from_values(&[2, 3], DType::F32, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(m.reduce_sum(0, DType::F32).unwrap().to_f32_vec(), vec![5., 7., 9.]);
        assert_eq!(m.reduce_sum(1, DType::F32).unwrap().to_f32_vec(), vec![6., 15.]);
        assert!(matches!(m.reduce_sum(2, DType::F32), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn point_wise() {
        let x = Tensor::from_values(&[4], DType::F16, &[0.3, -1.7, 6e-8, 300.0]).unwrap();
        assert!(x.scale(1.0).bit_eq(&x));
        let neg = x.scale(-1.0);
        let sum = x.add(&neg).unwrap();
        assert!(sum.iter_f32().all(|v| v == 0.0));
        let bias = Tensor::from_values(&[2], DType::F32, &[10.0, 20.0]).unwrap();
        let m = Tensor::zeros(&[2, 2], DType::F32).unwrap().add_row(&bias).unwrap();
        assert_eq!(m.to_f32_vec(), vec![10., 20., 10., 20.]);
    }

    #[test]
    fn layout_ops() {
        let m = Tensor::from_values(&[2, 3], DType::F32, &[1., 2., 3., 4., 5., 6.]).unwrap();
        let t = m.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_f32_vec(), vec![1., 4., 2., 5., 3., 6.]);
        assert_eq!(m.slice(1, 1, 3).unwrap().to_f32_vec(), vec![2., 3., 5., 6.]);
        assert_eq!(m.gather_rows(&[1, 0, 1]).unwrap().to_f32_vec()[..3], [4., 5., 6.]);
        assert!(m.reshape(&[4]).is_err());
        assert_eq!(m.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
        let c = m.concat_cols(&m.slice(1, 0, 1).unwrap()).unwrap();
        assert_eq!(c.to_f32_vec(), vec![1., 2., 3., 1., 4., 5., 6., 4.]);
    }

    #[test]
    fn random_normal_contract() {
        let a = Tensor::random_normal(&[64], DType::F32, 0.0, 1.0, 7).unwrap();
        let b = Tensor::random_normal(&[64], DType::F32, 0.0, 1.0, 7).unwrap();
        let c = Tensor::random_normal(&[64], DType::F32, 0.0, 1.0, 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        let flat = Tensor::random_normal(&[10], DType::F16, 2.5, 0.0, 1).unwrap();
        assert!(flat.iter_f32().all(|v| v == 2.5));
        assert!(Tensor::random_normal(&[1], DType::F32, 0.0, -1.0, 1).is_err());
    }
}
