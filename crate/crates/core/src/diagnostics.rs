//! Per-exponent magnitude histograms of gradients.
//!
//! A value `v` lands in bin `floor(log2 |v|)`; zeros and non-finite values
//! have their own counters. Binary16 tensors are binned on their stored
//! values, so a gradient that underflowed on store is counted as zero.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::binary16::{Class, Half};
use crate::engine::{suggest_constant_scale, StepObserver, StepView};
use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

/// `floor(log2 |x|)` for finite non-zero `x`, subnormals included.
pub fn f32_exponent(x: f32) -> Option<i32> {
    if x == 0.0 || !x.is_finite() {
        return None;
    }
    let bits = x.to_bits() & 0x7FFF_FFFF;
    let e = (bits >> 23) as i32;
    Some(if e == 0 { -149 + 31 - bits.leading_zeros() as i32 } else { e - 127 })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExponentHistogram {
    zero_count: u64,
    bins: BTreeMap<i32, u64>,
    nonfinite_count: u64,
    total: u64,
    max_abs: f32,
    /// `None` until the first tensor is added.
    source: Option<DType>,
}

impl ExponentHistogram {
    pub fn of(t: &Tensor) -> ExponentHistogram {
        let mut h = ExponentHistogram::default();
        h.add(t).expect("empty histogram accepts any dtype");
        h
    }

    /// Counts every element of `t`. The dtype must match earlier tensors.
    pub fn add(&mut self, t: &Tensor) -> Result<()> {
        self.check_source(t.dtype())?;
        self.source = Some(t.dtype());
        match t.storage() {
            Storage::F16(v) => {
                for &h in v {
                    match h.classify() {
                        Class::Zero => self.zero_count += 1,
                        Class::Infinite | Class::Nan => self.nonfinite_count += 1,
                        Class::Normal | Class::Subnormal => {
                            *self.bins.entry(h.exponent_of().expect("finite non-zero")).or_default() += 1;
                            self.max_abs = self.max_abs.max(h.abs().to_f32());
                        }
                    }
                }
            }
            Storage::F32(v) => {
                for &x in v {
                    match f32_exponent(x) {
                        Some(e) => {
                            *self.bins.entry(e).or_default() += 1;
                            self.max_abs = self.max_abs.max(x.abs());
                        }
                        None if x == 0.0 => self.zero_count += 1,
                        None => self.nonfinite_count += 1,
                    }
                }
            }
        }
        self.total += t.len() as u64;
        Ok(())
    }

    fn check_source(&self, dtype: DType) -> Result<()> {
        match self.source {
            Some(s) if s != dtype => Err(Error::Domain(format!("cannot combine {s} and {dtype} histograms"))),
            _ => Ok(()),
        }
    }

    /// Exact sum of two histograms of the same source dtype.
    pub fn merge(&self, other: &ExponentHistogram) -> Result<ExponentHistogram> {
        if let Some(d) = other.source {
            self.check_source(d)?;
        }
        let mut out = self.clone();
        out.source = self.source.or(other.source);
        out.zero_count += other.zero_count;
        out.nonfinite_count += other.nonfinite_count;
        out.total += other.total;
        out.max_abs = out.max_abs.max(other.max_abs);
        for (&e, &c) in &other.bins {
            *out.bins.entry(e).or_default() += c;
        }
        Ok(out)
    }

    pub fn zero_count(&self) -> u64 {
        self.zero_count
    }

    pub fn nonfinite_count(&self) -> u64 {
        self.nonfinite_count
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bins(&self) -> &BTreeMap<i32, u64> {
        &self.bins
    }

    pub fn count(&self, exponent: i32) -> u64 {
        self.bins.get(&exponent).copied().unwrap_or(0)
    }

    pub fn max_abs(&self) -> f32 {
        self.max_abs
    }

    pub fn source(&self) -> Option<DType> {
        self.source
    }

    fn fraction(&self, n: u64) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            n as f64 / self.total as f64
        }
    }

    pub fn fraction_zero(&self) -> f64 {
        self.fraction(self.zero_count)
    }

    /// Share of all elements with magnitude below `2^exponent`, zeros included.
    pub fn fraction_below(&self, exponent: i32) -> f64 {
        let below: u64 = self.bins.range(..exponent).map(|(_, c)| c).sum();
        self.fraction(self.zero_count + below)
    }

    pub fn report(&self, thresholds: &[i32]) -> UnderflowReport {
        UnderflowReport {
            total: self.total,
            fraction_zero: self.fraction_zero(),
            fraction_below: thresholds.iter().map(|&e| (e, self.fraction_below(e))).collect(),
            fraction_nonfinite: self.fraction(self.nonfinite_count),
            max_abs: self.max_abs,
            recommended_scale: suggest_constant_scale(self.max_abs).ok(),
        }
    }

    /// `exponent,count` rows in ascending order, then `zero`, `nonfinite`, `total`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "exponent,count")?;
        for (e, c) in &self.bins {
            writeln!(w, "{e},{c}")?;
        }
        writeln!(w, "zero,{}", self.zero_count)?;
        writeln!(w, "nonfinite,{}", self.nonfinite_count)?;
        writeln!(w, "total,{}", self.total)?;
        Ok(())
    }

    /// Parses [`ExponentHistogram::write_csv`] output. The CSV does not
    /// record a dtype or the maximum, so `max_abs` is taken as the upper
    /// edge of the highest bin.
    pub fn read_csv<R: BufRead>(r: R) -> Result<ExponentHistogram> {
        let bad = |detail: String| Error::Format { what: "histogram csv", detail };
        let mut h = ExponentHistogram::default();
        let mut total = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if n == 0 {
                if line != "exponent,count" {
                    return Err(bad(format!("expected header `exponent,count`, found `{line}`")));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (key, count) = line.split_once(',').ok_or_else(|| bad(format!("line {}: `{line}`", n + 1)))?;
            let count: u64 = count.trim().parse().map_err(|_| bad(format!("line {}: bad count `{count}`", n + 1)))?;
            match key {
                "zero" => h.zero_count = count,
                "nonfinite" => h.nonfinite_count = count,
                "total" => total = Some(count),
                e => {
                    let e: i32 = e.parse().map_err(|_| bad(format!("line {}: bad exponent `{e}`", n + 1)))?;
                    h.bins.insert(e, count);
                }
            }
        }
        let total = total.ok_or_else(|| bad("missing `total` row".into()))?;
        let counted = h.zero_count + h.nonfinite_count + h.bins.values().sum::<u64>();
        if counted != total {
            return Err(bad(format!("rows add up to {counted}, total says {total}")));
        }
        h.total = total;
        h.max_abs = h.bins.keys().next_back().map_or(0.0, |&e| 2f32.powi(e + 1));
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnderflowReport {
    pub total: u64,
    pub fraction_zero: f64,
    /// `(e, share of elements below 2^e)` per requested threshold.
    pub fraction_below: Vec<(i32, f64)>,
    pub fraction_nonfinite: f64,
    pub max_abs: f32,
    /// `None` when every value is zero or non-finite.
    pub recommended_scale: Option<f32>,
}

impl fmt::Display for UnderflowReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "values:            {}", self.total)?;
        writeln!(f, "zero:              {:.4}", self.fraction_zero)?;
        for (e, frac) in &self.fraction_below {
            writeln!(f, "{:<19}{frac:.4}", format!("below 2^{e}:"))?;
        }
        writeln!(f, "non-finite:        {:.4}", self.fraction_nonfinite)?;
        writeln!(f, "max |v|:           {:e}", self.max_abs)?;
        match self.recommended_scale {
            Some(s) => write!(f, "recommended scale: {s}"),
            None => write!(f, "recommended scale: n/a"),
        }
    }
}

/// Thresholds reported by default: the binary16 subnormal limit and `2^-27`.
pub const DEFAULT_THRESHOLDS: [i32; 2] = [-24, -27];

/// Tensor roles recorded by [`HistogramHook`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// Weight gradients as produced by backward, before unscaling.
    WeightGrad,
    /// Weight gradients after unscaling.
    WeightGradUnscaled,
    /// Activation gradients.
    ActGrad,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::WeightGrad => "weight_grad",
            Role::WeightGradUnscaled => "weight_grad_unscaled",
            Role::ActGrad => "act_grad",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRecord {
    pub iteration: u64,
    pub role: Role,
    pub histogram: ExponentHistogram,
}

impl HistogramRecord {
    pub fn file_name(&self, run_id: &str) -> String {
        format!("{run_id}_{}_{}.csv", self.role, self.iteration)
    }
}

/// Captures gradient histograms every `every_n` iterations. It only reads
/// the step's tensors.
#[derive(Clone, Debug)]
pub struct HistogramHook {
    every_n: u64,
    unscaled: bool,
    records: Vec<HistogramRecord>,
}

impl HistogramHook {
    pub fn new(every_n: u64) -> HistogramHook {
        HistogramHook { every_n: every_n.max(1), unscaled: false, records: Vec::new() }
    }

    /// Also record weight gradients after unscaling.
    pub fn with_unscaled(mut self) -> HistogramHook {
        self.unscaled = true;
        self
    }

    pub fn records(&self) -> &[HistogramRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<HistogramRecord> {
        std::mem::take(&mut self.records)
    }

    /// Merge of every record with `role`.
    pub fn merged(&self, role: Role) -> Result<ExponentHistogram> {
        self.records.iter().filter(|r| r.role == role).try_fold(ExponentHistogram::default(), |acc, r| acc.merge(&r.histogram))
    }

    /// Writes one CSV per record into `dir`; returns the paths.
    pub fn write_all(&self, dir: &Path, run_id: &str) -> Result<Vec<PathBuf>> {
        self.records
            .iter()
            .map(|r| {
                let path = dir.join(r.file_name(run_id));
                let mut w = BufWriter::new(File::create(&path)?);
                r.histogram.write_csv(&mut w)?;
                w.flush()?;
                Ok(path)
            })
            .collect()
    }
}

fn merged_of<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> ExponentHistogram {
    let mut h = ExponentHistogram::default();
    for t in tensors {
        h = h.merge(&ExponentHistogram::of(t)).expect("one training step stores gradients in one dtype");
    }
    h
}

impl StepObserver for HistogramHook {
    fn observe(&mut self, view: &StepView<'_>) {
        if !view.iteration.is_multiple_of(self.every_n) {
            return;
        }
        let it = view.iteration;
        self.records.push(HistogramRecord { iteration: it, role: Role::WeightGrad, histogram: merged_of(view.grads.params.iter()) });
        if self.unscaled {
            self.records.push(HistogramRecord { iteration: it, role: Role::WeightGradUnscaled, histogram: merged_of(view.unscaled.iter()) });
        }
        self.records.push(HistogramRecord { iteration: it, role: Role::ActGrad, histogram: merged_of(view.grads.activations.iter().map(|(_, a)| a)) });
    }
}

/// Histogram of a slice of binary16 values.
pub fn half_histogram(values: &[Half]) -> ExponentHistogram {
    ExponentHistogram::of(&Tensor::from_halves(&[values.len()], values.to_vec()).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_counts() {
        let h = ExponentHistogram::of(&Tensor::zeros(&[100], DType::F16).unwrap());
        assert_eq!((h.zero_count(), h.bins().len(), h.total()), (100, 0, 100));
        let h = ExponentHistogram::of(&Tensor::from_values(&[3], DType::F16, &[1.0, 1.5, 2.0]).unwrap());
        assert_eq!((h.count(0), h.count(1)), (2, 1));
    }

    #[test]
    fn f32_exponents() {
        assert_eq!(f32_exponent(1.0), Some(0));
        assert_eq!(f32_exponent(-0.75), Some(-1));
        assert_eq!(f32_exponent(f32::from_bits(1)), Some(-149));
        assert_eq!(f32_exponent(f32::from_bits(0x0040_0000)), Some(-127));
        assert_eq!(f32_exponent(f32::MAX), Some(127));
        assert_eq!(f32_exponent(0.0), None);
        assert_eq!(f32_exponent(f32::NAN), None);
    }

    #[test]
    fn subnormals_use_true_exponent() {
        let h = half_histogram(&[Half::MIN_POSITIVE_SUBNORMAL, Half::from_bits(0x0003), Half::from_bits(0x03FF)]);
        assert_eq!((h.count(-24), h.count(-23), h.count(-15)), (1, 1, 1));
    }

    #[test]
    fn report_and_scale() {
        let mut v = vec![0.0f32; 67];
        v.extend(std::iter::repeat_n(2.0, 33));
        let h = ExponentHistogram::of(&Tensor::from_values(&[100], DType::F16, &v).unwrap());
        let r = h.report(&DEFAULT_THRESHOLDS);
        assert_eq!(r.fraction_zero, 0.67);
        assert_eq!(r.recommended_scale, Some(16384.0));
        assert_eq!(r.fraction_below, vec![(-24, 0.67), (-27, 0.67)]);
        assert!(r.to_string().contains("recommended scale: 16384"));
    }

    #[test]
    fn merge_rules() {
        let a = ExponentHistogram::of(&Tensor::from_values(&[2], DType::F16, &[1.0, f32::INFINITY]).unwrap());
        assert_eq!(a.merge(&ExponentHistogram::default()).unwrap(), a);
        assert_eq!(ExponentHistogram::default().merge(&a).unwrap(), a);
        let b = ExponentHistogram::of(&Tensor::from_values(&[1], DType::F32, &[1.0]).unwrap());
        assert!(a.merge(&b).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = Tensor::random_normal(&[500], DType::F16, 0.0, 1e-3, 4).unwrap();
        let mut h = ExponentHistogram::of(&t);
        h.add(&Tensor::from_values(&[2], DType::F16, &[0.0, f32::NAN]).unwrap()).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("exponent,count\n"));
        assert!(text.ends_with(&format!("zero,{}\nnonfinite,1\ntotal,502\n", h.zero_count())));
        let back = ExponentHistogram::read_csv(&buf[..]).unwrap();
        assert_eq!(back.bins(), h.bins());
        assert_eq!(back.total(), 502);
        assert!(ExponentHistogram::read_csv(&b"exponent,count\n3,1\ntotal,2\n"[..]).is_err());
    }
}
