use super::{AccumMode, DType, Tensor};
use crate::binary16::Half;
use crate::error::{Error, Result};

/// `[M, K] x [K, N]` product, converted once to `out` per output element.
///
/// Each output element is summed sequentially over `k = 0..K`. Under
/// [`AccumMode::Acc32`] the products of widened operands are added in
/// `f32`; under [`AccumMode::Acc16`] the running sum is rounded to
/// binary16 after every multiply-add.
pub fn matmul(a: &Tensor, b: &Tensor, mode: AccumMode, out: DType) -> Result<Tensor> {
    let (m, n, acc) = matmul_acc(a, b, mode)?;
    Tensor::store(&[m, n], acc, out)
}

/// The accumulators of [`matmul`] before the final store, as `(M, N, values)`.
///
/// Under `Acc16` every value is already a binary16 value.
pub fn matmul_acc(a: &Tensor, b: &Tensor, mode: AccumMode) -> Result<(usize, usize, Vec<f32>)> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.to_f32_vec();
    let bv = b.to_f32_vec();
    // A zero left operand contributes exactly +-0 to each partial sum unless
    // the right operand holds a non-finite value.
    let skip_zeros = b.all_finite();
    let mut c = vec![0f32; m * n];
    for (a_row, c_row) in av.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(bv.chunks_exact(n)) {
            if skip_zeros && aik == 0.0 {
                continue;
            }
            match mode {
                AccumMode::Acc32 => {
                    for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                        *cj += aik * bkj;
                    }
                }
                AccumMode::Acc16 => {
                    let ad = aik as f64;
                    for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                        *cj = Half::from_f64(ad * bkj as f64 + *cj as f64).to_f32();
                    }
                }
            }
        }
    }
    Ok((m, n, c))
}
