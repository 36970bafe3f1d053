//! Layers shared by the MTPP encoder and the noise generator.

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::scalar::Scalar;

/// Score added to disallowed attention pairs; `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;

/// Sinusoidal encoding of continuous times, `[n, 1] -> [n, dim]`:
/// the first half holds `sin(t * w_k)`, the second `cos(t * w_k)` with
/// `w_k = 10000^(-2k/dim)`.
pub fn time_encoding<T: Scalar>(
    tape: &Tape<T>,
    times: &Tensor<T>,
    dim: usize,
) -> Result<Tensor<T>, AutodiffError> {
    let half = dim / 2;
    let freqs: Vec<T> = (0..half)
        .map(|k| T::lit(10000f64.powf(-2.0 * k as f64 / dim as f64)))
        .collect();
    let angles = tape.matmul(times, &Tensor::row(freqs))?;
    let s = tape.sin(&angles)?;
    let c = tape.cos(&angles)?;
    tape.concat(&[&s, &c], 1)
}

/// `[1, d]` row repeated `n` times.
pub fn repeat_row<T: Scalar>(tape: &Tape<T>, row: &Tensor<T>, n: usize) -> Result<Tensor<T>, AutodiffError> {
    tape.matmul(&Tensor::ones(&[n, 1]), row)
}

/// Additive score mask: position `i` may attend to real `j <= i`; a padded
/// position attends only to itself so its softmax stays well defined.
pub fn causal_mask<T: Scalar>(mask: &[bool]) -> Tensor<T> {
    let n = mask.len();
    let blocked = T::lit(MASKED_SCORE);
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let allowed = if mask[i] { j <= i && mask[j] } else { j == i };
            if !allowed {
                v[i * n + j] = blocked;
            }
        }
    }
    Tensor::new(&[n, n], v).expect("square mask")
}

/// `[n, 1]` column of 0/1 mask values.
pub fn mask_column<T: Scalar>(mask: &[bool]) -> Tensor<T> {
    Tensor::column(mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())
}

/// Single-head causal self-attention,
/// `s_i = sum_{j<=i} softmax_j((Q z_i).(K z_j) / sqrt(D)) V z_j`.
pub fn causal_attention<T: Scalar>(
    tape: &Tape<T>,
    z: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    score_mask: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    let dim = q.shape()[1];
    let qz = tape.matmul(z, q)?;
    let kz = tape.matmul(z, k)?;
    let vz = tape.matmul(z, v)?;
    let scores = tape.matmul(&qz, &tape.transpose(&kz)?)?;
    let scores = tape.scale(&scores, T::one() / T::from_usize_lossy(dim).sqrt())?;
    let scores = tape.add(&scores, score_mask)?;
    let weights = tape.softmax(&scores, 1)?;
    tape.matmul(&weights, &vz)
}

/// One-hot rows over `width` classes.
pub fn one_hot<T: Scalar>(labels: &[usize], width: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); labels.len() * width];
    for (i, &c) in labels.iter().enumerate() {
        if c < width {
            v[i * width + c] = T::one();
        }
    }
    Tensor::new(&[labels.len(), width], v).expect("one-hot shape")
}
