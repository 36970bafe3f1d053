use crate::autodiff::{Tape, Tensor};
use crate::nn::repeat_row;
use crate::scalar::Scalar;

use super::{AttackError, AttackVars};

/// Log-weight given to pairs that must stay empty; `exp` underflows to 0.
const BLOCKED: f64 = -1e9;

/// Pairwise scores `S[i, j] = g(h_i, h_j)` from the MLP
/// `w2 . tanh(W1 [h_i; h_j] + b1) + b2`, shape `[n, n]`.
pub fn score_matrix<T: Scalar>(tape: &Tape<T>, w: &AttackVars<T>, h: &Tensor<T>) -> Result<Tensor<T>, AttackError> {
    let n = h.rows();
    let left: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let right: Vec<usize> = (0..n * n).map(|k| k % n).collect();
    let pairs = tape.concat(&[&tape.gather_rows(h, &left)?, &tape.gather_rows(h, &right)?], 1)?;
    let hidden = tape.tanh(&tape.add(&tape.matmul(&pairs, &w.gs_w1)?, &repeat_row(tape, &w.gs_b1, n * n)?)?)?;
    let s = tape.add(&tape.matmul(&hidden, &w.gs_w2)?, &w.gs_b2)?;
    Ok(tape.reshape(&s, &[n, n])?)
}

/// `L` alternating row and column normalisations of `exp(S / tau)`,
/// carried out in the log domain (each normalisation is a log-softmax), so
/// no temperature overflows. Rows and columns of padded positions are
/// pinned to the identity.
pub fn sinkhorn<T: Scalar>(
    tape: &Tape<T>,
    scores: &Tensor<T>,
    tau: T,
    iters: usize,
    mask: &[bool],
) -> Result<Tensor<T>, AttackError> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(AttackError::Config(format!("tau must be positive, got {tau}")));
    }
    let n = mask.len();
    let mut keep = vec![T::zero(); n * n];
    let mut bias = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if mask[i] && mask[j] {
                keep[i * n + j] = T::one();
            } else if i != j {
                bias[i * n + j] = T::lit(BLOCKED);
            }
        }
    }
    let scaled = tape.scale(scores, T::one() / tau)?;
    let mut log_p = tape.add(
        &tape.mul(&scaled, &Tensor::new(&[n, n], keep)?)?,
        &Tensor::new(&[n, n], bias)?,
    )?;
    for _ in 0..iters {
        log_p = tape.log_softmax(&log_p, 1)?;
        log_p = tape.log_softmax(&log_p, 0)?;
    }
    Ok(tape.exp(&log_p)?)
}

/// Soft permutation for the adversary embeddings `h` (`[n, Da]`).
pub fn gs_forward<T: Scalar>(
    tape: &Tape<T>,
    w: &AttackVars<T>,
    h: &Tensor<T>,
    mask: &[bool],
    tau: T,
    iters: usize,
) -> Result<Tensor<T>, AttackError> {
    let s = score_matrix(tape, w, h)?;
    sinkhorn(tape, &s, tau, iters, mask)
}

/// `(P t, P C)`: soft-permuted times `[n, 1]` and mark mixtures.
pub fn apply_soft_perm<T: Scalar>(
    tape: &Tape<T>,
    p: &Tensor<T>,
    times: &Tensor<T>,
    marks: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), AttackError> {
    Ok((tape.matmul(p, times)?, tape.matmul(p, marks)?))
}
