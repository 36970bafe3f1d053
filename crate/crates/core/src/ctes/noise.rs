use std::cmp::Ordering;

use crate::scalar::Scalar;

use super::{CtesError, Sequence};

/// Adds `eps[i]` to the time of event `i` and re-sorts chronologically.
///
/// Returns the sorted sequence and `perm`, where `perm[k]` is the original
/// index of the event now at position `k`. Ties keep original index order;
/// a tied time is then nudged up by one relative machine epsilon so the
/// output stays strictly increasing. If the earliest perturbed time is
/// negative the whole sequence is shifted so that it starts at zero.
pub fn apply_noise_and_sort<T: Scalar>(
    seq: &Sequence<T>,
    eps: &[T],
) -> Result<(Sequence<T>, Vec<usize>), CtesError> {
    sort_perturbed(seq.times(), seq.marks(), eps)
}

/// [`apply_noise_and_sort`] for raw arrays whose times need not be ordered,
/// such as a hard-permuted sequence.
pub fn sort_perturbed<T: Scalar>(
    times: &[T],
    marks: &[usize],
    eps: &[T],
) -> Result<(Sequence<T>, Vec<usize>), CtesError> {
    for (what, len) in [("noise vector", eps.len()), ("marks", marks.len())] {
        if len != times.len() {
            return Err(CtesError::LengthMismatch {
                what,
                left: len,
                right: times.len(),
            });
        }
    }
    if times.is_empty() {
        return Err(CtesError::Empty);
    }
    let perturbed: Vec<T> = times.iter().zip(eps).map(|(&t, &e)| t + e).collect();
    if let Some(index) = perturbed.iter().position(|t| !t.is_finite()) {
        return Err(CtesError::NonFinite { index });
    }
    let mut perm: Vec<usize> = (0..times.len()).collect();
    // stable: equal keys keep index order
    perm.sort_by(|&a, &b| perturbed[a].partial_cmp(&perturbed[b]).unwrap_or(Ordering::Equal));

    let mut out: Vec<T> = perm.iter().map(|&i| perturbed[i]).collect();
    let marks: Vec<usize> = perm.iter().map(|&i| marks[i]).collect();
    if out[0] < T::zero() {
        let shift = out[0];
        out.iter_mut().for_each(|t| *t = *t - shift);
        out[0] = T::zero();
    }
    for k in 1..out.len() {
        if out[k] <= out[k - 1] {
            let prev = out[k - 1];
            out[k] = prev + prev.abs().max(T::one()) * T::epsilon();
        }
    }
    Ok((Sequence::new(out, marks)?, perm))
}
