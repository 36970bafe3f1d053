use crate::scalar::Scalar;

use super::{CtesError, Sequence};

/// Weight of a mark mismatch relative to one unit of time displacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceParams<T> {
    pub rho_c: T,
}

impl<T: Scalar> DistanceParams<T> {
    pub fn new(rho_c: T) -> Result<Self, CtesError> {
        if !(rho_c >= T::zero()) || !rho_c.is_finite() {
            return Err(CtesError::InvalidParam(format!("rho_c must be finite and >= 0, got {rho_c}")));
        }
        Ok(Self { rho_c })
    }
}

/// Offset-aligned distance between a clean sequence and its perturbation:
/// `sum_i |(t'_i - t'_1) - (t_i - t_1)| + rho_c * [c'_i != c_i]`.
///
/// Both sequences are measured from their own first arrival, so a uniform
/// time shift costs nothing.
pub fn distance_hard<T: Scalar>(
    clean: &Sequence<T>,
    pert: &Sequence<T>,
    params: &DistanceParams<T>,
) -> Result<T, CtesError> {
    if clean.len() != pert.len() {
        return Err(CtesError::LengthMismatch {
            what: "distance_hard",
            left: clean.len(),
            right: pert.len(),
        });
    }
    distance_hard_masked(
        clean.times(),
        clean.marks(),
        pert.times(),
        pert.marks(),
        None,
        params,
    )
}

/// [`distance_hard`] over raw (possibly padded) arrays; positions where
/// `mask` is false are skipped. The first real position provides the offset.
pub fn distance_hard_masked<T: Scalar>(
    clean_times: &[T],
    clean_marks: &[usize],
    pert_times: &[T],
    pert_marks: &[usize],
    mask: Option<&[bool]>,
    params: &DistanceParams<T>,
) -> Result<T, CtesError> {
    let n = clean_times.len();
    for (what, len) in [
        ("clean marks", clean_marks.len()),
        ("perturbed times", pert_times.len()),
        ("perturbed marks", pert_marks.len()),
    ] {
        if len != n {
            return Err(CtesError::LengthMismatch { what, left: n, right: len });
        }
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(CtesError::LengthMismatch {
                what: "mask",
                left: n,
                right: m.len(),
            });
        }
    }
    let real = |i: usize| mask.map_or(true, |m| m[i]);
    let Some(first) = (0..n).find(|&i| real(i)) else {
        return Ok(T::zero());
    };
    let (t0, p0) = (clean_times[first], pert_times[first]);
    let mut total = T::zero();
    for i in (0..n).filter(|&i| real(i)) {
        total = total + ((pert_times[i] - p0) - (clean_times[i] - t0)).abs();
        if pert_marks[i] != clean_marks[i] {
            total = total + params.rho_c;
        }
    }
    Ok(total)
}
