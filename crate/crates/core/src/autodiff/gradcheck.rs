use crate::scalar::Scalar;

use super::{AutodiffError, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    pub passed: bool,
    pub max_rel_error: T,
    /// Coordinate with the largest relative error.
    pub worst_coord: usize,
    pub analytic: Vec<T>,
    pub numeric: Vec<T>,
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the input tensor (tracked for the analytic
/// pass, constant for the probes) and must return a one-element tensor.
/// Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T, tol: T) -> Result<GradCheckReport<T>, AutodiffError>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Tensor<T>) -> Result<Tensor<T>, AutodiffError>,
{
    if !(h > T::zero()) {
        return Err(AutodiffError::Domain {
            op: "grad_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&tape, &xv)?;
    if !y.item().is_finite() {
        return Err(AutodiffError::NonFinite { coord: usize::MAX });
    }
    let analytic = if y.is_tracked() {
        tape.backward(&y)?.get_or_zeros(&xv)
    } else {
        vec![T::zero(); x.numel()]
    };

    let probe = |coord: usize, delta: T| -> Result<T, AutodiffError> {
        let mut v = x.to_vec();
        v[coord] = v[coord] + delta;
        let t = Tape::new();
        let out = f(&t, &Tensor::new(x.shape(), v)?)?.item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(AutodiffError::NonFinite { coord })
        }
    };

    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = T::zero();
    let mut worst_coord = 0;
    for j in 0..x.numel() {
        let n = (probe(j, h)? - probe(j, -h)?) / (two * h);
        let a = analytic[j];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coord = j;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        passed: max_rel_error < tol,
        max_rel_error,
        worst_coord,
        analytic,
        numeric,
    })
}
