use rand::Rng;

use crate::ctes::{distance_hard, sort_perturbed, DistanceParams, Sequence};
use crate::scalar::Scalar;

use super::{BaselineError, ControlSample};

/// Proposal budget of [`random_perm_control`].
pub const MAX_PROPOSALS: usize = 1000;

/// One random proposal at strength `s >= 0`: `floor(s)` adjacent swaps,
/// each moving a random event just past its successor, then uniform noise
/// of half-width `s * gap / 2` on every event, then a re-sort. The noise
/// keeps the realised distance continuous in `s` across the swap steps.
fn propose<T: Scalar, R: Rng + ?Sized>(seq: &Sequence<T>, s: f64, gap: T, rng: &mut R) -> (Vec<T>, Vec<usize>, Vec<T>, Vec<usize>) {
    let n = seq.len();
    let mut times = seq.times().to_vec();
    let mut marks = seq.marks().to_vec();
    let mut origin: Vec<usize> = (0..n).collect();
    if n >= 2 {
        for _ in 0..s.floor() as usize {
            let k = rng.random_range(0..n - 1);
            let next = if k + 2 < n { times[k + 2] } else { times[k + 1] + gap };
            let moved = (times[k + 1] + next) / T::lit(2.0);
            // the successor slides down into slot k, the mover lands in k + 1
            times[k] = times[k + 1];
            times[k + 1] = moved;
            marks.swap(k, k + 1);
            origin.swap(k, k + 1);
        }
    }
    let half = gap.as_f64() * s / 2.0;
    let noise = (0..n)
        .map(|_| if half > 0.0 { T::lit(rng.random_range(-half..=half)) } else { T::zero() })
        .collect();
    (times, marks, noise, origin)
}

/// Random adjacent-swap walk plus uniform time noise whose strength is
/// bisected until the hard distance to `seq` lands in
/// `[0.9, 1.1] * distance_target`. Marks are carried with their events, so
/// the event multiset is unchanged up to the noise.
pub fn random_perm_control<T: Scalar, R: Rng + ?Sized>(
    seq: &Sequence<T>,
    distance_target: T,
    params: &DistanceParams<T>,
    rng: &mut R,
) -> Result<ControlSample<T>, BaselineError> {
    if !(distance_target > T::zero()) || !distance_target.is_finite() {
        return Err(BaselineError::Config(format!(
            "distance_target must be positive and finite, got {distance_target}"
        )));
    }
    let gap = seq.mean_gap().unwrap_or(T::one());
    let (lo_ok, hi_ok) = (distance_target * T::lit(0.9), distance_target * T::lit(1.1));
    // beyond a few swaps per event the walk is already well mixed
    let max_strength = 4.0 * seq.len() as f64;
    let (mut lo, mut hi) = (0.0f64, None::<f64>);
    let mut s = 0.5;
    let mut closest = T::infinity();
    for proposals in 1..=MAX_PROPOSALS {
        let (times, marks, noise, origin) = propose(seq, s, gap, rng);
        let (sequence, order) = sort_perturbed(&times, &marks, &noise)?;
        let distance = distance_hard(seq, &sequence, params)?;
        if (distance - distance_target).abs() < (closest - distance_target).abs() {
            closest = distance;
        }
        if distance >= lo_ok && distance <= hi_ok {
            return Ok(ControlSample {
                sequence,
                perm: order.iter().map(|&k| origin[k]).collect(),
                distance,
                proposals,
            });
        }
        if distance < lo_ok {
            lo = s;
        } else {
            hi = Some(s);
        }
        s = match hi {
            // a collapsed bracket came from unlucky draws; reopen it
            Some(h) if h - lo < 1e-9 * h.max(1.0) => {
                (lo, hi) = (0.0, None);
                s
            }
            Some(h) => (lo + h) / 2.0,
            None => (2.0 * s).clamp(0.5, max_strength),
        };
    }
    Err(BaselineError::Unreachable {
        target: distance_target.as_f64(),
        closest: closest.as_f64(),
        proposals: MAX_PROPOSALS,
    })
}
