use crate::autodiff::{Tape, Tensor};
use crate::ctes::{distance_hard, sort_perturbed, DistanceParams, Sequence};
use crate::mtpp::{encode, MtppModel, SequenceInput};
use crate::nn::one_hot;
use crate::scalar::Scalar;

use super::objective::{eps_forward, hinge_penalty, ConstraintSystem};
use super::sinkhorn::gs_forward;
use super::{AttackError, AttackModel};

/// Greedy rounding of an `n x n` soft permutation: rows in order take their
/// largest entry among unused columns (smaller column on ties).
/// `perm[i]` is the column chosen for row `i`.
pub fn harden<T: Scalar>(p: &[T], n: usize) -> Vec<usize> {
    let mut used = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| !used[j]) {
            if best.is_none_or(|b| p[i * n + j] > p[i * n + b]) {
                best = Some(j);
            }
        }
        let j = best.expect("a free column remains for every row");
        used[j] = true;
        perm.push(j);
    }
    perm
}

/// An emitted adversarial sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission<T> {
    pub sequence: Sequence<T>,
    /// `perm[k]`: index of the clean event now at position `k`.
    pub perm: Vec<usize>,
    /// Offset-aligned hard distance to the clean sequence.
    pub distance: T,
    /// Chronology hinge of the hard permutation and its noise, before the
    /// final re-sort.
    pub hinge: T,
}

/// Hardens the soft permutation, adds the noise computed for the hard
/// sequence and re-sorts, so the result is always a valid sequence.
pub fn emit_adversarial<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    seq: &Sequence<T>,
    tau: T,
) -> Result<Emission<T>, AttackError> {
    let tape = Tape::new();
    let w = attack.params.constants();
    let n = seq.len();
    let input = SequenceInput::from_sequence(seq, adversary.config.num_marks);
    let pi: Vec<usize> = if attack.config.permute {
        let h = encode(&tape, &adversary.config, &adversary.params.constants(), &input)?;
        let p = gs_forward(&tape, &w, &h, &input.mask, tau, attack.config.sinkhorn_iters)?;
        harden(p.values(), n)
    } else {
        (0..n).collect()
    };
    let times: Vec<T> = pi.iter().map(|&j| seq.times()[j]).collect();
    let marks: Vec<usize> = pi.iter().map(|&j| seq.marks()[j]).collect();
    let t_pi = Tensor::column(times.clone());
    let eps = eps_forward(&tape, &w, &t_pi, &one_hot(&marks, attack.num_marks + 1), &input.mask, T::lit(attack.config.time_scale))?;
    let hinge = hinge_penalty(&tape, &eps, &t_pi, &ConstraintSystem::new(n))?.item();
    let (sequence, order) = sort_perturbed(&times, &marks, eps.values())?;
    let perm = order.iter().map(|&k| pi[k]).collect();
    let distance = distance_hard(seq, &sequence, &DistanceParams::new(T::lit(attack.config.rho_c))?)?;
    Ok(Emission {
        sequence,
        perm,
        distance,
        hinge,
    })
}
