use crate::autodiff::{Tape, Tensor};
use crate::ctes::{apply_noise_and_sort, Sequence};
use crate::mtpp::{MtppModel, SequenceInput};
use crate::nn::one_hot;
use crate::permattack::adv_nll;
use crate::scalar::Scalar;

use super::{BaselineConfig, BaselineError, NoiseAttack};

/// Adversary NLL of the events of `clean` when it conditions on `pert`
/// position by position.
pub fn perturbed_nll<T: Scalar>(
    adversary: &MtppModel<T>,
    clean: &Sequence<T>,
    pert: &Sequence<T>,
) -> Result<T, BaselineError> {
    Ok(time_gradient(adversary, clean, pert, false)?.0)
}

/// [`perturbed_nll`] and, if `grad` is set, its gradient with respect to
/// the times of `pert`.
pub fn time_gradient<T: Scalar>(
    adversary: &MtppModel<T>,
    clean: &Sequence<T>,
    pert: &Sequence<T>,
    grad: bool,
) -> Result<(T, Vec<T>), BaselineError> {
    let tape = Tape::new();
    let input = SequenceInput::from_sequence(clean, adversary.config.num_marks);
    let times = Tensor::column(pert.times().to_vec());
    let times = if grad { tape.leaf(&times) } else { times };
    let marks = one_hot(pert.marks(), adversary.config.num_marks + 1);
    let (nll, _) = adv_nll(&tape, adversary, &adversary.params.constants(), &input, &times, &marks)?;
    if !grad {
        return Ok((nll.item(), Vec::new()));
    }
    let grads = tape.backward(&nll)?;
    Ok((nll.item(), grads.get_or_zeros(&times)))
}

/// Gradient of the objective with respect to the noise on each clean
/// event, holding the order produced by `perm` fixed. When the sort had to
/// shift the sequence to start at zero, the shift is `t + noise` of the
/// first event and enters every position with a minus sign.
pub(super) fn noise_gradient<T: Scalar>(time_grad: &[T], perm: &[usize], shifted: bool) -> Vec<T> {
    let mut g = vec![T::zero(); perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        g[i] = g[i] + time_grad[k];
    }
    if shifted {
        let total = time_grad.iter().fold(T::zero(), |a, &b| a + b);
        g[perm[0]] = g[perm[0]] - total;
    }
    g
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Projected sign-gradient ascent on the adversary NLL over per-event time
/// noise. Each step differentiates at the current order, then the noisy
/// times are re-sorted. With `momentum` set the raw gradient is replaced by
/// the L1-normalised running sum `g_k = mu g_{k-1} + grad / |grad|_1`.
fn sign_ascent<T: Scalar>(
    seq: &Sequence<T>,
    adversary: &MtppModel<T>,
    cfg: &BaselineConfig,
    momentum: Option<f64>,
) -> Result<NoiseAttack<T>, BaselineError> {
    cfg.validate()?;
    let n = seq.len();
    let budget = T::lit(cfg.eps_budget);
    let step = T::lit(cfg.step_size);
    let mut noise = vec![T::zero(); n];
    let mut velocity = vec![T::zero(); n];
    for _ in 0..cfg.steps {
        let (pert, perm) = apply_noise_and_sort(seq, &noise)?;
        let (_, time_grad) = time_gradient(adversary, seq, &pert, true)?;
        let shifted = seq.times()[perm[0]] + noise[perm[0]] < T::zero();
        let g = noise_gradient(&time_grad, &perm, shifted);
        let direction = match momentum {
            Some(mu) => {
                let l1 = g.iter().fold(T::zero(), |a, &b| a + b.abs());
                let inv = if l1 > T::zero() { T::one() / l1 } else { T::zero() };
                for (v, &gi) in velocity.iter_mut().zip(&g) {
                    *v = T::lit(mu) * *v + gi * inv;
                }
                velocity.clone()
            }
            None => g,
        };
        for (d, &gi) in noise.iter_mut().zip(&direction) {
            *d = (*d + step * sign(gi)).max(-budget).min(budget);
        }
    }
    let (sequence, perm) = apply_noise_and_sort(seq, &noise)?;
    let objective = perturbed_nll(adversary, seq, &sequence)?;
    Ok(NoiseAttack {
        sequence,
        perm,
        noise,
        objective,
    })
}

/// Projected gradient ascent with sign steps. Marks are left untouched.
pub fn pgd_attack<T: Scalar>(
    seq: &Sequence<T>,
    adversary: &MtppModel<T>,
    cfg: &BaselineConfig,
) -> Result<NoiseAttack<T>, BaselineError> {
    sign_ascent(seq, adversary, cfg, None)
}

/// Momentum iterative FGSM: sign steps along the decayed sum of
/// L1-normalised gradients.
pub fn mifgsm_attack<T: Scalar>(
    seq: &Sequence<T>,
    adversary: &MtppModel<T>,
    cfg: &BaselineConfig,
) -> Result<NoiseAttack<T>, BaselineError> {
    sign_ascent(seq, adversary, cfg, Some(cfg.momentum))
}
