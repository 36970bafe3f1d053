use crate::autodiff::{Tape, Tensor};
use crate::ctes::Sequence;
use crate::mtpp::{encode, log_likelihood_terms, MtppModel, MtppVars, SequenceInput};
use crate::nn::{causal_attention, causal_mask, mask_column, time_encoding};
use crate::params::GroupGrads;
use crate::scalar::Scalar;

use super::sinkhorn::{apply_soft_perm, gs_forward};
use super::{AttackError, AttackModel, AttackVars};

/// Per-position noise `eps = g (w_eps . tanh(attn(z)) + b_eps)` for the
/// soft sequence `(t_p, c_p)`, where `z_i = c_p[i] W_c + u_i w_t + PE(u_i)`
/// and `u = t_p / g` is time in units of `g = time_scale`. The unit only
/// reparametrises `w_t`, `w_eps` and `b_eps`. Padded positions get zero
/// noise.
pub fn eps_forward<T: Scalar>(
    tape: &Tape<T>,
    w: &AttackVars<T>,
    t_p: &Tensor<T>,
    c_p: &Tensor<T>,
    mask: &[bool],
    time_scale: T,
) -> Result<Tensor<T>, AttackError> {
    let dim = w.attn_q.shape()[0];
    let u = tape.scale(t_p, T::one() / time_scale)?;
    let z = tape.add(
        &tape.add(&tape.matmul(c_p, &w.noise_wc)?, &tape.matmul(&u, &w.noise_wt)?)?,
        &time_encoding(tape, &u, dim)?,
    )?;
    let s = tape.tanh(&causal_attention(tape, &z, &w.attn_q, &w.attn_k, &w.attn_v, &causal_mask(mask))?)?;
    let eps = tape.add(&tape.matmul(&s, &w.out_w)?, &w.out_b)?;
    Ok(tape.scale(&tape.mul(&eps, &mask_column(mask))?, time_scale)?)
}

/// Chronology constraints `A eps <= B t_pi` over `n` real positions: rows
/// `0..n-1` demand `t'_i <= t'_{i+1}`, the last row demands `t'_1 >= 0`.
#[derive(Clone, Debug)]
pub struct ConstraintSystem<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConstraintSystem<T> {
    pub fn new(n: usize) -> Self {
        let mut a = vec![T::zero(); n * n];
        let mut b = vec![T::zero(); n * n];
        for i in 0..n.saturating_sub(1) {
            a[i * n + i] = T::one();
            a[i * n + i + 1] = -T::one();
            b[i * n + i] = -T::one();
            b[i * n + i + 1] = T::one();
        }
        if n > 0 {
            a[(n - 1) * n] = a[(n - 1) * n] - T::one();
            b[(n - 1) * n] = b[(n - 1) * n] + T::one();
        }
        Self {
            a: Tensor::new(&[n, n], a).expect("square"),
            b: Tensor::new(&[n, n], b).expect("square"),
        }
    }
}

/// `sum_i relu((A eps - B t_p)_i)` over the real prefix of length
/// `system.a.rows()`.
pub fn hinge_penalty<T: Scalar>(
    tape: &Tape<T>,
    eps: &Tensor<T>,
    t_p: &Tensor<T>,
    system: &ConstraintSystem<T>,
) -> Result<Tensor<T>, AttackError> {
    let m = system.a.rows();
    let eps = tape.slice(eps, 0, 0, m)?;
    let t_p = tape.slice(t_p, 0, 0, m)?;
    let slack = tape.sub(&tape.matmul(&system.a, &eps)?, &tape.matmul(&system.b, &t_p)?)?;
    Ok(tape.sum(&tape.relu(&slack)?, None)?)
}

/// Negative log-likelihood of the clean events in `clean` when the
/// adversary conditions on the perturbed sequence `(t_adv, c_adv)`
/// position by position. Returns the NLL and the per-position log
/// probability of the clean mark.
pub fn adv_nll<T: Scalar>(
    tape: &Tape<T>,
    adversary: &MtppModel<T>,
    w_adv: &MtppVars<T>,
    clean: &SequenceInput<T>,
    t_adv: &Tensor<T>,
    c_adv: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), AttackError> {
    let perturbed = SequenceInput {
        times: t_adv.clone(),
        marks: c_adv.clone(),
        labels: clean.labels.clone(),
        mask: clean.mask.clone(),
    };
    let cfg = &adversary.config;
    let h = encode(tape, cfg, w_adv, &perturbed)?;
    let terms = log_likelihood_terms(tape, cfg, w_adv, &h, t_adv, &clean.times, &clean.labels, &clean.mask)?;
    Ok((tape.neg(&terms.log_likelihood)?, terms.mark_log_prob))
}

/// `sum_i |t_adv_i - t_i| + rho_c * (1 - m(c_i | h'_{i-1}))` over real
/// positions.
pub fn distance_soft<T: Scalar>(
    tape: &Tape<T>,
    clean_times: &Tensor<T>,
    t_adv: &Tensor<T>,
    mark_log_prob: &Tensor<T>,
    mask: &[bool],
    rho_c: T,
) -> Result<Tensor<T>, AttackError> {
    let m = mask_column(mask);
    let time = tape.mul(&tape.abs(&tape.sub(t_adv, clean_times)?)?, &m)?;
    let miss = tape.sub(&Tensor::ones(&[mask.len(), 1]), &tape.exp(mark_log_prob)?)?;
    let marks = tape.scale(&tape.mul(&miss, &m)?, rho_c)?;
    Ok(tape.sum(&tape.add(&time, &marks)?, None)?)
}

/// Every intermediate of one attack forward pass.
#[derive(Clone, Debug)]
pub struct AttackForward<T> {
    pub p: Tensor<T>,
    pub t_perm: Tensor<T>,
    pub c_perm: Tensor<T>,
    pub eps: Tensor<T>,
    pub t_adv: Tensor<T>,
    pub nll: Tensor<T>,
    pub distance: Tensor<T>,
    pub hinge: Tensor<T>,
    /// `-nll + rho_d * distance + rho_ab * hinge`, minimised by the attack.
    pub loss: Tensor<T>,
}

/// Full differentiable attack on `clean` at temperature `tau`.
pub fn attack_forward<T: Scalar>(
    tape: &Tape<T>,
    attack: &AttackModel<T>,
    w: &AttackVars<T>,
    adversary: &MtppModel<T>,
    w_adv: &MtppVars<T>,
    clean: &SequenceInput<T>,
    tau: T,
) -> Result<AttackForward<T>, AttackError> {
    let cfg = &attack.config;
    let n = clean.len();
    let p = if cfg.permute {
        let h = encode(tape, &adversary.config, &adversary.params.constants(), clean)?;
        gs_forward(tape, w, &h, &clean.mask, tau, cfg.sinkhorn_iters)?
    } else {
        Tensor::identity(n)
    };
    let (t_perm, c_perm) = apply_soft_perm(tape, &p, &clean.times, &clean.marks)?;
    let eps = eps_forward(tape, w, &t_perm, &c_perm, &clean.mask, T::lit(cfg.time_scale))?;
    let t_adv = tape.add(&t_perm, &eps)?;
    let (nll, mark_log_prob) = adv_nll(tape, adversary, w_adv, clean, &t_adv, &c_perm)?;
    let distance = distance_soft(tape, &clean.times, &t_adv, &mark_log_prob, &clean.mask, T::lit(cfg.rho_c))?;
    let real = clean.mask.iter().filter(|&&m| m).count();
    let hinge = hinge_penalty(tape, &eps, &t_perm, &ConstraintSystem::new(real))?;
    let loss = tape.add(
        &tape.add(&tape.neg(&nll)?, &tape.scale(&distance, T::lit(cfg.rho_d))?)?,
        &tape.scale(&hinge, T::lit(cfg.rho_ab))?,
    )?;
    Ok(AttackForward {
        p,
        t_perm,
        c_perm,
        eps,
        t_adv,
        nll,
        distance,
        hinge,
        loss,
    })
}

/// Attack loss on one clean sequence with frozen adversary.
pub fn attack_loss<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    seq: &Sequence<T>,
    tau: T,
) -> Result<T, AttackError> {
    let tape = Tape::new();
    let input = SequenceInput::from_sequence(seq, adversary.config.num_marks);
    let f = attack_forward(
        &tape,
        attack,
        &attack.params.constants(),
        adversary,
        &adversary.params.constants(),
        &input,
        tau,
    )?;
    Ok(f.loss.item())
}

/// [`attack_loss`] and its gradient for every attack parameter.
pub fn attack_loss_with_gradients<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    seq: &Sequence<T>,
    tau: T,
) -> Result<(T, GroupGrads<T>), AttackError> {
    let tape = Tape::new();
    let w = attack.params.bind(&tape);
    let input = SequenceInput::from_sequence(seq, adversary.config.num_marks);
    let f = attack_forward(&tape, attack, &w, adversary, &adversary.params.constants(), &input, tau)?;
    let grads = tape.backward(&f.loss)?;
    Ok((f.loss.item(), w.gradients(&grads)))
}

/// Adversary NLL of `seq` under the attack's current perturbation (held
/// fixed), with gradients for the adversary parameters. This is the
/// defender's step in adversarial training.
pub fn adversary_nll_with_gradients<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    seq: &Sequence<T>,
    tau: T,
) -> Result<(T, GroupGrads<T>), AttackError> {
    let tape = Tape::new();
    let input = SequenceInput::from_sequence(seq, adversary.config.num_marks);
    let frozen = attack_forward(
        &tape,
        attack,
        &attack.params.constants(),
        adversary,
        &adversary.params.constants(),
        &input,
        tau,
    )?;
    let w_adv = adversary.params.bind(&tape);
    let (nll, _) = adv_nll(&tape, adversary, &w_adv, &input, &frozen.t_adv.detach(), &frozen.c_perm.detach())?;
    let grads = tape.backward(&nll)?;
    Ok((nll.item(), w_adv.gradients(&grads)))
}
