use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctes::Dataset;
use crate::mtpp::{MtppError, MtppModel};
use crate::optim::{batch_gradients, Adam, AdamConfig};
use crate::params::{scale_grads, GroupGrads, ParamGroup};
use crate::permattack::{adversary_nll_with_gradients, attack_forward, attack_loss, attack_loss_with_gradients, AttackModel};
use crate::scalar::Scalar;

use super::HarnessError;

/// Minibatch settings for attack training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Temperature for `epoch` of `epochs`: `tau` for the first half, then a
/// geometric anneal that reaches `tau_final` on the last epoch.
pub fn tau_schedule(epoch: usize, epochs: usize, tau: f64, tau_final: f64) -> f64 {
    let hold = epochs / 2;
    if epoch < hold || epochs <= hold {
        return tau;
    }
    let span = (epochs - hold) as f64;
    let k = (epoch - hold + 1) as f64;
    tau * (tau_final / tau).powf((k / span).min(1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrainReport {
    pub taus: Vec<f64>,
    /// Mean attack loss per epoch at that epoch's temperature.
    pub train_loss: Vec<f64>,
    /// Mean attack loss on the validation split at `tau_final` after training.
    pub val_objective: Option<f64>,
}

/// Mean attack loss over `ds` at temperature `tau`.
pub fn mean_attack_loss<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    ds: &Dataset<T>,
    tau: f64,
) -> Result<f64, HarnessError> {
    if ds.is_empty() {
        return Err(HarnessError::Config("empty dataset".into()));
    }
    let losses = ds
        .sequences
        .par_iter()
        .map(|s| attack_loss(attack, adversary, s, T::lit(tau)).map(|l| l.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean adversary NLL of the clean events under the current attack.
pub fn mean_adversarial_nll<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    ds: &Dataset<T>,
    tau: f64,
) -> Result<f64, HarnessError> {
    let losses = ds
        .sequences
        .par_iter()
        .map(|s| {
            let tape = crate::autodiff::Tape::new();
            let input = crate::mtpp::SequenceInput::from_sequence(s, adversary.config.num_marks);
            let f = attack_forward(
                &tape,
                attack,
                &attack.params.constants(),
                adversary,
                &adversary.params.constants(),
                &input,
                T::lit(tau),
            )?;
            Ok(f.nll.item().as_f64())
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// One shuffled pass of Adam over `ds` on the batch mean of `f`. The
/// parameters are restored to their pre-step values if a batch loss or an
/// updated parameter is non-finite.
fn epoch<T, G, F>(
    group: &mut G,
    opt: &mut Adam<T>,
    order: &mut [usize],
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    phase: &'static str,
    epoch: usize,
    f: F,
) -> Result<f64, HarnessError>
where
    T: Scalar,
    G: ParamGroup<T> + Clone + Sync,
    F: Fn(&G, usize) -> Result<(T, GroupGrads<T>), HarnessError> + Sync,
{
    if batch_size == 0 {
        return Err(HarnessError::Config("batch_size must be positive".into()));
    }
    order.shuffle(rng);
    let mut total = 0.0;
    for (batch, idx) in order.chunks(batch_size).enumerate() {
        let snapshot = group.clone();
        let (loss, mut grads) = batch_gradients(idx, |i| f(&snapshot, i))?;
        let diverged = |detail: String| HarnessError::Divergence {
            phase,
            epoch,
            batch,
            detail,
        };
        if !loss.is_finite() {
            return Err(diverged(format!("batch loss {loss}")));
        }
        scale_grads(&mut grads, T::one() / T::from_usize_lossy(idx.len()));
        opt.step(group, &grads);
        if !group.all_finite() {
            *group = snapshot;
            return Err(diverged("non-finite parameter after update".into()));
        }
        total += loss.as_f64();
    }
    Ok(total / order.len() as f64)
}

fn attack_epoch<T: Scalar>(
    attack: &mut AttackModel<T>,
    adversary: &MtppModel<T>,
    train: &Dataset<T>,
    opt: &mut Adam<T>,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    tau: f64,
    index: usize,
) -> Result<f64, HarnessError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let shell = attack.clone();
    epoch(&mut attack.params, opt, &mut order, rng, batch_size, "attack", index, |p, i| {
        let probe = AttackModel {
            params: p.clone(),
            ..shell.clone()
        };
        Ok(attack_loss_with_gradients(&probe, adversary, &train.sequences[i], T::lit(tau))?)
    })
}

/// Minimises the mean attack loss over `train` with the adversary frozen.
/// The temperature follows [`tau_schedule`]. On divergence the attack keeps
/// its last finite parameters and the error is returned.
pub fn train_attack<T: Scalar>(
    attack: &mut AttackModel<T>,
    adversary: &MtppModel<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &AttackTrainConfig,
) -> Result<AttackTrainReport, HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let (tau0, tau1) = (attack.config.tau, attack.config.tau_final);
    let mut opt = Adam::new(cfg.adam.clone(), &attack.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = AttackTrainReport::default();
    for e in 0..cfg.epochs {
        let tau = tau_schedule(e, cfg.epochs, tau0, tau1);
        let loss = attack_epoch(attack, adversary, train, &mut opt, &mut rng, cfg.batch_size, tau, e)?;
        report.taus.push(tau);
        report.train_loss.push(loss);
    }
    report.val_objective = val.map(|v| mean_attack_loss(attack, adversary, v, tau1)).transpose()?;
    Ok(report)
}

/// Alternating schedule for adversarial training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Attack epochs per round.
    pub k_adv: usize,
    /// Learner epochs per round.
    pub k_def: usize,
    pub rounds: usize,
    pub attack: AttackTrainConfig,
    /// Learner optimiser; the learner batch size and shuffle seed follow
    /// `learner_batch_size` and `seed`.
    pub learner_adam: AdamConfig,
    pub learner_batch_size: usize,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            k_adv: 2,
            k_def: 2,
            rounds: 15,
            attack: AttackTrainConfig::default(),
            learner_adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            learner_batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Attack,
    Defense,
}

/// Mean adversarial NLL of the training set after one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub round: usize,
    pub phase: Phase,
    pub tau: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub trace: Vec<PhaseRecord>,
}

/// Min-max training: each round runs `k_adv` attack epochs against the
/// current learner, then `k_def` learner epochs on the NLL of the clean
/// events under the attack's current perturbations. Both models are warm
/// started from their arguments and keep training across rounds. The
/// temperature follows [`tau_schedule`] over rounds.
pub fn train_defense<T: Scalar>(
    learner: &mut MtppModel<T>,
    attack: &mut AttackModel<T>,
    train: &Dataset<T>,
    cfg: &DefenseConfig,
) -> Result<DefenseReport, HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::Config("empty training split".into()));
    }
    let (tau0, tau1) = (attack.config.tau, attack.config.tau_final);
    let mut attack_opt = Adam::new(cfg.attack.adam.clone(), &attack.params);
    let mut learner_opt = Adam::new(cfg.learner_adam.clone(), &learner.params);
    // separate streams, so the learner sees the same shuffles as plain MLE
    let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.attack.seed);
    let mut learner_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = DefenseReport::default();
    for round in 0..cfg.rounds {
        let tau = tau_schedule(round, cfg.rounds, tau0, tau1);
        for e in 0..cfg.k_adv {
            attack_epoch(
                attack,
                learner,
                train,
                &mut attack_opt,
                &mut attack_rng,
                cfg.attack.batch_size,
                tau,
                round * cfg.k_adv + e,
            )?;
        }
        report.trace.push(PhaseRecord {
            round,
            phase: Phase::Attack,
            tau,
            objective: mean_adversarial_nll(attack, learner, train, tau)?,
        });
        let shell = learner.clone();
        let frozen = attack.clone();
        for e in 0..cfg.k_def {
            epoch(
                &mut learner.params,
                &mut learner_opt,
                &mut order,
                &mut learner_rng,
                cfg.learner_batch_size,
                "defense",
                round * cfg.k_def + e,
                |p, i| {
                    let probe = MtppModel {
                        params: p.clone(),
                        config: shell.config.clone(),
                    };
                    Ok(adversary_nll_with_gradients(&frozen, &probe, &train.sequences[i], T::lit(tau))?)
                },
            )?;
        }
        report.trace.push(PhaseRecord {
            round,
            phase: Phase::Defense,
            tau,
            objective: mean_adversarial_nll(attack, learner, train, tau)?,
        });
    }
    Ok(report)
}

impl From<MtppError> for HarnessError {
    fn from(e: MtppError) -> Self {
        match e {
            MtppError::Divergence { epoch, batch, detail } => HarnessError::Divergence {
                phase: "mle",
                epoch,
                batch,
                detail,
            },
            other => HarnessError::Mtpp(other),
        }
    }
}
