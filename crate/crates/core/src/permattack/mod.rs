//! Permutation-plus-noise adversarial attack on an MTPP.
//!
//! A pairwise MLP scores every pair of adversary embeddings, Sinkhorn
//! iterations turn the scores into a doubly stochastic matrix `P`, and a
//! causal attention head produces per-position time noise `eps` for the
//! soft-permuted sequence `(P t, P C)`. The adversarial times are
//! `t' = P t + eps`.

mod emit;
mod objective;
mod sinkhorn;

#[cfg(test)]
mod tests;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::ctes::CtesError;
use crate::mtpp::MtppError;
use crate::params::{param_group, Checkpoint, CheckpointError, Param};
use crate::scalar::Scalar;

pub use emit::{emit_adversarial, harden, Emission};
pub use objective::{
    adv_nll, adversary_nll_with_gradients, attack_forward, attack_loss, attack_loss_with_gradients, distance_soft,
    eps_forward, hinge_penalty, AttackForward, ConstraintSystem,
};
pub use sinkhorn::{apply_soft_perm, gs_forward, score_matrix, sinkhorn};

/// Scale of the bump directions `u`, per unit-variance embedding coordinate.
const BUMP_SHARPNESS: f64 = 3.0;
/// Readout weight `c` of each bump pair.
const BUMP_HEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mtpp(#[from] MtppError),
    #[error(transparent)]
    Ctes(#[from] CtesError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid attack configuration: {0}")]
    Config(String),
}

/// Attack hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Width of the noise generator.
    pub noise_dim: usize,
    /// Hidden width of the pairwise scoring MLP.
    pub gs_hidden: usize,
    /// Sinkhorn temperature at the start of training.
    pub tau: f64,
    /// Temperature reached at the end of the anneal and used for emission.
    pub tau_final: f64,
    pub sinkhorn_iters: usize,
    pub rho_d: f64,
    pub rho_ab: f64,
    pub rho_c: f64,
    /// When false the permutation is fixed to the identity and only the
    /// noise head acts.
    pub permute: bool,
    /// Time unit of the noise generator, typically the mean inter-event gap
    /// of the training data.
    pub time_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            noise_dim: 16,
            gs_hidden: 16,
            tau: 1.0,
            tau_final: 0.1,
            sinkhorn_iters: 20,
            rho_d: 1.0,
            rho_ab: 10.0,
            rho_c: 1.0,
            permute: true,
            time_scale: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let fail = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.tau_final > 0.0 && self.tau_final.is_finite()) {
            return fail("tau must be positive and finite");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return fail("time_scale must be positive and finite");
        }
        if self.sinkhorn_iters == 0 {
            return fail("sinkhorn_iters must be at least 1");
        }
        for (name, v) in [("rho_d", self.rho_d), ("rho_ab", self.rho_ab), ("rho_c", self.rho_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AttackError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.noise_dim < 2 || self.noise_dim % 2 != 0 {
            return fail("noise_dim must be even and at least 2");
        }
        if self.gs_hidden == 0 {
            return fail("gs_hidden must be positive");
        }
        Ok(())
    }
}

param_group! {
    /// Trainable attack weights: the pairwise scorer `g` and the noise
    /// generator.
    pub struct AttackParams / AttackVars, kind = "permtpp-attack" {
        /// `[2 Da, H]` over `concat(h_i, h_j)`.
        gs_w1,
        /// `[1, H]`.
        gs_b1,
        /// `[H, 1]`.
        gs_w2,
        /// `[1]`.
        gs_b2,
        /// `[C + 1, D]` mark rows.
        noise_wc,
        /// `[1, D]` time gain.
        noise_wt,
        attn_q,
        attn_k,
        attn_v,
        /// `[D, 1]`.
        out_w,
        /// `[1]`.
        out_b,
    }
}

impl<T: Scalar> AttackParams<T> {
    fn shapes(cfg: &AttackConfig, num_marks: usize, adversary_dim: usize) -> [Vec<usize>; 11] {
        let (d, hid) = (cfg.noise_dim, cfg.gs_hidden);
        [
            vec![2 * adversary_dim, hid],
            vec![1, hid],
            vec![hid, 1],
            vec![1],
            vec![num_marks + 1, d],
            vec![1, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, 1],
            vec![1],
        ]
    }

    pub fn zeros(cfg: &AttackConfig, num_marks: usize, adversary_dim: usize) -> Self {
        let s = Self::shapes(cfg, num_marks, adversary_dim);
        Self {
            gs_w1: Param::zeros(&s[0]),
            gs_b1: Param::zeros(&s[1]),
            gs_w2: Param::zeros(&s[2]),
            gs_b2: Param::zeros(&s[3]),
            noise_wc: Param::zeros(&s[4]),
            noise_wt: Param::zeros(&s[5]),
            attn_q: Param::zeros(&s[6]),
            attn_k: Param::zeros(&s[7]),
            attn_v: Param::zeros(&s[8]),
            out_w: Param::zeros(&s[9]),
            out_b: Param::zeros(&s[10]),
        }
    }

    /// The scorer starts identity-favouring and the noise output starts
    /// small, so training begins near the clean sequence.
    ///
    /// Sinkhorn cancels any score of the form `a(h_i) + b(h_j)`, and a
    /// random MLP on `[h_i; h_j]` is close to that form, which leaves `P`
    /// uniform. Instead hidden units come in pairs `tanh(u.(h_i - h_j) +/- 1)`
    /// read out with weights `+/- c`, each pair a bump that peaks at
    /// `h_i = h_j`. An odd last unit starts with a zero readout.
    pub fn init<R: rand::Rng + ?Sized>(cfg: &AttackConfig, num_marks: usize, adversary_dim: usize, rng: &mut R) -> Self {
        let s = Self::shapes(cfg, num_marks, adversary_dim);
        let (da, hid) = (adversary_dim, cfg.gs_hidden);
        let mut gs_w1 = Param::<T>::zeros(&s[0]);
        let mut gs_b1 = Param::<T>::zeros(&s[1]);
        let mut gs_w2 = Param::<T>::zeros(&s[2]);
        let dir = Normal::new(0.0, BUMP_SHARPNESS / (da.max(1) as f64).sqrt()).expect("finite std");
        for pair in 0..hid / 2 {
            let (a, b) = (2 * pair, 2 * pair + 1);
            for r in 0..da {
                let u = T::lit(dir.sample(rng));
                // rows 0..da read h_i, rows da..2da read h_j
                gs_w1.values[r * hid + a] = u;
                gs_w1.values[r * hid + b] = u;
                gs_w1.values[(da + r) * hid + a] = -u;
                gs_w1.values[(da + r) * hid + b] = -u;
            }
            gs_b1.values[a] = T::one();
            gs_b1.values[b] = -T::one();
            gs_w2.values[a] = T::lit(BUMP_HEIGHT);
            gs_w2.values[b] = T::lit(-BUMP_HEIGHT);
        }
        if hid % 2 == 1 {
            let col = Param::<T>::glorot(&[2 * da, 1], rng);
            for r in 0..2 * da {
                gs_w1.values[r * hid + hid - 1] = col.values[r];
            }
        }
        Self {
            gs_w1,
            gs_b1,
            gs_w2,
            gs_b2: Param::zeros(&s[3]),
            noise_wc: Param::normal(&s[4], 1.0 / (cfg.noise_dim as f64).sqrt(), rng),
            noise_wt: Param::normal(&s[5], 0.1, rng),
            attn_q: Param::glorot(&s[6], rng),
            attn_k: Param::glorot(&s[7], rng),
            attn_v: Param::glorot(&s[8], rng),
            out_w: Param::normal(&s[9], 0.01, rng),
            out_b: Param::zeros(&s[10]),
        }
    }
}

/// Attack hyperparameters, sizes and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel<T> {
    pub config: AttackConfig,
    pub num_marks: usize,
    /// Embedding width of the adversary MTPP the scorer reads.
    pub adversary_dim: usize,
    pub params: AttackParams<T>,
}

impl<T: Scalar> AttackModel<T> {
    pub fn new(config: AttackConfig, num_marks: usize, adversary_dim: usize, seed: u64) -> Result<Self, AttackError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttackParams::init(&config, num_marks, adversary_dim, &mut rng);
        Ok(Self {
            config,
            num_marks,
            adversary_dim,
            params,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_group(&self.params);
        let c = &self.config;
        ck.meta.insert("num_marks".into(), self.num_marks.into());
        ck.meta.insert("adversary_dim".into(), self.adversary_dim.into());
        ck.meta.insert("noise_dim".into(), c.noise_dim.into());
        ck.meta.insert("gs_hidden".into(), c.gs_hidden.into());
        ck.meta.insert("tau".into(), c.tau.into());
        ck.meta.insert("tau_final".into(), c.tau_final.into());
        ck.meta.insert("sinkhorn_iters".into(), c.sinkhorn_iters.into());
        ck.meta.insert("rho_d".into(), c.rho_d.into());
        ck.meta.insert("rho_ab".into(), c.rho_ab.into());
        ck.meta.insert("rho_c".into(), c.rho_c.into());
        ck.meta.insert("permute".into(), c.permute.into());
        ck.meta.insert("time_scale".into(), c.time_scale.into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AttackError> {
        let missing = |k: &str| AttackError::Config(format!("checkpoint meta lacks {k:?}"));
        let us = |k: &str| ck.meta_usize(k).ok_or_else(|| missing(k));
        let fl = |k: &str| ck.meta_f64(k).ok_or_else(|| missing(k));
        let config = AttackConfig {
            noise_dim: us("noise_dim")?,
            gs_hidden: us("gs_hidden")?,
            tau: fl("tau")?,
            tau_final: fl("tau_final")?,
            sinkhorn_iters: us("sinkhorn_iters")?,
            rho_d: fl("rho_d")?,
            rho_ab: fl("rho_ab")?,
            rho_c: fl("rho_c")?,
            permute: ck
                .meta
                .get("permute")
                .and_then(serde_json::Value::as_bool)
                .ok_or_else(|| missing("permute"))?,
            time_scale: fl("time_scale")?,
        };
        config.validate()?;
        let (num_marks, adversary_dim) = (us("num_marks")?, us("adversary_dim")?);
        let mut params = AttackParams::zeros(&config, num_marks, adversary_dim);
        ck.fill_group(&mut params)?;
        Ok(Self {
            config,
            num_marks,
            adversary_dim,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AttackError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, AttackError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
