//! Neural marked temporal point process.
//!
//! A single causal self-attention layer summarises the first `i` events into
//! `h_i`. Conditioned on `h_i`, the next event has intensity
//! `softplus(v . h_i + w * (t - t_i) + b)` and mark distribution
//! `softmax(W_m h_i + b_m)`. Before the first event the model conditions on a
//! trainable `h_0` with previous time `0`.

mod model;
mod predict;
mod train;

#[cfg(test)]
mod tests;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::params::{param_group, Checkpoint, CheckpointError, Param};
use crate::scalar::Scalar;

pub use model::{
    encode, intensity, log_likelihood_terms, mark_dist, mark_logits, nll_clean, nll_padded, nll_with_gradients,
    LikelihoodTerms, SequenceInput,
};
pub use predict::{metrics, metrics_from_predictions, predict_next, predict_sequence, Metrics, Prediction};
pub use train::{mean_nll, train_mle, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum MtppError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("query time {t} precedes the last event time {last}")]
    QueryBeforeLast { t: f64, last: f64 },
    #[error("mark {mark} is outside the model's {num_marks} marks")]
    MarkOutOfRange { mark: usize, num_marks: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("dataset has no sequences")]
    EmptyDataset,
}

/// Architecture and quadrature settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtppConfig {
    pub num_marks: usize,
    /// Hidden width `D`; even, so the time encoding splits into sin/cos halves.
    pub dim: usize,
    /// Trapezoid points per inter-event interval of the survival integral.
    pub k_int: usize,
    /// Quadrature points for the next-event expectation.
    pub k_pred: usize,
    /// Prediction horizon past the last event.
    pub t_max: f64,
}

impl MtppConfig {
    pub fn new(num_marks: usize, dim: usize) -> Self {
        Self {
            num_marks,
            dim,
            k_int: 20,
            k_pred: 200,
            t_max: 10.0,
        }
    }

    /// Sets the prediction horizon to ten mean inter-event gaps.
    pub fn with_horizon_from_gap(mut self, mean_gap: f64) -> Self {
        self.t_max = 10.0 * mean_gap;
        self
    }

    pub fn validate(&self) -> Result<(), MtppError> {
        let fail = |m: &str| Err(MtppError::Config(m.to_string()));
        if self.num_marks == 0 {
            return fail("num_marks must be positive");
        }
        if self.dim < 2 || self.dim % 2 != 0 {
            return fail("dim must be even and at least 2");
        }
        if self.k_int < 2 || self.k_pred < 2 {
            return fail("quadrature needs at least 2 points");
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return fail("t_max must be positive and finite");
        }
        Ok(())
    }
}

param_group! {
    /// Trainable weights of the MTPP.
    pub struct MtppParams / MtppVars, kind = "mtpp" {
        /// `[C + 1, D]`; the last row embeds the padding mark.
        mark_embed,
        /// `[1, D]` gain on the time encoding.
        time_weight,
        enc_q,
        enc_k,
        enc_v,
        enc_out,
        /// `[1, D]`.
        enc_out_b,
        /// `[1, D]` history embedding before the first event.
        h0,
        /// `[D, 1]`.
        int_v,
        /// `[1]` slope on elapsed time.
        int_w,
        /// `[1]`.
        int_b,
        /// `[C, D]`.
        mark_w,
        /// `[1, C]`.
        mark_b,
    }
}

impl<T: Scalar> MtppParams<T> {
    pub fn init<R: rand::Rng + ?Sized>(cfg: &MtppConfig, rng: &mut R) -> Self {
        let (c, d) = (cfg.num_marks, cfg.dim);
        Self {
            mark_embed: Param::normal(&[c + 1, d], 1.0 / (d as f64).sqrt(), rng),
            time_weight: Param::filled(&[1, d], T::one()),
            enc_q: Param::glorot(&[d, d], rng),
            enc_k: Param::glorot(&[d, d], rng),
            enc_v: Param::glorot(&[d, d], rng),
            enc_out: Param::glorot(&[d, d], rng),
            enc_out_b: Param::zeros(&[1, d]),
            h0: Param::normal(&[1, d], 0.1, rng),
            int_v: Param::normal(&[d, 1], 0.1, rng),
            int_w: Param::zeros(&[1]),
            int_b: Param::zeros(&[1]),
            mark_w: Param::normal(&[c, d], 0.1, rng),
            mark_b: Param::zeros(&[1, c]),
        }
    }

    /// All weights zero; the time gain stays at one.
    pub fn zeros(cfg: &MtppConfig) -> Self {
        let (c, d) = (cfg.num_marks, cfg.dim);
        Self {
            mark_embed: Param::zeros(&[c + 1, d]),
            time_weight: Param::filled(&[1, d], T::one()),
            enc_q: Param::zeros(&[d, d]),
            enc_k: Param::zeros(&[d, d]),
            enc_v: Param::zeros(&[d, d]),
            enc_out: Param::zeros(&[d, d]),
            enc_out_b: Param::zeros(&[1, d]),
            h0: Param::zeros(&[1, d]),
            int_v: Param::zeros(&[d, 1]),
            int_w: Param::zeros(&[1]),
            int_b: Param::zeros(&[1]),
            mark_w: Param::zeros(&[c, d]),
            mark_b: Param::zeros(&[1, c]),
        }
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MtppModel<T> {
    pub config: MtppConfig,
    pub params: MtppParams<T>,
}

impl<T: Scalar> MtppModel<T> {
    pub fn new(config: MtppConfig, seed: u64) -> Result<Self, MtppError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MtppParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: MtppConfig, params: MtppParams<T>) -> Result<Self, MtppError> {
        config.validate()?;
        let zeros = MtppParams::<T>::zeros(&config);
        for ((name, want), (_, got)) in crate::params::ParamGroup::named(&zeros)
            .into_iter()
            .zip(crate::params::ParamGroup::named(&params))
        {
            if want.shape != got.shape {
                return Err(CheckpointError::Shape {
                    name: name.into(),
                    found: got.shape.clone(),
                    expected: want.shape.clone(),
                }
                .into());
            }
        }
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_group(&self.params);
        ck.meta.insert("num_marks".into(), self.config.num_marks.into());
        ck.meta.insert("dim".into(), self.config.dim.into());
        ck.meta.insert("k_int".into(), self.config.k_int.into());
        ck.meta.insert("k_pred".into(), self.config.k_pred.into());
        ck.meta.insert("t_max".into(), self.config.t_max.into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MtppError> {
        let missing = |k: &str| MtppError::Config(format!("checkpoint meta lacks {k:?}"));
        let config = MtppConfig {
            num_marks: ck.meta_usize("num_marks").ok_or_else(|| missing("num_marks"))?,
            dim: ck.meta_usize("dim").ok_or_else(|| missing("dim"))?,
            k_int: ck.meta_usize("k_int").ok_or_else(|| missing("k_int"))?,
            k_pred: ck.meta_usize("k_pred").ok_or_else(|| missing("k_pred"))?,
            t_max: ck.meta_f64("t_max").ok_or_else(|| missing("t_max"))?,
        };
        config.validate()?;
        let mut params = MtppParams::zeros(&config);
        ck.fill_group(&mut params)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), MtppError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, MtppError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
