use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctes::Dataset;
use crate::optim::{batch_gradients, Adam, AdamConfig};
use crate::params::{scale_grads, ParamGroup};
use crate::scalar::Scalar;

use super::model::{nll_clean, nll_with_gradients};
use super::{MtppError, MtppModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Mean per-sequence negative log-likelihood before training and after
/// every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Mean [`nll_clean`](super::nll_clean) over a dataset.
pub fn mean_nll<T: Scalar>(model: &MtppModel<T>, ds: &Dataset<T>) -> Result<f64, MtppError> {
    if ds.is_empty() {
        return Err(MtppError::EmptyDataset);
    }
    let losses = ds
        .sequences
        .par_iter()
        .map(|s| nll_clean(model, s).map(|l| l.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Maximum-likelihood training with Adam on the mean sequence NLL.
///
/// Aborts with [`MtppError::Divergence`] as soon as a batch loss or an
/// updated parameter is non-finite; `model` then holds the last update.
pub fn train_mle<T: Scalar>(
    model: &mut MtppModel<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport, MtppError> {
    if train.is_empty() {
        return Err(MtppError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(MtppError::Config("batch_size must be positive".into()));
    }
    let mut report = TrainReport {
        initial_train_loss: mean_nll(model, train)?,
        initial_val_loss: val.map(|v| mean_nll(model, v)).transpose()?,
        ..TrainReport::default()
    };
    let mut opt = Adam::new(cfg.adam.clone(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &*model;
            let (loss, mut grads) = batch_gradients(idx, |i| nll_with_gradients(snapshot, &train.sequences[i]))?;
            let diverged = |detail: String| MtppError::Divergence { epoch, batch, detail };
            if !loss.is_finite() {
                return Err(diverged(format!("batch loss {loss}")));
            }
            scale_grads(&mut grads, T::one() / T::from_usize_lossy(idx.len()));
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(diverged("non-finite parameter after update".into()));
            }
            epoch_loss += loss.as_f64();
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        if let Some(v) = val {
            report.val_loss.push(mean_nll(model, v)?);
        }
    }
    Ok(report)
}
