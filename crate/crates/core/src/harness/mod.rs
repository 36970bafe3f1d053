//! Experiment orchestration: data splits, attack and defense training,
//! evaluation rows and the command line front end.

pub mod cli;
mod config;
mod evaluate;
mod train;


use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::ctes::{CtesError, Dataset};
use crate::mtpp::MtppError;
use crate::params::CheckpointError;
use crate::permattack::AttackError;
use crate::scalar::Scalar;

pub use config::{key_spec, ExperimentConfig, KeySpec, Kind, Mode, KEYS};
pub use evaluate::{
    evaluate, match_budget, perturb_gradient, perturb_permtpp, perturb_random, read_rows, write_rows, MetricsRow,
    Perturbation, CSV_HEADER,
};
pub use train::{
    mean_adversarial_nll, mean_attack_loss, tau_schedule, train_attack, train_defense, AttackTrainConfig,
    AttackTrainReport, DefenseConfig, DefenseReport, Phase, PhaseRecord,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{phase} training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("no noise budget reaches distance {target} within 10% (closest {closest} at budget {budget})")]
    BudgetMismatch { target: f64, closest: f64, budget: f64 },
    #[error(transparent)]
    Mtpp(MtppError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Ctes(#[from] CtesError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    /// Process exit status: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Divergence { .. } | Self::BudgetMismatch { .. } => 2,
            Self::Attack(AttackError::Mtpp(MtppError::Divergence { .. })) => 2,
            Self::Baseline(BaselineError::Unreachable { .. }) => 2,
            _ => 1,
        }
    }

    fn io(path: &Path) -> impl Fn(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn csv(path: &Path) -> impl Fn(csv::Error) -> Self + '_ {
        move |source| Self::Csv {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Train, validation and test parts of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

/// Seeded shuffle, then the first `round(train * n)` sequences train, the
/// next `round(val * n)` validate and the rest test.
pub fn split_dataset<T: Scalar>(ds: &Dataset<T>, fractions: [f64; 3], seed: u64) -> Result<Split<T>, HarnessError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HarnessError::Config(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    Ok(Split {
        train: ds.subset(&order[..n_train], format!("{}-train", ds.name)),
        val: ds.subset(&order[n_train..n_train + n_val], format!("{}-val", ds.name)),
        test: ds.subset(&order[n_train + n_val..], format!("{}-test", ds.name)),
    })
}
