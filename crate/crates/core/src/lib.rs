//! Adversarial attacks and adversarial training for neural marked temporal
//! point processes.

pub mod autodiff;
pub mod baselines;
pub mod ctes;
pub mod harness;
pub mod mtpp;
pub mod nn;
mod io_util;
pub mod optim;
pub mod params;
pub mod permattack;
pub mod scalar;

/// Double precision instances of the core types.
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Sequence = ctes::Sequence<f64>;
pub type Dataset = ctes::Dataset<f64>;
pub type MtppModel = mtpp::MtppModel<f64>;
pub type AttackModel = permattack::AttackModel<f64>;
pub type Perturbation = harness::Perturbation<f64>;
pub type Split = harness::Split<f64>;
