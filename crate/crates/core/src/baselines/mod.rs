//! Comparison attacks: sign-gradient ascent on event times (PGD and
//! MI-FGSM) and a random permutation control matched to a distance target.

mod control;
mod gradient;


use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::ctes::{CtesError, Sequence};
use crate::mtpp::MtppError;
use crate::permattack::AttackError;

pub use control::{random_perm_control, MAX_PROPOSALS};
pub use gradient::{mifgsm_attack, perturbed_nll, pgd_attack, time_gradient};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mtpp(#[from] MtppError),
    #[error(transparent)]
    Ctes(#[from] CtesError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("invalid baseline configuration: {0}")]
    Config(String),
    #[error("no proposal within 10% of distance {target} after {proposals} tries (closest {closest})")]
    Unreachable { target: f64, closest: f64, proposals: usize },
}

/// Settings shared by the gradient baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    /// L-infinity bound on the per-event time noise.
    pub eps_budget: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Decay of the accumulated gradient; MI-FGSM only.
    pub momentum: f64,
}

impl BaselineConfig {
    /// `steps` sign steps of size `eps_budget / steps`, so the walk can
    /// reach the budget boundary.
    pub fn new(eps_budget: f64, steps: usize) -> Self {
        Self {
            eps_budget,
            steps,
            step_size: eps_budget / steps.max(1) as f64,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let fail = |m: &str| Err(BaselineError::Config(m.to_string()));
        if !(self.eps_budget > 0.0 && self.eps_budget.is_finite()) {
            return fail("eps_budget must be positive and finite");
        }
        if self.steps == 0 {
            return fail("steps must be at least 1");
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return fail("step_size must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Result of a gradient baseline on one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAttack<T> {
    pub sequence: Sequence<T>,
    /// `perm[k]`: clean index of the event at position `k`.
    pub perm: Vec<usize>,
    /// Final noise per clean event, inside `[-eps_budget, eps_budget]`.
    pub noise: Vec<T>,
    /// Adversary NLL of the clean events given `sequence`.
    pub objective: T,
}

/// Result of the random permutation control.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSample<T> {
    pub sequence: Sequence<T>,
    pub perm: Vec<usize>,
    pub distance: T,
    pub proposals: usize,
}
