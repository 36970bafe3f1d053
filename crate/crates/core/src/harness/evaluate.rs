use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{mifgsm_attack, perturbed_nll, pgd_attack, random_perm_control, BaselineConfig};
use crate::ctes::{distance_hard, Dataset, DistanceParams, Sequence};
use crate::io_util::write_atomic;
use crate::mtpp::{metrics, MtppModel};
use crate::permattack::{emit_adversarial, AttackModel};
use crate::scalar::Scalar;

use super::HarnessError;

/// CSV header of metric rows; the column order is fixed.
pub const CSV_HEADER: [&str; 7] = ["method", "mode", "mae", "mpa", "mean_distance", "objective", "seed"];

/// One line of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub mode: String,
    pub mae: f64,
    pub mpa: f64,
    /// Mean offset-aligned hard distance of the emitted sequences.
    pub mean_distance: f64,
    /// Mean learner NLL of the clean events given the perturbed histories.
    pub objective: f64,
    pub seed: u64,
}

/// Perturbed copies of a test split, aligned with its sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T> {
    pub sequences: Vec<Sequence<T>>,
    /// `perms[s][k]`: clean index of the event at position `k` of sequence `s`.
    pub perms: Vec<Vec<usize>>,
    pub distances: Vec<f64>,
    /// Chronology hinge at emission; zero for methods without one.
    pub hinges: Vec<f64>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn mean_distance(&self) -> f64 {
        mean(&self.distances)
    }

    /// The unperturbed split.
    pub fn identity(test: &Dataset<T>) -> Self {
        let n = test.len();
        Self {
            sequences: test.sequences.clone(),
            perms: test.sequences.iter().map(|s| (0..s.len()).collect()).collect(),
            distances: vec![0.0; n],
            hinges: vec![0.0; n],
        }
    }

    /// The perturbed split as a dataset.
    pub fn to_dataset(&self, like: &Dataset<T>, name: &str) -> Result<Dataset<T>, HarnessError> {
        Ok(Dataset::new(name, like.num_marks, self.sequences.clone())?)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn hard_distance<T: Scalar>(clean: &Sequence<T>, pert: &Sequence<T>, rho_c: f64) -> Result<f64, HarnessError> {
    Ok(distance_hard(clean, pert, &DistanceParams::new(T::lit(rho_c))?)?.as_f64())
}

/// Emits the trained permutation attack on every test sequence at the
/// final temperature.
pub fn perturb_permtpp<T: Scalar>(
    attack: &AttackModel<T>,
    adversary: &MtppModel<T>,
    test: &Dataset<T>,
) -> Result<Perturbation<T>, HarnessError> {
    let tau = T::lit(attack.config.tau_final);
    let out = test
        .sequences
        .par_iter()
        .map(|s| emit_adversarial(attack, adversary, s, tau))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Perturbation {
        distances: out.iter().map(|e| e.distance.as_f64()).collect(),
        hinges: out.iter().map(|e| e.hinge.as_f64()).collect(),
        perms: out.iter().map(|e| e.perm.clone()).collect(),
        sequences: out.into_iter().map(|e| e.sequence).collect(),
    })
}

/// PGD (`momentum == None`) or MI-FGSM against `adversary`.
pub fn perturb_gradient<T: Scalar>(
    adversary: &MtppModel<T>,
    test: &Dataset<T>,
    cfg: &BaselineConfig,
    momentum: bool,
    rho_c: f64,
) -> Result<Perturbation<T>, HarnessError> {
    let out = test
        .sequences
        .par_iter()
        .map(|s| {
            let a = if momentum {
                mifgsm_attack(s, adversary, cfg)?
            } else {
                pgd_attack(s, adversary, cfg)?
            };
            let d = hard_distance(s, &a.sequence, rho_c)?;
            Ok((a, d))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Perturbation {
        distances: out.iter().map(|(_, d)| *d).collect(),
        hinges: vec![0.0; out.len()],
        perms: out.iter().map(|(a, _)| a.perm.clone()).collect(),
        sequences: out.into_iter().map(|(a, _)| a.sequence).collect(),
    })
}

/// Random permutation control, sequence by sequence matched to `targets`.
/// A zero (or roundoff-level) target leaves the sequence clean. Each sequence draws from its
/// own stream derived from `seed`, so the result is independent of
/// scheduling.
pub fn perturb_random<T: Scalar>(
    test: &Dataset<T>,
    targets: &[f64],
    rho_c: f64,
    seed: u64,
) -> Result<Perturbation<T>, HarnessError> {
    if targets.len() != test.len() {
        return Err(HarnessError::Config(format!(
            "{} distance targets for {} sequences",
            targets.len(),
            test.len()
        )));
    }
    let params = DistanceParams::new(T::lit(rho_c))?;
    let out = test
        .sequences
        .par_iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (s, &target))| {
            // targets at roundoff level come from a sort that moved nothing
            let span = s.times()[s.len() - 1].as_f64() - s.times()[0].as_f64();
            if target <= 1e-9 * span.max(1.0) {
                return Ok((s.clone(), (0..s.len()).collect(), 0.0));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let c = random_perm_control(s, T::lit(target), &params, &mut rng)?;
            Ok((c.sequence, c.perm, c.distance.as_f64()))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Perturbation {
        distances: out.iter().map(|o| o.2).collect(),
        hinges: vec![0.0; out.len()],
        perms: out.iter().map(|o| o.1.clone()).collect(),
        sequences: out.into_iter().map(|o| o.0).collect(),
    })
}

/// Learner metrics on the clean events of `test` given the perturbed
/// histories, plus the realised mean hard distance.
pub fn evaluate<T: Scalar>(
    learner: &MtppModel<T>,
    test: &Dataset<T>,
    pert: &Perturbation<T>,
    method: &str,
    mode: &str,
    seed: u64,
) -> Result<MetricsRow, HarnessError> {
    let m = metrics(learner, test, &pert.to_dataset(test, "perturbed")?)?;
    let nll = test
        .sequences
        .par_iter()
        .zip(&pert.sequences)
        .map(|(c, p)| perturbed_nll(learner, c, p).map(|v| v.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsRow {
        method: method.into(),
        mode: mode.into(),
        mae: m.mae,
        mpa: m.mpa,
        mean_distance: pert.mean_distance(),
        objective: mean(&nll),
        seed,
    })
}

/// Bisects a noise budget until `realised(budget)` lands within
/// `[0.9, 1.1] * target`. `realised` should grow with the budget.
/// Returns the budget and its realised value.
pub fn match_budget<F>(target: f64, initial: f64, mut realised: F) -> Result<(f64, f64), HarnessError>
where
    F: FnMut(f64) -> Result<f64, HarnessError>,
{
    if !(target > 0.0 && target.is_finite() && initial > 0.0) {
        return Err(HarnessError::Config(format!("cannot match distance {target}")));
    }
    let (lo_ok, hi_ok) = (0.9 * target, 1.1 * target);
    let (mut lo, mut hi) = (0.0, None::<f64>);
    let mut budget = initial;
    let mut closest = (f64::INFINITY, 0.0);
    for _ in 0..60 {
        let d = realised(budget)?;
        if (d - target).abs() < (closest.0 - target).abs() {
            closest = (d, budget);
        }
        if (lo_ok..=hi_ok).contains(&d) {
            return Ok((budget, d));
        }
        if d < lo_ok {
            lo = budget;
        } else {
            hi = Some(budget);
        }
        budget = match hi {
            Some(h) => (lo + h) / 2.0,
            None => budget * 2.0,
        };
    }
    Err(HarnessError::BudgetMismatch {
        target,
        closest: closest.0,
        budget: closest.1,
    })
}

pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(HarnessError::csv(path))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.mode.clone(),
            r.mae.to_string(),
            r.mpa.to_string(),
            r.mean_distance.to_string(),
            r.objective.to_string(),
            r.seed.to_string(),
        ])
        .map_err(HarnessError::csv(path))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    write_atomic(path, &bytes).map_err(HarnessError::io(path))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(HarnessError::csv(path))?;
    let header = r.headers().map_err(HarnessError::csv(path))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(HarnessError::Config(format!(
            "{}: expected header {}",
            path.display(),
            CSV_HEADER.join(",")
        )));
    }
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(HarnessError::csv(path))
}
