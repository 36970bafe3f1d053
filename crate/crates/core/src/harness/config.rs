use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::BaselineConfig;
use crate::ctes::{HawkesParams, SyntheticConfig};
use crate::mtpp::{MtppConfig, TrainConfig};
use crate::optim::AdamConfig;
use crate::permattack::AttackConfig;

use super::train::{AttackTrainConfig, DefenseConfig};
use super::HarnessError;

/// Value type of a configuration key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    FloatList,
}

/// One recognised configuration key. Keys are unique across sections, so
/// the bare key doubles as its command line flag.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    /// Empty for the top level of the file.
    pub section: &'static str,
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn entry(section: &'static str, key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        kind,
        default,
        help,
    }
}

use Kind::*;

pub const KEYS: &[KeySpec] = &[
    entry("", "seed", Int, "0", "seed for every random stream"),
    entry("", "mode", Text, "whitebox", "whitebox or blackbox"),
    entry("", "out", Text, "", "output path"),
    entry("", "dataset", Text, "", "dataset in JSONL format"),
    entry("", "model_path", Text, "", "learner checkpoint"),
    entry("", "surrogate_path", Text, "", "surrogate checkpoint for the black-box mode"),
    entry("", "attack_path", Text, "", "attack checkpoint"),
    entry("", "inputs", Text, "", "comma separated metric CSV files to merge"),
    entry("data", "marks", Int, "3", "number of marks"),
    entry("data", "mu", FloatList, "0.036,0.03,0.024", "base rates, one value or one per mark"),
    entry("data", "alpha", Float, "1.2", "excitation of mark k+1 by mark k (cyclic)"),
    entry("data", "beta", Float, "2.0", "kernel decay"),
    entry("data", "horizon", Float, "250", "observation window"),
    entry("data", "sequences", Int, "200", "number of sequences"),
    entry("data", "max_len", Int, "64", "truncate sequences to this many events"),
    entry("data", "min_len", Int, "4", "redraw sequences shorter than this"),
    entry("data", "train_frac", Float, "0.7", "training fraction"),
    entry("data", "val_frac", Float, "0.1", "validation fraction"),
    entry("data", "test_frac", Float, "0.2", "test fraction"),
    entry("model", "dim", Int, "16", "hidden width (even)"),
    entry("model", "k_int", Int, "20", "trapezoid points per interval"),
    entry("model", "k_pred", Int, "200", "quadrature points for time prediction"),
    entry("model", "lr", Float, "0.01", "learner learning rate"),
    entry("model", "epochs", Int, "30", "learner epochs"),
    entry("model", "batch_size", Int, "16", "learner batch size"),
    entry("attack", "noise_dim", Int, "16", "noise network width (even)"),
    entry("attack", "gs_hidden", Int, "16", "scorer hidden width"),
    entry("attack", "tau", Float, "1.0", "initial temperature"),
    entry("attack", "tau_final", Float, "0.1", "final temperature"),
    entry("attack", "sinkhorn_iters", Int, "20", "Sinkhorn sweeps"),
    entry("attack", "rho_d", Float, "1.0", "distance weight"),
    entry("attack", "rho_ab", Float, "10.0", "chronology hinge weight"),
    entry("attack", "rho_c", Float, "1.0", "mark mismatch cost"),
    entry("attack", "permute", Bool, "true", "learn a permutation (false keeps the order)"),
    entry("attack", "time_scale", Float, "0", "noise time unit; 0 uses the mean training gap"),
    entry("attack", "attack_lr", Float, "0.01", "attack learning rate"),
    entry("attack", "attack_epochs", Int, "30", "attack epochs"),
    entry("attack", "attack_batch_size", Int, "16", "attack batch size"),
    entry("attack", "method", Text, "permtpp", "none, permtpp, pgd, mifgsm or random"),
    entry("attack", "eps_budget", Float, "0", "noise bound of pgd/mifgsm; 0 matches target_distance"),
    entry("attack", "steps", Int, "10", "pgd/mifgsm steps"),
    entry("attack", "step_size", Float, "0", "pgd/mifgsm step; 0 uses eps_budget / steps"),
    entry("attack", "momentum", Float, "0.9", "mifgsm momentum"),
    entry("attack", "target_distance", Float, "0", "mean hard distance to match; 0 disables"),
    entry("defense", "k_adv", Int, "2", "attack epochs per round"),
    entry("defense", "k_def", Int, "2", "learner epochs per round"),
    entry("defense", "rounds", Int, "15", "alternation rounds"),
    entry("defense", "defense_lr", Float, "0.01", "learner learning rate during defense"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    WhiteBox,
    BlackBox,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WhiteBox => "whitebox",
            Self::BlackBox => "blackbox",
        }
    }
}

impl FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitebox" => Ok(Self::WhiteBox),
            "blackbox" => Ok(Self::BlackBox),
            _ => Err(HarnessError::Config(format!("mode must be whitebox or blackbox, got {s:?}"))),
        }
    }
}

/// Every key of [`KEYS`] with its current value. Values are checked
/// against their kind when set, so the typed getters cannot fail on a
/// registered key.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

fn check(spec: &KeySpec, value: &str) -> Result<(), HarnessError> {
    let bad = |what: &str| HarnessError::Config(format!("{}: expected {what}, got {value:?}", spec.key));
    match spec.kind {
        Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a nonnegative integer")),
        Float => match value.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad("true or false")),
        Text => Ok(()),
        FloatList => parse_list(value).map(|_| ()).ok_or_else(|| bad("comma separated finite numbers")),
    }
}

fn parse_list(value: &str) -> Option<Vec<f64>> {
    let xs: Option<Vec<f64>> = value.split(',').map(|v| v.trim().parse::<f64>().ok()).collect();
    xs.filter(|xs| !xs.is_empty() && xs.iter().all(|x| x.is_finite()))
}

impl ExperimentConfig {
    /// Defaults overlaid with an INI file. Keys must sit in their own
    /// section; the top level holds the general keys.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let ini = ini::Ini::load_from_file(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                let spec = key_spec(key).filter(|s| s.section == section).ok_or_else(|| {
                    HarnessError::Config(format!("{}: unknown key {key:?} in section [{section}]", path.display()))
                })?;
                cfg.set(spec.key, value)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let spec = key_spec(key).ok_or_else(|| HarnessError::Config(format!("unknown key {key:?}")))?;
        let value = value.trim();
        check(spec, value)?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key:?}"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("checked on set")
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("checked on set")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key).parse().expect("checked on set")
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("checked on set")
    }

    pub fn mode(&self) -> Result<Mode, HarnessError> {
        self.get("mode").parse()
    }

    /// A path key; empty means unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, HarnessError> {
        self.path(key)
            .ok_or_else(|| HarnessError::Config(format!("--{key} is required")))
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig, HarnessError> {
        let k = self.int("marks");
        if k == 0 {
            return Err(HarnessError::Config("marks must be positive".into()));
        }
        let mu = parse_list(self.get("mu")).expect("checked on set");
        let mu = match mu.len() {
            1 => vec![mu[0]; k],
            n if n == k => mu,
            n => return Err(HarnessError::Config(format!("mu has {n} entries for {k} marks"))),
        };
        let mut alpha = vec![vec![0.0; k]; k];
        for c in 0..k {
            alpha[(c + 1) % k][c] += self.float("alpha");
        }
        Ok(SyntheticConfig {
            hawkes: HawkesParams {
                mu,
                alpha,
                beta: self.float("beta"),
            },
            horizon: self.float("horizon"),
            num_sequences: self.int("sequences"),
            max_len: self.int("max_len"),
            min_len: self.int("min_len"),
            seed: self.seed(),
            name: "synthetic".into(),
        })
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        [self.float("train_frac"), self.float("val_frac"), self.float("test_frac")]
    }

    /// Architecture with the prediction horizon set from `mean_gap`.
    pub fn mtpp(&self, num_marks: usize, mean_gap: f64) -> MtppConfig {
        MtppConfig {
            k_int: self.int("k_int"),
            k_pred: self.int("k_pred"),
            ..MtppConfig::new(num_marks, self.int("dim")).with_horizon_from_gap(mean_gap)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            adam: adam(self.float("lr")),
            batch_size: self.int("batch_size"),
            epochs: self.int("epochs"),
            seed: self.seed(),
        }
    }

    /// Attack hyperparameters; a zero `time_scale` becomes `mean_gap`.
    pub fn attack(&self, mean_gap: f64) -> AttackConfig {
        let scale = self.float("time_scale");
        AttackConfig {
            noise_dim: self.int("noise_dim"),
            gs_hidden: self.int("gs_hidden"),
            tau: self.float("tau"),
            tau_final: self.float("tau_final"),
            sinkhorn_iters: self.int("sinkhorn_iters"),
            rho_d: self.float("rho_d"),
            rho_ab: self.float("rho_ab"),
            rho_c: self.float("rho_c"),
            permute: self.flag("permute"),
            time_scale: if scale > 0.0 { scale } else { mean_gap },
        }
    }

    pub fn attack_train(&self) -> AttackTrainConfig {
        AttackTrainConfig {
            adam: adam(self.float("attack_lr")),
            epochs: self.int("attack_epochs"),
            batch_size: self.int("attack_batch_size"),
            seed: self.seed(),
        }
    }

    pub fn defense(&self) -> DefenseConfig {
        DefenseConfig {
            k_adv: self.int("k_adv"),
            k_def: self.int("k_def"),
            rounds: self.int("rounds"),
            attack: self.attack_train(),
            learner_adam: adam(self.float("defense_lr")),
            learner_batch_size: self.int("batch_size"),
            seed: self.seed(),
        }
    }

    /// Gradient baseline settings at noise bound `budget`.
    pub fn baseline(&self, budget: f64) -> BaselineConfig {
        let steps = self.int("steps");
        let step = self.float("step_size");
        BaselineConfig {
            step_size: if step > 0.0 { step } else { budget / steps.max(1) as f64 },
            momentum: self.float("momentum"),
            ..BaselineConfig::new(budget, steps)
        }
    }
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}
