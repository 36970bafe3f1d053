//! The `permtpp` command line. Every subcommand reads the same keys: the
//! defaults, then `--config FILE`, then `--key value` flags.

use std::ffi::OsString;
use std::path::Path;

use clap::error::ErrorKind;
use clap::{Arg, ArgMatches, Command};

use crate::ctes::{load_jsonl, save_jsonl, save_jsonl_with_perms, simulate_dataset, Dataset};
use crate::mtpp::{train_mle, MtppModel};
use crate::permattack::AttackModel;

use super::config::{ExperimentConfig, Mode, KEYS};
use super::evaluate::{
    evaluate, match_budget, perturb_gradient, perturb_permtpp, perturb_random, read_rows, write_rows, Perturbation,
};
use super::train::{train_attack, train_defense};
use super::{split_dataset, HarnessError, Split};

const SUBCOMMANDS: [(&str, &str); 7] = [
    ("simulate", "write a synthetic dataset to --out"),
    ("train", "fit the learner by maximum likelihood and save it to --out"),
    ("attack-train", "train the permutation attack against the adversary model"),
    ("attack-emit", "write adversarial copies of the test split to --out"),
    ("defend", "adversarial training of the learner, saved to --out"),
    ("evaluate", "append one metrics row for --method to the CSV --out"),
    ("report", "merge metric CSV files from --inputs into --out"),
];

fn command() -> Command {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("INI file with [data] [model] [attack] [defense] sections")];
    for spec in KEYS {
        let heading = if spec.section.is_empty() { "general" } else { spec.section };
        args.push(
            Arg::new(spec.key)
                .long(spec.key)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", spec.help, spec.default))
                .help_heading(heading),
        );
    }
    let mut cmd = Command::new("permtpp")
        .about("Permutation attacks and adversarial training for marked temporal point processes")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about).args(args.clone()));
    }
    cmd
}

/// Runs one invocation and returns the process exit code: 0 on success,
/// 1 on usage or configuration errors, 2 on numeric failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match configure(sub).and_then(|cfg| dispatch(name, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure(m: &ArgMatches) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::from_file(Path::new(path))?,
        None => ExperimentConfig::default(),
    };
    for spec in KEYS {
        if let Some(v) = m.get_one::<String>(spec.key) {
            cfg.set(spec.key, v)?;
        }
    }
    Ok(cfg)
}

fn dispatch(name: &str, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    match name {
        "simulate" => simulate(cfg),
        "train" => train(cfg),
        "attack-train" => attack_train(cfg),
        "attack-emit" => attack_emit(cfg),
        "defend" => defend(cfg),
        "evaluate" => evaluate_cmd(cfg),
        "report" => report(cfg),
        _ => unreachable!("clap only accepts registered subcommands"),
    }
}

fn simulate(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let ds: Dataset<f64> = simulate_dataset(&cfg.synthetic()?)?;
    save_jsonl(&ds, &out)?;
    println!("wrote {} sequences ({} events) to {}", ds.len(), ds.num_events(), out.display());
    Ok(())
}

/// The configured dataset split with the seed, and its mean training gap.
fn load_split(cfg: &ExperimentConfig) -> Result<(Split<f64>, f64), HarnessError> {
    let ds: Dataset<f64> = load_jsonl(&cfg.require_path("dataset")?)?;
    let split = split_dataset(&ds, cfg.split_fractions(), cfg.seed())?;
    let gap = split
        .train
        .mean_gap()
        .ok_or_else(|| HarnessError::Config("training split has no inter-event gaps".into()))?;
    Ok((split, gap))
}

/// The model the attack differentiates through: the learner in the
/// white-box mode, the surrogate in the black-box mode. The black-box mode
/// never opens `model_path`.
fn adversary(cfg: &ExperimentConfig) -> Result<MtppModel<f64>, HarnessError> {
    let key = match cfg.mode()? {
        Mode::WhiteBox => "model_path",
        Mode::BlackBox => "surrogate_path",
    };
    Ok(MtppModel::load(&cfg.require_path(key)?)?)
}

fn train(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let (split, gap) = load_split(cfg)?;
    let mut model = MtppModel::new(cfg.mtpp(split.train.num_marks, gap), cfg.seed())?;
    let report = train_mle(&mut model, &split.train, Some(&split.val), &cfg.train())?;
    model.save(&out)?;
    println!(
        "validation nll {:.4} -> {:.4}; saved {}",
        report.initial_val_loss.unwrap_or(f64::NAN),
        report.val_loss.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn attack_train(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let (split, gap) = load_split(cfg)?;
    let adv = adversary(cfg)?;
    let mut attack = AttackModel::new(cfg.attack(gap), adv.config.num_marks, adv.config.dim, cfg.seed())?;
    let report = train_attack(&mut attack, &adv, &split.train, Some(&split.val), &cfg.attack_train())?;
    attack.save(&out)?;
    println!(
        "attack loss {:.4} -> {:.4}, validation objective {:.4}; saved {}",
        report.train_loss.first().copied().unwrap_or(f64::NAN),
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report.val_objective.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn attack_emit(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let (split, _) = load_split(cfg)?;
    let adv = adversary(cfg)?;
    let attack = AttackModel::load(&cfg.require_path("attack_path")?)?;
    let pert = perturb_permtpp(&attack, &adv, &split.test)?;
    save_jsonl_with_perms(&pert.to_dataset(&split.test, "adversarial")?, &pert.perms, &out)?;
    println!(
        "wrote {} sequences, mean hard distance {:.4}, to {}",
        pert.sequences.len(),
        pert.mean_distance(),
        out.display()
    );
    Ok(())
}

fn defend(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let (split, gap) = load_split(cfg)?;
    let mut learner = match cfg.path("model_path") {
        Some(p) => MtppModel::load(&p)?,
        None => MtppModel::new(cfg.mtpp(split.train.num_marks, gap), cfg.seed())?,
    };
    let mut attack = AttackModel::new(cfg.attack(gap), learner.config.num_marks, learner.config.dim, cfg.seed())?;
    let report = train_defense(&mut learner, &mut attack, &split.train, &cfg.defense())?;
    learner.save(&out)?;
    if let Some(p) = cfg.path("attack_path") {
        attack.save(&p)?;
    }
    if let Some(last) = report.trace.last() {
        println!("final adversarial nll {:.4}; saved {}", last.objective, out.display());
    }
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let model_path = cfg.require_path("model_path")?;
    let learner = MtppModel::load(&model_path)?;
    let (split, gap) = load_split(cfg)?;
    let test = &split.test;
    let method = cfg.get("method");
    let target = cfg.float("target_distance");
    let rho_c = cfg.float("rho_c");
    let pert = match method {
        "none" => Perturbation::identity(test),
        "permtpp" => {
            let attack = AttackModel::load(&cfg.require_path("attack_path")?)?;
            perturb_permtpp(&attack, &adversary(cfg)?, test)?
        }
        "pgd" | "mifgsm" => {
            let adv = adversary(cfg)?;
            let momentum = method == "mifgsm";
            let budget = match cfg.float("eps_budget") {
                b if b > 0.0 => b,
                _ if target > 0.0 => {
                    match_budget(target, gap, |b| {
                        Ok(perturb_gradient(&adv, test, &cfg.baseline(b), momentum, rho_c)?.mean_distance())
                    })?
                    .0
                }
                _ => return Err(HarnessError::Config(format!("{method} needs --eps_budget or --target_distance"))),
            };
            perturb_gradient(&adv, test, &cfg.baseline(budget), momentum, rho_c)?
        }
        "random" => {
            if !(target > 0.0) {
                return Err(HarnessError::Config("random needs a positive --target_distance".into()));
            }
            perturb_random(test, &vec![target; test.len()], rho_c, cfg.seed())?
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown method {other:?}; expected none, permtpp, pgd, mifgsm or random"
            )))
        }
    };
    let row = evaluate(&learner, test, &pert, method, cfg.mode()?.as_str(), cfg.seed())?;
    write_rows(&out, std::slice::from_ref(&row))?;
    println!(
        "{} {}: mae {:.4} mpa {:.4} distance {:.4} objective {:.4}",
        row.method, row.mode, row.mae, row.mpa, row.mean_distance, row.objective
    );
    Ok(())
}

fn report(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = cfg.require_path("out")?;
    let inputs = cfg.get("inputs");
    if inputs.trim().is_empty() {
        return Err(HarnessError::Config("--inputs is required".into()));
    }
    let mut rows = Vec::new();
    for p in inputs.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        rows.extend(read_rows(Path::new(p))?);
    }
    write_rows(&out, &rows)?;
    println!("merged {} rows into {}", rows.len(), out.display());
    Ok(())
}
