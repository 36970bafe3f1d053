use std::path::Path;
use std::process::{Command, Output};

fn permtpp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permtpp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = permtpp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["simulate", "--mu", "0.5", "--marks", "3", "--sequences", "200", "--seed", "7", "--out", out];
    ok(dir.path(), &args("a.jsonl"));
    ok(dir.path(), &args("b.jsonl"));
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 201);
    ok(dir.path(), &["simulate", "--mu", "0.5", "--marks", "3", "--sequences", "200", "--seed", "8", "--out", "c.jsonl"]);
    assert_ne!(a, std::fs::read(dir.path().join("c.jsonl")).unwrap());
}

#[test]
fn evaluate_without_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--sequences", "20", "--out", "d.jsonl"]);
    let out = permtpp(dir.path(), &["evaluate", "--dataset", "d.jsonl", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model_path"));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn unknown_subcommands_and_flags_exit_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["train", "--width", "3"], &[], &["train", "--epochs", "many"]] {
        let out = permtpp(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    let out = permtpp(dir.path(), &["frobnicate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(permtpp(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_sets_keys_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.ini"), "seed = 3\n[data]\nsequences = 5\nmu = 0.2\n").unwrap();
    ok(dir.path(), &["simulate", "--config", "exp.ini", "--out", "a.jsonl"]);
    ok(dir.path(), &["simulate", "--config", "exp.ini", "--sequences", "7", "--out", "b.jsonl"]);
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!((lines("a.jsonl"), lines("b.jsonl")), (6, 8));
    std::fs::write(dir.path().join("bad.ini"), "[data]\nepochs = 2\n").unwrap();
    assert_eq!(permtpp(dir.path(), &["simulate", "--config", "bad.ini", "--out", "c.jsonl"]).status.code(), Some(1));
}

/// simulate, train, attack-train, attack-emit, evaluate and report on a
/// small problem, twice, with identical outputs.
#[test]
fn pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |tag: &str| {
        let f = |name: &str| format!("{tag}-{name}");
        let common = ["--dataset", "d.jsonl", "--seed", "2"];
        ok(d, &["simulate", "--sequences", "30", "--max_len", "20", "--seed", "2", "--out", &f("d.jsonl")]);
        std::fs::copy(d.join(f("d.jsonl")), d.join("d.jsonl")).unwrap();
        ok(d, &[&["train", "--epochs", "3", "--dim", "4", "--out", &f("m.json")][..], &common].concat());
        ok(d, &[&["train", "--epochs", "3", "--dim", "4", "--seed", "5", "--out", &f("s.json")][..], &["--dataset", "d.jsonl"]].concat());
        ok(
            d,
            &[
                &["attack-train", "--model_path", &f("m.json"), "--attack_epochs", "2", "--noise_dim", "4", "--out", &f("a.json")][..],
                &common,
            ]
            .concat(),
        );
        ok(
            d,
            &[
                &["attack-train", "--mode", "blackbox", "--surrogate_path", &f("s.json"), "--attack_epochs", "2", "--out", &f("b.json")][..],
                &common,
            ]
            .concat(),
        );
        ok(d, &[&["attack-emit", "--model_path", &f("m.json"), "--attack_path", &f("a.json"), "--out", &f("adv.jsonl")][..], &common].concat());
        let attack = f("a.json");
        let rows = [
            vec!["--method", "none"],
            vec!["--method", "permtpp", "--attack_path", &attack],
            vec!["--method", "mifgsm", "--eps_budget", "0.5"],
            vec!["--method", "random", "--target_distance", "2"],
        ];
        let mut outs = Vec::new();
        for (k, r) in rows.iter().enumerate() {
            let out = f(&format!("r{k}.csv"));
            ok(d, &[&["evaluate", "--model_path", &f("m.json"), "--out", &out][..], r, &common].concat());
            outs.push(out);
        }
        ok(
            d,
            &[
                "evaluate", "--mode", "blackbox", "--model_path", &f("m.json"), "--surrogate_path", &f("s.json"),
                "--method", "permtpp", "--attack_path", &f("b.json"), "--dataset", "d.jsonl", "--seed", "2", "--out", &f("bb.csv"),
            ],
        );
        outs.push(f("bb.csv"));
        ok(d, &["report", "--inputs", &outs.join(","), "--out", &f("all.csv")]);
        std::fs::read_to_string(d.join(f("all.csv"))).unwrap()
    };
    let first = run("x");
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "method,mode,mae,mpa,mean_distance,objective,seed");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["none", "permtpp", "mifgsm", "random", "permtpp"]);
    assert!(lines[5].starts_with("permtpp,blackbox,"));
    assert_eq!(first, run("y"));
    let emitted = std::fs::read_to_string(d.join("x-adv.jsonl")).unwrap();
    assert!(emitted.lines().skip(1).all(|l| l.contains("\"perm\"")));
}
