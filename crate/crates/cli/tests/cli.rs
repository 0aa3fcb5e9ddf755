use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phylotrait"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn simulate(dir: &Path) {
    fs::write(
        dir.join("sim.toml"),
        "n_tips = 25\nsigma = [[1.0, 0.4], [0.4, 0.8]]\nresidual_variance = [[0.2, 0.0], [0.0, 0.3]]\nmissing = 0.25\n",
    )
    .unwrap();
    let out = run(&["simulate", "--config", "sim.toml", "--out", "data", "--seed", "4"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(
        dir.join("run.toml"),
        "tree = \"data/tree.nwk\"\ntraits = \"data/traits.csv\"\niterations = 300\n",
    )
    .unwrap();
}

#[test]
fn run_is_reproducible_and_summarize_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let a = run(&["run", "--config", "run.toml", "--out", "a.tsv", "--seed", "3"], d);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&["run", "--config", "run.toml", "--out", "b.tsv", "--seed", "3"], d);
    assert!(b.status.success());
    assert_eq!(fs::read(d.join("a.tsv")).unwrap(), fs::read(d.join("b.tsv")).unwrap());
    let s = run(&["summarize", "a.tsv"], d);
    assert!(s.status.success());
    assert_eq!(s.stdout, a.stdout);
    let log = fs::read_to_string(d.join("a.tsv")).unwrap();
    let header = log.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("iteration\tloglik\tsigma.1.1"));
    assert!(header.ends_with("h.2.2"));
}

#[test]
fn baseline_sampler_shares_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    for (s, f) in [("analytic", "a.tsv"), ("baseline", "b.tsv")] {
        let out = run(&["run", "--config", "run.toml", "--out", f, "--sampler", s], d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let header = |f: &str| {
        fs::read_to_string(d.join(f)).unwrap().lines().find(|l| !l.starts_with('#')).unwrap().to_string()
    };
    assert_eq!(header("a.tsv"), header("b.tsv"));
}

#[test]
fn chains_write_separate_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let out = run(&["run", "--config", "run.toml", "--out", "c.tsv", "--chains", "3"], d);
    assert!(out.status.success());
    for c in 0..3 {
        assert!(d.join(format!("c.chain{c}.tsv")).exists());
    }
    assert_ne!(fs::read(d.join("c.chain0.tsv")).unwrap(), fs::read(d.join("c.chain1.tsv")).unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("parameter\trhat"));
}

#[test]
fn loglik_prints_a_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let out = run(&["loglik", "--config", "run.toml"], d);
    assert!(out.status.success());
    let v: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(v.is_finite() && v < 0.0);
}

#[test]
fn benchmark_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    let out = run(&["benchmark", "--config", "run.toml", "--sampler", "analytic", "--sampler", "baseline"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("run:analytic") && text.contains("run:baseline"));
    assert!(text.contains("speed-up run:analytic/run:baseline"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let one = run(&["benchmark", "--config", "run.toml"], d);
    assert!(one.status.success());
    assert!(!String::from_utf8_lossy(&one.stdout).contains("speed-up"));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--instances", "10"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d);
    fs::write(d.join("bad.toml"), "iterations = 10\nthin = 0\n").unwrap();
    let out = run(&["run", "--config", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("thin"));
    fs::write(d.join("typo.toml"), "iterations = 10\n[priors]\nsigma_dof = 3\n").unwrap();
    let out = run(&["run", "--config", "typo.toml"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let out = run(&["loglik", "--tree", "missing.nwk", "--traits", "data/traits.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.join("other.nwk"), "(x:1,y:1);").unwrap();
    let out = run(&["loglik", "--tree", "other.nwk", "--traits", "data/traits.csv"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["loglik", "--tree", "data/tree.nwk", "--traits", "data/traits.csv", "--missing-token", "?"], d);
    assert_eq!(out.status.code(), Some(2));
}
