use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn icc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples/configs")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_estimate_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = icc(&[
        "simulate",
        "--config",
        s(&config("discrete_seed7.toml")),
        "--out",
        s(&sim),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sim.join("dataset.csv").exists() && sim.join("truth.toml").exists());

    // Data paths in an estimate config resolve against the config's directory.
    let cfg = dir.path().join("estimate.toml");
    std::fs::copy(config("estimate_discrete_csv.toml"), &cfg).unwrap();
    let res = dir.path().join("res");
    let out = icc(&["estimate", "--config", s(&cfg), "--out", s(&res), "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!reports.as_array().unwrap().is_empty());
}

#[test]
fn simulate_is_reproducible_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear_seed77.toml");
    let read = |sub: &str, seed: Option<&str>| {
        let o = dir.path().join(sub);
        let mut a: Vec<&str> = vec!["simulate", "--config", s(&cfg), "--out", s(&o)];
        if let Some(seed) = seed {
            a.extend(["--seed", seed]);
        }
        assert_eq!(icc(&a).status.code(), Some(0));
        std::fs::read(o.join("dataset.csv")).unwrap()
    };
    let first = read("a", None);
    assert_eq!(first, read("b", None));
    assert_ne!(first, read("c", Some("78")));
}

#[test]
fn oracle_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, code) in [
        ("oracle_discrete.toml", 0),
        ("oracle_first_stage.toml", 0),
        ("oracle_rank_deficient.toml", 3),
    ] {
        let out = icc(&["oracle-check", "--config", s(&config(name)), "--out", s(dir.path())]);
        assert_eq!(
            out.status.code(),
            Some(code),
            "{name}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
    }
}

#[test]
fn checklist_json_lists_steps() {
    let out = icc(&["checklist", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let good = std::fs::read_to_string(config("linear_seed77.toml")).unwrap();
    std::fs::write(&cfg, good.replace("n = 2000", "n = \"many\"")).unwrap();
    let out = icc(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error at 'n'"));

    let out = icc(&["simulate", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(icc(&["no-such-command"]).status.code(), Some(2));
}
