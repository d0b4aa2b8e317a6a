use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use analog_cli::RunConfig;

fn analog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_analog"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Synthesizes a small data set and rewrites its config for a quick run.
fn small_run(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let data = dir.join("data");
    let out = analog(&["synth", "--out", data.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = data.join("config.toml");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.iterations = 120;
    cfg.burn_in = 20;
    cfg.leads = vec![1, 3];
    edit(&mut cfg);
    cfg.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_loadable_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), |_| {});
    let cfg = RunConfig::load(&config).unwrap();
    for p in [&cfg.forcing, &cfg.response, &cfg.regions] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert!(cfg.auxiliary.is_file());
    let out = dir.path().join("bases");
    let run = analog(&["basis", "--config", s(&config), "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(fs::read_dir(out.join("bases")).unwrap().count() > 0);
}

#[test]
fn missing_response_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), |c| c.response = PathBuf::from("nowhere.csv"));
    let out = analog(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("response"));
}

#[test]
fn chain_has_one_row_per_iteration_without_burn_in() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), |c| {
        c.iterations = 50;
        c.burn_in = 0;
        c.leads = vec![1];
    });
    let out = dir.path().join("run");
    let run = analog(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = fs::read_to_string(out.join("chains/BA1_r1_lead1.csv")).unwrap();
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn forecast_refuses_chains_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), |c| c.leads = vec![1]);
    let out = dir.path().join("run");
    assert!(analog(&["train", "--config", s(&config), "--out", s(&out)])
        .status
        .success());
    let fresh = analog(&["forecast", "--config", s(&config), "--out", s(&out)]);
    assert!(fresh.status.success(), "{}", String::from_utf8_lossy(&fresh.stderr));
    let stale = analog(&["forecast", "--config", s(&config), "--out", s(&out), "--seed", "99"]);
    assert_eq!(stale.status.code(), Some(2));
}

#[test]
fn evaluate_is_deterministic_and_m7_only_scored_at_lead_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_run(dir.path(), |c| {
        c.baselines.push(analog_core::baselines::BaselineKind::M7);
    });
    let out = dir.path().join("run");
    let run = analog(&["compare", "--config", s(&config), "--out", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let first = fs::read(out.join("scorecard.csv")).unwrap();
    assert!(analog(&["evaluate", "--config", s(&config), "--out", s(&out)])
        .status
        .success());
    assert_eq!(first, fs::read(out.join("scorecard.csv")).unwrap());

    let card = String::from_utf8(first).unwrap();
    let header: Vec<&str> = card.lines().next().unwrap().split(',').collect();
    let model = header.iter().position(|&h| h == "model").unwrap();
    let lead = header.iter().position(|&h| h == "lead").unwrap();
    let m7_leads: Vec<&str> = card
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[model] == "M7")
        .map(|f| f[lead])
        .collect();
    assert!(!m7_leads.is_empty());
    assert!(m7_leads.iter().all(|&l| l == "1"));
    assert!(out.join("timeseries/region_1.csv").is_file());
}
