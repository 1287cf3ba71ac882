use std::path::Path;
use std::process::{Command, Output};

fn pushcen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pushcen")).args(args).current_dir(dir).output().expect("binary runs")
}

const SMALL: [&str; 8] = ["--clients", "6", "--fanout", "3", "--events", "200", "--clusters", "8"];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn show_config_prints_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&["show-config", "--lambda", "0.25", "--no-reg"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda = 0.25"));
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, &text).unwrap();
    let again = pushcen(&["show-config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn cost_reports_the_single_layer_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&["cost", "--params", "1000", "--bits", "32", "--clusters", "32"], dir.path());
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["predicted_bits"]["full"], 32_000);
    assert_eq!(json["predicted_bits"]["wcp"], 31 * 32 + 1000 * 5);
}

#[test]
fn run_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&with_small(&["run", "--seed", "4", "--out", "res"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert!(csv.starts_with("time,mean_acc,mean_loss,E_con,Y_tot_drift,destroyed_mass,cum_bytes,max_staleness"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["data"]["clients"], 6);
}

#[test]
fn matrix_tabulates_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&["matrix", "--alphas", "0.5", "--seeds", "0,1", "--metrics", "--threads", "1", "--out", "m"]);
    let out = pushcen(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("m/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(dir.path().join("m/pushcen_a0.5_s1.json").exists());
    assert!(dir.path().join("m/independent_a0.5_s0.csv").exists());
    assert!(String::from_utf8(out.stdout).unwrap().contains("async-dfedavg"));
}

#[test]
fn ablate_reports_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&with_small(&["ablate", "--seeds", "0", "--threads", "1", "--out", "a"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["full", "no_reg", "no_buffer"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn verify_passes_on_a_small_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&with_small(&["verify"]), dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 5);
}

#[test]
fn invalid_configuration_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = pushcen(&["run", "--clients", "3", "--fanout", "5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("fanout"));
}

#[test]
fn invariant_failure_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let shown = pushcen(&["show-config"], dir.path());
    let text = String::from_utf8(shown.stdout).unwrap().replace("[schedule]\n", "[schedule]\nstaleness_cap = 0\n");
    let path = dir.path().join("capped.toml");
    std::fs::write(&path, text).unwrap();
    let mut args = vec!["run", "--config", path.to_str().unwrap()];
    args.extend(SMALL);
    let out = pushcen(&args, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stderr).unwrap().contains("staleness"));
}
