//! The `cmanet` binary: outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn cmanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmanet"))
        .args(args)
        .env_remove("CMANET_OUT")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cmanet(&["simulate", "--scenario", &scenario("handshake.toml"), "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.jsonl", "metrics.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn out_dir_defaults_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmanet"))
        .args(["simulate", "--preset", "table3"])
        .env("CMANET_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("trace.jsonl").exists());
}

#[test]
fn same_seed_prints_same_digest() {
    let run = || stdout(&cmanet(&["simulate", "--scenario", &scenario("mobile_exchange.toml"), "--seed", "42"]));
    let (a, b) = (run(), run());
    assert!(a.starts_with("trace_digest,"));
    assert_eq!(a.lines().next(), b.lines().next());
}

#[test]
fn missing_file_exits_2() {
    assert_eq!(cmanet(&["simulate", "--scenario", "/no/such/file.toml"]).status.code(), Some(2));
    assert_eq!(cmanet(&["validate", "--scenario", "/no/such/file.toml"]).status.code(), Some(2));
}

#[test]
fn invalid_scenario_exits_3_listing_violations() {
    let o = cmanet(&["simulate", "--scenario", &fixture("invalid_scenario.toml")]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("duration") && err.contains("device 7") && err.contains("epsilon_k"), "{err}");
    assert_eq!(cmanet(&["validate", "--scenario", &fixture("invalid_scenario.toml")]).status.code(), Some(3));
}

#[test]
fn validate_accepts_bundled_scenarios() {
    for name in ["handshake.toml", "two_manets_relay.toml", "mobile_exchange.toml"] {
        assert_eq!(cmanet(&["validate", "--scenario", &scenario(name)]).status.code(), Some(0), "{name}");
    }
}

#[test]
fn tables_3_prints_four_rows_with_deviations() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmanet(&["tables", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "data_type,simulated [Mbps],published [Mbps],deviation [%]");
    assert_eq!(lines.len(), 5);
    assert!(Path::new(&dir.path().join("table3.csv")).exists());
    assert!(Path::new(&dir.path().join("table3_metrics.csv")).exists());
}

#[test]
fn tables_1_is_three_rows_by_six_columns() {
    let o = cmanet(&["tables", "--table", "1", "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 7));
    assert_eq!(rows[1][0], "5");
    assert_eq!(rows[3][0], "50");
}

#[test]
fn unknown_table_is_rejected() {
    assert_eq!(cmanet(&["tables", "9"]).status.code(), Some(3));
}

#[test]
fn sweep_over_devices_emits_one_block_per_value() {
    let o = cmanet(&["sweep", "--preset", "table1", "--axis", "devices", "--values", "3,4,5", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
}

#[test]
fn oracle_passes_and_rejects_corrupt_rates() {
    let o = cmanet(&["oracle", "--cases", "50", "--samples", "2000000", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let reports: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(reports.as_array().unwrap().iter().all(|r| r["passed"] == true));

    let o = cmanet(&["oracle", "--cases", "10", "--samples", "1000", "--rates", &fixture("corrupt_rates.csv")]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(cmanet(&["oracle", "--rates", "/no/such/rates.csv"]).status.code(), Some(2));
}

#[test]
fn custom_rate_table_survives_the_pipeline() {
    let o = cmanet(&["oracle", "--cases", "10", "--samples", "2000000", "--rates", &fixture("custom_rates.csv")]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("rate_pipeline,12,"));
}

#[test]
fn usage_errors_are_invalid_input() {
    assert_eq!(cmanet(&["simulate", "--format", "xml"]).status.code(), Some(3));
    assert_eq!(cmanet(&["--help"]).status.code(), Some(0));
}
