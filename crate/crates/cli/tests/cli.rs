use std::path::Path;
use std::process::{Command, Output};

use eco_cli::commands::{simulate_rows, SimulateArgs, SIMULATE_HEADER, TRAIN_HEADER};
use eco_core::theory::Regime1d;

fn eco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eco"))
        .args(args)
        .output()
        .expect("spawn eco")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn quadratic_config(steps: usize, extra_hyper: &str) -> String {
    format!(
        r#"{{
  "objective": {{"kind": "random_quadratic", "dim": 8, "l_min": 0.1, "l_max": 1.0}},
  "optimizer": "sgdm",
  "mode": "eco",
  "hyper": {{"eta": 0.1, "beta": 0.9{extra_hyper}}},
  "quant": {{"grid": {{"kind": "fixed_step", "delta": 0.01}}, "rounding": "sr"}},
  "steps": {steps},
  "seed": 3
}}"#
    )
}

#[test]
fn memory_reports_bytes_per_param() {
    let out = eco(&["memory", "--weights", "fp8", "--master", "fp32", "--m", "fp32"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "9");
    let out = eco(&["memory", "--weights", "fp8", "--m", "fp32", "--master", "none", "--v", "none"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "5");
    let out = eco(&["memory", "--weights", "fp7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &quadratic_config(200, ""));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = eco(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRAIN_HEADER.join(","));
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn zero_steps_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &quadratic_config(0, ""));
    let out = dir.path().join("o.csv");
    let o = eco(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text, format!("{}\n", TRAIN_HEADER.join(",")));
}

#[test]
fn misspelled_key_suggests_the_nearest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &quadratic_config(10, "").replace("\"beta\"", "\"betta\""));
    let o = eco(&["train", "--config", &cfg, "--out", dir.path().join("o.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("did you mean `beta`"), "{err}");
}

#[test]
fn negative_eta_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &quadratic_config(10, "").replace("0.1, \"beta\"", "-1, \"beta\""));
    let o = eco(&["train", "--config", &cfg, "--out", dir.path().join("o.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("eta"), "{err}");
}

#[test]
fn compare_keeps_config_order() {
    let dir = tempfile::tempdir().unwrap();
    let long = write(dir.path(), "long.json", &quadratic_config(300, ""));
    let short = write(dir.path(), "short.json", &quadratic_config(1, ""));
    let out = dir.path().join("s.csv");
    let o = eco(&["compare", "--configs", &long, &short, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "index,config,final_loss,diverged,bytes_per_param");
    assert!(rows[1].starts_with("0,") && rows[1].contains("long.json"));
    assert!(rows[2].starts_with("1,") && rows[2].contains("short.json"));
    // eco keeps no master copy: 1 byte weights + 4 byte momentum
    assert!(rows[1].ends_with(",5.0000000000000000e0"), "{}", rows[1]);
}

#[test]
fn simulate_writes_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = eco(&[
        "simulate-1d", "--regime", "mw,eco", "--L", "1", "--eta", "0.01", "--beta", "0.9",
        "--sigma2", "1", "--steps", "20000", "--seed", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], SIMULATE_HEADER.join(","));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",mw,") && rows[2].contains(",eco,"));
}

#[test]
fn simulate_grid_matches_closed_form() {
    let args = SimulateArgs {
        regimes: Regime1d::ALL.to_vec(),
        l: 1.0,
        etas: vec![0.01, 0.005],
        betas: vec![0.5, 0.9],
        sigma2: 1.0,
        steps: 10_000_000,
        burn_in: None,
        replicas: 8,
        seed: 11,
    };
    for (eta, beta, regime, closed, mc, rel) in simulate_rows(&args).unwrap() {
        assert!(
            rel <= 0.03,
            "{} eta={eta} beta={beta}: closed {closed} mc {mc} rel {rel}",
            regime.name()
        );
    }
}
