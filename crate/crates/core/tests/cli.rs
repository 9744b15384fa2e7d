// SPDX-License-Identifier: Apache-2.0

use std::process::Command;

fn stiffsim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stiffsim"))
        .env("STIFFSIM_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn converge_writes_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"command": "converge", "problem": {"name": "two-spring", "omega": 50}, "paths": 16, "sweep_omegas": []}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let res = stiffsim(&["--config", cfg.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_ne!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["fitted_order_q"].is_number(), "{summary}");
    assert_eq!(summary["seed"], 5);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 5);

    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("seed,"), "{header}");
    assert!(csv.lines().skip(1).all(|l| l.starts_with("5,")));
}

#[test]
fn errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "command = \"simulate\"\nmethod = \"sim9\"\nproblem = \"two-spring\"\n").unwrap();
    let res = stiffsim(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sim9"));

    let res = stiffsim(&["--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn simulate_with_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.toml");
    std::fs::write(&cfg, "method = \"sim2-lan\"\nproblem = \"two-spring\"\nt_end = 0.5\n").unwrap();
    let out = tmp.path().join("o");
    let res = stiffsim(&[
        "--config",
        cfg.to_str().unwrap(),
        "--command",
        "simulate",
        "--svg",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("trajectory.csv").exists());
    let svg = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x == "svg"));
    assert!(svg);
}
