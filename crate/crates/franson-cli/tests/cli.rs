//! End-to-end checks of the command line binary: exit codes, emitted
//! files, and the dump/analyze round trip, all on deliberately short
//! acquisitions so the whole suite stays fast.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use franson::config::{preset, save_scenario_file};
use serde_json::Value;
use tempfile::tempdir;

fn franson_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_franson"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should exit normally")
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    let body = fs::read_to_string(path).expect("file should exist");
    serde_json::from_str(&body).expect("file should hold valid JSON")
}

#[test]
fn predict_prints_the_analytic_expectations() {
    let out = franson_bin(&["predict", "--preset", "geneva1998"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_text(&out));
    let text = stdout_text(&out);
    assert!(text.contains("singles"), "missing singles lines:\n{text}");
    assert!(text.contains("39500.0/s"), "calibrated singles rate missing:\n{text}");
    assert!(text.contains("local bound"), "bound summary missing:\n{text}");

    let out2 = franson_bin(&["predict", "--preset", "geneva1998-exp2"]);
    assert_eq!(exit_code(&out2), 0, "stderr: {}", stderr_text(&out2));
    assert!(stdout_text(&out2).contains("b1_plus"), "passive ports missing");
}

#[test]
fn short_run_emits_the_report_file_set() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = franson_bin(&[
        "run",
        "--preset",
        "geneva1998",
        "--seed",
        "11",
        "--integration",
        "2",
        "--points",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_text(&out));
    let text = stdout_text(&out);
    assert!(text.contains("two-channel scan: 8 points"), "summary missing:\n{text}");

    for name in ["report.json", "fringe.csv", "quads.csv", "histogram.csv"] {
        assert!(out_dir.join(name).exists(), "{name} should be written");
    }
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["experiment"], "two_channel");
    assert_eq!(report["points"].as_array().unwrap().len(), 8);
    assert!(report["fringe_raw"]["visibility"].is_f64());
}

#[test]
fn dump_and_analyze_round_trip_recovers_the_link_delay() {
    let dir = tempdir().unwrap();
    let scenario_path = dir.path().join("bright.toml");

    // A bright, low-noise variant keeps the dump small and the delay
    // histogram unambiguous: 100 m of extra fiber on side a puts the
    // coincidence peak at +0.49 us.
    let mut cfg = preset("geneva1998").unwrap();
    cfg.rng_seed = 42;
    cfg.source.pair_rate_hz = 1.0e5;
    cfg.source.intrinsic_visibility = 0.95;
    cfg.link_a.length_km = 0.2;
    cfg.link_b.length_km = 0.1;
    for det in cfg.detectors.values_mut() {
        det.efficiency = 0.8;
        det.dark_rate_hz = 100.0;
        det.jitter_sigma_s = 60e-12;
    }
    cfg.coincidence.integration_time_s = 2.0;
    save_scenario_file(&cfg, &scenario_path).unwrap();

    let tags_path = dir.path().join("tags.csv");
    let out_dir = dir.path().join("out");
    let run = franson_bin(&[
        "run",
        "--scenario",
        scenario_path.to_str().unwrap(),
        "--points",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-tags",
        tags_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_text(&run));
    assert!(tags_path.exists(), "tag dump should be written");

    let analysis_path = dir.path().join("analysis.json");
    let analyze = franson_bin(&[
        "analyze",
        "--tags",
        tags_path.to_str().unwrap(),
        "--scenario",
        scenario_path.to_str().unwrap(),
        "--out",
        analysis_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&analyze), 0, "stderr: {}", stderr_text(&analyze));
    assert!(stdout_text(&analyze).contains("two-channel dump"));

    let analysis = read_json(&analysis_path);
    assert_eq!(analysis["topology"], "two_channel");
    let shift = analysis["link_shift_s"].as_f64().unwrap();
    assert!(
        (shift - 4.9e-7).abs() < 1e-9,
        "recovered link shift {shift} s, expected ~4.9e-7 s"
    );
    let e_raw = analysis["e_raw"]["e"].as_f64().unwrap();
    assert!(e_raw > 0.9, "base phases should give near-full correlation, got {e_raw}");
}

#[test]
fn passive_pair_run_and_analysis_cover_both_curves() {
    let dir = tempdir().unwrap();
    let scenario_path = dir.path().join("passive.toml");

    // The bundled passive preset with quiet detectors and short dwell:
    // the coincidence peak still dominates the calibration histogram.
    let mut cfg = preset("geneva1998-exp2").unwrap();
    cfg.rng_seed = 9;
    cfg.coincidence.integration_time_s = 3.0;
    for det in cfg.detectors.values_mut() {
        det.dark_rate_hz = 1000.0;
    }
    save_scenario_file(&cfg, &scenario_path).unwrap();

    let tags_path = dir.path().join("tags.csv");
    let out_dir = dir.path().join("out");
    let run = franson_bin(&[
        "run",
        "--scenario",
        scenario_path.to_str().unwrap(),
        "--points",
        "10",
        "--format",
        "json",
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-tags",
        tags_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_text(&run));
    assert!(stdout_text(&run).contains("passive-pair scan: 10 points"));

    assert!(out_dir.join("report.json").exists());
    assert!(!out_dir.join("fringe.csv").exists(), "json-only run must not write CSV");
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["experiment"], "passive_pair");
    assert_eq!(report["points"].as_array().unwrap().len(), 10);
    let v_b1 = report["fringe_raw_b1"]["visibility"].as_f64().unwrap();
    assert!(
        (0.6..=1.05).contains(&v_b1),
        "quiet-detector raw visibility should be near the intrinsic value, got {v_b1}"
    );

    let analyze = franson_bin(&[
        "analyze",
        "--tags",
        tags_path.to_str().unwrap(),
        "--scenario",
        scenario_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&analyze), 0, "stderr: {}", stderr_text(&analyze));
    let text = stdout_text(&analyze);
    assert!(text.contains("passive-pair dump"));
    assert!(text.contains("b1_plus") && text.contains("b2_plus"), "both curves:\n{text}");
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempdir().unwrap();

    let unknown = franson_bin(&["run", "--preset", "geneva2024"]);
    assert_eq!(exit_code(&unknown), 2);
    assert!(stderr_text(&unknown).contains("unknown preset"));

    let broken_path = dir.path().join("broken.toml");
    fs::write(&broken_path, "this is [ not toml").unwrap();
    let broken = franson_bin(&["predict", "--scenario", broken_path.to_str().unwrap()]);
    assert_eq!(exit_code(&broken), 2);
    assert!(stderr_text(&broken).contains("parse error"));

    let invalid_path = dir.path().join("invalid.toml");
    let mut cfg = preset("geneva1998").unwrap();
    cfg.source.pair_rate_hz = -5.0;
    save_scenario_file(&cfg, &invalid_path).unwrap();
    let invalid = franson_bin(&["predict", "--scenario", invalid_path.to_str().unwrap()]);
    assert_eq!(exit_code(&invalid), 2);
    assert!(stderr_text(&invalid).contains("pair_rate_hz"));

    let conflicting = franson_bin(&[
        "predict",
        "--preset",
        "geneva1998",
        "--scenario",
        broken_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&conflicting), 2, "clap should reject two sources");

    let bad_format = franson_bin(&[
        "run",
        "--preset",
        "geneva1998",
        "--format",
        "yaml",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&bad_format), 2);
    assert!(stderr_text(&bad_format).contains("unknown report format"));

    // A two-point scan cannot support a fringe fit; the plan is rejected
    // as unusable input after a short simulation.
    let narrow = franson_bin(&[
        "run",
        "--preset",
        "geneva1998",
        "--integration",
        "0.5",
        "--points",
        "2",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&narrow), 2);
}

#[test]
fn missing_files_exit_with_code_three() {
    let missing = franson_bin(&["predict", "--scenario", "/no/such/scenario.toml"]);
    assert_eq!(exit_code(&missing), 3);

    let no_tags = franson_bin(&[
        "analyze",
        "--tags",
        "/no/such/tags.csv",
        "--preset",
        "geneva1998",
    ]);
    assert_eq!(exit_code(&no_tags), 3);
}
