//! End-to-end runs of the `sqz` binary: the full pipeline on a small
//! mixture, report artifacts, config-file handling, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sqz(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqz"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = sqz(dir, args);
    assert!(
        out.status.success(),
        "sqz {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn expect_code(dir: &Path, args: &[&str], code: i32) {
    let out = sqz(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "sqz {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate(dir: &Path) {
    run_ok(
        dir,
        &[
            "gen-synthetic",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--seq-len",
            "300",
            "--num-layers",
            "1",
            "--num-heads",
            "2",
            "--head-dim",
            "8",
            "--components",
            "4",
            "--calib-window",
            "20",
            "--separation",
            "10",
            "--sigma",
            "0.5",
            "--query-mode",
            "aligned",
            "--seed",
            "5",
        ],
    );
}

fn build(dir: &Path) {
    run_ok(
        dir,
        &[
            "build-index",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--out",
            "idx.bin",
            "--levels",
            "0.02,0.1",
            "--seed",
            "5",
        ],
    );
}

#[test]
fn full_pipeline_produces_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    assert!(dir.join("h.json").is_file() && dir.join("b.bin").is_file());
    build(dir);
    assert!(dir.join("idx.bin").is_file());

    let calib_out = run_ok(
        dir,
        &[
            "calibrate",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--target-sparsity",
            "0.8",
            "--calib-window",
            "20",
        ],
    );
    let calib: serde_json::Value = serde_json::from_str(&calib_out).expect("calibrate emits JSON");
    let t = calib["threshold"].as_f64().unwrap();
    let lt = calib["level_thresholds"][0].as_f64().unwrap();
    assert!(t > 0.0 && lt > 0.0);
    let achieved = calib["achieved_keep_fraction"].as_f64().unwrap();
    assert!((achieved - 0.2).abs() < 0.1, "achieved {achieved}");

    let t_arg = format!("{t}");
    let lt_arg = format!("{lt}");
    let lookup_out = run_ok(
        dir,
        &[
            "lookup",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--threshold",
            &t_arg,
            "--level-thresholds",
            &lt_arg,
            "--prefill",
            "--csv",
            "lookup.csv",
        ],
    );
    assert!(lookup_out.contains("KV budget"));
    let csv = fs::read_to_string(dir.join("lookup.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + one row per head:\n{csv}");
    assert!(csv.starts_with("layer,head,k,"));

    let attend_out = run_ok(
        dir,
        &[
            "attend",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--threshold",
            &t_arg,
            "--level-thresholds",
            &lt_arg,
            "--block-size",
            "16",
        ],
    );
    assert!(attend_out.contains("max |sparse - dense|"));

    run_ok(
        dir,
        &[
            "oracle-compare",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--threshold",
            &t_arg,
            "--level-thresholds",
            &lt_arg,
            "--json",
            "oracle.json",
            "--csv",
            "oracle.csv",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["verb"], "oracle-compare");
    let rows = report["data"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 40, "2 heads x 20 calibration queries");
    let mean_mass = report["data"]["summary"]["mean_mass_recall"]
        .as_f64()
        .unwrap();
    let mean_ideal = report["data"]["summary"]["mean_ideal_mass"]
        .as_f64()
        .unwrap();
    assert!(mean_ideal >= mean_mass);
    let csv = fs::read_to_string(dir.join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);

    let skew_out = run_ok(
        dir,
        &[
            "analyze-skew",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--top-frac",
            "0.05",
        ],
    );
    assert!(skew_out.contains("attention mass"));

    run_ok(
        dir,
        &[
            "bench-complexity",
            "--lens",
            "256,512",
            "--c-prime",
            "16",
            "--k",
            "32",
            "--head-dim",
            "8",
            "--base",
            "128",
            "--csv",
            "complexity.csv",
        ],
    );
    let csv = fs::read_to_string(dir.join("complexity.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let fields: Vec<&str> = last.split(',').collect();
    assert_eq!(fields[0], "512");
    assert_eq!(fields[2], "512", "dense count equals seq_len");
}

#[test]
fn config_file_supplies_lookup_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    build(dir);
    fs::write(
        dir.join("cfg.json"),
        r#"{"lookup": {"threshold": 0.004, "level_thresholds": [0.002]}}"#,
    )
    .unwrap();
    run_ok(
        dir,
        &[
            "lookup", "--config", "cfg.json", "--header", "h.json", "--blob", "b.bin", "--index",
            "idx.bin",
        ],
    );
    // unknown section names are configuration errors
    fs::write(dir.join("bad.json"), r#"{"lokup": {}}"#).unwrap();
    expect_code(
        dir,
        &[
            "lookup", "--config", "bad.json", "--header", "h.json", "--blob", "b.bin", "--index",
            "idx.bin",
        ],
        2,
    );
}

#[test]
fn deterministic_generation_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let first = fs::read(dir.join("b.bin")).unwrap();
    generate(dir);
    assert_eq!(first, fs::read(dir.join("b.bin")).unwrap());
}

#[test]
fn invalid_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    build(dir);
    expect_code(
        dir,
        &[
            "calibrate",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--target-sparsity",
            "1.5",
        ],
        2,
    );
    expect_code(
        dir,
        &[
            "gen-synthetic",
            "--header",
            "x.json",
            "--blob",
            "x.bin",
            "--head-dim",
            "8",
            "--components",
            "50",
        ],
        2,
    );
}

#[test]
fn unreadable_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    expect_code(
        dir,
        &[
            "build-index",
            "--header",
            "h.json",
            "--blob",
            "missing.bin",
            "--out",
            "idx.bin",
        ],
        3,
    );

    build(dir);
    let mut idx = fs::read(dir.join("idx.bin")).unwrap();
    idx.truncate(idx.len() / 2);
    fs::write(dir.join("broken.bin"), idx).unwrap();
    expect_code(
        dir,
        &[
            "lookup",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "broken.bin",
            "--threshold",
            "0.01",
            "--level-thresholds",
            "0.01",
        ],
        3,
    );
}

#[test]
fn empty_selection_reaching_attention_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    build(dir);
    expect_code(
        dir,
        &[
            "attend",
            "--header",
            "h.json",
            "--blob",
            "b.bin",
            "--index",
            "idx.bin",
            "--threshold",
            "0.9",
            "--level-thresholds",
            "0.9",
        ],
        4,
    );
}
