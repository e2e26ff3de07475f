use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csl_cli::output::sha256_hex;
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn csl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csl")).args(args).output().expect("binary runs")
}

fn run_cmd(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    csl(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i]).collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("two_level.toml"))
        .unwrap()
        .replace("lambda = 1.0", "lambda = \"fast\"");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let out = dir.path().join("out");
    let res = run_cmd("run", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("scenario"), "{err}");
    assert!(!out.exists());
}

#[test]
fn out_of_range_parameter_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("free_particle.toml"))
        .unwrap()
        .replace("mass = 1.0", "mass = -1.0");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let res = run_cmd("ledger", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("scenario.mass"));
}

#[test]
fn wrong_subcommand_for_kind_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_cmd("run", &config("postulate.toml"), &dir.path().join("a"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let res = run_cmd("postulate", &config("two_level.toml"), &dir.path().join("b"), &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn two_level_run_reports_born_frequency_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_cmd("run", &config("two_level.toml"), dir.path(), &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&dir.path().join("two_level_report.json"));
    let freqs = report["ensemble"]["outcome_frequencies"].as_array().unwrap();
    let f1 = freqs
        .iter()
        .find(|f| f["eigenvalue"].as_f64() == Some(1.0))
        .unwrap()["frequency"]
        .as_f64()
        .unwrap();
    assert!((f1 - 0.7).abs() <= 3.0 * (0.21_f64 / 1e4).sqrt(), "{f1}");

    let manifest = read_json(&dir.path().join("two_level_manifest.json"));
    assert_eq!(manifest["seeds"][0], 20240101);
    let outputs = manifest["outputs"].as_array().unwrap();
    let mut names: Vec<&str> = outputs.iter().map(|o| o["file"].as_str().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["two_level_ledger.csv", "two_level_report.json", "two_level_series.csv"]);
    for o in outputs {
        let bytes = std::fs::read(dir.path().join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("random_matrix.toml"))
        .unwrap()
        .replace("n = 2000", "n = 300");
    let cfg = write_config(dir.path(), "rm.toml", &text);
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    assert!(run_cmd("run", &cfg, &a, &["--threads", "1"]).status.success());
    assert!(run_cmd("run", &cfg, &b, &["--threads", "4"]).status.success());
    for f in ["random8_report.json", "random8_series.csv", "random8_ledger.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn random_matrix_ledger_conserves() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_cmd("ledger", &config("random_matrix.toml"), dir.path(), &[]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).contains("pass"));
    let summary = read_json(&dir.path().join("random8_ledger.json"));
    let dev = summary["ledger"]["max_deviation"].as_f64().unwrap();
    let norm = summary["ledger"]["hamiltonian_norm"].as_f64().unwrap();
    assert!(dev <= 1e-6 * norm);
    let (header, rows) = read_csv(&dir.path().join("random8_ledger.csv"));
    assert_eq!(header, ["t", "H_A", "H_w", "V", "total"]);
    let total = column(&rows, 4);
    assert!(total.iter().all(|t| (t - total[0]).abs() <= 1e-6 * norm));
}

#[test]
fn zero_lambda_ledger_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("random_matrix.toml"))
        .unwrap()
        .replace("lambda = 0.5", "lambda = 0.0");
    let cfg = write_config(dir.path(), "flat.toml", &text);
    assert!(run_cmd("ledger", &cfg, &dir.path().join("o"), &[]).status.success());
    let (_, rows) = read_csv(&dir.path().join("o/random8_ledger.csv"));
    for i in 1..5 {
        let c = column(&rows, i);
        assert!(c.iter().all(|v| (v - c[0]).abs() < 1e-10), "column {i}");
    }
}

#[test]
fn qubit_ledger_matches_dephasing_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_cmd("ledger", &config("qubit_dephasing.toml"), dir.path(), &[]).status.success());
    let (_, rows) = read_csv(&dir.path().join("qubit_ledger.csv"));
    let last = rows.last().unwrap();
    let want = 3f64.sqrt() / 2.0 * (1.0 - (-2.0 * 0.25 * 2.0_f64).exp());
    assert!((last[0] - 2.0).abs() < 1e-12);
    assert!((last[2] - want).abs() < 1e-6, "{} vs {want}", last[2]);
}

#[test]
fn free_particle_ledger_slope() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_cmd("ledger", &config("free_particle.toml"), dir.path(), &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read_json(&dir.path().join("free_particle_ledger.json"));
    let slope = summary["ledger"]["system_slope"].as_f64().unwrap();
    assert!((slope - 0.25).abs() <= 0.05 * 0.25, "{slope}");
    assert_eq!(summary["ledger"]["window"]["ok"], true);
}

#[test]
fn postulate_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_cmd("postulate", &config("postulate.toml"), dir.path(), &[]).status.success());
    let r = read_json(&dir.path().join("postulate_postulate.json"));
    let a = &r["analyses"];
    assert_eq!(a["disjoint_windows"]["verdict"], "conserving but non-localized");
    assert_eq!(a["displaced_gaussians"]["verdict"], "generic violation");
    assert_eq!(a["flat_window_x2"]["verdict"], "divergent");
    assert_eq!(a["cubic_window_x2"]["verdict"], "convergent");
    assert_eq!(a["shared_phase"]["verdict"], "symmetric");
    assert_eq!(a["independent_phases"]["verdict"], "asymmetric");
    assert!((a["apparatus"]["min_ln_overlap"].as_f64().unwrap() + 1250.0).abs() < 1e-9);
    let (header, rows) = read_csv(&dir.path().join("postulate_disjoint_windows_residuals.csv"));
    assert_eq!(header, ["b", "residual_P", "a", "residual_E"]);
    assert_eq!(rows.len(), 100);
}

#[test]
fn tail_fits() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_cmd("postulate", &config("postulate_tail.toml"), dir.path(), &[]).status.success());
    let a = &read_json(&dir.path().join("tail_postulate.json"))["analyses"];
    assert!((a["flat_window"]["exponent"].as_f64().unwrap() - 1.0).abs() < 0.1);
    assert!((a["quadratic_window"]["exponent"].as_f64().unwrap() - 3.0).abs() < 0.3);
    assert_eq!(a["gaussian"]["verdict"], "rejected");
}
