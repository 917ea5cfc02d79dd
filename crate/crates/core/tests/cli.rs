use std::path::Path;
use std::process::{Command, Output};

use sohb::cli::{rows_from_csv, CoefficientRow};

fn sohb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sohb"))
        .args(args)
        .current_dir(dir)
        .env_remove("SOHB_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn coeffs_row_for_n3() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(dir.path(), &["coeffs", "--n", "3", "--kappa", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = rows_from_csv(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].c3, 1.0);
    assert!(rows[0].err_est.unwrap() < 1e-8);
    assert!(stdout(&o).starts_with("n,kappa,c1,c2,c3,c4,C2,C3,C4,C4prime,err_est,Nq,degree\n"));
}

#[test]
fn configuration_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(dir.path(), &["coeffs", "--n", "3", "--kappa", "0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("kappa"));
    let o = sohb(dir.path(), &["coeffs", "--n", "12", "--kappa", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("n <= 11"), "{}", stderr(&o));
    let o = sohb(dir.path(), &["sweep", "--n", "3"]);
    assert_eq!(o.status.code(), Some(3));
    let o = sohb(dir.path(), &["coeffs", "--n", "3"]);
    assert_eq!(o.status.code(), Some(3));
    let o = sohb(dir.path(), &["--threads", "0", "coeffs", "--n", "3", "--kappa", "1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn json_and_csv_encode_the_same_values() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["coeffs", "--n", "4", "--kappa", "2.5"];
    let csv = sohb(dir.path(), &[&args[..], &["--format", "csv"]].concat());
    let json = sohb(dir.path(), &[&args[..], &["--format", "json"]].concat());
    let from_csv = rows_from_csv(&stdout(&csv)).unwrap();
    let from_json: CoefficientRow = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(from_csv, vec![from_json]);

    let args = ["sweep", "--n", "3", "--kappas", "0.1,1.7,3"];
    let csv = sohb(dir.path(), &[&args[..], &["--format", "csv"]].concat());
    let json = sohb(dir.path(), &[&args[..], &["--format", "json"]].concat());
    let from_json: Vec<CoefficientRow> = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(rows_from_csv(&stdout(&csv)).unwrap(), from_json);
}

#[test]
fn sweep_rows_and_monotonicity_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(dir.path(), &["sweep", "--n", "3", "--kappas", "0.5,1,2,4,8"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = rows_from_csv(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.windows(2).all(|w| w[1].c1 > w[0].c1));
    assert!(rows.iter().all(|r| r.c1_nondecreasing == Some(true)));
    let again = sohb(dir.path(), &["--threads", "2", "sweep", "--n", "3", "--kappas", "0.5,1,2,4,8"]);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn outputs_carry_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(dir.path(), &["coeffs", "--n", "3", "--kappa", "2", "--out", "c.csv"]);
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("c.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "coeffs");
    assert_eq!(m["config"]["nq"], 512);
    assert_eq!(m["config"]["degree"], 16);
    assert_eq!(m["defaults"]["strong_form_delta"], 0.05);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn validate_passes_for_n3() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(dir.path(), &["validate", "--level", "fast", "--n", "3", "--kappa", "1"]);
    let table = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{table}");
    for check in ["haar_normalization", "n3_oracle", "strong_residual", "bgk_monte_carlo", "l_isotropy", "b_structure", "von_mises_moments"] {
        assert!(table.lines().any(|l| l.starts_with(check) && l.contains("PASS")), "{check}: {table}");
    }
}

#[test]
fn injected_load_sign_bug_fails_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(
        dir.path(),
        &["validate", "--level", "fast", "--n", "3", "--kappa", "1", "--inject-load-sign-bug"],
    );
    assert_eq!(o.status.code(), Some(1));
    let table = stdout(&o);
    assert!(table.lines().any(|l| l.starts_with("n3_oracle") && l.contains("FAIL")), "{table}");
}

#[test]
fn validate_n4_reports_c2_prime() {
    let dir = tempfile::tempdir().unwrap();
    let o = sohb(
        dir.path(),
        &["validate", "--level", "fast", "--n", "4", "--kappa", "2", "--out", "r.json"],
    );
    assert!(stdout(&o).lines().any(|l| l.starts_with("c2prime_zero")), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["check"] == "c2prime_zero"));
}

fn write_config(dir: &Path, name: &str, dt: f64) {
    let cfg = serde_json::json!({
        "N": 40, "n": 3, "c0": 1.0, "nu": 5.0, "D": 1.0, "R": 1.0, "kernel": "all-to-all",
        "dt": dt, "T": 0.2, "box": 10.0, "seed": 5, "record_every": 50
    });
    std::fs::write(dir.join(name), cfg.to_string()).unwrap();
}

#[test]
fn simulate_reports_theory_alongside_measurement() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "cfg.json", 1e-3);
    let o = sohb(dir.path(), &["simulate", "--config", "cfg.json", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(csv.starts_with("t,c1_hat,kappa_eff,alignment_energy,max_orthogonality_defect,singular_skips\n"));
    assert_eq!(csv.lines().count(), 6);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("s.csv.summary.json")).unwrap()).unwrap();
    let c1 = summary["c1_theory"].as_f64().unwrap();
    assert!((c1 - 0.7839).abs() < 1e-3, "{c1}");
    assert!(summary["c1_hat_second_half"].is_number());
    assert!(stdout(&o).contains("c1(nu/D = 5.0)"));
    let again = sohb(dir.path(), &["--threads", "2", "simulate", "--config", "cfg.json", "--out", "t.csv"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("t.csv")).unwrap());
}

#[test]
fn simulate_rejects_large_steps() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.json", 0.05);
    let o = sohb(dir.path(), &["simulate", "--config", "bad.json", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("dt*nu"), "{}", stderr(&o));
    let o = sohb(dir.path(), &["simulate", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(3));
}
