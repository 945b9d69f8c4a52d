use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn qd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qd-erk"))
        .args(args)
        .current_dir(dir)
        .env_remove("QD_ERK_PRECISION")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no '{key}' in:\n{text}"))
}

#[test]
fn construct_four_then_verify_reports_four() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["construct", "--order", "4", "--out", "rk.json"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let o = qd(&["verify", "--tableau", "rk.json", "--max-order", "5"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(value(&out, "order"), "4");
    assert_eq!(value(&out, "stages"), "4");
}

#[test]
fn order_eight_fixture_has_embedded_order_six() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["verify", "--tableau", "reference_order8", "--max-order", "9"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(value(&out, "order"), "8");
    assert_eq!(value(&out, "embedded_order"), "6");
    let o = qd(
        &["verify", "--tableau", "reference_order8", "--max-order", "8", "--weights", "embedded"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    assert_eq!(value(&stdout(&o), "embedded_order"), "6");
}

#[test]
fn odd_order_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["construct", "--order", "7", "--out", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x.json").exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["construct", "--order", "4"],
        vec!["info", "--order", "6", "--bogus"],
        vec!["frobnicate"],
        vec!["verify", "--tableau", "no_such_file.json", "--max-order", "4"],
    ] {
        assert_eq!(qd(&args, dir.path()).status.code(), Some(2), "{args:?}");
    }
    std::fs::write(dir.path().join("bad.json"), "{\"q_nodes\": [\"0.5\", \"0.5\", \"0.3\", \"0.1\"]}").unwrap();
    let o = qd(&["construct", "--order", "8", "--params", "bad.json", "--out", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn singular_block_exits_three() {
    let dir = TempDir::new().unwrap();
    // passes validation, but nodes this close to zero leave a Q block singular
    let nodes = "{\"q_nodes\": [\"0.5\", \"0.2\", \"0.6\", \"1e-38\", \"2e-38\", \"3e-38\"]}";
    std::fs::write(dir.path().join("p.json"), nodes).unwrap();
    let o = qd(&["construct", "--order", "10", "--params", "p.json", "--out", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("singular"));
}

#[test]
fn overclaimed_order_exits_four() {
    let dir = TempDir::new().unwrap();
    assert!(qd(&["construct", "--order", "4", "--out", "rk.json"], dir.path()).status.success());
    let path = dir.path().join("rk.json");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"order\": 4"));
    std::fs::write(&path, text.replace("\"order\": 4", "\"order\": 5")).unwrap();
    let o = qd(&["verify", "--tableau", "rk.json", "--max-order", "6"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{o:?}");
    assert_eq!(value(&stdout(&o), "order"), "4");
}

#[test]
fn info_matches_layout() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["info", "--order", "8"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(value(&out, "s"), "14");
    assert_eq!(value(&out, "l"), "3");
    assert_eq!(value(&out, "degrees_of_freedom"), "17");
    assert!(out.contains("q_group 2 : 3 4"));
    assert!(out.contains("cluster 1 (node x4) : 5 8 11 13"));
}

#[test]
fn stability_writes_grid_and_reports_interval() {
    let dir = TempDir::new().unwrap();
    let o = qd(
        &["--digits", "6", "stability", "--tableau", "rk4", "--grid", "-3,1,-1,1,9,5", "--out", "r.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let len: f64 = value(&stdout(&o), "real_interval_length").parse().unwrap();
    assert!((len - 2.78529).abs() < 1e-4);
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("re,im,stable"));
    assert_eq!(csv.lines().count(), 1 + 45);
    let o = qd(&["stability", "--tableau", "rk4", "--grid", "1,0,0,1,2,2", "--out", "r.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn integrate_exp_fixed_and_adaptive() {
    let dir = TempDir::new().unwrap();
    let o = qd(
        &["integrate", "--tableau", "rk4", "--problem", "exp", "--tf", "1", "--h", "2^-4", "--out", "e.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(value(&out, "steps"), "16");
    assert_eq!(value(&out, "evaluations"), "64");
    let y: f64 = value(&out, "final_state").parse::<f64>().unwrap();
    assert!((y - (-1.0f64).exp()).abs() < 1e-5);
    let csv = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,y1"));
    assert_eq!(csv.lines().count(), 18);

    let o = qd(
        &[
            "integrate", "--tableau", "reference_order8", "--problem", "exp", "--adaptive", "--atol", "1e-12", "--rtol",
            "1e-12", "--tf", "1", "--h", "0.1", "--out", "a.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let y: f64 = value(&stdout(&o), "final_state").parse().unwrap();
    assert!((y - (-1.0f64).exp()).abs() < 1e-10);
}

#[test]
fn converge_prints_csv() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["converge", "--tableau", "rk4", "--h-list", "2^-2,2^-3,2^-4"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "h,err,p_obs");
    assert_eq!(lines.len(), 4);
    let p: f64 = lines[3].rsplit(',').next().unwrap().parse().unwrap();
    assert!((p - 4.0).abs() < 0.3, "{p}");
    let o = qd(&["converge", "--tableau", "rk4", "--h-list", "0.3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn predict_rk4() {
    let dir = TempDir::new().unwrap();
    let o = qd(&["predict", "--tableau", "rk4", "--t-end", "1", "--out", "d.csv"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let t: f64 = value(&stdout(&o), "predictability_time").parse().unwrap();
    assert!((0.19..=0.22).contains(&t), "{t}");
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,discrepancy"));
}

#[test]
fn optimize_short_run_writes_tableau_and_report() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("w.json"), "{\"fitness\": {\"w_convex\": 5.0}}").unwrap();
    let args = [
        "optimize", "--order", "6", "--budget", "2", "--seed", "9", "--weights", "w.json", "--out", "best.json",
    ];
    let o = qd(&args, dir.path());
    assert!(o.status.success(), "{o:?}");
    let report = std::fs::read_to_string(dir.path().join("best.json.report.json")).unwrap();
    assert!(report.contains("\"w_convex\": 5.0"));
    let first = std::fs::read_to_string(dir.path().join("best.json")).unwrap();
    assert!(qd(&args, dir.path()).status.success());
    assert_eq!(first, std::fs::read_to_string(dir.path().join("best.json")).unwrap());
    let o = qd(&["verify", "--tableau", "best.json", "--max-order", "7"], dir.path());
    assert!(o.status.success(), "{o:?}");
    assert_eq!(value(&stdout(&o), "order"), "6");
    let o = qd(&["optimize", "--order", "4", "--budget", "2", "--seed", "1", "--out", "x.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn precision_env_override() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qd-erk"))
        .args(["construct", "--order", "4", "--out", "rk.json"])
        .current_dir(dir.path())
        .env("QD_ERK_PRECISION", "128")
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("rk.json")).unwrap();
    assert!(text.contains("\"precision_bits\": 128"));
    let o = Command::new(env!("CARGO_BIN_EXE_qd-erk"))
        .args(["info", "--order", "4"])
        .env("QD_ERK_PRECISION", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dahlquist_accepts_negative_lambda() {
    let dir = TempDir::new().unwrap();
    let o = qd(
        &[
            "integrate", "--tableau", "rk4", "--problem", "dahlquist", "--lambda", "-2,1", "--tf", "1", "--h", "2^-6",
            "--out", "d.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 66);
}
