use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn otsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otsm")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn gen(dir: &Path, name: &str, m: &str, sigma: &str, seed: &str) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let out = otsm(&["gen", "--m", m, "--d", "2", "--r", "2", "--sigma", sigma, "--seed", seed, "--out", &path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn gen_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.otsm");
    let b = dir.path().join("b.otsm");
    for p in [&a, &b] {
        let out = otsm(&["gen", "--m", "10", "--d", "2", "--r", "2", "--sigma", "0", "--seed", "1", "--out", p.to_str().unwrap()]);
        let line = String::from_utf8(out.stdout).unwrap();
        assert!(line.contains("D=20") && line.contains("||W||=0.000000") && line.contains("sigma*="), "{line}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("x.otsm");
    let out = otsm(&["gen", "--m", "10", "--d", "1", "--r", "2", "--sigma", "0", "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_i >= r"));

    assert_eq!(otsm(&["gen", "--m", "ten"]).status.code(), Some(2));
    assert_eq!(otsm(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_instance_exits_3() {
    assert_eq!(otsm(&["solve", "/nonexistent/x.otsm"]).status.code(), Some(3));
}

#[test]
fn certify_clean_and_noisy() {
    let dir = tempfile::tempdir().unwrap();
    let clean = gen(dir.path(), "c.otsm", "10", "0", "1");
    let rep = json(&otsm(&["certify", &clean]));
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["certificate"]["valid"], true);
    assert!((rep["certificate"]["lambda_min_blocks"].as_f64().unwrap() - 9.0).abs() < 1e-8);
    assert_eq!(rep["condition_eq4_as_stated"]["holds"], true);
    assert!(rep["corollary"]["sigma_star"].as_f64().unwrap() > 0.0);

    let noisy = gen(dir.path(), "n.otsm", "10", "5", "1");
    let out = otsm(&["certify", &noisy, "--force"]);
    let rep = json(&out);
    assert_eq!(rep["certificate"]["valid"], false);
    let margins = &rep["margins"];
    assert!(margins["complement"].as_f64().unwrap() < 0.0 || rep["certificate"]["lambda_min_blocks"].as_f64().unwrap() <= 0.0);
}

#[test]
fn certify_refuses_unconverged_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen(dir.path(), "n.otsm", "10", "0.5", "3");
    let out = otsm(&["certify", &inst, "--max-sweeps", "1"]);
    assert_eq!(out.status.code(), Some(4));
    let rep = json(&otsm(&["certify", &inst, "--max-sweeps", "1", "--force"]));
    assert_eq!(rep["certificate"]["valid"], false);
    assert_eq!(rep["solver"]["converged"], false);
}

#[test]
fn stack_round_trip_through_solve_and_certify() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen(dir.path(), "i.otsm", "8", "0.1", "4");
    let stack = dir.path().join("stack.json");
    let solved = json(&otsm(&["solve", &inst, "--stack-out", stack.to_str().unwrap()]));
    assert_eq!(solved["solver"]["converged"], true);
    let rep = json(&otsm(&["certify", &inst, "--stack", stack.to_str().unwrap()]));
    assert_eq!(rep["certificate"]["valid"], true);
    assert!(rep["solver"].is_null());
}

#[test]
fn sdp_on_certified_instance_is_tight() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen(dir.path(), "i.otsm", "6", "0.1", "2");
    assert_eq!(json(&otsm(&["certify", &inst]))["certificate"]["valid"], true);
    for extra in [None, Some("--warm")] {
        let mut args = vec!["sdp", inst.as_str()];
        args.extend(extra);
        let rep = json(&otsm(&args));
        assert!(rep["sdp"]["gap"].as_f64().unwrap() <= 1e-3);
        assert_eq!(rep["sdp"]["numerical_rank"], 2);
        assert_eq!(rep["sdp"]["converged"], true);
    }
}

fn strip_times(csv_text: &str) -> Vec<String> {
    let mut rows = csv_text.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].starts_with("time_")).collect();
    csv_text
        .lines()
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(",")
        })
        .collect()
}

#[test]
fn sweep_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["sweep", "--m", "4,6", "--d", "2", "--r", "2", "--sigma", "0,0.2", "--trials", "3", "--seed", "9", "--sdp", "--out"];
        let out_s = out.to_string_lossy().into_owned();
        args.push(&out_s);
        args.extend_from_slice(extra);
        let o = otsm(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read_to_string(&out).unwrap(), String::from_utf8(o.stdout).unwrap())
    };
    let (a, summary) = run("a.csv", &[]);
    assert_eq!(a.lines().count(), 13);
    assert!(summary.lines().skip(1).filter(|l| l.contains(",0,")).all(|l| l.contains(",1.000,")));
    let (b, _) = run("b.csv", &[]);
    assert_eq!(strip_times(&a), strip_times(&b));
    assert!(dir.path().join("a.summary.csv").exists());

    let partial: Vec<&str> = a.lines().take(6).collect();
    std::fs::write(dir.path().join("c.csv"), partial.join("\n") + "\n").unwrap();
    let (c, _) = run("c.csv", &["--resume"]);
    assert_eq!(strip_times(&a), strip_times(&c));
}

#[test]
fn sweep_help_documents_columns() {
    let out = otsm(&["sweep", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda_complement") && text.contains("summary.csv"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}.csv"));
        let o = Command::new(env!("CARGO_BIN_EXE_otsm"))
            .env("OTSM_THREADS", threads)
            .args(["sweep", "--m", "5", "--d", "3", "--r", "2", "--sigma", "0.5,1", "--sigma-scale", "sigma-star", "--trials", "4", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(strip_times(&std::fs::read_to_string(&out).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}
