use std::fs;
use std::path::Path;
use std::process::Command;

fn sae(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_sae")).args(args).output().unwrap();
    assert!(out.status.success(), "sae {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_sample_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop");
    let smp = dir.path().join("smp");
    let est = dir.path().join("est");
    sae(&["generate", "--seed", "3", "--out-dir", path(&pop)]);
    for f in ["persons.csv", "covariates.csv", "truths.csv"] {
        assert!(pop.join(f).exists(), "{f}");
    }
    sae(&["sample", "--population", path(&pop), "--seed", "4", "--out-dir", path(&smp)]);
    sae(&[
        "estimate",
        "--population",
        path(&pop),
        "--sample",
        path(&smp.join("sample.csv")),
        "--bootstrap-b",
        "20",
        "--out-dir",
        path(&est),
    ]);
    let text = fs::read_to_string(est.join("estimates_unemployed.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "domain_id,method,lambda,theta_hat,mse_u_raw,mse_u_clamped,mse_b"
    );
    assert!(lines.any(|l| l.contains(",SSD,")));
}

#[test]
fn report_reproduces_simulate_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    sae(&[
        "simulate",
        "--config",
        config,
        "--replicates",
        "8",
        "--bootstrap-b",
        "10",
        "--format",
        "csv",
        "--out-dir",
        path(&run),
    ]);
    let written = fs::read_to_string(run.join("report_employed.csv")).unwrap();
    let rendered = sae(&["report", "--run", path(&run), "--variable", "employed", "--format", "csv"]);
    assert_eq!(written, rendered);
    assert!(written.lines().any(|l| l.starts_with("opt,")));
}

#[test]
fn rejects_unknown_estimator() {
    let out = Command::new(env!("CARGO_BIN_EXE_sae"))
        .args(["simulate", "--estimators", "direct,bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
