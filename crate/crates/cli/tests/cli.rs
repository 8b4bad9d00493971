use std::path::Path;
use std::process::{Command, Output};

fn scalemoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalemoe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scalemoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small(cmd: &str, dir: &Path) -> Vec<String> {
    [cmd, "--dir", dir.to_str().unwrap(), "--samples", "12", "--heldout", "4", "--depth", "1"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn run_small(cmd: &str, dir: &Path, extra: &[&str]) -> String {
    let mut args = small(cmd, dir);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

#[test]
fn stage_commands_chain_and_experiments_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    run_small("train", dir, &["--epochs", "1"]);
    run_small("sparsify", dir, &["--epochs", "1"]);
    run_small("moefy", dir, &["--expert-size", "64"]);
    let out = run_small("train-router", dir, &["--epochs", "1"]);
    assert!(out.contains("routed.nsvm"));
    for f in ["dense.nsvm", "sparse.nsvm", "moefied.nsvm", "routed.nsvm", "manifest.txt"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let out = ok(&["sample", "--dir", d, "--class", "1", "--taus", "0.5,0.5,0.5"]);
    assert!(out.contains("reduction"));
    assert!(dir.join("sample.pgm").exists());
    assert!(dir.join("sample.trace.csv").exists());

    ok(&["sweep-tau", "--dir", d, "--grid", "0,1", "--generations", "1"]);
    let sweep = std::fs::read_to_string(dir.join("sweep_last_scales.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 1 + 3);

    ok(&["ablate-scale", "--dir", d, "--grid", "1", "--generations", "1"]);
    assert!(dir.join("scale_ablation.csv").exists());

    ok(&["heatmap", "--dir", d]);
    assert!(dir.join("heatmap").join("heatmap.csv").exists());

    let bench = ok(&["bench", "--dir", d, "--batch", "1", "--repeats", "3"]);
    assert!(bench.lines().count() > 6);
}

#[test]
fn missing_upstream_stage_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = small("moefy", tmp.path());
    args.truncate(3);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = scalemoe(&refs);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sparsify"), "{err}");
}

#[test]
fn bad_arguments_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert!(!scalemoe(&["sweep-tau", "--dir", d, "--mode", "sideways"]).status.success());
    assert!(!scalemoe(&["moefy", "--dir", d, "--expert-size", "7"]).status.success());
}
