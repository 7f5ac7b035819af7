//! End-to-end runs of the `survtrans` binary: config parsing, flag
//! overrides, output bundle layout, determinism, and exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> PathBuf {
    let mut path = PathBuf::from(env!("CARGO_BIN_EXE_survtrans"));
    if !path.exists() {
        path = PathBuf::from("target/debug/survtrans");
    }
    path
}

fn write_trial_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    // small LCG so the fixture needs no extra dependencies
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let path = dir.join("trial.csv");
    let mut f = fs::File::create(&path).unwrap();
    writeln!(f, "time,event,arm,age,cd4cat").unwrap();
    for i in 0..n {
        let age = 25.0 + next() * 30.0;
        let cd4 = ["low", "mid", "high"][i % 3];
        let arm = if next() < 0.5 { "zdv+ddi" } else { "zdv" };
        let rate = if arm == "zdv+ddi" { 0.35 } else { 0.55 };
        let t = -(1.0 - next()).ln() / rate;
        let c = -(1.0 - next()).ln() / 0.3;
        let time = t.min(c);
        writeln!(f, "{time},{},{arm},{age},{cd4}", u8::from(t <= c)).unwrap();
    }
    path
}

fn write_external_csv(dir: &Path, m: usize, seed: u64) -> PathBuf {
    let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let path = dir.join("external.csv");
    let mut f = fs::File::create(&path).unwrap();
    writeln!(f, "age,cd4cat").unwrap();
    for i in 0..m {
        writeln!(f, "{},{}", 22.0 + next() * 28.0, ["low", "mid", "high"][i % 3]).unwrap();
    }
    path
}

fn write_config(dir: &Path, trial: &Path, external: Option<&Path>, boot: usize) -> PathBuf {
    let external_block = match external {
        Some(p) => format!("[external]\npath = \"{}\"\n", p.display()),
        None => String::new(),
    };
    let config = format!(
        r#"
[data]
trial_path = "{trial}"

[arms]
experimental = "zdv+ddi"
control = "zdv"

[[covariates]]
name = "age"
type = "continuous"

[[covariates]]
name = "cd4cat"
type = "categorical"
levels = ["low", "mid", "high"]

{external_block}
[analysis]
horizon = 1.0
estimators = ["OR_PH", "CW", "RCT_PH"]
bootstrap = {boot}
seed = 20240101
output_dir = "{out}"
"#,
        trial = trial.display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn transport_writes_bundle_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 400, 11);
    let external = write_external_csv(dir.path(), 250, 13);
    let config = write_config(dir.path(), &trial, Some(&external), 4);

    let run = || {
        let out = Command::new(binary())
            .args(["transport", "--config"])
            .arg(&config)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run();
    let tate1 = fs::read(dir.path().join("out/tate.csv")).unwrap();
    let curves1 = fs::read(dir.path().join("out/curves_CW.csv")).unwrap();
    let manifest1 = fs::read(dir.path().join("out/manifest.json")).unwrap();
    run();
    assert_eq!(tate1, fs::read(dir.path().join("out/tate.csv")).unwrap());
    assert_eq!(curves1, fs::read(dir.path().join("out/curves_CW.csv")).unwrap());
    assert_eq!(manifest1, fs::read(dir.path().join("out/manifest.json")).unwrap());

    // TATE table has one row per estimator
    let tate = String::from_utf8(tate1).unwrap();
    assert_eq!(tate.lines().count(), 4);
    assert!(tate.lines().nth(1).unwrap().starts_with("OR_PH,"));
}

#[test]
fn flag_overrides_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 300, 17);
    let config = write_config(dir.path(), &trial, None, 0);
    let alt_out = dir.path().join("elsewhere");
    let out = Command::new(binary())
        .args(["transport", "--config"])
        .arg(&config)
        .args(["--estimators", "RCT_PH", "--horizon", "0.8", "--out"])
        .arg(&alt_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let tate = fs::read_to_string(alt_out.join("tate.csv")).unwrap();
    assert_eq!(tate.lines().count(), 2);
    assert!(tate.contains("RCT_PH,0.8,"));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "this is not toml at all [[[").unwrap();
    let out = Command::new(binary())
        .args(["transport", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_estimator_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 120, 19);
    let config = write_config(dir.path(), &trial, None, 0);
    let out = Command::new(binary())
        .args(["transport", "--config"])
        .arg(&config)
        .args(["--estimators", "NOT_AN_ESTIMATOR"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn weighted_estimators_without_external_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 200, 23);
    let config = write_config(dir.path(), &trial, None, 0);
    let out = Command::new(binary())
        .args(["transport", "--config"])
        .arg(&config)
        .args(["--estimators", "CW"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diagnose_ph_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 400, 29);
    let config = write_config(dir.path(), &trial, None, 0);
    let out = Command::new(binary())
        .args(["diagnose-ph", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("out/ph_tests.csv")).unwrap();
    assert!(table.starts_with("arm,covariate,chisq,p\n"));
    assert!(table.contains("GLOBAL"));
}

#[test]
fn emulate_subcommand_writes_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let trial = write_trial_csv(dir.path(), 150, 31);
    let config_text = format!(
        r#"
[data]
trial_path = "{trial}"

[arms]
experimental = "zdv+ddi"
control = "zdv"

[[covariates]]
name = "age"
type = "continuous"

[[covariates]]
name = "cd4cat"
type = "categorical"
levels = ["low", "mid", "high"]

[external.summary]
sample_size = 123
[[external.summary.variables]]
name = "age"
type = "continuous"
mean = 32.0
sd = 11.0
lo = 12.0
hi = 70.0

[[external.summary.variables]]
name = "cd4cat"
type = "categorical"
levels = ["low", "mid", "high"]
proportions = [0.521, 0.137, 0.036]

[external.copula]
source = "trial"
overrides = [{{ var1 = "age", var2 = "cd4cat", rho = -0.8 }}]

[analysis]
horizon = 1.0
output_dir = "{out}"
seed = 99
"#,
        trial = trial.display(),
        out = dir.path().join("out").display(),
    );
    let config = dir.path().join("run.toml");
    fs::write(&config, config_text).unwrap();

    let out_file = dir.path().join("pop.csv");
    let run = |m: &[&str]| {
        let out = Command::new(binary())
            .args(["emulate", "--config"])
            .arg(&config)
            .args(["--out-file"])
            .arg(&out_file)
            .args(m)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&[]);
    let c1 = fs::read_to_string(&out_file).unwrap();
    assert_eq!(c1.lines().count(), 124); // header + sample_size rows
    assert!(c1.starts_with("age,cd4cat\n"));
    run(&[]);
    assert_eq!(c1, fs::read_to_string(&out_file).unwrap());

    run(&["--m", "0"]);
    assert_eq!(fs::read_to_string(&out_file).unwrap(), "age,cd4cat\n");
}
