use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use krf_core::io;

const CONSTANT: &str = r#"
[model]
dims = 2
points = [16, 16]
kappa = 1
a0 = ["1", "0", "0", "1"]
achi = ["1"]
f_mu = "1"

[flow]
t_end = 5.0
initial = "0.3"
snapshots = [1.0, 2.0, 3.0, 4.0]

[barrier]
epsilons = [0.2, 0.1]
sample_times = [0.0, 2.0]

[verify]
checks = ["sandwich", "viscosity", "rate", "integral", "stress", "approx"]
rate_window = [1.0, 4.0]
stress_pairs = 2
stress_t_end = 0.05
"#;

fn krf(config: &Path, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_krf"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("KRF_")) {
        cmd.env_remove(k);
    }
    cmd.args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, text).unwrap();
    let out = dir.path().join("out");
    (dir, config, out)
}

fn experiment(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn constant_model_pipeline_verifies() {
    let (_tmp, config, out) = setup(CONSTANT);
    for cmd in ["semiflat", "solve-static", "run-flow", "barriers"] {
        let o = krf(&config, &out, &[cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let exp = experiment(&out);
    let rows = io::read_diagnostics_csv(&exp.join("flow/diagnostics.csv")).unwrap();
    assert!(rows.windows(2).all(|w| w[1].t > w[0].t));
    let last = rows.last().unwrap();
    assert_eq!(last.t, 5.0);
    let expected = 0.3 * (-5.0f64).exp();
    assert!((last.dist_static.unwrap() - expected).abs() <= 5e-3 * expected, "{:?}", last.dist_static);

    let o = krf(&config, &out, &["verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    let reports: serde_json::Value = io::load_json(&exp.join("verify/reports.json")).unwrap();
    assert!(reports.as_array().unwrap().len() >= 8);

    assert_eq!(code(&krf(&config, &out, &["report"])), 0);
    for f in ["diagnostics.csv", "envelope.csv", "rate.json", "COLUMNS.md"] {
        assert!(exp.join("report").join(f).exists(), "{f}");
    }
}

#[test]
fn corrupted_barrier_json_is_a_dependency_error() {
    let (_tmp, config, out) = setup(CONSTANT);
    for cmd in ["run-flow", "barriers"] {
        assert_eq!(code(&krf(&config, &out, &[cmd])), 0);
    }
    let path = experiment(&out).join("barriers/sub.json");
    let mut params: serde_json::Value = io::load_json(&path).unwrap();
    params["C"] = serde_json::json!(params["C"].as_f64().unwrap() - 1.0);
    fs::write(&path, params.to_string()).unwrap();
    let o = krf(&config, &out, &["verify"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sub.json"));

    fs::write(&path, "{ not json").unwrap();
    assert_eq!(code(&krf(&config, &out, &["verify"])), 3);
}

#[test]
fn missing_artifacts_name_the_expected_path() {
    let (_tmp, config, out) = setup(CONSTANT);
    let o = krf(&config, &out, &["verify"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("phi_inf.krf"));
}

#[test]
fn failing_check_exits_one() {
    let text = CONSTANT
        .replace(r#"checks = ["sandwich", "viscosity", "rate", "integral", "stress", "approx"]"#, r#"checks = ["rate"]"#)
        .replace("rate_window = [1.0, 4.0]", "rate_window = [1.0, 4.0]\nrate_range = [-0.5, -0.4]");
    let (_tmp, config, out) = setup(&text);
    assert_eq!(code(&krf(&config, &out, &["run-flow"])), 0);
    let o = krf(&config, &out, &["verify"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));
}

#[test]
fn config_errors_exit_two() {
    let (_tmp, config, out) = setup(&CONSTANT.replace("kappa = 1", "kapa = 1"));
    let o = krf(&config, &out, &["run-flow"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("kapa"));
    let (_tmp2, config, out) = setup(CONSTANT);
    let o = krf(&config.with_extension("missing"), &out, &["run-flow"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.missing"));
    assert_eq!(code(&krf(&config, &out, &["run-flow", "--threads", "0"])), 2);
}

#[test]
fn identical_configs_write_identical_csv() {
    let (_tmp, config, out) = setup(CONSTANT);
    let (_tmp2, config2, out2) = setup(CONSTANT);
    assert_eq!(code(&krf(&config, &out, &["run-flow"])), 0);
    assert_eq!(code(&krf(&config2, &out2, &["run-flow"])), 0);
    let (a, b) = (experiment(&out), experiment(&out2));
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(fs::read(a.join("flow/diagnostics.csv")).unwrap(), fs::read(b.join("flow/diagnostics.csv")).unwrap());
    let sa = io::load_checkpoints(&a.join("flow/checkpoints")).unwrap();
    let sb = io::load_checkpoints(&b.join("flow/checkpoints")).unwrap();
    assert_eq!(sa, sb);
}
