use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[network]
n_pressure = 6
n_flow = 1
n_steps = 600
train_end = 300

[grid]
seeds = [4, 5]
constant_offset = [2.0, 0.0]
gaussian_noise = [1.0]
proportional_offset = []
drift_rate = [0.1]
power_failure_replicates = 1
onset_gap = 20
onset_span = 100

[explain]
alarm_steps = 5
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ensemble-cf"));
    cmd.env_remove("ENSEMBLE_CF_OUT");
    cmd
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn pipeline(dir: &Path, out: &str, extra: &[&str]) {
    for cmd in ["simulate", "train", "detect", "evaluate"] {
        let mut args = vec!["--config", "run.toml", "--out", out, cmd];
        args.extend_from_slice(extra);
        run(dir, &args);
    }
    let mut args = vec![
        "--config",
        "run.toml",
        "--out",
        out,
        "explain",
        "--scenario",
        "s4_constant_offset_0",
        "--baseline",
    ];
    args.extend_from_slice(extra);
    run(dir, &args);
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact_deterministically() {
    let dir = setup(SMALL);
    pipeline(dir.path(), "a", &[]);
    pipeline(dir.path(), "b", &["--jobs", "1"]);

    let a = files(&dir.path().join("a"));
    assert_eq!(a, files(&dir.path().join("b")));
    for f in &a {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(x == y, "{} differs between runs", f.display());
    }
    for name in [
        "detection.csv",
        "detection.md",
        "localization.csv",
        "localization.md",
        "seed_4/clean.csv",
        "seed_4/plan.csv",
        "seed_4/models.txt",
        "seed_4/threshold.txt",
        "seed_5/scenarios/s5_drift_0.csv",
    ] {
        assert!(a.contains(&PathBuf::from(name)), "missing {name}");
    }
    let explain: Vec<_> = a.iter().filter(|p| p.starts_with("explain")).collect();
    assert_eq!(explain.len(), 4, "{explain:?}");
}

#[test]
fn train_writes_one_model_per_pressure_sensor() {
    let dir = setup(SMALL);
    run(
        dir.path(),
        &["--config", "run.toml", "--out", "o", "--seed", "4", "simulate"],
    );
    run(
        dir.path(),
        &["--config", "run.toml", "--out", "o", "--seed", "4", "train"],
    );
    let models = fs::read_to_string(dir.path().join("o/seed_4/models.txt")).unwrap();
    assert_eq!(models.lines().count(), 6);
    let threshold: f64 = fs::read_to_string(dir.path().join("o/seed_4/threshold.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(threshold > 0.0);
    assert!(!dir.path().join("o/seed_5").exists());
}

#[test]
fn zero_magnitude_fault_is_undetected() {
    let dir = setup(SMALL);
    for cmd in ["simulate", "train", "detect"] {
        run(dir.path(), &["--config", "run.toml", "--out", "o", "--seed", "4", cmd]);
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("o/detection.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let row = rdr
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[col("scenario")] == "s4_constant_offset_1")
        .unwrap();
    assert_eq!(&row[col("magnitude")], "0");
    assert_eq!(&row[col("detected")], "false");
    assert_eq!(&row[col("delay")], "inf");
}

#[test]
fn output_dir_comes_from_env_then_config() {
    let dir = setup(&format!("output_dir = \"from_config\"\n{SMALL}"));
    run(dir.path(), &["--config", "run.toml", "--seed", "4", "simulate"]);
    assert!(dir.path().join("from_config/seed_4/clean.csv").exists());

    let out = bin()
        .current_dir(dir.path())
        .env("ENSEMBLE_CF_OUT", "from_env")
        .args(["--config", "run.toml", "--seed", "4", "simulate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/seed_4/clean.csv").exists());
}

#[test]
fn unknown_config_keys_fail() {
    let dir = setup("[grid]\nsedes = [1]\n");
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "run.toml", "simulate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sedes"), "{err}");
}

#[test]
fn missing_upstream_artifacts_fail() {
    let dir = setup(SMALL);
    for cmd in ["train", "detect", "evaluate"] {
        let out = bin()
            .current_dir(dir.path())
            .args(["--config", "run.toml", "--out", "empty", cmd])
            .output()
            .unwrap();
        assert!(!out.status.success(), "{cmd} succeeded without inputs");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    }
    run(dir.path(), &["--config", "run.toml", "--out", "o", "simulate"]);
    let out = bin()
        .current_dir(dir.path())
        .args([
            "--config",
            "run.toml",
            "--out",
            "o",
            "explain",
            "--scenario",
            "s4_drift_0",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn missing_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["--config", "nope.toml", "simulate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn explain_at_given_step_writes_fingerprint() {
    let dir = setup(SMALL);
    for cmd in ["simulate", "train"] {
        run(dir.path(), &["--config", "run.toml", "--out", "o", "--seed", "4", cmd]);
    }
    run(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "o",
            "--seed",
            "4",
            "explain",
            "--scenario",
            "s4_drift_0",
            "--step",
            "550",
        ],
    );
    let csv = fs::read_to_string(dir.path().join("o/explain/s4_drift_0_t550.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "label,kind,delta,attribution,normalized_attribution,slack"
    );
    assert_eq!(lines.count(), 7);
    let svg = fs::read_to_string(dir.path().join("o/explain/s4_drift_0_t550.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(!dir.path().join("o/explain/s4_drift_0_t550_baseline.csv").exists());
}
