use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oraclefuse"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run(dir: &Path, args: &[&str]) -> String {
    ok(bin().current_dir(dir).args(args).output().unwrap())
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SPEC: &str = r#"
[synthetic]
d = 4
n = 800
true_weights = [1.0, -1.0, 0.5, 0.0, 0.2]
boundary_noise = { band = 0.8, flip_probability = 0.4 }

[oracle]
kind = "synthetic"
accuracy = 0.8
seed = 5
"#;

#[test]
fn help_lists_subcommands_and_defaults() {
    let help = ok(bin().arg("--help").output().unwrap());
    for sub in [
        "synth",
        "score",
        "fit-base",
        "fit-linear",
        "fit-adaptive",
        "calibrate",
        "transfer",
        "eval",
        "experiment",
        "tune",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
    for flag in ["--config", "--seed", "--out"] {
        assert!(help.contains(flag));
    }
    let sub = ok(bin().args(["fit-adaptive", "--help"]).output().unwrap());
    assert!(sub.contains("[default: 4]"), "{sub}");
}

#[test]
fn pipeline_of_single_steps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    run(
        d,
        &[
            "synth",
            "--config",
            "spec.toml",
            "--seed",
            "3",
            "--out",
            "data.csv",
        ],
    );
    let header = std::fs::read_to_string(d.join("data.csv")).unwrap();
    assert!(header.starts_with("id,f0,f1,f2,f3"));

    run(
        d,
        &[
            "score",
            "--config",
            "spec.toml",
            "--data",
            "data.csv",
            "--out",
            "scores.csv",
            "--attach",
            "scored.csv",
        ],
    );
    let cache = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(cache.starts_with("id,z\n"));
    assert_eq!(cache.lines().count(), 801);

    run(
        d,
        &["fit-base", "--data", "scored.csv", "--out", "base.json"],
    );
    let linear = run(
        d,
        &["fit-linear", "--data", "scored.csv", "--out", "linear.json"],
    );
    let wf: serde_json::Value = serde_json::from_str(&linear).unwrap();
    let alpha = wf["weights"][0].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&alpha));

    let report = run(
        d,
        &[
            "fit-adaptive",
            "--data",
            "scored.csv",
            "--pieces",
            "4",
            "--out",
            "ada.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(
        report["adaptive_objective"].as_f64().unwrap()
            <= report["constant_objective"].as_f64().unwrap() + 1e-12
    );

    run(
        d,
        &[
            "calibrate",
            "--data",
            "scored.csv",
            "--model",
            "base.json",
            "--grid",
            "10",
            "--out",
            "cal.json",
        ],
    );
    let cal: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("cal.json")).unwrap()).unwrap();
    assert_eq!(cal["kind"], "cell");

    for extra in [
        vec![],
        vec!["--fusion", "ada.json"],
        vec!["--calibrator", "cal.json"],
    ] {
        let mut args = vec!["eval", "--data", "scored.csv", "--model", "base.json"];
        args.extend(extra);
        let metrics: serde_json::Value = serde_json::from_str(&run(d, &args)).unwrap();
        let acc = metrics["accuracy"].as_f64().unwrap();
        assert!(acc > 0.6 && acc <= 1.0, "{acc}");
    }
}

#[test]
fn experiment_is_reproducible_from_cached_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    run(d, &["synth", "--config", "spec.toml", "--out", "data.csv"]);
    run(
        d,
        &[
            "score",
            "--config",
            "spec.toml",
            "--data",
            "data.csv",
            "--out",
            "scores.csv",
        ],
    );
    std::fs::write(
        d.join("exp.toml"),
        r#"
        seeds = [1, 2]
        methods = ["llm", "ml", "linear", "adalinear(4)", "calibration(10,2)"]
        [data]
        path = "data.csv"
        [oracle]
        kind = "cached"
        path = "scores.csv"
        "#,
    )
    .unwrap();
    let table = run(d, &["experiment", "--config", "exp.toml", "--out", "a"]);
    assert!(table.contains("calibration(10,2)"));
    run(d, &["experiment", "--config", "exp.toml", "--out", "b"]);
    let a = std::fs::read(d.join("a/report.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/report.json")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a/metrics.csv")).unwrap(),
        std::fs::read(d.join("b/metrics.csv")).unwrap()
    );
    assert!(d.join("a/seed-1/base_model.json").exists());

    let tuned = run(
        d,
        &[
            "tune",
            "--config",
            "exp.toml",
            "--param",
            "r",
            "--candidates",
            "1,2,4",
        ],
    );
    let tuned: serde_json::Value = serde_json::from_str(&tuned).unwrap();
    assert!([1, 2, 4].contains(&tuned["selected"].as_u64().unwrap()));

    let single = run(
        d,
        &[
            "experiment",
            "--config",
            "exp.toml",
            "--seed",
            "7",
            "--out",
            "c",
        ],
    );
    assert!(!single.is_empty());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("c/report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["runs"][0]["seed"], 7);
}

#[test]
fn shipped_configs_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("transfer");
    let table = run(
        dir.path(),
        &[
            "transfer",
            "--config",
            configs().join("transfer.toml").to_str().unwrap(),
            "--seed",
            "0",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(table.contains("transfer(2000)"));
    assert!(out.join("seed-0/transfer-2000-plan.json").exists());
    let out = dir.path().join("fusion");
    run(
        dir.path(),
        &[
            "experiment",
            "--config",
            configs().join("fusion.toml").to_str().unwrap(),
            "--seed",
            "0",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["experiment"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    std::fs::write(dir.path().join("bad.csv"), "id,f0,z\na,1.0,1.3\n").unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["fit-base", "--data", "bad.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("row 2"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
