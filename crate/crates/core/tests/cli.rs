use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_clf-opt");

const SMALL: &str = r#"{
  "policy": { "centers": 20 },
  "train": { "epochs": 3, "rollouts_per_epoch": 10 },
  "eval": { "r_samples": 50, "horizon_s": 0.5, "dissipation_samples": 500 }
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CLF_OPT_JOBS")
        .output()
        .expect("spawn clf-opt")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), config).unwrap();
    dir
}

fn verdicts(path: &Path) -> Vec<Value> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_array().unwrap().clone()
}

fn verdict<'a>(all: &'a [Value], name: &str) -> &'a Value {
    all.iter().find(|v| v["name"] == name).unwrap_or_else(|| panic!("no verdict {name}"))
}

#[test]
fn one_epoch_training_smoke() {
    let dir = setup(SMALL);
    let start = Instant::now();
    let out = run(dir.path(), &["train", "config.json", "--epochs", "1", "--out", "o"]);
    assert!(start.elapsed() < Duration::from_secs(5));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["resolved_config.json", "learning_curve.csv", "checkpoint.json"] {
        assert!(dir.path().join("o").join(f).is_file(), "{f}");
    }
    let curve = fs::read_to_string(dir.path().join("o/learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    assert!(curve.starts_with("epoch,"));
    let resolved: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 1);
    assert_eq!(resolved["policy"]["centers"], 20);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = setup(r#"{ "policy": { "centers": 20 }, "bogus": 1 }"#);
    let out = run(dir.path(), &["train", "config.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    fs::write(dir.path().join("config.json"), r#"{ "train": { "dt": -1.0 } }"#).unwrap();
    assert_eq!(run(dir.path(), &["train", "config.json"]).status.code(), Some(2));

    fs::write(dir.path().join("config.json"), "{ not json").unwrap();
    assert_eq!(run(dir.path(), &["train", "config.json"]).status.code(), Some(2));

    assert_eq!(run(dir.path(), &["train", "missing.json"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = setup(r#"{ "policy": { "centers": 20 }, "train": { "epochs": 2, "lambda": 1e308 } }"#);
    let out = run(dir.path(), &["train", "config.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    let dump: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/abort_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["epoch"], 1);
    assert!(dump["theta"].is_array());
    assert!(!dir.path().join("o/checkpoint.json").exists());
}

#[test]
fn eval_and_simulate_outputs() {
    let dir = setup(SMALL);
    assert_eq!(run(dir.path(), &["train", "config.json", "--out", "o"]).status.code(), Some(0));
    let out = run(dir.path(), &["eval", "o/checkpoint.json", "config.json", "--out", "e"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/eval_report.json")).unwrap()).unwrap();
    assert!(report["r_metric"]["mean"].as_f64().unwrap().is_finite());
    assert_eq!(report["r_metric"]["count"], 50);
    let ratios = fs::read_to_string(dir.path().join("e/ratios.csv")).unwrap();
    assert_eq!(ratios.lines().count(), 51);
    let traj = fs::read_to_string(dir.path().join("e/trajectories.csv")).unwrap();
    let header = traj.lines().next().unwrap();
    assert!(header.starts_with("controller,x0_id,t,"), "{header}");
    for name in ["oracle", "learned", "nominal"] {
        assert!(traj.lines().any(|l| l.starts_with(&format!("{name},"))), "{name}");
    }
    assert!(dir.path().join("e/resolved_config.json").is_file());

    let out = run(dir.path(), &["simulate", "config.json", "--controller", "learned", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        dir.path(),
        &["simulate", "config.json", "--controller", "learned", "--checkpoint", "o/checkpoint.json", "--x0", "0.1,0,0,0", "--horizon", "0.1", "--out", "s"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sim = fs::read_to_string(dir.path().join("s/trajectory.csv")).unwrap();
    assert!(sim.lines().nth(1).unwrap().contains(",0,0"));
    let out = run(dir.path(), &["simulate", "config.json", "--x0", "0.1,0", "--out", "s"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn jobs_env_overrides_flag_and_is_validated() {
    let dir = setup(SMALL);
    let with_env = |jobs: &str| {
        Command::new(BIN)
            .args(["--jobs", "1", "train", "config.json", "--out", "o"])
            .current_dir(dir.path())
            .env("CLF_OPT_JOBS", jobs)
            .output()
            .unwrap()
    };
    assert_eq!(with_env("2").status.code(), Some(0));
    let first = fs::read(dir.path().join("o/checkpoint.json")).unwrap();
    assert_eq!(with_env("1").status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("o/checkpoint.json")).unwrap(), first);
    assert_eq!(with_env("zero").status.code(), Some(2));
    assert_eq!(with_env("0").status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("o/checkpoint.json")).unwrap(), first);
}

#[test]
fn sweep_writes_monotone_table() {
    let dir = setup(
        r#"{ "policy": { "centers": 40 }, "train": { "epochs": 60 }, "eval": { "r_samples": 100, "dissipation_samples": 2000 } }"#,
    );
    let out = run(dir.path(), &["sweep", "config.json", "--lambdas", "0,10,100", "--out", "w"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("w/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda,final_loss,mean_penalty,violation_frac,r_metric"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 10.0, 100.0]);
    let fracs: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    assert!(fracs.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{fracs:?}");
    assert!(fracs[0] > fracs[2], "{fracs:?}");

    assert_eq!(run(dir.path(), &["sweep", "config.json", "--lambdas", "1,x"]).status.code(), Some(2));
}

const CHECK: &str = r#"{
  "policy": { "centers": 20 },
  "train": { "epochs": 5, "rollouts_per_epoch": 10 },
  "eval": { "r_samples": 50 }
}"#;

#[test]
fn check_reports_every_item() {
    let dir = setup(CHECK);
    let out = run(dir.path(), &["check", "--config", "config.json", "--out", "c"]);
    let all = verdicts(&dir.path().join("c/check_report.json"));
    let names: Vec<&str> = all.iter().map(|v| v["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "verify_clf_true_plant",
            "verify_clf_nominal_model",
            "min_norm_matches_qp_oracle",
            "rk4_fourth_order",
            "grammian_positive_definite",
            "segment_convexity",
            "penalty_sweep",
            "finite_difference_convergence",
        ]
    );
    for name in [
        "verify_clf_true_plant",
        "verify_clf_nominal_model",
        "min_norm_matches_qp_oracle",
        "rk4_fourth_order",
        "grammian_positive_definite",
        "segment_convexity",
        "finite_difference_convergence",
    ] {
        assert_eq!(verdict(&all, name)["passed"], true, "{name}");
    }
    let expected = if all.iter().all(|v| v["passed"] == true) { 0 } else { 1 };
    assert_eq!(out.status.code(), Some(expected));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), all.len());
    assert!(table.contains("grammian_positive_definite") && table.contains("PASS"));
}

#[test]
fn duplicate_center_fails_grammian() {
    let dir = setup(CHECK);
    let out = run(dir.path(), &["check", "--config", "config.json", "--inject", "duplicate-center", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    let all = verdicts(&dir.path().join("c/check_report.json"));
    assert_eq!(verdict(&all, "grammian_positive_definite")["passed"], false);
    assert!(String::from_utf8_lossy(&out.stdout).lines().any(|l| l.starts_with("grammian_positive_definite") && l.contains("FAIL")));
}

#[test]
fn zero_input_plant_fails_clf_verification() {
    let dir = setup(CHECK);
    let out = run(dir.path(), &["check", "--config", "config.json", "--inject", "zero-input-plant", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    let all = verdicts(&dir.path().join("c/check_report.json"));
    assert_eq!(verdict(&all, "verify_clf_true_plant")["passed"], false);
    assert_eq!(verdict(&all, "verify_clf_nominal_model")["passed"], true);
}
