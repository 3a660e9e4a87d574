//! Acceptance criteria, one test each. Every test prints a single
//! `[PASS]`/`[FAIL]` line with the measured value and its tolerance.
//!
//! Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use clf_opt::cli;
use clf_opt::config::{Experiment, ExperimentConfig};
use clf_opt::eval::{self, NamedController, RecoveryConfig};
use clf_opt::policy::grammian;
use clf_opt::training::{sample_wc, TrainReport};
use clf_opt::{rng, Controller, RbfPolicy};

mod tol {
    pub const MIN_NORM_GAP: f64 = 1e-6;
    pub const MIN_NORM_RUNTIME_S: f64 = 10.0;
    pub const CLF_SAMPLES: usize = 10_000;
    pub const FD_RATIO: (f64, f64) = (1.5, 3.0);
    pub const GRAMMIAN_SAMPLES: usize = 10_000;
    pub const CONVEX_PASS_FRAC: f64 = 0.99;
    pub const SWEEP_SLACK: f64 = 1e-3;
    pub const SWEEP_FINAL_VIOLATION: f64 = 1e-3;
    pub const RECOVERY_REL_L2: f64 = 0.05;
    pub const RECOVERY_RUNTIME_S: f64 = 300.0;
    pub const HEADLINE_R: f64 = 0.1;
    pub const HEADLINE_RUNTIME_S: f64 = 1800.0;
    pub const FINAL_STATE_NORM: f64 = 0.05;
    pub const V_SLACK: f64 = 1e-4;
    pub const PLATEAU_REL: f64 = 0.10;
}

const HEADLINE_SEEDS: [u64; 3] = [0, 1, 2];
const PLATEAU_WINDOW: usize = 10;

fn bundled_config_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/double_pendulum.json"))
}

fn bundled_config() -> ExperimentConfig {
    ExperimentConfig::from_json(&std::fs::read_to_string(bundled_config_path()).unwrap()).unwrap()
}

fn experiment(seed: u64) -> Experiment {
    let mut cfg = bundled_config();
    cfg.train.seed = seed;
    Experiment::build(cfg).unwrap()
}

fn verdict(id: u32, title: &str, passed: bool, measured: String) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{tag}] criterion {id:>2} {title}: {measured}").unwrap();
    out.flush().unwrap();
    assert!(passed, "criterion {id} ({title}) failed: {measured}");
}

struct HeadlineRun {
    seed: u64,
    exp: Experiment,
    report: TrainReport,
    policy: RbfPolicy,
}

/// The default experiment trained once per seed, shared by criteria 7-9.
fn headline() -> &'static (Vec<HeadlineRun>, Duration) {
    static RUNS: OnceLock<(Vec<HeadlineRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = HEADLINE_SEEDS
            .iter()
            .map(|&seed| {
                let exp = experiment(seed);
                let (report, policy) = exp.train(exp.train_config()).unwrap();
                HeadlineRun {
                    seed,
                    exp,
                    report,
                    policy,
                }
            })
            .collect();
        (runs, start.elapsed())
    })
}

#[test]
fn criterion_01_min_norm_matches_qp_oracle() {
    let exp = experiment(0);
    let start = Instant::now();
    let xs = sample_wc(&exp.clf, 1000, &mut rng::substream(0, &[0xACC, 1]));
    let worst = xs
        .iter()
        .map(|x| (exp.clf.min_norm(&exp.truth, x).unwrap() - exp.clf.min_norm_qp_oracle(&exp.truth, x).unwrap()).norm())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "min-norm closed form vs QP oracle",
        worst <= tol::MIN_NORM_GAP && secs < tol::MIN_NORM_RUNTIME_S,
        format!("max |diff| {worst:.3e} (<= {:e}), {secs:.2}s (< {}s)", tol::MIN_NORM_GAP, tol::MIN_NORM_RUNTIME_S),
    );
}

#[test]
fn criterion_02_clf_valid_for_both_models() {
    let exp = experiment(0);
    let t = exp.clf.verify_clf(&exp.truth, tol::CLF_SAMPLES, 2).unwrap();
    let n = exp.clf.verify_clf(&exp.model, tol::CLF_SAMPLES, 2).unwrap();
    verdict(
        2,
        "CLF validity on true plant and nominal model",
        t.passed() && n.passed(),
        format!(
            "true: {} violations, max Δ {:.2e}; nominal: {} violations, max Δ {:.2e} ({} samples, tol 1e-9)",
            t.violations, t.max_delta, n.violations, n.max_delta, tol::CLF_SAMPLES
        ),
    );
}

#[test]
fn criterion_03_finite_difference_error_halves() {
    let exp = experiment(0);
    let r = eval::finite_difference_ratio(&exp.truth, &exp.clf, 100, 0.01, 2.0, 3).unwrap();
    verdict(
        3,
        "finite-difference residual converges",
        (tol::FD_RATIO.0..=tol::FD_RATIO.1).contains(&r.ratio),
        format!(
            "mean |Δ̃-Δ| {:.4e} at dt=0.01, {:.4e} at 0.005, ratio {:.3} (in [{}, {}])",
            r.err_coarse, r.err_fine, r.ratio, tol::FD_RATIO.0, tol::FD_RATIO.1
        ),
    );
}

#[test]
fn criterion_04_strong_convexity() {
    let exp = experiment(0);
    let (_, min_eig) = grammian(&exp.basis, &exp.clf, tol::GRAMMIAN_SAMPLES, 4).unwrap();
    let policy = exp.initial_policy().unwrap();
    let c = eval::segment_convexity(&policy, &exp.truth, &exp.clf, exp.train_config().lambda, 10_000, 100, 1.0, 4).unwrap();
    let frac = c.passed_segments as f64 / c.segments as f64;
    verdict(
        4,
        "Grammian definite and loss convex on segments",
        min_eig > 0.0 && frac >= tol::CONVEX_PASS_FRAC,
        format!(
            "Grammian min eigenvalue {min_eig:.3e} (> 0); {}/{} segments within 3 SE (>= {:.0}%)",
            c.passed_segments,
            c.segments,
            100.0 * tol::CONVEX_PASS_FRAC
        ),
    );
}

#[test]
fn criterion_05_penalty_sufficiency() {
    let exp = experiment(0);
    let rows = eval::penalty_sweep(&exp, exp.train_config(), &[0.0, 1.0, 10.0, 100.0], 10_000, 0).unwrap();
    let (monotone, last) = eval::sweep_verdict(&rows, tol::SWEEP_SLACK, tol::SWEEP_FINAL_VIOLATION);
    let fracs: Vec<String> = rows.iter().map(|r| format!("λ={}: {:.4}", r.lambda, r.violation_frac)).collect();
    verdict(
        5,
        "penalty sweep violation fraction",
        monotone && last,
        format!(
            "{} (nonincreasing with slack {}: {monotone}; λ=100 <= {}: {last})",
            fracs.join(", "),
            tol::SWEEP_SLACK,
            tol::SWEEP_FINAL_VIOLATION
        ),
    );
}

#[test]
fn criterion_06_min_norm_recovery() {
    let exp = experiment(0);
    let start = Instant::now();
    let r = eval::recovery_test(&exp.truth, &exp.clf, &RecoveryConfig::default(), 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "recovery of an expressible oracle",
        r.passed && r.relative_l2 <= tol::RECOVERY_REL_L2 && secs < tol::RECOVERY_RUNTIME_S,
        format!(
            "relative L2 {:.4}, relative mean {:.4} (<= {}), oracle weight {:.4}, {secs:.1}s (< {}s)",
            r.relative_l2,
            r.relative_mean,
            tol::RECOVERY_REL_L2,
            r.oracle_weight,
            tol::RECOVERY_RUNTIME_S
        ),
    );
}

#[test]
fn criterion_07_headline_r_metric() {
    let (runs, elapsed) = headline();
    let rs: Vec<f64> = runs
        .iter()
        .map(|run| {
            let oracle = run.exp.oracle();
            let r = eval::r_metric(&run.policy, &oracle, &run.exp.clf, run.exp.config.eval.r_samples, run.seed).unwrap();
            r.mean
        })
        .collect();
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    let secs = elapsed.as_secs_f64();
    verdict(
        7,
        "headline R metric, 3-seed mean",
        mean <= tol::HEADLINE_R && secs <= tol::HEADLINE_RUNTIME_S,
        format!(
            "R {mean:.4} (per seed {:?}; <= {}), training {secs:.0}s (<= {}s)",
            rs.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            tol::HEADLINE_R,
            tol::HEADLINE_RUNTIME_S
        ),
    );
}

#[test]
fn criterion_08_stabilization() {
    let (runs, _) = headline();
    let run = &runs[0];
    let exp = &run.exp;
    let e = &exp.config.eval;
    let x0s = eval::trajectory_x0s(&exp.clf, 4, run.seed);
    let learned: std::sync::Arc<dyn Controller> = std::sync::Arc::new(run.policy.clone());
    let cmp = eval::compare_trajectories(&exp.truth, &exp.clf, &[NamedController::new("learned", learned)], &x0s, e.sim_dt, e.steps()).unwrap();
    let stabilized = cmp
        .summaries
        .iter()
        .all(|s| s.completed && s.final_norm <= tol::FINAL_STATE_NORM && s.max_v_increase <= tol::V_SLACK);
    let trained = eval::dissipation_report(&exp.truth, &exp.clf, &run.policy, e.dissipation_samples, run.seed).unwrap();
    let nominal = eval::dissipation_report(&exp.truth, &exp.clf, &exp.nominal_controller(), e.dissipation_samples, run.seed).unwrap();
    let fewer = nominal.violations > trained.violations;
    let finals: Vec<String> = cmp
        .summaries
        .iter()
        .map(|s| format!("|x(5)|={:.3} dV<={:.1e}", s.final_norm, s.max_v_increase))
        .collect();
    verdict(
        8,
        "stabilization and fewer violations than nominal",
        stabilized && fewer,
        format!(
            "{} (need |x(5)| <= {} and dV <= {:e}); violations trained {} vs nominal {}",
            finals.join(", "),
            tol::FINAL_STATE_NORM,
            tol::V_SLACK,
            trained.violations,
            nominal.violations
        ),
    );
}

#[test]
fn criterion_09_learning_curve_plateau() {
    let (runs, _) = headline();
    let k = runs.len() as f64;
    let mid = runs.iter().map(|r| r.report.smoothed_loss(250, PLATEAU_WINDOW)).sum::<f64>() / k;
    let end = runs.iter().map(|r| r.report.smoothed_loss(500, PLATEAU_WINDOW)).sum::<f64>() / k;
    let rel = (mid - end).abs() / end.abs();
    verdict(
        9,
        "learning curve plateau by mid-training",
        rel <= tol::PLATEAU_REL,
        format!(
            "loss@250 {mid:.4}, loss@500 {end:.4} ({PLATEAU_WINDOW}-epoch trailing mean, 3 seeds), relative gap {rel:.4} (<= {})",
            tol::PLATEAU_REL
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    files
}

/// Runs `args` twice into the same directory and compares every output file.
fn repeatable(dir: &Path, args: &[String]) -> Result<usize, String> {
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if dir.exists() {
            std::fs::remove_dir_all(dir).unwrap();
        }
        let code = cli::run(args);
        if code != cli::EXIT_OK && code != cli::EXIT_CHECK_FAILED {
            return Err(format!("{args:?} exited {code}"));
        }
        snaps.push(snapshot(dir));
    }
    if snaps[0].is_empty() {
        return Err(format!("{args:?} wrote nothing"));
    }
    if snaps[0] != snaps[1] {
        let differing: Vec<&String> = snaps[0].keys().filter(|k| snaps[0].get(*k) != snaps[1].get(*k)).collect();
        return Err(format!("{args:?} differs in {differing:?}"));
    }
    Ok(snaps[0].len())
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = bundled_config_path().to_string_lossy().into_owned();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let train_dir = root.join("train");
    let argv = |v: &[&str]| -> Vec<String> { v.iter().map(|a| a.to_string()).collect() };
    let mut outcomes = Vec::new();
    outcomes.push(("train", repeatable(&train_dir, &argv(&["clf-opt", "train", &config, "--seed", "7", "--epochs", "20", "--out", &s(&train_dir)]))));
    // eval reads the checkpoint from a directory it does not write to
    let ck_dir = root.join("ck");
    std::fs::create_dir_all(&ck_dir).unwrap();
    let ck = ck_dir.join("checkpoint.json");
    std::fs::copy(train_dir.join("checkpoint.json"), &ck).unwrap();
    let eval_dir = root.join("eval");
    outcomes.push(("eval", repeatable(&eval_dir, &argv(&["clf-opt", "eval", &s(&ck), &config, "--seed", "7", "--out", &s(&eval_dir)]))));
    let sweep_dir = root.join("sweep");
    outcomes.push(("sweep", repeatable(&sweep_dir, &argv(&["clf-opt", "sweep", &config, "--lambdas", "0,10", "--epochs", "5", "--seed", "7", "--out", &s(&sweep_dir)]))));
    let sim_dir = root.join("sim");
    outcomes.push((
        "simulate",
        repeatable(&sim_dir, &argv(&["clf-opt", "simulate", &config, "--controller", "learned", "--checkpoint", &s(&ck), "--seed", "7", "--out", &s(&sim_dir)])),
    ));
    let check_dir = root.join("check");
    outcomes.push(("check", repeatable(&check_dir, &argv(&["clf-opt", "check", "--config", &config, "--epochs", "3", "--seed", "7", "--out", &s(&check_dir)]))));
    // thread count must not matter
    let one = root.join("jobs1");
    let many = root.join("jobs4");
    cli::run(argv(&["clf-opt", "--jobs", "1", "train", &config, "--seed", "7", "--epochs", "10", "--out", &s(&one)]));
    cli::run(argv(&["clf-opt", "--jobs", "4", "train", &config, "--seed", "7", "--epochs", "10", "--out", &s(&many)]));
    let a = std::fs::read(one.join("learning_curve.csv")).unwrap();
    let b = std::fs::read(many.join("learning_curve.csv")).unwrap();
    let jobs_ok = a == b && std::fs::read(one.join("checkpoint.json")).unwrap() == std::fs::read(many.join("checkpoint.json")).unwrap();
    let passed = outcomes.iter().all(|(_, r)| r.is_ok()) && jobs_ok;
    let detail: Vec<String> = outcomes
        .iter()
        .map(|(name, r)| match r {
            Ok(n) => format!("{name}: {n} files identical"),
            Err(e) => format!("{name}: {e}"),
        })
        .collect();
    verdict(
        10,
        "byte-identical outputs for repeated commands",
        passed,
        format!("{}; --jobs 1 vs 4 identical: {jobs_ok}", detail.join(", ")),
    );
}
