//! `clf-opt` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use crate::config::{Experiment, ExperimentConfig};
use crate::dynamics::{ControlAffine, Controller, SystemModel, ZeroController};
use crate::error::{Error, Result};
use crate::eval::{self, BatteryConfig, NamedController};
use crate::io::{self, Csv};
use crate::policy::{Checkpoint, RbfPolicy};
use crate::training::TrainReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const JOBS_ENV: &str = "CLF_OPT_JOBS";

#[derive(Debug, Parser)]
#[command(name = "clf-opt", version, about = "Learn min-norm CLF controllers from black-box transitions")]
pub struct Cli {
    /// Worker threads; defaults to the available cores. CLF_OPT_JOBS takes
    /// precedence.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes learning_curve.csv and checkpoint.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes eval_report.json, trajectories.csv, ratios.csv.
    Eval(EvalArgs),
    /// Run the verification suite and print a verdict table.
    Check(CheckArgs),
    /// Train once per penalty weight; writes sweep.csv.
    Sweep(SweepArgs),
    /// Dump one closed-loop trajectory.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Master seed; overrides `train.seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Injection {
    /// Duplicate one RBF center.
    DuplicateCenter,
    /// Replace the true plant by one with `g ≡ 0`.
    ZeroInputPlant,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Experiment config; the built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Training epochs per penalty-sweep run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub inject: Option<Injection>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    /// Comma-separated penalty weights.
    #[arg(long, default_value = "0,1,10,100")]
    pub lambdas: String,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimController {
    Oracle,
    Nominal,
    Learned,
    Zero,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    pub controller: SimController,
    /// Required for `--controller learned`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated initial state; a seeded draw from the sublevel set when absent.
    #[arg(long)]
    pub x0: Option<String>,
    /// Seconds; defaults to `eval.horizon_s`.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Hold period; defaults to `eval.sim_dt`.
    #[arg(long)]
    pub dt: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let jobs = match resolve_jobs(cli.jobs) {
        Ok(j) => j,
        Err(e) => return report(&e),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::Usage(format!("cannot start worker pool: {e}"))),
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}

fn resolve_jobs(flag: Option<usize>) -> Result<usize> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("{JOBS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(flag.unwrap_or(0)),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. } | Error::IntegrationBlowup { .. } | Error::ClfViolation { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

fn load_config(path: Option<&Path>, run: &RunArgs, epochs: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json(&io::read_text(p)?)
            .map_err(|e| match e {
                Error::Usage(msg) => Error::Usage(format!("{}: {msg}", p.display())),
                other => other,
            })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out_dir = out.clone();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    io::write_json(&cfg.out_dir.join("resolved_config.json"), cfg)
}

pub fn learning_curve_csv(report: &TrainReport) -> Csv {
    let mut csv = Csv::new(&["epoch", "loss", "mean_penalty", "violation_frac", "theta_norm"]);
    for e in &report.epochs {
        csv.row(&[e.epoch.into(), e.loss.into(), e.mean_penalty.into(), e.violation_frac.into(), e.theta_norm.into()]);
    }
    csv
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = load_config(Some(&a.config), &a.run, a.epochs)?;
    write_resolved(&cfg)?;
    let exp = Experiment::build(cfg)?;
    let out = exp.config.out_dir.clone();
    let (report, policy) = match exp.train(exp.train_config()) {
        Ok(r) => r,
        Err(e @ Error::NumericalAbort { .. }) => {
            if let Error::NumericalAbort { dump, .. } = &e {
                let path = out.join("abort_dump.json");
                io::write_text(&path, dump)?;
                eprintln!("state dump written to {}", path.display());
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    learning_curve_csv(&report).write(&out.join("learning_curve.csv"))?;
    io::write_json(&out.join("checkpoint.json"), &Checkpoint::from_policy(&policy))?;
    let last = report.last();
    println!(
        "trained {} epochs: loss {:.6}, mean penalty {:.6}, violation fraction {:.4}",
        last.epoch, last.loss, last.mean_penalty, last.violation_frac
    );
    Ok(EXIT_OK)
}

fn load_policy(exp: &Experiment, path: &Path) -> Result<RbfPolicy> {
    let ck: Checkpoint = io::read_json(path)?;
    ck.into_policy(exp.nominal())
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let cfg = load_config(Some(&a.config), &a.run, None)?;
    write_resolved(&cfg)?;
    let seed = cfg.train.seed;
    let exp = Experiment::build(cfg)?;
    let policy = load_policy(&exp, &a.checkpoint)?;
    let (report, logs) = eval::evaluate(&exp, &policy, seed)?;
    let out = &exp.config.out_dir;
    io::write_json(&out.join("eval_report.json"), &report)?;
    eval::trajectories_csv(&logs, exp.truth.n(), exp.truth.m(), exp.config.eval.log_stride).write(&out.join("trajectories.csv"))?;
    eval::ratios_csv(&report.r_metric).write(&out.join("ratios.csv"))?;
    let r = &report.r_metric;
    println!("R = {:.6} (sum {:.3}, median {:.4} over {} states)", r.mean, r.sum, r.median, r.count);
    for d in &report.dissipation {
        println!(
            "{:<8} violation fraction {:.4}, mean H(Δ) {:.3e}",
            d.controller, d.report.violation_frac, d.report.mean_penalty
        );
    }
    Ok(EXIT_OK)
}

/// The true plant with its input matrix replaced by zero.
struct ZeroInput(SystemModel);

impl ControlAffine for ZeroInput {
    fn state_dim(&self) -> usize {
        self.0.n()
    }

    fn input_dim(&self) -> usize {
        self.0.m()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.drift(x).unwrap_or_else(|_| DVector::from_element(self.0.n(), f64::NAN))
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.0.n(), self.0.m())
    }
}

fn cmd_check(a: &CheckArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref(), &a.run, a.epochs)?;
    write_resolved(&cfg)?;
    let seed = cfg.train.seed;
    let mut exp = Experiment::build(cfg)?;
    match a.inject {
        Some(Injection::DuplicateCenter) => {
            let mut centers = exp.basis.centers().to_vec();
            if centers.len() < 2 {
                return Err(Error::Usage("duplicate-center injection needs two centers".into()));
            }
            centers[1] = centers[0].clone();
            exp.basis = crate::policy::RbfBasis::new(centers, exp.basis.width(), exp.basis.channels())?;
        }
        Some(Injection::ZeroInputPlant) => {
            exp.truth = SystemModel::new("zero_input_plant", ZeroInput(exp.truth.clone()));
        }
        None => {}
    }
    let battery = BatteryConfig {
        sweep_train: Some(exp.config.train.clone()),
        ..BatteryConfig::default()
    };
    let verdicts = eval::check_suite(&exp, &battery, seed);
    io::write_json(&exp.config.out_dir.join("check_report.json"), &verdicts)?;
    let width = verdicts.iter().map(|v| v.name.len()).max().unwrap_or(0);
    for v in &verdicts {
        println!(
            "{:<width$}  {}  value={:<12.6e} threshold={:<10.3e} {}",
            v.name,
            if v.passed { "PASS" } else { "FAIL" },
            v.value,
            v.threshold,
            v.detail
        );
    }
    Ok(if verdicts.iter().all(|v| v.passed) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("invalid {what} entry {s:?}")))
        })
        .collect()
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let lambdas = parse_list(&a.lambdas, "lambda")?;
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::Usage("lambdas must be finite and >= 0".into()));
    }
    let cfg = load_config(Some(&a.config), &a.run, a.epochs)?;
    write_resolved(&cfg)?;
    let seed = cfg.train.seed;
    let exp = Experiment::build(cfg)?;
    let rows = eval::penalty_sweep(&exp, exp.train_config(), &lambdas, exp.config.eval.dissipation_samples, seed)?;
    eval::sweep_csv(&rows).write(&exp.config.out_dir.join("sweep.csv"))?;
    for r in &rows {
        println!(
            "lambda {:>8}: loss {:.5}, violation fraction {:.4}, R {:.4}",
            r.lambda, r.final_loss, r.violation_frac, r.r_metric
        );
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let cfg = load_config(Some(&a.config), &a.run, None)?;
    write_resolved(&cfg)?;
    let seed = cfg.train.seed;
    let exp = Experiment::build(cfg)?;
    let (n, m) = (exp.truth.n(), exp.truth.m());
    let controller: std::sync::Arc<dyn Controller> = match a.controller {
        SimController::Oracle => std::sync::Arc::new(exp.oracle()),
        SimController::Nominal => std::sync::Arc::new(exp.nominal_controller()),
        SimController::Zero => std::sync::Arc::new(ZeroController { m }),
        SimController::Learned => {
            let path = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Usage("--controller learned needs --checkpoint".into()))?;
            std::sync::Arc::new(load_policy(&exp, path)?)
        }
    };
    let x0 = match &a.x0 {
        Some(text) => {
            let v = parse_list(text, "x0")?;
            if v.len() != n {
                return Err(Error::Usage(format!("x0 needs {n} entries, got {}", v.len())));
            }
            DVector::from_vec(v)
        }
        None => eval::trajectory_x0s(&exp.clf, 1, seed).remove(0),
    };
    let dt = a.dt.unwrap_or(exp.config.eval.sim_dt);
    let horizon = a.horizon.unwrap_or(exp.config.eval.horizon_s);
    if !(dt > 0.0 && horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Usage("simulation needs dt > 0 and horizon >= 0".into()));
    }
    let steps = (horizon / dt).round() as usize;
    let name = format!("{:?}", a.controller).to_lowercase();
    let cmp = eval::compare_trajectories(&exp.truth, &exp.clf, &[NamedController::new(name, controller)], &[x0], dt, steps)?;
    eval::trajectories_csv(&cmp.logs, n, m, exp.config.eval.log_stride).write(&exp.config.out_dir.join("trajectory.csv"))?;
    let s = &cmp.summaries[0];
    match &s.blowup {
        Some(b) => println!("stopped early: {b}"),
        None => println!("final |x| = {:.6e}, max V increase {:.3e}", s.final_norm, s.max_v_increase),
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("0, 1,10,100", "l").unwrap(), vec![0.0, 1.0, 10.0, 100.0]);
        assert!(parse_list("1,x", "l").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Usage(String::new())), EXIT_USAGE);
        let abort = Error::NumericalAbort {
            epoch: 1,
            reason: String::new(),
            dump: String::new(),
        };
        assert_eq!(exit_code(&abort), EXIT_NUMERICAL);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["clf-opt", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["clf-opt", "train", "/nonexistent/config.json"]), EXIT_USAGE);
        assert_eq!(run(["clf-opt", "--help"]), EXIT_OK);
    }
}
