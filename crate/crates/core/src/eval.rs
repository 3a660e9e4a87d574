//! Evaluation against the analytic plant: the R metric, closed-loop
//! trajectories, dissipation statistics, and the property battery.
//!
//! Unlike training, everything here may use the true dynamics directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clf::{AbTerms, QuadraticClf, DELTA_TOL};
use crate::config::Experiment;
use crate::dynamics::{Controller, SystemModel, TrajectoryPoint, ZeroController};
use crate::error::{Error, Result};
use crate::io::{Cell, Csv};
use crate::policy::{grammian, FeatureBasis, FunctionBasis, LinearPolicy, RbfPolicy};
use crate::rng;
use crate::training::{self, sample_wc, BlackBoxPlant, Optimizer, PlantStep, StepRule, TrainConfig};

/// Oracle inputs below this norm make the ratio undefined; such states are
/// redrawn.
pub const MIN_ORACLE_NORM: f64 = 1e-8;

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMetric {
    pub mean: f64,
    /// `count × mean`.
    pub sum: f64,
    pub median: f64,
    pub count: usize,
    /// States redrawn because the oracle input vanished there.
    pub redrawn: usize,
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

/// Mean of `‖û(x) − u*(x)‖ / ‖u*(x)‖` over uniform draws from the sublevel set.
pub fn r_metric(policy: &dyn Controller, oracle: &dyn Controller, clf: &QuadraticClf, count: usize, seed: u64) -> Result<RMetric> {
    if count == 0 {
        return Err(Error::Usage("R metric needs at least one sample".into()));
    }
    let sampler = clf.sampler();
    let per_state = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, &[rng::tag::EVAL_R, i as u64]);
            for redraws in 0..MAX_REDRAWS {
                let x = sampler.sample(&mut rng);
                let target = oracle.control(&x)?;
                let norm = target.norm();
                if norm < MIN_ORACLE_NORM {
                    continue;
                }
                let u = policy.control(&x)?;
                return Ok(((u - target).norm() / norm, redraws));
            }
            Err(Error::InvalidParameter("oracle input vanishes on every drawn state".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = per_state.iter().map(|p| p.0).collect();
    let sum: f64 = ratios.iter().sum();
    let mut sorted = ratios.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = count / 2;
    let median = if count % 2 == 0 { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    Ok(RMetric {
        mean: sum / count as f64,
        sum,
        median,
        count,
        redrawn: per_state.iter().map(|p| p.1).sum(),
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub samples: usize,
    pub max_delta: f64,
    /// Samples with `Δ > DELTA_TOL`.
    pub violations: usize,
    pub violation_frac: f64,
    /// Mean of `max(0, Δ)`.
    pub mean_penalty: f64,
}

/// Analytic `Δ(x, controller(x))` at uniform samples of the sublevel set.
pub fn dissipation_report(sys: &SystemModel, clf: &QuadraticClf, controller: &dyn Controller, count: usize, seed: u64) -> Result<DissipationReport> {
    let sampler = clf.sampler();
    let mut rng = rng::substream(seed, &[rng::tag::EVAL_DISSIPATION]);
    let states = sampler.sample_many(count, &mut rng);
    let deltas = states
        .par_iter()
        .map(|x| clf.analytic_delta(sys, x, &controller.control(x)?))
        .collect::<Result<Vec<_>>>()?;
    let violations = deltas.iter().filter(|d| **d > DELTA_TOL).count();
    Ok(DissipationReport {
        samples: count,
        max_delta: deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        violations,
        violation_frac: violations as f64 / count as f64,
        mean_penalty: deltas.iter().map(|d| d.max(0.0)).sum::<f64>() / count as f64,
    })
}

/// A controller together with the name used in logs.
#[derive(Clone)]
pub struct NamedController {
    pub name: String,
    pub controller: Arc<dyn Controller>,
}

impl NamedController {
    pub fn new(name: impl Into<String>, controller: Arc<dyn Controller>) -> Self {
        Self {
            name: name.into(),
            controller,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub controller: String,
    pub x0_id: usize,
    pub points: Vec<TrajectoryPoint>,
    pub v: Vec<f64>,
    /// Why the simulation stopped early, if it did.
    pub blowup: Option<String>,
}

impl TrajectoryLog {
    pub fn completed(&self, steps: usize) -> bool {
        self.blowup.is_none() && self.points.len() == steps + 1
    }

    pub fn final_norm(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.x.norm())
    }

    /// Largest single-step increase of `V` (negative when strictly decreasing).
    pub fn max_v_increase(&self) -> f64 {
        self.v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub controller: String,
    pub x0_id: usize,
    pub completed: bool,
    pub blowup: Option<String>,
    pub final_norm: f64,
    pub max_v_increase: f64,
    /// `max_k ‖x_k − x_k^ref‖` against the first controller, over the common prefix.
    pub max_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryComparison {
    pub logs: Vec<TrajectoryLog>,
    pub summaries: Vec<TrajectorySummary>,
}

/// Simulates every controller from every `x0` on `sys` with zero-order hold
/// at `dt`. Gaps are measured against `controllers[0]`.
pub fn compare_trajectories(
    sys: &SystemModel,
    clf: &QuadraticClf,
    controllers: &[NamedController],
    x0s: &[DVector<f64>],
    dt: f64,
    steps: usize,
) -> Result<TrajectoryComparison> {
    if controllers.is_empty() {
        return Err(Error::Usage("no controllers to compare".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..controllers.len())
        .flat_map(|c| (0..x0s.len()).map(move |i| (c, i)))
        .collect();
    let logs = jobs
        .par_iter()
        .map(|&(c, i)| {
            let nc = &controllers[c];
            let (traj, err) = sys.simulate_partial(nc.controller.as_ref(), &x0s[i], dt, steps)?;
            Ok(TrajectoryLog {
                controller: nc.name.clone(),
                x0_id: i,
                v: traj.points.iter().map(|p| clf.value(&p.x)).collect(),
                points: traj.points,
                blowup: err.map(|e| e.to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_x0 = x0s.len();
    let summaries = logs
        .iter()
        .enumerate()
        .map(|(idx, log)| {
            let reference = &logs[idx % per_x0];
            let max_gap = log
                .points
                .iter()
                .zip(&reference.points)
                .map(|(a, b)| (&a.x - &b.x).norm())
                .fold(0.0, f64::max);
            TrajectorySummary {
                controller: log.controller.clone(),
                x0_id: log.x0_id,
                completed: log.completed(steps),
                blowup: log.blowup.clone(),
                final_norm: log.final_norm(),
                max_v_increase: log.max_v_increase(),
                max_gap,
            }
        })
        .collect();
    Ok(TrajectoryComparison { logs, summaries })
}

/// Column names for an `n`-state, `m`-input system; the pendulum gets joint
/// names.
pub fn trajectory_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["controller".to_string(), "x0_id".into(), "t".into()];
    if n == 4 && m == 2 {
        h.extend(["q1", "q2", "dq1", "dq2", "u1", "u2"].map(String::from));
    } else {
        h.extend((1..=n).map(|i| format!("x{i}")));
        h.extend((1..=m).map(|j| format!("u{j}")));
    }
    h.push("V".into());
    h
}

/// Every `stride`-th point plus the final one.
pub fn trajectories_csv(logs: &[TrajectoryLog], n: usize, m: usize, stride: usize) -> Csv {
    let header = trajectory_header(n, m);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&refs);
    for log in logs {
        let last = log.points.len().saturating_sub(1);
        for (k, p) in log.points.iter().enumerate() {
            if k % stride.max(1) != 0 && k != last {
                continue;
            }
            let mut cells: Vec<Cell<'_>> = vec![log.controller.as_str().into(), log.x0_id.into(), p.t.into()];
            cells.extend(p.x.iter().map(|v| Cell::Float(*v)));
            cells.extend(p.u.iter().map(|v| Cell::Float(*v)));
            cells.push(log.v[k].into());
            csv.row(&cells);
        }
    }
    csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDissipation {
    pub controller: String,
    #[serde(flatten)]
    pub report: DissipationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_metric: RMetric,
    pub dissipation: Vec<NamedDissipation>,
    pub trajectories: Vec<TrajectorySummary>,
}

/// Seeded initial states for trajectory comparisons.
pub fn trajectory_x0s(clf: &QuadraticClf, count: usize, seed: u64) -> Vec<DVector<f64>> {
    sample_wc(clf, count, &mut rng::substream(seed, &[rng::tag::EVAL_TRAJ]))
}

/// The standard evaluation of a trained policy: R against the true min-norm
/// law, dissipation of learned/nominal/oracle controllers, and trajectories.
pub fn evaluate(exp: &Experiment, policy: &RbfPolicy, seed: u64) -> Result<(EvalReport, Vec<TrajectoryLog>)> {
    let e = &exp.config.eval;
    let oracle: Arc<dyn Controller> = Arc::new(exp.oracle());
    let learned: Arc<dyn Controller> = Arc::new(policy.clone());
    let nominal: Arc<dyn Controller> = match policy.nominal() {
        Some(n) => n.controller.clone(),
        None => Arc::new(ZeroController { m: exp.truth.m() }),
    };
    let r = r_metric(learned.as_ref(), oracle.as_ref(), &exp.clf, e.r_samples, seed)?;
    let controllers = [
        NamedController::new("oracle", oracle),
        NamedController::new("learned", learned),
        NamedController::new("nominal", nominal),
    ];
    let dissipation = controllers
        .iter()
        .map(|c| {
            let report = dissipation_report(&exp.truth, &exp.clf, c.controller.as_ref(), e.dissipation_samples, seed)?;
            Ok(NamedDissipation {
                controller: c.name.clone(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x0s = trajectory_x0s(&exp.clf, e.trajectory_x0_count, seed);
    let cmp = compare_trajectories(&exp.truth, &exp.clf, &controllers, &x0s, e.sim_dt, e.steps())?;
    Ok((
        EvalReport {
            r_metric: r,
            dissipation,
            trajectories: cmp.summaries,
        },
        cmp.logs,
    ))
}

pub fn ratios_csv(r: &RMetric) -> Csv {
    let mut csv = Csv::new(&["sample_id", "ratio"]);
    for (i, v) in r.ratios.iter().enumerate() {
        csv.row(&[i.into(), (*v).into()]);
    }
    csv
}

/// Settings of the expressible-oracle sanity problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub train: TrainConfig,
    pub distractors: usize,
    pub distractor_width: f64,
    pub test_samples: usize,
    /// Bound on the relative L2 distance to the oracle.
    pub tolerance: f64,
    /// Starting parameters; zero when absent.
    pub initial_theta: Option<Vec<f64>>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                lambda: 100.0,
                dt: 1e-3,
                horizon: 1,
                rollouts_per_epoch: 200,
                epochs: 1000,
                noise_std: 0.0,
                optimizer: Optimizer::Es {
                    pairs: 8,
                    nu: 0.01,
                    step: 0.005,
                },
                step_rule: StepRule::Adam,
                seed: 0,
                blowup_penalty: 1e6,
            },
            distractors: 9,
            distractor_width: 1.0,
            test_samples: 1000,
            tolerance: 0.05,
            initial_theta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `√E‖û − u*‖² / √E‖u*‖²`.
    pub relative_l2: f64,
    /// `E‖û − u*‖ / E‖u*‖`.
    pub relative_mean: f64,
    pub oracle_weight: f64,
    pub theta: Vec<f64>,
    pub final_loss: f64,
    pub passed: bool,
}

/// Basis `{u*, φ_1 e_{j_1}, …}`: the true min-norm law followed by Gaussian
/// distractors on alternating channels.
pub fn recovery_basis(truth: &SystemModel, clf: &QuadraticClf, distractors: usize, width: f64, seed: u64) -> Result<FunctionBasis> {
    if !(width > 0.0) {
        return Err(Error::InvalidParameter(format!("distractor width must be positive, got {width}")));
    }
    let (n, m) = (truth.n(), truth.m());
    let mut elements: Vec<Arc<dyn Controller>> = vec![Arc::new(crate::clf::MinNormController {
        sys: truth.clone(),
        clf: clf.clone(),
    })];
    let mut rng = rng::substream(seed, &[rng::tag::RECOVERY]);
    let centers = sample_wc(clf, distractors, &mut rng);
    for (i, c) in centers.into_iter().enumerate() {
        let channel = i % m;
        let inv = 0.5 / (width * width);
        elements.push(Arc::new(move |x: &DVector<f64>| {
            let mut u = DVector::zeros(m);
            u[channel] = (-(x - &c).norm_squared() * inv).exp();
            Ok(u)
        }));
    }
    FunctionBasis::new(n, m, elements)
}

pub fn recovery_test(truth: &SystemModel, clf: &QuadraticClf, cfg: &RecoveryConfig, seed: u64) -> Result<RecoveryReport> {
    let basis = recovery_basis(truth, clf, cfg.distractors, cfg.distractor_width, seed)?;
    let mut policy = LinearPolicy::new(basis, crate::policy::DEFAULT_THETA_MAX, None)?;
    if let Some(t) = &cfg.initial_theta {
        policy.set_theta(DVector::from_column_slice(t))?;
    }
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let plant = BlackBoxPlant::new(truth.clone(), tcfg.dt)?;
    let report = training::train(&plant, clf, &policy, &tcfg)?;
    let trained = policy.with_theta(report.final_theta())?;
    let oracle = crate::clf::MinNormController {
        sys: truth.clone(),
        clf: clf.clone(),
    };
    let mut rng = rng::substream(seed, &[rng::tag::RECOVERY, 1]);
    let states = sample_wc(clf, cfg.test_samples, &mut rng);
    let pairs = states
        .par_iter()
        .map(|x| {
            let target = oracle.control(x)?;
            let diff = (trained.evaluate(x)? - &target).norm();
            Ok((diff, target.norm()))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = pairs.len() as f64;
    let l2 = (pairs.iter().map(|p| p.0 * p.0).sum::<f64>() / k).sqrt() / (pairs.iter().map(|p| p.1 * p.1).sum::<f64>() / k).sqrt();
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.iter().map(|p| p.1).sum::<f64>();
    Ok(RecoveryReport {
        relative_l2: l2,
        relative_mean: mean,
        oracle_weight: report.theta[0],
        final_loss: report.smoothed_loss(report.epochs.len(), 10),
        passed: l2 <= cfg.tolerance && mean <= cfg.tolerance,
        theta: report.theta,
    })
}

/// `E[‖û‖² + λ·max(0, Δ)]` with the analytic `Δ`, averaged over `states`.
pub fn analytic_objective<B: FeatureBasis>(
    policy: &LinearPolicy<B>,
    theta: &DVector<f64>,
    sys: &SystemModel,
    clf: &QuadraticClf,
    states: &[DVector<f64>],
    lambda: f64,
) -> Result<f64> {
    let losses = states
        .par_iter()
        .map(|x| {
            let u = policy.evaluate_with(x, theta)?;
            let delta = clf.analytic_delta(sys, x, &u)?;
            Ok(training::pointwise_loss(&u, delta, lambda))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / states.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub pairs: usize,
    pub dt: f64,
    pub err_coarse: f64,
    pub err_fine: f64,
    pub ratio: f64,
}

/// Mean `|Δ̃ − Δ|` at `dt` and `dt/2` over random `(x, u)` pairs, with `x`
/// uniform in the sublevel set and `u ~ N(0, input_std² I)`.
pub fn finite_difference_ratio(sys: &SystemModel, clf: &QuadraticClf, pairs: usize, dt: f64, input_std: f64, seed: u64) -> Result<FdReport> {
    let mut rng = rng::substream(seed, &[rng::tag::BATTERY, 3]);
    let xs = sample_wc(clf, pairs, &mut rng);
    let us: Vec<DVector<f64>> = (0..pairs)
        .map(|_| DVector::from_fn(sys.m(), |_, _| input_std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let err_at = |h: f64| -> Result<f64> {
        let plant = BlackBoxPlant::new(sys.clone(), h)?;
        let mut total = 0.0;
        for (x, u) in xs.iter().zip(&us) {
            let x1 = plant.step(x, u)?;
            let dtl = training::delta_tilde(clf, x, &x1, h);
            total += (dtl - clf.analytic_delta(sys, x, u)?).abs();
        }
        Ok(total / pairs as f64)
    };
    let coarse = err_at(dt)?;
    let fine = err_at(dt / 2.0)?;
    Ok(FdReport {
        pairs,
        dt,
        err_coarse: coarse,
        err_fine: fine,
        ratio: coarse / fine,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub segments: usize,
    pub passed_segments: usize,
    /// Largest `mean gap / standard error` over all checks (≤ 3 passes).
    pub worst_z: f64,
}

/// Precomputed analytic quantities for a fixed batch of states.
struct AnalyticBatch {
    phi: DMatrix<f64>,
    nominal: DMatrix<f64>,
    ab: Vec<AbTerms>,
}

impl AnalyticBatch {
    fn new(policy: &RbfPolicy, sys: &SystemModel, clf: &QuadraticClf, states: &[DVector<f64>]) -> Result<Self> {
        let count = policy.basis().centers().len();
        let m = policy.input_dim();
        let rows = states
            .par_iter()
            .map(|x| Ok((policy.basis().activations(x)?, policy.nominal_input(x)?, clf.ab_terms(sys, x)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut phi = DMatrix::zeros(states.len(), count);
        let mut nominal = DMatrix::zeros(states.len(), m);
        let mut ab = Vec::with_capacity(states.len());
        for (s, (p, u, t)) in rows.into_iter().enumerate() {
            phi.row_mut(s).copy_from(&p.transpose());
            nominal.row_mut(s).copy_from(&u.transpose());
            ab.push(t);
        }
        Ok(Self { phi, nominal, ab })
    }

    /// Pointwise `‖û‖² + λ·max(0, Δ)` at every state.
    fn losses(&self, theta: &DVector<f64>, lambda: f64) -> Vec<f64> {
        let count = self.phi.ncols();
        let m = self.nominal.ncols();
        let coeffs = DMatrix::from_column_slice(count, m, theta.as_slice());
        let u = &self.nominal + &self.phi * coeffs;
        (0..u.nrows())
            .map(|s| {
                let row = u.row(s);
                let delta = self.ab[s].a + (&self.ab[s].b * row.transpose())[0];
                row.norm_squared() + lambda * delta.max(0.0)
            })
            .collect()
    }
}

/// Checks `L(αθ₁+(1−α)θ₂) ≤ αL(θ₁)+(1−α)L(θ₂) + 3·SE` on random segments,
/// with `L` the analytic penalty objective on a fixed batch.
pub fn segment_convexity(
    policy: &RbfPolicy,
    sys: &SystemModel,
    clf: &QuadraticClf,
    lambda: f64,
    states: usize,
    segments: usize,
    scale: f64,
    seed: u64,
) -> Result<ConvexityReport> {
    let mut rng = rng::substream(seed, &[rng::tag::BATTERY, 2]);
    let xs = sample_wc(clf, states, &mut rng);
    let batch = AnalyticBatch::new(policy, sys, clf, &xs)?;
    let k = policy.param_count();
    let n = states as f64;
    let mut passed = 0;
    let mut worst_z = f64::NEG_INFINITY;
    for _ in 0..segments {
        let t1 = DVector::from_fn(k, |_, _| rng.random_range(-scale..=scale));
        let t2 = DVector::from_fn(k, |_, _| rng.random_range(-scale..=scale));
        let l1 = batch.losses(&t1, lambda);
        let l2 = batch.losses(&t2, lambda);
        let mut ok = true;
        for alpha in [0.25, 0.5, 0.75] {
            let mid = batch.losses(&(&t1 * alpha + &t2 * (1.0 - alpha)), lambda);
            let gaps: Vec<f64> = (0..states).map(|s| mid[s] - alpha * l1[s] - (1.0 - alpha) * l2[s]).collect();
            let mean = gaps.iter().sum::<f64>() / n;
            let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let se = (var / n).sqrt();
            let z = if se > 0.0 { mean / se } else if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
            worst_z = worst_z.max(z);
            ok &= mean <= 3.0 * se;
        }
        passed += usize::from(ok);
    }
    Ok(ConvexityReport {
        segments,
        passed_segments: passed,
        worst_z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Trailing 10-epoch mean of the training loss.
    pub final_loss: f64,
    /// Held-out mean of `max(0, Δ)` with the analytic `Δ`.
    pub mean_penalty: f64,
    /// Held-out fraction of states with `Δ > 0`.
    pub violation_frac: f64,
    pub r_metric: f64,
}

/// Trains once per `λ` from the same initial policy and scores each result on
/// a common held-out batch.
pub fn penalty_sweep(exp: &Experiment, base: &TrainConfig, lambdas: &[f64], held_out: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let oracle = exp.oracle();
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                seed,
                ..base.clone()
            };
            let (report, policy) = exp.train(&cfg)?;
            let diss = dissipation_report(&exp.truth, &exp.clf, &policy, held_out, seed)?;
            let r = r_metric(&policy, &oracle, &exp.clf, exp.config.eval.r_samples, seed)?;
            Ok(SweepRow {
                lambda,
                final_loss: report.smoothed_loss(report.epochs.len(), 10),
                mean_penalty: diss.mean_penalty,
                violation_frac: diss.violation_frac,
                r_metric: r.mean,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Csv {
    let mut csv = Csv::new(&["lambda", "final_loss", "mean_penalty", "violation_frac", "r_metric"]);
    for r in rows {
        csv.row(&[r.lambda.into(), r.final_loss.into(), r.mean_penalty.into(), r.violation_frac.into(), r.r_metric.into()]);
    }
    csv
}

/// `violation_frac` nonincreasing in `λ` up to `slack`, and the largest `λ`
/// reaching `final_bound`.
pub fn sweep_verdict(rows: &[SweepRow], slack: f64, final_bound: f64) -> (bool, bool) {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let monotone = sorted.windows(2).all(|w| w[1].violation_frac <= w[0].violation_frac + slack);
    let last = sorted.last().is_some_and(|r| r.violation_frac <= final_bound);
    (monotone, last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, passed: bool, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            threshold,
            detail,
        }
    }

    fn failed(name: &str, err: &Error) -> Self {
        Self::new(name, false, f64::NAN, f64::NAN, format!("error: {err}"))
    }
}

fn item(name: &str, f: impl FnOnce() -> Result<Verdict>) -> Verdict {
    f().unwrap_or_else(|e| Verdict::failed(name, &e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub grammian_samples: usize,
    pub segments: usize,
    pub segment_states: usize,
    pub segment_lambda: f64,
    pub segment_scale: f64,
    pub sweep_lambdas: Vec<f64>,
    /// Overrides the experiment's training settings for the sweep.
    pub sweep_train: Option<TrainConfig>,
    pub held_out: usize,
    pub fd_pairs: usize,
    pub fd_dt: f64,
    pub fd_input_std: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            grammian_samples: 10_000,
            segments: 100,
            segment_states: 10_000,
            segment_lambda: 10.0,
            segment_scale: 1.0,
            sweep_lambdas: vec![0.0, 1.0, 10.0, 100.0],
            sweep_train: None,
            held_out: 10_000,
            fd_pairs: 100,
            fd_dt: 0.01,
            fd_input_std: 2.0,
        }
    }
}

/// Grammian definiteness, segment convexity, penalty-sweep monotonicity and
/// finite-difference convergence.
pub fn property_battery(exp: &Experiment, cfg: &BatteryConfig, seed: u64) -> Vec<Verdict> {
    let mut out = Vec::new();
    out.push(item("grammian_positive_definite", || {
        let (_, min_eig) = grammian(&exp.basis, &exp.clf, cfg.grammian_samples, seed)?;
        Ok(Verdict::new("grammian_positive_definite", min_eig > 0.0, min_eig, 0.0, format!("min eigenvalue {min_eig:e}")))
    }));
    out.push(item("segment_convexity", || {
        let policy = exp.initial_policy()?;
        let r = segment_convexity(&policy, &exp.truth, &exp.clf, cfg.segment_lambda, cfg.segment_states, cfg.segments, cfg.segment_scale, seed)?;
        let frac = r.passed_segments as f64 / r.segments as f64;
        Ok(Verdict::new(
            "segment_convexity",
            frac >= 0.99,
            frac,
            0.99,
            format!("{}/{} segments, worst z {:.3}", r.passed_segments, r.segments, r.worst_z),
        ))
    }));
    out.push(item("penalty_sweep", || {
        let base = cfg.sweep_train.clone().unwrap_or_else(|| exp.config.train.clone());
        let rows = penalty_sweep(exp, &base, &cfg.sweep_lambdas, cfg.held_out, seed)?;
        let (monotone, last) = sweep_verdict(&rows, 1e-3, 1e-3);
        let fracs: Vec<String> = rows.iter().map(|r| format!("λ={}: {:.4}", r.lambda, r.violation_frac)).collect();
        let final_frac = rows.last().map_or(f64::NAN, |r| r.violation_frac);
        Ok(Verdict::new(
            "penalty_sweep",
            monotone && last,
            final_frac,
            1e-3,
            format!("monotone={monotone}; violation fractions {}", fracs.join(", ")),
        ))
    }));
    out.push(item("finite_difference_convergence", || {
        let r = finite_difference_ratio(&exp.truth, &exp.clf, cfg.fd_pairs, cfg.fd_dt, cfg.fd_input_std, seed)?;
        Ok(Verdict::new(
            "finite_difference_convergence",
            (1.5..=3.0).contains(&r.ratio),
            r.ratio,
            2.0,
            format!("mean error {:.3e} at dt={} vs {:.3e} at dt/2", r.err_coarse, r.dt, r.err_fine),
        ))
    }));
    out
}

/// Ratio of global RK4 errors at `dt` and `dt/2` on an unforced closed loop;
/// fourth order gives 16.
pub fn rk4_order_ratio(sys: &SystemModel, x0: &DVector<f64>, horizon: f64, dt: f64) -> Result<f64> {
    let zero = ZeroController { m: sys.m() };
    let end = |h: f64| -> Result<DVector<f64>> {
        let steps = (horizon / h).round() as usize;
        let traj = sys.simulate(&zero, x0, h, steps)?;
        Ok(traj.last_state().cloned().unwrap_or_else(|| x0.clone()))
    };
    let reference = end(dt / 64.0)?;
    let coarse = (end(dt)? - &reference).norm();
    let fine = (end(dt / 2.0)? - &reference).norm();
    Ok(coarse / fine)
}

/// The full `check` suite: CLF validity on both models, the closed-form law
/// against the iterative oracle, integrator order, and the property battery.
pub fn check_suite(exp: &Experiment, cfg: &BatteryConfig, seed: u64) -> Vec<Verdict> {
    let mut out = Vec::new();
    for (name, sys) in [("verify_clf_true_plant", &exp.truth), ("verify_clf_nominal_model", &exp.model)] {
        out.push(item(name, || {
            let r = exp.clf.verify_clf(sys, 10_000, seed)?;
            Ok(Verdict::new(
                name,
                r.passed(),
                r.violations as f64 + r.singular as f64,
                0.0,
                format!("{} violations, {} singular, max Δ {:e}", r.violations, r.singular, r.max_delta),
            ))
        }));
    }
    out.push(item("min_norm_matches_qp_oracle", || {
        let mut rng = rng::substream(seed, &[rng::tag::BATTERY, 1]);
        let xs = sample_wc(&exp.clf, 1000, &mut rng);
        let gaps = xs
            .par_iter()
            .map(|x| Ok((exp.clf.min_norm(&exp.truth, x)? - exp.clf.min_norm_qp_oracle(&exp.truth, x)?).norm()))
            .collect::<Result<Vec<f64>>>()?;
        let worst = gaps.into_iter().fold(0.0, f64::max);
        Ok(Verdict::new("min_norm_matches_qp_oracle", worst <= 1e-6, worst, 1e-6, format!("max difference {worst:e}")))
    }));
    out.push(item("rk4_fourth_order", || {
        let x0 = trajectory_x0s(&exp.clf, 1, seed).remove(0);
        let ratio = rk4_order_ratio(&exp.truth, &x0, 1.0, 0.02)?;
        Ok(Verdict::new("rk4_fourth_order", (12.0..=20.0).contains(&ratio), ratio, 16.0, format!("error ratio {ratio:.2}")))
    }));
    out.extend(property_battery(exp, cfg, seed));
    out
}
