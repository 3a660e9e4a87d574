//! Model-free policy optimization against a black-box plant.
//!
//! The training path sees the plant only through [`PlantStep`]; dissipation is
//! measured with the finite-difference residual `Δ̃` from sampled transitions.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clf::QuadraticClf;
use crate::dynamics::{SystemModel, BLOWUP_NORM};
use crate::error::{check_dim, Error, Result};
use crate::policy::{FeatureBasis, LinearPolicy};
use crate::rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One control period of an opaque plant under zero-order-hold input.
pub trait PlantStep: Send + Sync {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn period(&self) -> f64;
}

/// A simulator hidden behind [`PlantStep`]: one RK4 step of length `dt`.
#[derive(Debug, Clone)]
pub struct BlackBoxPlant {
    sys: SystemModel,
    dt: f64,
}

impl BlackBoxPlant {
    pub fn new(sys: SystemModel, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { sys, dt })
    }
}

impl PlantStep for BlackBoxPlant {
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.sys.rk4_step(x, u, self.dt)?;
        if next.norm() > BLOWUP_NORM {
            return Err(Error::IntegrationBlowup {
                state: next.iter().copied().collect(),
            });
        }
        Ok(next)
    }

    fn period(&self) -> f64 {
        self.dt
    }
}

/// Adapts a closure `(x, u) ↦ x⁺` into a plant.
pub struct FnPlant<F> {
    pub f: F,
    pub dt: f64,
}

impl<F> PlantStep for FnPlant<F>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + Send + Sync,
{
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        (self.f)(x, u)
    }

    fn period(&self) -> f64 {
        self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Antithetic evolution strategies with `pairs` perturbation pairs of
    /// standard deviation `nu`.
    Es { pairs: usize, nu: f64, step: f64 },
    /// Likelihood-ratio gradient under Gaussian action noise.
    Reinforce { step: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Es {
            pairs: 32,
            nu: 0.05,
            step: 0.03,
        }
    }
}

impl Optimizer {
    fn step_size(&self) -> f64 {
        match *self {
            Optimizer::Es { step, .. } | Optimizer::Reinforce { step } => step,
        }
    }
}

/// How a gradient estimate becomes a parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    Adam,
    /// Plain gradient descent; REINFORCE decays the step as `1/√epoch`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::rollouts_per_epoch")]
    pub rollouts_per_epoch: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub step_rule: StepRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::blowup_penalty")]
    pub blowup_penalty: f64,
}

mod defaults {
    pub fn lambda() -> f64 {
        10.0
    }
    pub fn dt() -> f64 {
        0.05
    }
    pub fn horizon() -> usize {
        1
    }
    pub fn rollouts_per_epoch() -> usize {
        50
    }
    pub fn epochs() -> usize {
        500
    }
    pub fn noise_std() -> f64 {
        0.1
    }
    pub fn blowup_penalty() -> f64 {
        1e6
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: defaults::lambda(),
            dt: defaults::dt(),
            horizon: defaults::horizon(),
            rollouts_per_epoch: defaults::rollouts_per_epoch(),
            epochs: defaults::epochs(),
            noise_std: defaults::noise_std(),
            optimizer: Optimizer::default(),
            step_rule: StepRule::default(),
            seed: 0,
            blowup_penalty: defaults::blowup_penalty(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if self.horizon == 0 || self.epochs == 0 || self.rollouts_per_epoch == 0 {
            return bad("horizon, epochs and rollouts_per_epoch must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.blowup_penalty >= 0.0 && self.blowup_penalty.is_finite()) {
            return bad("blowup_penalty must be finite and >= 0".into());
        }
        let step = self.optimizer.step_size();
        if !(step > 0.0 && step.is_finite()) {
            return bad(format!("optimizer step must be > 0, got {step}"));
        }
        match self.optimizer {
            Optimizer::Es { pairs, nu, .. } => {
                if pairs == 0 || !(nu > 0.0 && nu.is_finite()) {
                    return bad("es needs pairs >= 1 and nu > 0".into());
                }
            }
            Optimizer::Reinforce { .. } => {
                if self.noise_std <= 0.0 {
                    return bad("reinforce needs noise_std > 0".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub x0: DVector<f64>,
    /// Policy output before noise.
    pub u_mean: DVector<f64>,
    /// Applied input, noise included.
    pub u: DVector<f64>,
    pub x1: DVector<f64>,
    pub v0: f64,
    pub v1: f64,
    pub delta_tilde: f64,
    pub loss: f64,
}

/// The step whose transition failed; it and every later step cost the blowup
/// penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    pub x: DVector<f64>,
    pub u_mean: DVector<f64>,
    pub u: DVector<f64>,
    pub lost_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub records: Vec<RolloutRecord>,
    pub truncation: Option<Truncation>,
}

impl Rollout {
    pub fn total_loss(&self, blowup_penalty: f64) -> f64 {
        let lost = self.truncation.as_ref().map_or(0, |t| t.lost_steps);
        self.records.iter().map(|r| r.loss).sum::<f64>() + lost as f64 * blowup_penalty
    }
}

pub fn sample_wc<R: Rng + ?Sized>(clf: &QuadraticClf, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    clf.sampler().sample_many(count, rng)
}

/// `(V(x1) − V(x0))/dt + σ(x0)`.
pub fn delta_tilde(clf: &QuadraticClf, x0: &DVector<f64>, x1: &DVector<f64>, dt: f64) -> f64 {
    (clf.value(x1) - clf.value(x0)) / dt + clf.sigma(x0)
}

/// `‖u‖² + λ·max(0, Δ̃)`.
pub fn pointwise_loss(u: &DVector<f64>, delta_tilde: f64, lambda: f64) -> f64 {
    u.norm_squared() + lambda * delta_tilde.max(0.0)
}

/// `N` closed-loop steps from `x0` with Gaussian probing noise.
pub fn rollout<B: FeatureBasis, R: Rng + ?Sized>(
    plant: &dyn PlantStep,
    clf: &QuadraticClf,
    policy: &LinearPolicy<B>,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Rollout> {
    let dt = plant.period();
    let mut records = Vec::with_capacity(cfg.horizon);
    let mut x = x0.clone();
    for k in 0..cfg.horizon {
        let u_mean = policy.evaluate_with(&x, theta)?;
        let u = &u_mean + DVector::from_fn(u_mean.len(), |_, _| cfg.noise_std * rng.sample::<f64, _>(StandardNormal));
        let x1 = match plant.step(&x, &u) {
            Ok(x1) if x1.iter().all(|v| v.is_finite()) => x1,
            Ok(_) | Err(Error::IntegrationBlowup { .. }) => {
                let truncation = Truncation {
                    x,
                    u_mean,
                    u,
                    lost_steps: cfg.horizon - k,
                };
                return Ok(Rollout {
                    records,
                    truncation: Some(truncation),
                });
            }
            Err(e) => return Err(e),
        };
        let v0 = clf.value(&x);
        let v1 = clf.value(&x1);
        let dtl = (v1 - v0) / dt + clf.sigma(&x);
        let loss = pointwise_loss(&u, dtl, cfg.lambda);
        records.push(RolloutRecord {
            x0: x,
            u_mean,
            u,
            x1: x1.clone(),
            v0,
            v1,
            delta_tilde: dtl,
            loss,
        });
        x = x1;
    }
    Ok(Rollout {
        records,
        truncation: None,
    })
}

/// Per-epoch statistics at the pre-update parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean pointwise loss over all steps, truncated steps at the blowup penalty.
    pub loss: f64,
    /// Mean `H(Δ̃)` over completed steps.
    pub mean_penalty: f64,
    /// Fraction of steps with `Δ̃ > 0`; truncated steps count as violations.
    pub violation_frac: f64,
    pub theta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub theta: Vec<f64>,
}

impl TrainReport {
    pub fn final_theta(&self) -> DVector<f64> {
        DVector::from_vec(self.theta.clone())
    }

    pub fn last(&self) -> &EpochStats {
        self.epochs.last().expect("training runs at least one epoch")
    }

    /// Trailing moving average of the epoch loss ending at 1-based `epoch`.
    pub fn smoothed_loss(&self, epoch: usize, window: usize) -> f64 {
        let end = epoch.min(self.epochs.len());
        let start = end.saturating_sub(window.max(1));
        let slice = &self.epochs[start..end];
        slice.iter().map(|e| e.loss).sum::<f64>() / slice.len() as f64
    }
}

struct Batch {
    rollouts: Vec<Rollout>,
    loss: f64,
    mean_penalty: f64,
    violation_frac: f64,
}

struct EpochContext<'a, B> {
    plant: &'a dyn PlantStep,
    clf: &'a QuadraticClf,
    policy: &'a LinearPolicy<B>,
    cfg: &'a TrainConfig,
    epoch: usize,
    x0s: Vec<DVector<f64>>,
}

impl<B: FeatureBasis> EpochContext<'_, B> {
    /// Rollouts at `theta`; noise streams are shared by every `theta` in the
    /// epoch.
    fn batch(&self, theta: &DVector<f64>) -> Result<Batch> {
        let rollouts = self
            .x0s
            .par_iter()
            .enumerate()
            .map(|(r, x0)| {
                let mut rng = rng::substream(self.cfg.seed, &[rng::tag::TRAIN_NOISE, self.epoch as u64, r as u64]);
                rollout(self.plant, self.clf, self.policy, theta, x0, self.cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = (self.cfg.horizon * rollouts.len()) as f64;
        let mut loss = 0.0;
        let mut penalty = 0.0;
        let mut completed = 0usize;
        let mut violations = 0usize;
        for ro in &rollouts {
            loss += ro.total_loss(self.cfg.blowup_penalty);
            for rec in &ro.records {
                penalty += rec.delta_tilde.max(0.0);
                violations += usize::from(rec.delta_tilde > 0.0);
            }
            completed += ro.records.len();
            violations += ro.truncation.as_ref().map_or(0, |t| t.lost_steps);
        }
        Ok(Batch {
            rollouts,
            loss: loss / steps,
            mean_penalty: if completed > 0 { penalty / completed as f64 } else { 0.0 },
            violation_frac: violations as f64 / steps,
        })
    }

    fn es_gradient(&self, theta: &DVector<f64>, pairs: usize, nu: f64) -> Result<DVector<f64>> {
        let k = theta.len();
        let terms = (0..pairs)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng::substream(self.cfg.seed, &[rng::tag::ES_DIRECTION, self.epoch as u64, i as u64]);
                let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let plus = self.batch(&(theta + &eps * nu))?.loss;
                let minus = self.batch(&(theta - &eps * nu))?.loss;
                Ok(eps * (plus - minus))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = DVector::zeros(k);
        for t in terms {
            g += t;
        }
        Ok(g / (2.0 * pairs as f64 * nu))
    }

    /// Effort term differentiated exactly; penalty term by the score function
    /// with a leave-one-out batch-mean baseline.
    fn reinforce_gradient(&self, theta: &DVector<f64>, batch: &Batch) -> Result<DVector<f64>> {
        let basis = self.policy.basis();
        let var = self.cfg.noise_std * self.cfg.noise_std;
        // (state, mean action, noise, penalty part of the cost)
        let mut items: Vec<(&DVector<f64>, &DVector<f64>, DVector<f64>, f64)> = Vec::new();
        let mut effort_items: Vec<(&DVector<f64>, &DVector<f64>)> = Vec::new();
        for ro in &batch.rollouts {
            for rec in &ro.records {
                items.push((&rec.x0, &rec.u_mean, &rec.u - &rec.u_mean, rec.loss - rec.u.norm_squared()));
                effort_items.push((&rec.x0, &rec.u_mean));
            }
            if let Some(t) = &ro.truncation {
                items.push((&t.x, &t.u_mean, &t.u - &t.u_mean, t.lost_steps as f64 * self.cfg.blowup_penalty));
            }
        }
        let total: f64 = items.iter().map(|it| it.3).sum();
        let count = items.len();
        let parts = items
            .par_iter()
            .map(|(x, _, w, pen)| {
                let baseline = if count > 1 { (total - pen) / (count - 1) as f64 } else { 0.0 };
                Ok(basis.apply_transpose(x, w)? * ((pen - baseline) / var))
            })
            .chain(effort_items.par_iter().map(|(x, u_mean)| Ok(basis.apply_transpose(x, u_mean)? * 2.0)))
            .collect::<Result<Vec<_>>>()?;
        let mut g = DVector::zeros(theta.len());
        for p in parts {
            g += p;
        }
        Ok(g / (self.cfg.horizon * batch.rollouts.len()) as f64)
    }
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    fn new(k: usize) -> Self {
        Self {
            m: DVector::zeros(k),
            v: DVector::zeros(k),
            t: 0,
        }
    }

    fn direction(&mut self, g: &DVector<f64>) -> DVector<f64> {
        self.t += 1;
        self.m = &self.m * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
        self.v = &self.v * ADAM_BETA2 + g.component_mul(g) * (1.0 - ADAM_BETA2);
        let mc = 1.0 - ADAM_BETA1.powi(self.t);
        let vc = 1.0 - ADAM_BETA2.powi(self.t);
        self.m.zip_map(&self.v, |m, v| (m / mc) / ((v / vc).sqrt() + ADAM_EPS))
    }
}

fn abort(epoch: usize, reason: &str, theta: &DVector<f64>, stats: Option<&EpochStats>) -> Error {
    let dump = serde_json::json!({
        "epoch": epoch,
        "reason": reason,
        "theta": theta.as_slice(),
        "stats": stats,
    });
    Error::NumericalAbort {
        epoch,
        reason: reason.to_string(),
        dump: serde_json::to_string_pretty(&dump).unwrap_or_default(),
    }
}

/// Minimizes the sampled penalty objective starting from `policy.theta()`.
pub fn train<B: FeatureBasis>(
    plant: &dyn PlantStep,
    clf: &QuadraticClf,
    policy: &LinearPolicy<B>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let period = plant.period();
    if (period - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::Usage(format!(
            "plant period {period} does not match configured dt {}",
            cfg.dt
        )));
    }
    check_dim("CLF", policy.basis().state_dim(), clf.dim())?;
    let mut theta = policy.project(policy.theta());
    let mut adam = Adam::new(theta.len());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut init = rng::substream(cfg.seed, &[rng::tag::TRAIN_INIT, epoch as u64]);
        let ctx = EpochContext {
            plant,
            clf,
            policy,
            cfg,
            epoch,
            x0s: sample_wc(clf, cfg.rollouts_per_epoch, &mut init),
        };
        let batch = ctx.batch(&theta)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: batch.loss,
            mean_penalty: batch.mean_penalty,
            violation_frac: batch.violation_frac,
            theta_norm: theta.norm(),
        };
        if !stats.loss.is_finite() {
            return Err(abort(epoch + 1, "non-finite epoch loss", &theta, Some(&stats)));
        }
        let grad = match cfg.optimizer {
            Optimizer::Es { pairs, nu, .. } => ctx.es_gradient(&theta, pairs, nu)?,
            Optimizer::Reinforce { .. } => ctx.reinforce_gradient(&theta, &batch)?,
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(abort(epoch + 1, "non-finite gradient estimate", &theta, Some(&stats)));
        }
        let step = cfg.optimizer.step_size();
        let update = match (cfg.step_rule, cfg.optimizer) {
            (StepRule::Adam, _) => adam.direction(&grad) * step,
            (StepRule::Sgd, Optimizer::Es { .. }) => grad * step,
            (StepRule::Sgd, Optimizer::Reinforce { .. }) => grad * (step / ((epoch + 1) as f64).sqrt()),
        };
        theta = policy.project(&(theta - update));
        epochs.push(stats);
    }
    Ok(TrainReport {
        epochs,
        theta: theta.iter().copied().collect(),
    })
}
