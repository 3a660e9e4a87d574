//! Experiment configuration and the objects assembled from it.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clf::{square_from_row_major, ClfSpec, MinNormController, QuadraticClf};
use crate::dynamics::{double_pendulum, LinearSystem, PendulumParams, SystemModel};
use crate::error::{Error, Result};
use crate::policy::{build_basis, LinearPolicy, Nominal, RbfBasis, RbfPolicy, WidthRule, DEFAULT_THETA_MAX};
use crate::training::{train, BlackBoxPlant, TrainConfig, TrainReport};

pub const NOMINAL_TAG: &str = "nominal_min_norm";

/// Either the two-link pendulum or `ẋ = Ax + Bu` with row-major `A` (n×n)
/// and `B` (n×m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    DoublePendulum(PendulumParams),
    Linear(LinearSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PlantSpec {
    pub fn build(&self, label: &str) -> Result<SystemModel> {
        match self {
            PlantSpec::DoublePendulum(p) => double_pendulum(*p),
            PlantSpec::Linear(spec) => {
                let a = square_from_row_major("A", &spec.a)?;
                let n = a.nrows();
                if spec.b.is_empty() || spec.b.len() % n != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "B must have a multiple of {n} entries, got {}",
                        spec.b.len()
                    )));
                }
                let b = nalgebra::DMatrix::from_row_slice(n, spec.b.len() / n, &spec.b);
                Ok(LinearSystem::new(a, b)?.into_model(label))
            }
        }
    }
}

fn default_plant() -> PlantSpec {
    PlantSpec::DoublePendulum(PendulumParams::TRUE_PLANT)
}

fn default_nominal() -> PlantSpec {
    PlantSpec::DoublePendulum(PendulumParams::NOMINAL_MODEL)
}

fn default_clf() -> ClfSpec {
    QuadraticClf::pendulum_default().to_spec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    /// Centers per input channel.
    #[serde(default = "PolicySpec::default_centers")]
    pub centers: usize,
    /// Fixed Gaussian width; `null` selects `width_factor × median NN distance`.
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default = "PolicySpec::default_width_factor")]
    pub width_factor: f64,
    #[serde(default = "PolicySpec::default_theta_max")]
    pub theta_max: f64,
    #[serde(default = "PolicySpec::default_use_nominal")]
    pub use_nominal: bool,
}

impl PolicySpec {
    fn default_centers() -> usize {
        250
    }
    fn default_width_factor() -> f64 {
        2.0
    }
    fn default_theta_max() -> f64 {
        DEFAULT_THETA_MAX
    }
    fn default_use_nominal() -> bool {
        true
    }

    pub fn width_rule(&self) -> WidthRule {
        match self.width {
            Some(s) => WidthRule::Fixed(s),
            None => WidthRule::MedianNeighbor(self.width_factor),
        }
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            centers: Self::default_centers(),
            width: None,
            width_factor: Self::default_width_factor(),
            theta_max: Self::default_theta_max(),
            use_nominal: Self::default_use_nominal(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "EvalSpec::default_r_samples")]
    pub r_samples: usize,
    #[serde(default = "EvalSpec::default_trajectory_x0_count")]
    pub trajectory_x0_count: usize,
    #[serde(default = "EvalSpec::default_horizon_s")]
    pub horizon_s: f64,
    /// Zero-order-hold period of closed-loop simulations.
    #[serde(default = "EvalSpec::default_sim_dt")]
    pub sim_dt: f64,
    #[serde(default = "EvalSpec::default_dissipation_samples")]
    pub dissipation_samples: usize,
    /// Keep every `log_stride`-th simulation step in trajectory CSVs.
    #[serde(default = "EvalSpec::default_log_stride")]
    pub log_stride: usize,
}

impl EvalSpec {
    fn default_r_samples() -> usize {
        1000
    }
    fn default_trajectory_x0_count() -> usize {
        4
    }
    fn default_horizon_s() -> f64 {
        5.0
    }
    fn default_sim_dt() -> f64 {
        1e-3
    }
    fn default_dissipation_samples() -> usize {
        10_000
    }
    fn default_log_stride() -> usize {
        10
    }

    pub fn steps(&self) -> usize {
        (self.horizon_s / self.sim_dt).round() as usize
    }
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            r_samples: Self::default_r_samples(),
            trajectory_x0_count: Self::default_trajectory_x0_count(),
            horizon_s: Self::default_horizon_s(),
            sim_dt: Self::default_sim_dt(),
            dissipation_samples: Self::default_dissipation_samples(),
            log_stride: Self::default_log_stride(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_plant")]
    pub plant: PlantSpec,
    #[serde(default = "default_nominal")]
    pub nominal: PlantSpec,
    #[serde(default = "default_clf")]
    pub clf: ClfSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: default_plant(),
            nominal: default_nominal(),
            clf: default_clf(),
            policy: PolicySpec::default(),
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.eval;
        if e.r_samples == 0 || e.dissipation_samples == 0 || e.log_stride == 0 {
            return Err(Error::Usage("eval sample counts and log_stride must be >= 1".into()));
        }
        if !(e.sim_dt > 0.0 && e.horizon_s >= 0.0 && e.horizon_s.is_finite()) {
            return Err(Error::Usage("eval needs sim_dt > 0 and horizon_s >= 0".into()));
        }
        if self.policy.centers == 0 {
            return Err(Error::Usage("policy needs at least one center".into()));
        }
        if !(self.policy.theta_max > 0.0) {
            return Err(Error::Usage("theta_max must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, built once from an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub truth: SystemModel,
    pub model: SystemModel,
    pub clf: QuadraticClf,
    pub basis: RbfBasis,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let truth = config.plant.build("true_plant")?;
        let model = config.nominal.build("nominal_model")?;
        if truth.n() != model.n() || truth.m() != model.m() {
            return Err(Error::Usage("plant and nominal model dimensions differ".into()));
        }
        let clf = config.clf.build()?;
        if clf.dim() != truth.n() {
            return Err(Error::Usage(format!(
                "CLF dimension {} does not match state dimension {}",
                clf.dim(),
                truth.n()
            )));
        }
        let basis = build_basis(
            truth.n(),
            truth.m(),
            config.policy.centers,
            &clf,
            config.policy.width_rule(),
            config.train.seed,
        )?;
        Ok(Self {
            config,
            truth,
            model,
            clf,
            basis,
        })
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.config.train
    }

    /// Min-norm law of the true plant: the ground truth for evaluation.
    pub fn oracle(&self) -> MinNormController {
        MinNormController {
            sys: self.truth.clone(),
            clf: self.clf.clone(),
        }
    }

    /// Min-norm law of the nominal model.
    pub fn nominal_controller(&self) -> MinNormController {
        MinNormController {
            sys: self.model.clone(),
            clf: self.clf.clone(),
        }
    }

    pub fn nominal(&self) -> Option<Nominal> {
        self.config.policy.use_nominal.then(|| Nominal {
            tag: NOMINAL_TAG.into(),
            controller: Arc::new(self.nominal_controller()),
        })
    }

    /// The untrained policy, `θ = 0`.
    pub fn initial_policy(&self) -> Result<RbfPolicy> {
        LinearPolicy::new(self.basis.clone(), self.config.policy.theta_max, self.nominal())
    }

    pub fn plant(&self, dt: f64) -> Result<BlackBoxPlant> {
        BlackBoxPlant::new(self.truth.clone(), dt)
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<(TrainReport, RbfPolicy)> {
        let policy = self.initial_policy()?;
        let report = train(&self.plant(cfg.dt)?, &self.clf, &policy, cfg)?;
        let trained = policy.with_theta(report.final_theta())?;
        Ok((report, trained))
    }
}
