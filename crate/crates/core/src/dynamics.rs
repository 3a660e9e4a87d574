//! Control-affine systems `ẋ = f(x) + g(x)u`, the two-link pendulum plant and
//! a fixed-step RK4 integrator with zero-order-hold input.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Simulation aborts once the state norm leaves this ball.
pub const BLOWUP_NORM: f64 = 1e3;

/// A control-affine vector field. Implementors must be pure.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `(f(x), g(x))` in one call; override when the two share work.
    fn drift_and_input(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.drift(x), self.input_matrix(x))
    }
}

/// Immutable, cheaply clonable handle to a control-affine system.
#[derive(Clone)]
pub struct SystemModel {
    inner: Arc<dyn ControlAffine>,
    label: String,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("label", &self.label)
            .field("n", &self.n())
            .field("m", &self.m())
            .finish()
    }
}

impl SystemModel {
    pub fn new(label: impl Into<String>, model: impl ControlAffine + 'static) -> Self {
        Self {
            inner: Arc::new(model),
            label: label.into(),
        }
    }

    pub fn n(&self) -> usize {
        self.inner.state_dim()
    }

    pub fn m(&self) -> usize {
        self.inner.input_dim()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.n(), x.len())?;
        Ok(self.inner.drift(x))
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("state", self.n(), x.len())?;
        Ok(self.inner.input_matrix(x))
    }

    pub fn drift_and_input(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim("state", self.n(), x.len())?;
        Ok(self.inner.drift_and_input(x))
    }

    /// `f(x) + g(x)u`.
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input", self.m(), u.len())?;
        let (f, g) = self.drift_and_input(x)?;
        Ok(f + g * u)
    }

    /// One classical RK4 step of length `dt` with `u` held constant.
    pub fn rk4_step(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let k1 = self.evaluate(x, u)?;
        let k2 = self.evaluate(&(x + &k1 * (0.5 * dt)), u)?;
        let k3 = self.evaluate(&(x + &k2 * (0.5 * dt)), u)?;
        let k4 = self.evaluate(&(x + &k3 * dt), u)?;
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::IntegrationBlowup {
                state: x.iter().copied().collect(),
            })
        }
    }

    /// Closed-loop simulation; `steps + 1` points including `x0`.
    pub fn simulate(
        &self,
        controller: &dyn Controller,
        x0: &DVector<f64>,
        dt: f64,
        steps: usize,
    ) -> Result<Trajectory> {
        let (traj, err) = self.simulate_partial(controller, x0, dt, steps)?;
        match err {
            Some(e) => Err(e),
            None => Ok(traj),
        }
    }

    /// Like [`simulate`](Self::simulate) but keeps the prefix computed before a
    /// blowup. Returns `Err` only for usage errors on `x0`.
    pub fn simulate_partial(
        &self,
        controller: &dyn Controller,
        x0: &DVector<f64>,
        dt: f64,
        steps: usize,
    ) -> Result<(Trajectory, Option<Error>)> {
        check_dim("x0", self.n(), x0.len())?;
        let mut points = Vec::with_capacity(steps + 1);
        let mut x = x0.clone();
        for k in 0..=steps {
            let t = k as f64 * dt;
            let u = match controller.control(&x) {
                Ok(u) => u,
                Err(e) => return Ok((Trajectory { points }, Some(e))),
            };
            if k == steps {
                points.push(TrajectoryPoint { t, x, u });
                break;
            }
            let next = match self.rk4_step(&x, &u, dt) {
                Ok(next) if next.norm() <= BLOWUP_NORM => next,
                Ok(next) => {
                    points.push(TrajectoryPoint { t, x, u });
                    let e = Error::IntegrationBlowup {
                        state: next.iter().copied().collect(),
                    };
                    return Ok((Trajectory { points }, Some(e)));
                }
                Err(e) => {
                    points.push(TrajectoryPoint { t, x, u });
                    return Ok((Trajectory { points }, Some(e)));
                }
            };
            points.push(TrajectoryPoint { t, x, u });
            x = next;
        }
        Ok((Trajectory { points }, None))
    }
}

/// State-feedback law `x ↦ u`.
pub trait Controller: Send + Sync {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Controller for F
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync,
{
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroController {
    pub m: usize,
}

impl Controller for ZeroController {
    fn control(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_state(&self) -> Option<&DVector<f64>> {
        self.points.last().map(|p| &p.x)
    }
}

/// Point masses at the link tips, frictionless joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl PendulumParams {
    pub const TRUE_PLANT: PendulumParams = PendulumParams {
        m1: 1.0,
        m2: 1.0,
        l1: 1.0,
        l2: 1.0,
        gravity: 9.81,
    };

    /// Every estimate at half its true value.
    pub const NOMINAL_MODEL: PendulumParams = PendulumParams {
        m1: 0.5,
        m2: 0.5,
        l1: 0.5,
        l2: 0.5,
        gravity: 9.81,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("gravity", self.gravity),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "pendulum parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Two-link pendulum with angles measured from the upright vertical.
///
/// State `(q1, q2, q̇1, q̇2)`, input joint torques `(τ1, τ2)`.
#[derive(Debug, Clone, Copy)]
pub struct DoublePendulum {
    pub params: PendulumParams,
}

impl DoublePendulum {
    pub fn mass_matrix(&self, q1: f64, q2: f64) -> Matrix2<f64> {
        let PendulumParams { m1, m2, l1, l2, .. } = self.params;
        let off = m2 * l1 * l2 * (q1 - q2).cos();
        Matrix2::new((m1 + m2) * l1 * l1, off, off, m2 * l2 * l2)
    }

    fn inverse_mass(&self, q1: f64, q2: f64) -> Matrix2<f64> {
        let m = self.mass_matrix(q1, q2);
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
    }

    /// `C(q, q̇)q̇ + G(q)`.
    fn bias_forces(&self, x: &DVector<f64>) -> Vector2<f64> {
        let PendulumParams {
            m1,
            m2,
            l1,
            l2,
            gravity,
        } = self.params;
        let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
        let h = m2 * l1 * l2 * (q1 - q2).sin();
        let coriolis = Vector2::new(h * dq2 * dq2, -h * dq1 * dq1);
        let grav = Vector2::new(-(m1 + m2) * gravity * l1 * q1.sin(), -m2 * gravity * l2 * q2.sin());
        coriolis + grav
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let PendulumParams {
            m1,
            m2,
            l1,
            l2,
            gravity,
        } = self.params;
        let dq = Vector2::new(x[2], x[3]);
        let m = self.mass_matrix(x[0], x[1]);
        0.5 * dq.dot(&(m * dq)) + (m1 + m2) * gravity * l1 * x[0].cos() + m2 * gravity * l2 * x[1].cos()
    }
}

impl ControlAffine for DoublePendulum {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.drift_and_input(x).0
    }

    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let minv = self.inverse_mass(x[0], x[1]);
        let mut g = DMatrix::zeros(4, 2);
        g.view_mut((2, 0), (2, 2)).copy_from(&minv);
        g
    }

    fn drift_and_input(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let minv = self.inverse_mass(x[0], x[1]);
        let acc = -(minv * self.bias_forces(x));
        let f = DVector::from_column_slice(&[x[2], x[3], acc[0], acc[1]]);
        let mut g = DMatrix::zeros(4, 2);
        g.view_mut((2, 0), (2, 2)).copy_from(&minv);
        (f, g)
    }
}

/// Upright two-link pendulum as a [`SystemModel`].
pub fn double_pendulum(params: PendulumParams) -> Result<SystemModel> {
    params.validate()?;
    let label = format!(
        "double_pendulum(m1={},m2={},l1={},l2={},g={})",
        params.m1, params.m2, params.l1, params.l2, params.gravity
    );
    Ok(SystemModel::new(label, DoublePendulum { params }))
}

/// `ẋ = Ax + Bu`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidParameter("A must be square".into()));
        }
        check_dim("rows of B", a.nrows(), b.nrows())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("A and B must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn into_model(self, label: impl Into<String>) -> SystemModel {
        SystemModel::new(label, self)
    }
}

impl ControlAffine for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
}
