//! Quadratic control Lyapunov functions `V(x) = xᵀPx` with dissipation rate
//! `σ(x) = xᵀQx`, and the pointwise min-norm controller they induce.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Controller, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::sampling::EllipsoidSampler;

/// `|b(x)|` below this is treated as zero.
pub const B_EPS: f64 = 1e-10;

/// Tolerance on `Δ` when certifying the dissipation constraint.
pub const DELTA_TOL: f64 = 1e-9;

const ORACLE_ITERS: usize = 500;

#[derive(Debug, Clone)]
pub struct QuadraticClf {
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    c: f64,
}

/// `a(x) = ∇V f + σ`, `b(x) = ∇V g`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbTerms {
    pub a: f64,
    pub b: RowDVector<f64>,
}

impl QuadraticClf {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, c: f64) -> Result<Self> {
        check_spd("P", &p)?;
        check_spd("Q", &q)?;
        check_dim("Q", p.nrows(), q.nrows())?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("level c must be > 0, got {c}")));
        }
        Ok(Self { p, q, c })
    }

    /// The block CLF used for the two-link pendulum, `σ(x) = xᵀx`, `c = 2`.
    pub fn pendulum_default() -> Self {
        Self::new(pendulum_p(), DMatrix::identity(4, 4), 2.0).expect("constant CLF is valid")
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn level(&self) -> f64 {
        self.c
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    /// `∇V(x) = 2xᵀP` as a row vector.
    pub fn gradient(&self, x: &DVector<f64>) -> RowDVector<f64> {
        (&self.p * x).transpose() * 2.0
    }

    pub fn sigma(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.value(x) <= self.c
    }

    pub fn sampler(&self) -> EllipsoidSampler {
        EllipsoidSampler::new(&self.p, self.c).expect("validated at construction")
    }

    pub fn ab_terms(&self, sys: &SystemModel, x: &DVector<f64>) -> Result<AbTerms> {
        check_dim("state", self.dim(), x.len())?;
        let (f, g) = sys.drift_and_input(x)?;
        let grad = self.gradient(x);
        let a = (&grad * f)[0] + self.sigma(x);
        let b = grad * g;
        Ok(AbTerms { a, b })
    }

    /// `∇V(x)[f(x) + g(x)u] + σ(x)`; non-positive iff the dissipation
    /// constraint holds at `x` under input `u`.
    pub fn analytic_delta(&self, sys: &SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        check_dim("input", sys.m(), u.len())?;
        let AbTerms { a, b } = self.ab_terms(sys, x)?;
        Ok(a + (b * u)[0])
    }

    /// Closed-form solution of `min |u|² s.t. a(x) + b(x)u ≤ 0`.
    pub fn min_norm(&self, sys: &SystemModel, x: &DVector<f64>) -> Result<DVector<f64>> {
        let ab = self.ab_terms(sys, x)?;
        min_norm_from_ab(&ab).map_err(|e| attach_state(e, x))
    }

    /// The same QP solved iteratively: projected gradient ascent on the
    /// scalar multiplier of the dual, `u = -μ bᵀ / 2`.
    pub fn min_norm_qp_oracle(&self, sys: &SystemModel, x: &DVector<f64>) -> Result<DVector<f64>> {
        let ab = self.ab_terms(sys, x)?;
        qp_oracle_from_ab(&ab).map_err(|e| attach_state(e, x))
    }

    /// Monte Carlo certificate that the constraint is satisfiable on the
    /// sublevel set: evaluates `Δ(x, min_norm(x))` at uniform samples.
    pub fn verify_clf(&self, sys: &SystemModel, samples: usize, seed: u64) -> Result<ClfReport> {
        if samples == 0 {
            return Err(Error::Usage("verify_clf needs at least one sample".into()));
        }
        check_dim("system state", self.dim(), sys.n())?;
        let sampler = self.sampler();
        let mut rng = rng::substream(seed, &[rng::tag::CLF_VERIFY]);
        let mut report = ClfReport {
            samples,
            max_delta: f64::NEG_INFINITY,
            violations: 0,
            singular: 0,
        };
        for _ in 0..samples {
            let x = sampler.sample(&mut rng);
            match self.min_norm(sys, &x) {
                Ok(u) => {
                    let d = self.analytic_delta(sys, &x, &u)?;
                    report.max_delta = report.max_delta.max(d);
                    if d > DELTA_TOL {
                        report.violations += 1;
                    }
                }
                Err(Error::ClfViolation { .. }) => report.singular += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    pub fn to_spec(&self) -> ClfSpec {
        ClfSpec {
            p: row_major(&self.p),
            q: Some(row_major(&self.q)),
            c: self.c,
        }
    }
}

/// Result of [`QuadraticClf::verify_clf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfReport {
    pub samples: usize,
    /// Over samples where the min-norm input exists.
    pub max_delta: f64,
    /// Samples with `Δ > DELTA_TOL` at the min-norm input.
    pub violations: usize,
    /// Samples where `a > 0` and `b ≈ 0`.
    pub singular: usize,
}

impl ClfReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.singular == 0
    }
}

/// Pointwise min-norm law for the true (or nominal) model, as a controller.
#[derive(Debug, Clone)]
pub struct MinNormController {
    pub sys: SystemModel,
    pub clf: QuadraticClf,
}

impl Controller for MinNormController {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.clf.min_norm(&self.sys, x)
    }
}

pub fn min_norm_from_ab(ab: &AbTerms) -> Result<DVector<f64>> {
    let m = ab.b.len();
    if ab.a <= 0.0 {
        return Ok(DVector::zeros(m));
    }
    let bb = ab.b.norm_squared();
    if bb.sqrt() < B_EPS {
        return Err(singular(ab));
    }
    Ok(ab.b.transpose() * (-ab.a / bb))
}

pub fn qp_oracle_from_ab(ab: &AbTerms) -> Result<DVector<f64>> {
    let m = ab.b.len();
    if ab.a <= 0.0 {
        return Ok(DVector::zeros(m));
    }
    let bb = ab.b.norm_squared();
    if bb.sqrt() < B_EPS {
        return Err(singular(ab));
    }
    // Dual: max_{μ ≥ 0} μa - μ²|b|²/4.
    let step = 0.5 / bb;
    let mut mu = 0.0f64;
    for _ in 0..ORACLE_ITERS {
        let grad = ab.a - 0.5 * mu * bb;
        mu = (mu + step * grad).max(0.0);
    }
    Ok(ab.b.transpose() * (-0.5 * mu))
}

fn singular(ab: &AbTerms) -> Error {
    Error::ClfViolation {
        state: Vec::new(),
        a: ab.a,
        b_norm: ab.b.norm(),
    }
}

fn attach_state(e: Error, x: &DVector<f64>) -> Error {
    match e {
        Error::ClfViolation { a, b_norm, .. } => Error::ClfViolation {
            state: x.iter().copied().collect(),
            a,
            b_norm,
        },
        other => other,
    }
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidParameter(format!("{name} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be finite")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "{name} must be positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// `[[1.5 I, 0.5 I], [0.5 I, 0.5 I]]` with 2×2 identity blocks.
pub fn pendulum_p() -> DMatrix<f64> {
    let mut p = DMatrix::zeros(4, 4);
    for i in 0..2 {
        p[(i, i)] = 1.5;
        p[(i, i + 2)] = 0.5;
        p[(i + 2, i)] = 0.5;
        p[(i + 2, i + 2)] = 0.5;
    }
    p
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// JSON form `{"P": [...], "Q": [...], "c": ...}` with row-major flat arrays.
/// `Q` defaults to the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClfSpec {
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    pub c: f64,
}

impl ClfSpec {
    pub fn build(&self) -> Result<QuadraticClf> {
        let p = square_from_row_major("P", &self.p)?;
        let q = match &self.q {
            Some(q) => square_from_row_major("Q", q)?,
            None => DMatrix::identity(p.nrows(), p.nrows()),
        };
        QuadraticClf::new(p, q, self.c)
    }
}

pub(crate) fn square_from_row_major(name: &str, data: &[f64]) -> Result<DMatrix<f64>> {
    let n = (data.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != data.len() {
        return Err(Error::InvalidParameter(format!(
            "{name} must have a square number of entries, got {}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(n, n, data))
}
