//! Linear-in-parameters policies `û(x, θ) = u_m(x) + W(x)θ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clf::QuadraticClf;
use crate::dynamics::Controller;
use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Default box radius of the parameter set.
pub const DEFAULT_THETA_MAX: f64 = 100.0;

/// Centers closer than this count as duplicates.
pub const MIN_CENTER_SEPARATION: f64 = 1e-8;

/// A finite family of maps `u_k : ℝⁿ → ℝᵐ` stacked as the columns of `W(x)`.
pub trait FeatureBasis: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_count(&self) -> usize;

    /// `W(x) ∈ ℝ^{m×K}`; column `k` is `u_k(x)`.
    fn features(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `W(x)θ`.
    fn apply(&self, x: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.features(x)? * theta)
    }

    /// `W(x)ᵀv`.
    fn apply_transpose(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.features(x)?.transpose() * v)
    }
}

/// Gaussian bumps times input unit vectors: `u_{(j,i)}(x) = φ_i(x) e_j`.
///
/// Parameter index `k = j * centers + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfBasis {
    centers: Vec<DVector<f64>>,
    width: f64,
    channels: usize,
}

/// How [`build_basis`] chooses the common Gaussian width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRule {
    Fixed(f64),
    /// `factor × median nearest-neighbour distance` among the centers.
    MedianNeighbor(f64),
}

impl RbfBasis {
    pub fn new(centers: Vec<DVector<f64>>, width: f64, channels: usize) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidParameter("RBF basis needs at least one center".into()));
        }
        if channels == 0 {
            return Err(Error::InvalidParameter("RBF basis needs at least one channel".into()));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!("RBF width must be positive, got {width}")));
        }
        let n = centers[0].len();
        for c in &centers {
            check_dim("RBF center", n, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("RBF centers must be finite".into()));
            }
        }
        Ok(Self {
            centers,
            width,
            channels,
        })
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `φ_i(x) = exp(-|x - c_i|² / 2s²)` for every center.
    pub fn activations(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        let inv = 0.5 / (self.width * self.width);
        Ok(DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().map(|c| (-(x - c).norm_squared() * inv).exp()),
        ))
    }

    pub fn min_center_separation(&self) -> f64 {
        min_pairwise_distance(&self.centers)
    }
}

impl FeatureBasis for RbfBasis {
    fn state_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn input_dim(&self) -> usize {
        self.channels
    }

    fn param_count(&self) -> usize {
        self.channels * self.centers.len()
    }

    fn features(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let phi = self.activations(x)?;
        let count = self.centers.len();
        let mut w = DMatrix::zeros(self.channels, self.param_count());
        for j in 0..self.channels {
            for i in 0..count {
                w[(j, j * count + i)] = phi[i];
            }
        }
        Ok(w)
    }

    fn apply(&self, x: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("theta", self.param_count(), theta.len())?;
        let phi = self.activations(x)?;
        let count = self.centers.len();
        Ok(DVector::from_fn(self.channels, |j, _| {
            let block = theta.rows(j * count, count);
            phi.dot(&block)
        }))
    }

    fn apply_transpose(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("input", self.channels, v.len())?;
        let phi = self.activations(x)?;
        let count = self.centers.len();
        let mut out = DVector::zeros(self.param_count());
        for j in 0..self.channels {
            out.rows_mut(j * count, count).copy_from(&(&phi * v[j]));
        }
        Ok(out)
    }
}

/// Samples `count` centers uniformly from the sublevel set of `clf`.
pub fn build_basis(n: usize, m: usize, count: usize, clf: &QuadraticClf, width: WidthRule, seed: u64) -> Result<RbfBasis> {
    if count == 0 {
        return Err(Error::Usage("basis needs at least one center".into()));
    }
    check_dim("CLF", n, clf.dim())?;
    let sampler = clf.sampler();
    let mut rng = rng::substream(seed, &[rng::tag::BASIS]);
    let centers = sampler.sample_many(count, &mut rng);
    let width = match width {
        WidthRule::Fixed(s) => s,
        WidthRule::MedianNeighbor(factor) => {
            if count < 2 {
                return Err(Error::Usage("median-neighbour width needs at least two centers".into()));
            }
            factor * median_nearest_neighbor(&centers)
        }
    };
    let basis = RbfBasis::new(centers, width, m)?;
    if count > 1 && basis.min_center_separation() <= MIN_CENTER_SEPARATION {
        return Err(Error::InvalidParameter("sampled RBF centers are not distinct".into()));
    }
    Ok(basis)
}

fn median_nearest_neighbor(points: &[DVector<f64>]) -> f64 {
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(|a, b| a.total_cmp(b));
    let mid = nn.len() / 2;
    if nn.len() % 2 == 0 {
        0.5 * (nn[mid - 1] + nn[mid])
    } else {
        nn[mid]
    }
}

fn min_pairwise_distance(points: &[DVector<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((&points[i] - &points[j]).norm());
        }
    }
    best
}

/// Arbitrary basis elements, each a state-feedback map.
#[derive(Clone)]
pub struct FunctionBasis {
    n: usize,
    m: usize,
    elements: Vec<Arc<dyn Controller>>,
}

impl fmt::Debug for FunctionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionBasis")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("elements", &self.elements.len())
            .finish()
    }
}

impl FunctionBasis {
    pub fn new(n: usize, m: usize, elements: Vec<Arc<dyn Controller>>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidParameter("function basis needs at least one element".into()));
        }
        Ok(Self { n, m, elements })
    }
}

impl FeatureBasis for FunctionBasis {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn param_count(&self) -> usize {
        self.elements.len()
    }

    fn features(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("state", self.n, x.len())?;
        let mut w = DMatrix::zeros(self.m, self.elements.len());
        for (k, e) in self.elements.iter().enumerate() {
            let u = e.control(x)?;
            check_dim("basis element output", self.m, u.len())?;
            w.set_column(k, &u);
        }
        Ok(w)
    }
}

/// Named nominal controller `u_m`.
#[derive(Clone)]
pub struct Nominal {
    pub tag: String,
    pub controller: Arc<dyn Controller>,
}

impl fmt::Debug for Nominal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nominal").field("tag", &self.tag).finish()
    }
}

/// `û(x, θ) = u_m(x) + W(x)θ` with `θ` confined to the box `|θ|_∞ ≤ θ_max`.
#[derive(Debug, Clone)]
pub struct LinearPolicy<B> {
    basis: B,
    theta: DVector<f64>,
    theta_max: f64,
    nominal: Option<Nominal>,
}

pub type RbfPolicy = LinearPolicy<RbfBasis>;

impl<B: FeatureBasis> LinearPolicy<B> {
    /// Starts at `θ = 0`, i.e. at the nominal controller.
    pub fn new(basis: B, theta_max: f64, nominal: Option<Nominal>) -> Result<Self> {
        if !(theta_max > 0.0) {
            return Err(Error::InvalidParameter(format!("theta_max must be positive, got {theta_max}")));
        }
        let theta = DVector::zeros(basis.param_count());
        Ok(Self {
            basis,
            theta,
            theta_max,
            nominal,
        })
    }

    pub fn basis(&self) -> &B {
        &self.basis
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    pub fn nominal(&self) -> Option<&Nominal> {
        self.nominal.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.basis.param_count()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.input_dim()
    }

    /// Replaces `θ` with its projection onto the box.
    pub fn set_theta(&mut self, theta: DVector<f64>) -> Result<()> {
        check_dim("theta", self.param_count(), theta.len())?;
        self.theta = self.project(&theta);
        Ok(())
    }

    pub fn with_theta(mut self, theta: DVector<f64>) -> Result<Self> {
        self.set_theta(theta)?;
        Ok(self)
    }

    /// Componentwise clamp to `[-θ_max, θ_max]`.
    pub fn project(&self, theta_raw: &DVector<f64>) -> DVector<f64> {
        theta_raw.map(|v| v.clamp(-self.theta_max, self.theta_max))
    }

    pub fn features(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.basis.features(x)
    }

    pub fn nominal_input(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.nominal {
            Some(n) => n.controller.control(x),
            None => Ok(DVector::zeros(self.input_dim())),
        }
    }

    /// `δu(x, θ) = W(x)θ`.
    pub fn delta_u(&self, x: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.basis.apply(x, theta)
    }

    pub fn evaluate_with(&self, x: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.nominal_input(x)? + self.delta_u(x, theta)?)
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluate_with(x, &self.theta)
    }
}

impl<B: FeatureBasis> Controller for LinearPolicy<B> {
    fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluate(x)
    }
}

/// Monte Carlo estimate of `E[W(x)ᵀW(x)]` over the sublevel set together with
/// its smallest eigenvalue.
pub fn grammian<B: FeatureBasis>(basis: &B, clf: &QuadraticClf, samples: usize, seed: u64) -> Result<(DMatrix<f64>, f64)> {
    let k = basis.param_count();
    if samples < 10 * k {
        return Err(Error::Usage(format!(
            "grammian needs at least {} samples for {k} parameters, got {samples}",
            10 * k
        )));
    }
    const CHUNK: usize = 256;
    let sampler = clf.sampler();
    let m = basis.input_dim();
    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<Result<DMatrix<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::substream(seed, &[rng::tag::GRAMMIAN, c as u64]);
            let len = CHUNK.min(samples - c * CHUNK);
            let mut stacked = DMatrix::zeros(m * len, k);
            for s in 0..len {
                let x = sampler.sample(&mut rng);
                stacked.view_mut((s * m, 0), (m, k)).copy_from(&basis.features(&x)?);
            }
            Ok(stacked.tr_mul(&stacked))
        })
        .collect();
    let mut g = DMatrix::zeros(k, k);
    for p in partials {
        g += p?;
    }
    g /= samples as f64;
    // exact symmetry; the partial products are symmetric only to rounding
    let g = (&g + g.transpose()) * 0.5;
    let min_eig = g.clone().symmetric_eigenvalues().min();
    Ok((g, min_eig))
}

/// On-disk policy: `{centers, width, theta, theta_max, nominal_tag}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub centers: Vec<Vec<f64>>,
    pub width: f64,
    pub theta: Vec<f64>,
    pub theta_max: f64,
    pub nominal_tag: Option<String>,
}

impl Checkpoint {
    pub fn from_policy(policy: &RbfPolicy) -> Self {
        Self {
            centers: policy
                .basis()
                .centers()
                .iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            width: policy.basis().width(),
            theta: policy.theta().iter().copied().collect(),
            theta_max: policy.theta_max(),
            nominal_tag: policy.nominal().map(|n| n.tag.clone()),
        }
    }

    /// Rebuilds the policy; the nominal controller is supplied by the caller
    /// and must carry the recorded tag.
    pub fn into_policy(self, nominal: Option<Nominal>) -> Result<RbfPolicy> {
        let got = nominal.as_ref().map(|n| n.tag.as_str());
        if got != self.nominal_tag.as_deref() {
            return Err(Error::Usage(format!(
                "checkpoint expects nominal {:?}, got {:?}",
                self.nominal_tag, got
            )));
        }
        let count = self.centers.len();
        if count == 0 || self.theta.len() % count != 0 {
            return Err(Error::InvalidParameter(format!(
                "theta length {} is not a multiple of the center count {count}",
                self.theta.len()
            )));
        }
        let channels = self.theta.len() / count;
        let centers = self.centers.into_iter().map(DVector::from_vec).collect();
        let basis = RbfBasis::new(centers, self.width, channels)?;
        let policy = LinearPolicy::new(basis, self.theta_max, nominal)?;
        let theta = DVector::from_vec(self.theta);
        if theta.iter().any(|v| v.abs() > self.theta_max) {
            return Err(Error::InvalidParameter("checkpoint theta lies outside the parameter box".into()));
        }
        policy.with_theta(theta)
    }
}
