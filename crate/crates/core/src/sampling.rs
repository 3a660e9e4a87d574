//! Uniform sampling on the ellipsoid `{x : xᵀPx ≤ c}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Maps the unit ball onto the sublevel set via `√c · P^{-1/2}`.
#[derive(Debug, Clone)]
pub struct EllipsoidSampler {
    transform: DMatrix<f64>,
}

impl EllipsoidSampler {
    pub fn new(p: &DMatrix<f64>, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("level c must be >= 0, got {c}")));
        }
        let eig = p.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidParameter("P must be positive definite".into()));
        }
        let inv_sqrt = DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues.iter().map(|l| l.sqrt().recip()),
        );
        let p_inv_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        Ok(Self {
            transform: p_inv_sqrt * c.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.transform.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let y = unit_ball(n, rng);
        &self.transform * y
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// Uniform draw from the unit `n`-ball: Gaussian direction, radius `U^{1/n}`.
pub fn unit_ball<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 1e-300 {
            let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
            return g * (r / norm);
        }
    }
}
