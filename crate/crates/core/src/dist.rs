//! Input distributions and seeded random streams.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::stats::norm_quantile;

/// Reproducible RNG used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a parent seed (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A one-dimensional distribution for an independent input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    PointMass { value: f64 },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Normal { mean, std } if mean.is_finite() && std >= 0.0 => Ok(()),
            Marginal::Uniform { low, high } if low < high => Ok(()),
            Marginal::PointMass { value } if value.is_finite() => Ok(()),
            m => Err(Error::InvalidParameter(format!("invalid marginal {m:?}"))),
        }
    }

    /// True when the marginal carries no spread.
    pub fn is_degenerate(&self) -> bool {
        match *self {
            Marginal::Normal { std, .. } => std == 0.0,
            Marginal::Uniform { .. } => false,
            Marginal::PointMass { .. } => true,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            Marginal::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Marginal::PointMass { value } => value,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, std } if std > 0.0 => {
                let z = (x - mean) / std;
                -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Marginal::Uniform { low, high } => {
                if (low..=high).contains(&x) {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Marginal::Normal { mean: value, .. } | Marginal::PointMass { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Normal { mean, .. } => mean,
            Marginal::Uniform { low, high } => 0.5 * (low + high),
            Marginal::PointMass { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Normal { std, .. } => std * std,
            Marginal::Uniform { low, high } => (high - low).powi(2) / 12.0,
            Marginal::PointMass { .. } => 0.0,
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, std } => mean + std * norm_quantile(p),
            Marginal::Uniform { low, high } => low + (high - low) * p.clamp(0.0, 1.0),
            Marginal::PointMass { value } => value,
        }
    }
}

/// Anything that can draw input points and report a log density.
pub trait InputDistribution {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn ln_pdf(&self, x: &[f64]) -> f64;
    fn mean(&self) -> Vec<f64>;
    /// Whether the density is an isotropic standard Gaussian.
    fn is_standard_gaussian(&self) -> bool {
        false
    }

    fn sample_n(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// `n` draws whose marginals are Latin-hypercube stratified where the
    /// distribution supports it; plain draws otherwise.
    fn sample_stratified(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        self.sample_n(n, rng)
    }
}

/// Product of independent marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDistribution {
    pub marginals: Vec<Marginal>,
}

impl ProductDistribution {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidParameter("no marginals".into()));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { marginals })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self {
            marginals: vec![Marginal::Normal { mean: 0.0, std: 1.0 }; dim],
        }
    }

    /// Box of per-dimension quantiles [q, 1 − q].
    pub fn quantile_box(&self, q: f64) -> Vec<(f64, f64)> {
        self.marginals
            .iter()
            .map(|m| (m.quantile(q), m.quantile(1.0 - q)))
            .collect()
    }

    /// Indices of marginals with nonzero spread.
    pub fn active_dims(&self) -> Vec<usize> {
        (0..self.marginals.len())
            .filter(|&i| !self.marginals[i].is_degenerate())
            .collect()
    }
}

impl InputDistribution for ProductDistribution {
    fn dim(&self) -> usize {
        self.marginals.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }

    fn ln_pdf(&self, x: &[f64]) -> f64 {
        self.marginals.iter().zip(x).map(|(m, &v)| m.ln_pdf(v)).sum()
    }

    fn mean(&self) -> Vec<f64> {
        self.marginals.iter().map(Marginal::mean).collect()
    }

    fn is_standard_gaussian(&self) -> bool {
        self.marginals
            .iter()
            .all(|m| *m == Marginal::Normal { mean: 0.0, std: 1.0 })
    }

    fn sample_stratified(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        crate::design::lhs_marginals(&self.marginals, n, rng)
    }
}

/// Full-covariance Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateNormal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    ln_norm: f64,
}

impl MultivariateNormal {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Conditioning {
                jitter: 0.0,
                reason: "gaussian covariance not positive definite".into(),
            })?
            .l();
        let d = mean.len() as f64;
        let log_det: f64 = chol.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let ln_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            ln_norm,
        })
    }

    /// Moment-matched Gaussian of a sample set (rows are points).
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidInput("need at least two samples".into()));
        }
        let d = samples[0].len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Self::new(mean, cov)
    }

    pub fn mean_vector(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Same mean, covariance scaled by `factor`.
    pub fn inflated(&self, factor: f64) -> Result<Self> {
        Self::new(self.mean.clone(), &self.cov * factor)
    }
}

impl InputDistribution for MultivariateNormal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(&mut *rng));
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }

    fn ln_pdf(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        match self.chol.solve_lower_triangular(&diff) {
            Some(z) => self.ln_norm - 0.5 * z.norm_squared(),
            None => f64::NEG_INFINITY,
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.mean.as_slice().to_vec()
    }

    fn is_standard_gaussian(&self) -> bool {
        self.mean.iter().all(|&v| v == 0.0) && self.cov == DMatrix::identity(self.dim(), self.dim())
    }

    /// Stratified standard-normal coordinates pushed through mean + L·z.
    fn sample_stratified(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        crate::design::lhs_unit(self.dim(), n, rng)
            .into_iter()
            .map(|u| {
                let z = DVector::from_iterator(u.len(), u.iter().map(|&p| norm_quantile(p)));
                (&self.mean + &self.chol * z).as_slice().to_vec()
            })
            .collect()
    }
}
