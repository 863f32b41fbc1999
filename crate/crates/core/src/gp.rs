//! Training data, prior means and the exact GP posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::KernelSpec;

/// Inputs X* (one row per point) and responses y*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    responses: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, responses: Vec<f64>) -> Result<Self> {
        check_dim(inputs.len(), responses.len())?;
        let dim = inputs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("empty dataset; use Dataset::empty".into()))?;
        let mut out = Self::empty(dim)?;
        for (x, y) in inputs.into_iter().zip(responses) {
            out.push(x, y)?;
        }
        Ok(out)
    }

    /// Dataset with no rows, for prior-only posteriors.
    pub fn empty(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("input dimension must be >= 1".into()));
        }
        Ok(Self {
            inputs: Vec::new(),
            responses: Vec::new(),
            dim,
        })
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        check_dim(self.dim, x.len())?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite row {x:?} -> {y}")));
        }
        self.inputs.push(x);
        self.responses.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            responses: idx.iter().map(|&i| self.responses[i]).collect(),
            dim: self.dim,
        }
    }

    /// Same inputs with replaced responses.
    pub fn with_responses(&self, responses: Vec<f64>) -> Result<Self> {
        check_dim(self.len(), responses.len())?;
        Ok(Self {
            inputs: self.inputs.clone(),
            responses,
            dim: self.dim,
        })
    }

    /// First pair (i, j), i < j, of exactly equal input rows.
    pub fn duplicate_rows(&self) -> Option<(usize, usize)> {
        for j in 1..self.inputs.len() {
            for i in 0..j {
                if self.inputs[i] == self.inputs[j] {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn contains_input(&self, x: &[f64]) -> bool {
        self.inputs.iter().any(|r| r.as_slice() == x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMeanFamily {
    Zero,
    Constant,
    Linear,
}

/// Prior mean u_pr. Constant stores `[c]`, Linear stores `[c, b₁, …, b_d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMean {
    pub family: PriorMeanFamily,
    pub coefficients: Vec<f64>,
}

impl PriorMean {
    pub fn zero() -> Self {
        Self {
            family: PriorMeanFamily::Zero,
            coefficients: Vec::new(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            family: PriorMeanFamily::Constant,
            coefficients: vec![c],
        }
    }

    /// Coefficients by ordinary least squares on the data. A linear mean
    /// with fewer than d + 1 rows degrades to a constant fit padded with
    /// zero slopes.
    pub fn fit_ols(family: PriorMeanFamily, data: &Dataset) -> Self {
        let m = data.len();
        let y = data.responses();
        match family {
            PriorMeanFamily::Zero => Self::zero(),
            _ if m == 0 => Self {
                family,
                coefficients: match family {
                    PriorMeanFamily::Linear => vec![0.0; data.dim() + 1],
                    _ => vec![0.0],
                },
            },
            PriorMeanFamily::Constant => Self::constant(y.iter().sum::<f64>() / m as f64),
            PriorMeanFamily::Linear => {
                let d = data.dim();
                let mean = y.iter().sum::<f64>() / m as f64;
                let fallback = || {
                    let mut c = vec![0.0; d + 1];
                    c[0] = mean;
                    c
                };
                let coefficients = if m < d + 1 {
                    fallback()
                } else {
                    let a = DMatrix::from_fn(m, d + 1, |i, j| {
                        if j == 0 {
                            1.0
                        } else {
                            data.inputs()[i][j - 1]
                        }
                    });
                    let b = DVector::from_column_slice(y);
                    match a.svd(true, true).solve(&b, 1e-12) {
                        Ok(c) if c.iter().all(|v| v.is_finite()) => c.as_slice().to_vec(),
                        _ => fallback(),
                    }
                };
                Self {
                    family,
                    coefficients,
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.family {
            PriorMeanFamily::Zero => 0.0,
            PriorMeanFamily::Constant => self.coefficients[0],
            PriorMeanFamily::Linear => {
                self.coefficients[0]
                    + self.coefficients[1..]
                        .iter()
                        .zip(x)
                        .map(|(b, v)| b * v)
                        .sum::<f64>()
            }
        }
    }

    /// ∫u_pr(x)π(x)dx given the mean vector of π (exact for these families).
    pub fn integral(&self, pi_mean: &[f64]) -> f64 {
        self.eval(pi_mean)
    }
}

/// Relative round-off band below zero that predictive variances may fall into
/// before being clamped.
const VARIANCE_TOL: f64 = 1e-10;

/// Fitted exact GP: Cholesky factor of Σ_y = K(X*,X*) + ν²I and α = Σ_y⁻¹ỹ.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: KernelSpec,
    prior_mean: PriorMean,
    data: Dataset,
    factor: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    var_tol: f64,
}

/// Cholesky of a symmetric matrix with escalating diagonal jitter.
/// Returns the lower factor and the jitter that was added.
pub(crate) fn jittered_cholesky(mut sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let m = sigma.nrows();
    if m == 0 {
        return Ok((sigma, 0.0));
    }
    if let Some(c) = sigma.clone().cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let mean_diag = sigma.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut added = 0.0;
    let mut jitter = 1e-10 * mean_diag;
    while jitter <= 1e-4 * mean_diag * (1.0 + 1e-9) {
        for i in 0..m {
            sigma[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = sigma.clone().cholesky() {
            return Ok((c.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning {
        jitter: added,
        reason: "covariance matrix not positive definite".into(),
    })
}

impl GpPosterior {
    /// Conditions the GP on the data.
    pub fn fit(kernel: KernelSpec, prior_mean: PriorMean, data: Dataset) -> Result<Self> {
        kernel.validate(data.dim())?;
        if prior_mean.family == PriorMeanFamily::Linear {
            check_dim(data.dim() + 1, prior_mean.coefficients.len())?;
        }
        if kernel.noise_variance == 0.0 {
            if let Some((i, j)) = data.duplicate_rows() {
                return Err(Error::Conditioning {
                    jitter: 0.0,
                    reason: format!("rows {i} and {j} coincide with zero observation noise"),
                });
            }
        }
        let sigma = kernel.gram(data.inputs(), true);
        let (factor, jitter) = jittered_cholesky(sigma)?;
        let resid = DVector::from_iterator(
            data.len(),
            data.inputs()
                .iter()
                .zip(data.responses())
                .map(|(x, y)| y - prior_mean.eval(x)),
        );
        let alpha = cholesky_solve(&factor, &resid);
        let var_tol = variance_tolerance(&factor);
        Ok(Self {
            kernel,
            prior_mean,
            data,
            factor,
            alpha,
            jitter,
            var_tol,
        })
    }

    /// Fits with prior-mean coefficients chosen by least squares.
    pub fn fit_with_mean(kernel: KernelSpec, family: PriorMeanFamily, data: Dataset) -> Result<Self> {
        let mean = PriorMean::fit_ols(family, &data);
        Self::fit(kernel, mean, data)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior_mean(&self) -> &PriorMean {
        &self.prior_mean
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    /// Lower Cholesky factor of Σ_y (including any jitter).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Diagonal jitter that was needed to factorize Σ_y.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Σ_y⁻¹ v.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        cholesky_solve(&self.factor, v)
    }

    /// L⁻¹ v.
    pub fn half_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        if v.is_empty() {
            return v.clone();
        }
        self.factor
            .solve_lower_triangular(v)
            .expect("cholesky factor has a positive diagonal")
    }

    /// K(X*, x).
    pub fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data.inputs().iter().map(|xi| self.kernel.eval_unchecked(xi, x)),
        )
    }

    /// Posterior mean without dimension checks.
    pub(crate) fn mean_unchecked(&self, x: &[f64]) -> f64 {
        let mut s = self.prior_mean.eval(x);
        for (xi, a) in self.data.inputs().iter().zip(self.alpha.iter()) {
            s += a * self.kernel.eval_unchecked(xi, x);
        }
        s
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.mean_unchecked(x))
    }

    /// Posterior mean and (latent) variance at x.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.dim(), x.len())?;
        let k = self.kernel_vector(x);
        let mean = self.prior_mean.eval(x) + k.dot(&self.alpha);
        let prior = self.kernel.eval_unchecked(x, x);
        let v = self.half_solve(&k);
        let var = self.clamp(prior - v.norm_squared(), prior)?;
        Ok((mean, var))
    }

    /// Predictive distribution of a new noisy observation at x.
    pub fn predict_observation(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.predict(x)?;
        Ok((m, v + self.kernel.noise_variance))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Posterior covariance k(x,x′) − K(x,X*)Σ_y⁻¹K(X*,x′).
    pub fn covariance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        let vx = self.half_solve(&self.kernel_vector(x));
        let prior = self.kernel.eval_unchecked(x, y);
        if x == y {
            return self.clamp(prior - vx.norm_squared(), prior);
        }
        let vy = self.half_solve(&self.kernel_vector(y));
        Ok(prior - vx.dot(&vy))
    }

    /// Posterior covariance matrix of a point set.
    pub fn covariance_matrix(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for x in xs {
            check_dim(self.dim(), x.len())?;
        }
        let prior = self.kernel.gram(xs, false);
        if self.data.is_empty() {
            return Ok(prior);
        }
        let cross = self.kernel.cross_gram(self.data.inputs(), xs);
        let v = self
            .factor
            .solve_lower_triangular(&cross)
            .expect("cholesky factor has a positive diagonal");
        let mut out = prior - v.transpose() * v;
        for i in 0..xs.len() {
            let p = self.kernel.eval_unchecked(&xs[i], &xs[i]);
            out[(i, i)] = self.clamp(out[(i, i)], p)?;
        }
        Ok(out)
    }

    /// L⁻¹K(X*, xs), one column per point.
    pub fn cross_half(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let cross = self.kernel.cross_gram(self.data.inputs(), xs);
        if self.data.is_empty() {
            return cross;
        }
        self.factor
            .solve_lower_triangular(&cross)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Means and clamped variances at many points, sharing one triangular
    /// solve.
    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        for x in xs {
            check_dim(self.dim(), x.len())?;
        }
        let cross = self.kernel.cross_gram(self.data.inputs(), xs);
        let means = (0..xs.len())
            .map(|j| self.prior_mean.eval(&xs[j]) + cross.column(j).dot(&self.alpha))
            .collect();
        let v = if self.data.is_empty() {
            cross
        } else {
            self.factor
                .solve_lower_triangular(&cross)
                .expect("cholesky factor has a positive diagonal")
        };
        let vars = (0..xs.len())
            .map(|j| {
                let p = self.kernel.eval_unchecked(&xs[j], &xs[j]);
                self.clamp(p - v.column(j).norm_squared(), p)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((means, vars))
    }

    /// Posterior means only.
    pub fn mean_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.mean_unchecked(x)).collect()
    }

    /// Clamps a round-off negative variance to 0, rejecting larger negatives.
    pub(crate) fn clamp(&self, v: f64, prior: f64) -> Result<f64> {
        clamp_variance_tol(v, prior, self.var_tol)
    }

    /// Refits with one more observation, keeping the kernel and prior mean.
    pub fn with_point(&self, x: Vec<f64>, y: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data.push(x, y)?;
        Self::fit(self.kernel.clone(), self.prior_mean.clone(), data)
    }
}

/// Relative round-off band for variances computed through `factor`: the
/// base tolerance, widened for ill-conditioned factors since k − vᵀv loses
/// about ε·cond(Σ) relative accuracy.
fn variance_tolerance(factor: &DMatrix<f64>) -> f64 {
    if factor.nrows() == 0 {
        return VARIANCE_TOL;
    }
    let d = factor.diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    let cond = (hi / lo).powi(2);
    VARIANCE_TOL.max(64.0 * f64::EPSILON * cond)
}

/// Clamps round-off negatives to 0 and rejects anything larger.
pub(crate) fn clamp_variance_tol(v: f64, prior: f64, tol: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -tol * prior.abs().max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance { value: v })
    }
}

/// Solves L Lᵀ x = b.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if b.is_empty() {
        return b.clone();
    }
    let z = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&z)
        .expect("cholesky factor has a positive diagonal")
}

/// (L Lᵀ)⁻¹ from a lower Cholesky factor.
pub(crate) fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    if m == 0 {
        return DMatrix::zeros(0, 0);
    }
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .expect("cholesky factor has a positive diagonal");
    linv.transpose() * linv
}
