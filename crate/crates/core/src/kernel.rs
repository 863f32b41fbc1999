//! Covariance kernels.
//!
//! Stationary families are written as σ₀²·φ(s) with s = Σᵢ (τᵢ/ℓᵢ)² the
//! scaled squared distance; an isotropic kernel stores a single ℓ. The
//! derivative dφ/ds is all the hyperparameter gradients need.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[serde(rename = "se")]
    SquaredExponential,
    Matern12,
    Matern32,
    Matern52,
    #[serde(rename = "matern")]
    MaternGeneral,
    #[serde(rename = "rq")]
    RationalQuadratic,
    Linear,
    Polynomial,
}

impl KernelFamily {
    pub fn is_stationary(self) -> bool {
        !matches!(self, KernelFamily::Linear | KernelFamily::Polynomial)
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "se" | "rbf" | "squared_exponential" => KernelFamily::SquaredExponential,
            "matern12" | "exponential" | "exp" => KernelFamily::Matern12,
            "matern32" => KernelFamily::Matern32,
            "matern52" => KernelFamily::Matern52,
            "matern" => KernelFamily::MaternGeneral,
            "rq" | "rational_quadratic" => KernelFamily::RationalQuadratic,
            "linear" => KernelFamily::Linear,
            "polynomial" | "poly" => KernelFamily::Polynomial,
            other => return Err(Error::InvalidParameter(format!("unknown kernel {other}"))),
        })
    }
}

/// Kernel family plus hyperparameters.
///
/// `smoothness` holds `[κ]` for the general Matérn, `[α]` for the rational
/// quadratic, `[p, c]` for the polynomial kernel and is empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    #[serde(default)]
    pub smoothness: Vec<f64>,
    #[serde(default)]
    pub noise_variance: f64,
}

impl KernelSpec {
    /// Kernel with default smoothness parameters for its family.
    pub fn new(family: KernelFamily, signal_variance: f64, length_scales: Vec<f64>) -> Self {
        let smoothness = match family {
            KernelFamily::MaternGeneral => vec![2.5],
            KernelFamily::RationalQuadratic => vec![1.0],
            KernelFamily::Polynomial => vec![2.0, 1.0],
            _ => Vec::new(),
        };
        let length_scales = if family.is_stationary() {
            length_scales
        } else {
            Vec::new()
        };
        Self {
            family,
            signal_variance,
            length_scales,
            smoothness,
            noise_variance: 0.0,
        }
    }

    pub fn se(signal_variance: f64, length_scale: f64) -> Self {
        Self::new(KernelFamily::SquaredExponential, signal_variance, vec![length_scale])
    }

    pub fn with_noise(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }

    pub fn with_smoothness(mut self, smoothness: Vec<f64>) -> Self {
        self.smoothness = smoothness;
        self
    }

    /// Copy with one length scale per input dimension.
    pub fn anisotropic(mut self, dim: usize) -> Self {
        if self.family.is_stationary() {
            let l = self.length_scales.first().copied().unwrap_or(1.0);
            self.length_scales = vec![l; dim];
        }
        self
    }

    pub fn is_isotropic(&self) -> bool {
        self.length_scales.len() <= 1
    }

    /// Checks hyperparameter constraints for inputs of dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return bad(format!("signal variance {} must be > 0", self.signal_variance));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad(format!("noise variance {} must be >= 0", self.noise_variance));
        }
        if self.family.is_stationary() {
            let n = self.length_scales.len();
            if n != 1 && n != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: n,
                });
            }
            if self.length_scales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                return bad(format!("length scales {:?} must be > 0", self.length_scales));
            }
        }
        match self.family {
            KernelFamily::MaternGeneral | KernelFamily::RationalQuadratic => {
                match self.smoothness.first() {
                    Some(&v) if v > 0.0 && v.is_finite() => {}
                    _ => return bad(format!("smoothness {:?} must be > 0", self.smoothness)),
                }
            }
            KernelFamily::Polynomial => match self.smoothness.as_slice() {
                [p, c] if *p >= 1.0 && p.fract() == 0.0 && *c >= 0.0 => {}
                s => return bad(format!("polynomial needs integer order >= 1 and offset >= 0, got {s:?}")),
            },
            _ => {}
        }
        Ok(())
    }

    /// Scaled squared distance Σᵢ ((xᵢ − yᵢ)/ℓᵢ)².
    fn scaled_sq_dist(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.length_scales.len() == 1 {
            let l = self.length_scales[0];
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (l * l)
        } else {
            x.iter()
                .zip(y)
                .zip(&self.length_scales)
                .map(|((a, b), l)| {
                    let t = (a - b) / l;
                    t * t
                })
                .sum()
        }
    }

    /// Stationary profile φ(s) with φ(0) = 1.
    fn profile(&self, s: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => (-0.5 * s).exp(),
            KernelFamily::Matern12 => (-s.sqrt()).exp(),
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * s.sqrt();
                (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * s.sqrt();
                (1.0 + a + 5.0 * s / 3.0) * (-a).exp()
            }
            KernelFamily::MaternGeneral => matern_profile(self.smoothness[0], s.sqrt()),
            KernelFamily::RationalQuadratic => {
                let alpha = self.smoothness[0];
                (1.0 + s / (2.0 * alpha)).powf(-alpha)
            }
            KernelFamily::Linear | KernelFamily::Polynomial => unreachable!(),
        }
    }

    /// dφ/ds; only used multiplied by a factor that vanishes with s.
    fn profile_slope(&self, s: f64) -> f64 {
        let r = s.sqrt();
        match self.family {
            KernelFamily::SquaredExponential => -0.5 * (-0.5 * s).exp(),
            KernelFamily::Matern12 => {
                if r == 0.0 {
                    0.0
                } else {
                    -(-r).exp() / (2.0 * r)
                }
            }
            KernelFamily::Matern32 => -1.5 * (-(3f64.sqrt()) * r).exp(),
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r;
                -(5.0 / 6.0) * (1.0 + a) * (-a).exp()
            }
            KernelFamily::MaternGeneral => {
                if r == 0.0 {
                    return 0.0;
                }
                let kappa = self.smoothness[0];
                let z = (2.0 * kappa).sqrt() * r;
                let c = (1.0 - kappa).exp2() / gamma(kappa);
                let log_term = (kappa - 1.0) * z.ln() + bessel_k(kappa - 1.0, z).ln();
                -c * kappa * log_term.exp()
            }
            KernelFamily::RationalQuadratic => {
                let alpha = self.smoothness[0];
                -0.5 * (1.0 + s / (2.0 * alpha)).powf(-alpha - 1.0)
            }
            KernelFamily::Linear | KernelFamily::Polynomial => unreachable!(),
        }
    }

    /// k(x, y) without dimension checks.
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Linear => self.signal_variance * dot(x, y),
            KernelFamily::Polynomial => {
                let (p, c) = (self.smoothness[0], self.smoothness[1]);
                self.signal_variance * (dot(x, y) + c).powi(p as i32)
            }
            _ => self.signal_variance * self.profile(self.scaled_sq_dist(x, y)),
        }
    }

    /// k(x, x′).
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(x.len(), y.len())?;
        self.validate(x.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    /// K(A, B) for two point sets; never includes observation noise.
    pub fn cross_gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_unchecked(&a[i], &b[j]))
    }

    /// K(X, X), plus ν²_obs on the diagonal when `add_noise` (same data indices).
    pub fn gram(&self, x: &[Vec<f64>], add_noise: bool) -> DMatrix<f64> {
        let m = x.len();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.eval_unchecked(&x[i], &x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            if add_noise {
                k[(i, i)] += self.noise_variance;
            }
        }
        k
    }

    /// Gram matrix of a row-major `DMatrix` point set (rows are points).
    pub fn gram_matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(x.ncols(), x2.ncols())?;
        self.validate(x.ncols())?;
        Ok(self.cross_gram(&matrix_rows(x), &matrix_rows(x2)))
    }

    /// Hyperparameters that the optimizer moves, in a fixed order.
    pub fn free_params(&self, optimize_noise: bool) -> Vec<HyperParam> {
        let mut out = vec![HyperParam::SignalVariance];
        if self.family.is_stationary() {
            out.extend((0..self.length_scales.len()).map(HyperParam::LengthScale));
        }
        if optimize_noise {
            out.push(HyperParam::NoiseVariance);
        }
        out
    }

    pub fn log_params(&self, params: &[HyperParam]) -> Vec<f64> {
        params
            .iter()
            .map(|p| match *p {
                HyperParam::SignalVariance => self.signal_variance.ln(),
                HyperParam::LengthScale(i) => self.length_scales[i].ln(),
                HyperParam::NoiseVariance => self.noise_variance.ln(),
            })
            .collect()
    }

    pub fn with_log_params(&self, params: &[HyperParam], values: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, v) in params.iter().zip(values) {
            match *p {
                HyperParam::SignalVariance => out.signal_variance = v.exp(),
                HyperParam::LengthScale(i) => out.length_scales[i] = v.exp(),
                HyperParam::NoiseVariance => out.noise_variance = v.exp(),
            }
        }
        out
    }

    /// ∂Σ/∂(log θⱼ) for Σ = K(X,X) + ν²I, one matrix per listed parameter.
    pub fn gram_gradients(&self, x: &[Vec<f64>], params: &[HyperParam]) -> Vec<DMatrix<f64>> {
        let m = x.len();
        let mut grads = vec![DMatrix::zeros(m, m); params.len()];
        for i in 0..m {
            for j in 0..=i {
                let signal = self.eval_unchecked(&x[i], &x[j]);
                let slope = if self.family.is_stationary() {
                    self.signal_variance * self.profile_slope(self.scaled_sq_dist(&x[i], &x[j]))
                } else {
                    0.0
                };
                for (g, p) in grads.iter_mut().zip(params) {
                    let v = match *p {
                        HyperParam::SignalVariance => signal,
                        HyperParam::LengthScale(l) => {
                            let part = if self.length_scales.len() == 1 {
                                self.scaled_sq_dist(&x[i], &x[j])
                            } else {
                                let t = (x[i][l] - x[j][l]) / self.length_scales[l];
                                t * t
                            };
                            -2.0 * part * slope
                        }
                        HyperParam::NoiseVariance => {
                            if i == j {
                                self.noise_variance
                            } else {
                                0.0
                            }
                        }
                    };
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
        }
        grads
    }
}

/// A log-parameterized hyperparameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperParam {
    SignalVariance,
    LengthScale(usize),
    NoiseVariance,
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// 2^{1−κ}/Γ(κ) · z^κ K_κ(z) with z = √(2κ)·r; equals 1 at r = 0.
fn matern_profile(kappa: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let z = (2.0 * kappa).sqrt() * r;
    let k = bessel_k(kappa, z);
    if k == 0.0 {
        return 0.0;
    }
    let log_v = (1.0 - kappa) * std::f64::consts::LN_2 - gamma(kappa).ln() + kappa * z.ln() + k.ln();
    log_v.exp().min(1.0)
}

/// Modified Bessel function of the second kind K_ν(z), z > 0, from
/// K_ν(z) = ∫₀^∞ exp(−z cosh t) cosh(νt) dt by the trapezoidal rule, which
/// converges geometrically for this entire, rapidly decaying integrand.
pub fn bessel_k(nu: f64, z: f64) -> f64 {
    if z <= 0.0 {
        return f64::INFINITY;
    }
    if z > 700.0 {
        return 0.0;
    }
    let nu = nu.abs();
    let h = 0.04;
    // Shift by the log-integrand maximum so large orders do not overflow.
    let t_peak = if nu > 0.0 { (nu / z).asinh() } else { 0.0 };
    let log_f = |t: f64| -z * t.cosh() + log_cosh(nu * t);
    let shift = log_f(t_peak);
    let mut sum = 0.5 * (log_f(0.0) - shift).exp();
    let mut k = 1usize;
    loop {
        let t = k as f64 * h;
        let term = (log_f(t) - shift).exp();
        sum += term;
        if t > t_peak && term < 1e-18 * sum {
            break;
        }
        k += 1;
        if k > 200_000 {
            break;
        }
    }
    (sum * h).ln().exp() * shift.exp()
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}
