//! Hyperparameter estimation: marginal likelihood, leave-one-out loss,
//! a bounded gradient optimizer with restarts, and CV kernel selection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::rng_from_seed;
use crate::error::{Error, Result};
use crate::gp::{cholesky_inverse, jittered_cholesky, Dataset, GpPosterior, PriorMean, PriorMeanFamily};
use crate::kernel::{HyperParam, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mle,
    Loo,
}

/// Objective value with its gradient in log-hyperparameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub params: Vec<HyperParam>,
}

struct Factored {
    inv: DMatrix<f64>,
    alpha: DVector<f64>,
    log_det: f64,
    grads: Vec<DMatrix<f64>>,
}

fn factor(
    kernel: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
    params: &[HyperParam],
) -> Result<Factored> {
    kernel.validate(data.dim())?;
    let (l, _) = jittered_cholesky(kernel.gram(data.inputs(), true))?;
    let inv = cholesky_inverse(&l);
    let resid = DVector::from_iterator(
        data.len(),
        data.inputs()
            .iter()
            .zip(data.responses())
            .map(|(x, y)| y - prior_mean.eval(x)),
    );
    let alpha = &inv * resid;
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let grads = kernel.gram_gradients(data.inputs(), params);
    Ok(Factored {
        inv,
        alpha,
        log_det,
        grads,
    })
}

/// Parameters moved by default: σ₀², length scales, and ν² when it is nonzero.
fn default_params(kernel: &KernelSpec) -> Vec<HyperParam> {
    kernel.free_params(kernel.noise_variance > 0.0)
}

/// Negative log marginal likelihood ½ỹᵀΣ⁻¹ỹ + ½log|Σ| (constant dropped)
/// and its gradient with respect to the log hyperparameters.
pub fn log_marginal_likelihood(
    kernel: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
) -> Result<ObjectiveValue> {
    mle_objective(kernel, prior_mean, data, &default_params(kernel))
}

pub fn mle_objective(
    kernel: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
    params: &[HyperParam],
) -> Result<ObjectiveValue> {
    let f = factor(kernel, prior_mean, data, params)?;
    let resid_quad = {
        let r = DVector::from_iterator(
            data.len(),
            data.inputs()
                .iter()
                .zip(data.responses())
                .map(|(x, y)| y - prior_mean.eval(x)),
        );
        r.dot(&f.alpha)
    };
    let value = 0.5 * resid_quad + 0.5 * f.log_det;
    let gradient = f
        .grads
        .iter()
        .map(|d| {
            let trace = f.inv.component_mul(d).sum();
            0.5 * trace - 0.5 * f.alpha.dot(&(d * &f.alpha))
        })
        .collect();
    Ok(ObjectiveValue {
        value,
        gradient,
        params: params.to_vec(),
    })
}

/// Leave-one-out predictions (uᵢ, σᵢ²) from the closed forms
/// uᵢ = yᵢ − αᵢ/[Σ⁻¹]ᵢᵢ and σᵢ² = 1/[Σ⁻¹]ᵢᵢ.
pub fn loo_predictions(
    kernel: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
) -> Result<Vec<(f64, f64)>> {
    let f = factor(kernel, prior_mean, data, &[])?;
    Ok((0..data.len())
        .map(|i| {
            let d = f.inv[(i, i)];
            (data.responses()[i] - f.alpha[i] / d, 1.0 / d)
        })
        .collect())
}

/// Leave-one-out loss Σᵢ [½log σᵢ² + (yᵢ − uᵢ)²/(2σᵢ²)] (constant dropped)
/// and its gradient.
pub fn loo_loss(kernel: &KernelSpec, prior_mean: &PriorMean, data: &Dataset) -> Result<ObjectiveValue> {
    loo_objective(kernel, prior_mean, data, &default_params(kernel))
}

pub fn loo_objective(
    kernel: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
    params: &[HyperParam],
) -> Result<ObjectiveValue> {
    if data.len() < 2 {
        return Err(Error::InvalidInput("leave-one-out needs at least two points".into()));
    }
    let f = factor(kernel, prior_mean, data, params)?;
    let m = data.len();
    let diag: Vec<f64> = (0..m).map(|i| f.inv[(i, i)]).collect();
    let value = (0..m)
        .map(|i| -0.5 * diag[i].ln() + 0.5 * f.alpha[i] * f.alpha[i] / diag[i])
        .sum();
    let gradient = f
        .grads
        .iter()
        .map(|d| {
            let z = &f.inv * d;
            let z_alpha = &z * &f.alpha;
            let z_inv = &z * &f.inv;
            -(0..m)
                .map(|i| {
                    let a = f.alpha[i];
                    (a * z_alpha[i] - 0.5 * (1.0 + a * a / diag[i]) * z_inv[(i, i)]) / diag[i]
                })
                .sum::<f64>()
        })
        .collect();
    Ok(ObjectiveValue {
        value,
        gradient,
        params: params.to_vec(),
    })
}

/// Settings for [`fit_hyperparameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub objective: Objective,
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Whether ν² is optimized; `None` means "only when the template's ν² > 0".
    pub optimize_noise: Option<bool>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            objective: Objective::Mle,
            restarts: 3,
            seed: 0,
            max_iters: 200,
            optimize_noise: None,
        }
    }
}

impl FitOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

/// Box bounds for the log hyperparameters, scaled to the data.
fn log_bounds(params: &[HyperParam], data: &Dataset, resid_var: f64) -> (Vec<f64>, Vec<f64>) {
    let spans: Vec<f64> = (0..data.dim())
        .map(|j| {
            let (lo, hi) = data
                .inputs()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x[j]), b.max(x[j])));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        })
        .collect();
    let mean_span = spans.iter().sum::<f64>() / spans.len() as f64;
    let lv = resid_var.ln();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for p in params {
        let (a, b) = match *p {
            HyperParam::SignalVariance => (lv + (1e-4f64).ln(), lv + (1e4f64).ln()),
            HyperParam::LengthScale(i) => {
                let s = if data.dim() == 1 || params.iter().filter(|q| matches!(q, HyperParam::LengthScale(_))).count() > 1 {
                    spans[i.min(spans.len() - 1)]
                } else {
                    mean_span
                };
                (s.ln() + (1e-2f64).ln(), s.ln() + (1e2f64).ln())
            }
            HyperParam::NoiseVariance => (lv + (1e-10f64).ln(), lv),
        };
        lo.push(a);
        hi.push(b);
    }
    (lo, hi)
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, a), b) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*a, *b);
    }
}

/// Projected gradient descent with Barzilai–Borwein steps and Armijo
/// backtracking inside a box. Returns the final point and value.
pub(crate) fn minimize_box<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], max_iters: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    clamp_into(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut step = 1.0 / gmax.max(1.0);
    let mut stall = 0;
    for _ in 0..max_iters {
        let mut pg = 0.0f64;
        for i in 0..x.len() {
            pg = pg.max((x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs());
        }
        if pg < 1e-7 {
            break;
        }
        let mut accepted = None;
        let mut t = step;
        while t > 1e-14 {
            let mut xn: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            clamp_into(&mut xn, lo, hi);
            let decrease: f64 = x.iter().zip(&xn).zip(&g).map(|((a, b), gi)| gi * (a - b)).sum();
            if let Some((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && fn_ <= fx - 1e-4 * decrease {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-8, 1e3) } else { (2.0 * t).min(1e3) };
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if improvement < 1e-10 * (1.0 + fx.abs()) {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    Some((x, fx))
}

fn residual_variance(prior_mean: &PriorMean, data: &Dataset) -> f64 {
    let m = data.len() as f64;
    let r: Vec<f64> = data
        .inputs()
        .iter()
        .zip(data.responses())
        .map(|(x, y)| y - prior_mean.eval(x))
        .collect();
    let mean = r.iter().sum::<f64>() / m;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    // A zero-mean prior should also account for the offset of the data.
    let second = r.iter().map(|v| v * v).sum::<f64>() / m;
    let v = if prior_mean.family == PriorMeanFamily::Zero { second } else { var };
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

/// Fits the template's hyperparameters by minimizing the chosen objective
/// from `restarts` starting points (the template itself, then seeded
/// uniform draws in the bounding box). Returns the best kernel and its
/// posterior.
pub fn fit_hyperparameters(
    template: &KernelSpec,
    prior_mean: &PriorMean,
    data: &Dataset,
    options: &FitOptions,
) -> Result<(KernelSpec, GpPosterior)> {
    if options.restarts == 0 {
        return Err(Error::InvalidParameter("restarts must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot fit hyperparameters without data".into()));
    }
    template.validate(data.dim())?;
    let optimize_noise = options.optimize_noise.unwrap_or(template.noise_variance > 0.0);
    let resid_var = residual_variance(prior_mean, data);
    let mut start = template.clone();
    if optimize_noise && start.noise_variance <= 0.0 {
        start.noise_variance = 1e-4 * resid_var;
    }
    let params = start.free_params(optimize_noise);
    let (lo, hi) = log_bounds(&params, data, resid_var);

    let eval = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let k = start.with_log_params(&params, theta);
        let r = match options.objective {
            Objective::Mle => mle_objective(&k, prior_mean, data, &params),
            Objective::Loo => loo_objective(&k, prior_mean, data, &params),
        };
        r.ok().filter(|o| o.value.is_finite() && o.gradient.iter().all(|g| g.is_finite()))
            .map(|o| (o.value, o.gradient))
    };

    let mut rng = rng_from_seed(options.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..options.restarts {
        let x0 = if r == 0 {
            start.log_params(&params)
        } else {
            lo.iter()
                .zip(&hi)
                .map(|(a, b)| {
                    let w = b - a;
                    a + 0.1 * w + 0.8 * w * rng.random::<f64>()
                })
                .collect()
        };
        if let Some((x, v)) = minimize_box(eval, &x0, &lo, &hi, options.max_iters) {
            if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                best = Some((x, v));
            }
        }
    }
    let (theta, _) = best.ok_or_else(|| {
        Error::FittingFailed(format!("all {} restarts failed to factorize", options.restarts))
    })?;
    let kernel = start.with_log_params(&params, &theta);
    let gp = GpPosterior::fit(kernel.clone(), prior_mean.clone(), data.clone())?;
    Ok((kernel, gp))
}

/// Settings for [`select_kernel_cv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub prior_mean: PriorMeanFamily,
    pub fit: FitOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            prior_mean: PriorMeanFamily::Constant,
            fit: FitOptions {
                restarts: 2,
                optimize_noise: Some(true),
                ..FitOptions::default()
            },
        }
    }
}

/// Picks the candidate with the largest mean held-out log predictive
/// density under k-fold cross validation. Ties go to the earlier candidate.
pub fn select_kernel_cv(
    candidates: &[KernelSpec],
    data: &Dataset,
    k_folds: usize,
    seed: u64,
    options: &CvOptions,
) -> Result<KernelSpec> {
    if candidates.is_empty() {
        return Err(Error::SelectionFailed("no candidates".into()));
    }
    if k_folds < 2 || data.len() < k_folds {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= k_folds <= m, got k_folds={k_folds}, m={}",
            data.len()
        )));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let folds: Vec<Vec<usize>> = (0..k_folds)
        .map(|f| order.iter().copied().skip(f).step_by(k_folds).collect())
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (ci, cand) in candidates.iter().enumerate() {
        let mut total = 0.0;
        let mut count = 0usize;
        for (f, held) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let train = data.subset(&train_idx);
            let mean = PriorMean::fit_ols(options.prior_mean, &train);
            let fit_opts = FitOptions {
                seed: crate::dist::sub_seed(seed, (ci * k_folds + f) as u64),
                ..options.fit.clone()
            };
            let Ok((k, gp)) = fit_hyperparameters(cand, &mean, &train, &fit_opts) else {
                continue;
            };
            let mut fold_score = 0.0;
            let mut ok = true;
            for &i in held {
                match gp.predict(&data.inputs()[i]) {
                    Ok((u, s2)) => {
                        let v = s2 + k.noise_variance;
                        let r = data.responses()[i] - u;
                        fold_score += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * r * r / v;
                    }
                    Err(_) => ok = false,
                }
            }
            if ok && fold_score.is_finite() {
                total += fold_score;
                count += held.len();
            }
        }
        if count == 0 {
            continue;
        }
        let score = total / count as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((ci, score));
        }
    }
    best.map(|(i, _)| candidates[i].clone())
        .ok_or_else(|| Error::SelectionFailed("every candidate failed on every fold".into()))
}
