//! Bayesian optimization (maximization) with EI/PI/UCB acquisitions and
//! probability-of-feasibility handling of inequality constraints g(x) ≤ 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::{argmax, lhs_sample, CandidatePool, Domain};
use crate::dist::sub_seed;
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpPosterior, PriorMeanFamily};
use crate::hyper::FitOptions;
use crate::io::{fmt_csv, write_csv, x_headers};
use crate::kernel::KernelSpec;
use crate::model::Counted;
use crate::risk::refit;
use crate::stats::{norm_cdf, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    Ei,
    Pi,
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    ProductPof,
    PofThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// ξ for PI and UCB.
    pub xi: f64,
    pub constraint_mode: ConstraintMode,
}

impl AcquisitionSpec {
    pub fn ei() -> Self {
        Self {
            kind: AcquisitionKind::Ei,
            xi: 0.0,
            constraint_mode: ConstraintMode::None,
        }
    }

    pub fn with_constraints(mut self, mode: ConstraintMode) -> Self {
        self.constraint_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) {
            return Err(Error::InvalidParameter(format!("xi must be >= 0, got {}", self.xi)));
        }
        if let ConstraintMode::PofThreshold(e) = self.constraint_mode {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::InvalidParameter(format!("PoF threshold must be in (0,1), got {e}")));
            }
        }
        Ok(())
    }
}

/// Expected improvement over `y_best`.
pub fn ei(u: f64, sigma: f64, y_best: f64) -> f64 {
    if sigma <= 0.0 {
        return (u - y_best).max(0.0);
    }
    let z = (u - y_best) / sigma;
    ((u - y_best) * norm_cdf(z) + sigma * norm_pdf(z)).max(0.0)
}

/// Probability of improving on `y_best` by at least ξ.
pub fn pi(u: f64, sigma: f64, y_best: f64, xi: f64) -> f64 {
    if sigma <= 0.0 {
        return if u >= y_best + xi { 1.0 } else { 0.0 };
    }
    norm_cdf((u - y_best - xi) / sigma)
}

pub fn ucb(u: f64, sigma: f64, xi: f64) -> f64 {
    u + xi * sigma
}

/// P[g̃(x) ≤ 0].
pub fn pof(u_g: f64, sigma_g: f64) -> f64 {
    if sigma_g <= 0.0 {
        return if u_g <= 0.0 { 1.0 } else { 0.0 };
    }
    norm_cdf(-u_g / sigma_g)
}

/// One evaluated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub constraints: Vec<f64>,
    pub is_feasible: bool,
    /// NaN until a feasible point has been seen.
    pub y_best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct BoState {
    pub objective_gp: Option<GpPosterior>,
    pub constraint_gps: Vec<GpPosterior>,
    /// Best feasible (x, y); in noisy mode y is the posterior mean there.
    pub incumbent: Option<(Vec<f64>, f64)>,
    pub history: Vec<HistoryRow>,
    pub n_evals: usize,
    pub diagnostics: Vec<String>,
}

impl BoState {
    fn new() -> Self {
        Self {
            objective_gp: None,
            constraint_gps: Vec::new(),
            incumbent: None,
            history: Vec::new(),
            n_evals: 0,
            diagnostics: Vec::new(),
        }
    }
}

/// Scores the pool and returns the index to query next. Ties go to the
/// lowest index.
pub fn acquire(state: &BoState, pool: &CandidatePool, spec: &AcquisitionSpec) -> Result<usize> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty candidate pool".into()));
    }
    let gp = state
        .objective_gp
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no objective model".into()))?;
    let (means, vars) = gp.predict_batch(&pool.points)?;
    let mut feas = vec![1.0; pool.len()];
    for cg in &state.constraint_gps {
        let (cm, cv) = cg.predict_batch(&pool.points)?;
        for i in 0..pool.len() {
            feas[i] *= pof(cm[i], cv[i].sqrt());
        }
    }
    let y_best = state.incumbent.as_ref().map(|(_, y)| *y);
    let needs_best = matches!(spec.kind, AcquisitionKind::Ei | AcquisitionKind::Pi);
    if needs_best && y_best.is_none() {
        // No feasible point yet: look for feasibility first.
        return Ok(argmax(feas).unwrap_or(0));
    }
    let yb = y_best.unwrap_or(f64::NAN);
    let acq: Vec<f64> = means
        .iter()
        .zip(&vars)
        .map(|(&u, &v)| {
            let s = v.sqrt();
            match spec.kind {
                AcquisitionKind::Ei => ei(u, s, yb),
                AcquisitionKind::Pi => pi(u, s, yb, spec.xi),
                AcquisitionKind::Ucb => ucb(u, s, spec.xi),
            }
        })
        .collect();
    let idx = match spec.constraint_mode {
        ConstraintMode::None => argmax(acq),
        ConstraintMode::ProductPof => argmax(acq.iter().zip(&feas).map(|(a, p)| a * p)),
        ConstraintMode::PofThreshold(eps) => {
            let masked = acq.iter().zip(&feas).map(|(a, &p)| if p >= eps { *a } else { f64::NAN });
            argmax(masked).or_else(|| argmax(feas.iter().copied()))
        }
    };
    Ok(idx.unwrap_or(0))
}

/// Settings for [`bo_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoOptions {
    pub m0: usize,
    /// Total number of evaluated points M.
    pub budget: usize,
    pub spec: AcquisitionSpec,
    pub pool_size: usize,
    /// Kernel template; `None` means an anisotropic SE kernel scaled to the domain.
    pub kernel: Option<KernelSpec>,
    /// Fit observation noise and use posterior means for the incumbent.
    pub noisy: bool,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self {
            m0: 4,
            budget: 15,
            spec: AcquisitionSpec::ei(),
            pool_size: 2048,
            kernel: None,
            noisy: false,
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

fn template(domain: &Domain, ys: &[f64], noisy: bool) -> KernelSpec {
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
    let v = if v > 0.0 { v } else { 1.0 };
    let mut k = KernelSpec::se(v, 1.0);
    k.length_scales = domain.bounds.iter().map(|(lo, hi)| 0.2 * (hi - lo)).collect();
    if noisy {
        k.noise_variance = 1e-2 * v;
    }
    k
}

/// Basic Bayesian optimization loop: LHS initial design, then refit,
/// acquire over a fresh LHS pool, evaluate and augment until `budget`
/// points have been evaluated.
pub fn bo_run<F, G>(
    objective: &mut Counted<F>,
    constraints: &mut [Counted<G>],
    domain: &Domain,
    opts: &BoOptions,
) -> Result<BoState>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> f64,
{
    domain.validate()?;
    opts.spec.validate()?;
    if opts.m0 < 2 || opts.budget < opts.m0 {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= m0 <= M (m0={}, M={})",
            opts.m0, opts.budget
        )));
    }
    let d = domain.dim();
    let mut state = BoState::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut cs: Vec<Vec<f64>> = vec![Vec::new(); constraints.len()];

    let mut evaluate = |x: Vec<f64>, iter: usize, state: &mut BoState, xs: &mut Vec<Vec<f64>>, ys: &mut Vec<f64>, cs: &mut Vec<Vec<f64>>| {
        let y = objective.call(&x);
        let cvals: Vec<f64> = constraints.iter_mut().map(|c| c.call(&x)).collect();
        let feasible = cvals.iter().all(|&c| c <= 0.0);
        for (store, v) in cs.iter_mut().zip(&cvals) {
            store.push(*v);
        }
        state.n_evals += 1;
        if feasible && !opts.noisy && state.incumbent.as_ref().is_none_or(|(_, b)| y > *b) {
            state.incumbent = Some((x.clone(), y));
        }
        let prev = state.history.last().map_or(f64::NAN, |h| h.y_best_so_far);
        let best = state.incumbent.as_ref().map_or(f64::NAN, |(_, b)| *b);
        state.history.push(HistoryRow {
            iter,
            x: x.clone(),
            y,
            constraints: cvals,
            is_feasible: feasible,
            y_best_so_far: if prev.is_nan() { best } else { prev.max(best) },
        });
        xs.push(x);
        ys.push(y);
    };

    let init = lhs_sample(domain, opts.m0, sub_seed(opts.seed, 0))?;
    for x in init.points {
        evaluate(x, 0, &mut state, &mut xs, &mut ys, &mut cs);
    }

    let mut obj_kernel = opts.kernel.clone().unwrap_or_else(|| template(domain, &ys, opts.noisy));
    let mut con_kernels: Vec<KernelSpec> = cs.iter().map(|c| template(domain, c, opts.noisy)).collect();
    let fit_for = |iter: usize| FitOptions {
        optimize_noise: Some(opts.noisy),
        restarts: if iter == 0 { opts.fit.restarts } else { 1 },
        ..opts.fit.clone()
    };
    let mut iter = 0usize;
    loop {
        let fitted = (|| -> Result<()> {
            let data = Dataset::new(xs.clone(), ys.clone())?;
            let (k, gp) = refit(&obj_kernel, PriorMeanFamily::Constant, &data, &fit_for(iter), sub_seed(opts.seed, 1000 + iter as u64))?;
            obj_kernel = k;
            state.objective_gp = Some(gp);
            state.constraint_gps.clear();
            for (j, cvals) in cs.iter().enumerate() {
                let data = Dataset::new(xs.clone(), cvals.clone())?;
                let (k, gp) = refit(
                    &con_kernels[j],
                    PriorMeanFamily::Constant,
                    &data,
                    &fit_for(iter),
                    sub_seed(opts.seed, 2000 + (iter * cs.len() + j) as u64),
                )?;
                con_kernels[j] = k;
                state.constraint_gps.push(gp);
            }
            Ok(())
        })();
        if let Err(e) = fitted {
            state.diagnostics.push(format!("model fitting failed at iteration {iter}: {e}"));
            break;
        }
        if opts.noisy {
            let gp = state.objective_gp.as_ref().expect("fitted above");
            let mut best: Option<(Vec<f64>, f64)> = None;
            for h in state.history.iter().filter(|h| h.is_feasible) {
                let u = gp.mean(&h.x)?;
                if best.as_ref().is_none_or(|(_, b)| u > *b) {
                    best = Some((h.x.clone(), u));
                }
            }
            state.incumbent = best;
            if let (Some(last), Some((_, b))) = (state.history.last_mut(), state.incumbent.as_ref()) {
                last.y_best_so_far = if last.y_best_so_far.is_nan() { *b } else { last.y_best_so_far.max(*b) };
            }
        }
        if state.n_evals >= opts.budget {
            break;
        }
        iter += 1;
        let pool = lhs_sample(domain, opts.pool_size, sub_seed(opts.seed, iter as u64))?;
        let idx = acquire(&state, &pool, &opts.spec)?;
        let x = pool.points[idx].clone();
        debug_assert_eq!(x.len(), d);
        evaluate(x, iter, &mut state, &mut xs, &mut ys, &mut cs);
    }
    Ok(state)
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x.len());
    let k = rows.first().map_or(0, |r| r.constraints.len());
    let mut header = vec!["iter".to_string()];
    header.extend(x_headers(dim));
    header.push("y".into());
    header.extend((1..=k).map(|i| format!("constraint_{i}")));
    header.extend(["is_feasible", "y_best_so_far"].map(String::from));
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![r.iter.to_string()];
            v.extend(r.x.iter().map(|x| fmt_csv(*x)));
            v.push(fmt_csv(r.y));
            v.extend(r.constraints.iter().map(|c| fmt_csv(*c)));
            v.push(r.is_feasible.to_string());
            v.push(fmt_csv(r.y_best_so_far));
            v
        }),
    )
}
