//! Failure-probability estimation: plain and importance-sampling Monte
//! Carlo, AK-MCS active learning, and the epistemic moments of the
//! GP-induced probability estimate.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::design::{argmax, argmin};
use crate::dist::{rng_from_seed, sub_seed, InputDistribution};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpPosterior, PriorMean, PriorMeanFamily};
use crate::hyper::{fit_hyperparameters, FitOptions};
use crate::io::{fmt_csv, write_csv, x_headers};
use crate::kernel::KernelSpec;
use crate::model::Counted;
use crate::stats::{bvn_cdf_clamped, norm_cdf, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskUtility {
    MonteCarlo,
    ImportanceSampling,
    Eff,
    U,
    Sur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEstimate {
    pub p_hat: f64,
    pub epistemic_mean: f64,
    pub epistemic_variance: f64,
    pub n_model_evals: usize,
    pub n_mc: usize,
    pub utility_used: RiskUtility,
    /// Sampling variance of `p_hat` as a plain MC / IS estimator.
    pub mc_variance: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FailureEstimate {
    fn sampled(p: f64, var: f64, evals: usize, n: usize, utility: RiskUtility, warnings: Vec<String>) -> Self {
        Self {
            p_hat: p,
            epistemic_mean: p,
            epistemic_variance: 0.0,
            n_model_evals: evals,
            n_mc: n,
            utility_used: utility,
            mc_variance: var,
            converged: true,
            warnings,
        }
    }
}

/// Plain Monte Carlo estimate of P[g(x) < 0], x ~ π.
pub fn mc_failure_prob<F: FnMut(&[f64]) -> f64>(
    g: &mut Counted<F>,
    pi: &dyn InputDistribution,
    n: usize,
    seed: u64,
) -> Result<FailureEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let start = g.calls();
    let mut fails = 0usize;
    for _ in 0..n {
        let x = pi.sample(&mut rng);
        if g.call(&x) < 0.0 {
            fails += 1;
        }
    }
    let p = fails as f64 / n as f64;
    Ok(FailureEstimate::sampled(
        p,
        p * (1.0 - p) / n as f64,
        g.calls() - start,
        n,
        RiskUtility::MonteCarlo,
        Vec::new(),
    ))
}

/// Importance-sampling estimate with draws from `biased` and weights π/π*.
pub fn is_failure_prob<F: FnMut(&[f64]) -> f64>(
    g: &mut Counted<F>,
    pi: &dyn InputDistribution,
    biased: &dyn InputDistribution,
    n: usize,
    seed: u64,
) -> Result<FailureEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let start = g.calls();
    let mut terms = Vec::with_capacity(n);
    let mut max_w = 0.0f64;
    for _ in 0..n {
        let x = biased.sample(&mut rng);
        let t = if g.call(&x) < 0.0 {
            let w = (pi.ln_pdf(&x) - biased.ln_pdf(&x)).exp();
            max_w = max_w.max(w);
            w
        } else {
            0.0
        };
        terms.push(t);
    }
    let mut warnings = Vec::new();
    if max_w > 1e12 {
        warnings.push(format!("importance weight {max_w:e} exceeds 1e12"));
    }
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / ((n - 1) * n) as f64
    } else {
        0.0
    };
    let p = if mean > 1.0 {
        warnings.push(format!("raw estimate {mean} clamped to 1"));
        1.0
    } else {
        mean
    };
    Ok(FailureEstimate::sampled(p, var, g.calls() - start, n, RiskUtility::ImportanceSampling, warnings))
}

/// Expected feasibility E[(ε − |G|)⁺] for G ~ N(u, σ²).
pub fn eff(u: f64, sigma: f64, eps: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("EFF needs σ > 0 and ε > 0 (σ={sigma}, ε={eps})")));
    }
    let z0 = -u / sigma;
    let zm = (-eps - u) / sigma;
    let zp = (eps - u) / sigma;
    let v = u * (2.0 * norm_cdf(z0) - norm_cdf(zm) - norm_cdf(zp))
        - sigma * (2.0 * norm_pdf(z0) - norm_pdf(zm) - norm_pdf(zp))
        + eps * (norm_cdf(zp) - norm_cdf(zm));
    Ok(v.max(0.0))
}

/// Learning function |u|/σ.
pub fn u_function(u: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("U needs σ > 0, got {sigma}")));
    }
    Ok(u.abs() / sigma)
}

/// Node-averaged misclassification probability after adding each candidate,
/// with the posterior mean held fixed.
pub fn sur_scores(gp: &GpPosterior, candidates: &[Vec<f64>], nodes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if nodes.is_empty() {
        return Err(Error::InvalidInput("no integration nodes".into()));
    }
    let (node_mean, node_var) = gp.predict_batch(nodes)?;
    let v_nodes = gp.cross_half(nodes);
    let v_cand = gp.cross_half(candidates);
    let k = gp.kernel();
    let nu2 = k.noise_variance;
    let mut out = Vec::with_capacity(candidates.len());
    for (c, x) in candidates.iter().enumerate() {
        let vc = v_cand.column(c);
        let denom = (k.eval_unchecked(x, x) - vc.norm_squared()).max(0.0) + nu2;
        let mut total = 0.0;
        for (j, node) in nodes.iter().enumerate() {
            let reduction = if denom > 0.0 {
                let cov = k.eval_unchecked(node, x) - v_nodes.column(j).dot(&vc);
                cov * cov / denom
            } else {
                0.0
            };
            let s2 = (node_var[j] - reduction).max(0.0);
            total += misclassification(node_mean[j], s2.sqrt());
        }
        out.push(total / nodes.len() as f64);
    }
    Ok(out)
}

/// Φ(−|u|/σ), zero when σ = 0.
fn misclassification(u: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        norm_cdf(-u.abs() / sigma)
    } else {
        0.0
    }
}

/// SUR value of a single candidate.
pub fn sur_utility(gp: &GpPosterior, candidate: &[f64], nodes: &[Vec<f64>]) -> Result<f64> {
    Ok(sur_scores(gp, &[candidate.to_vec()], nodes)?[0])
}

/// The `k` smallest U values among `points` not flagged in `skip`, found
/// exactly with a bound |u|/σ_prior ≤ U that prunes most variance solves.
/// Returns (U, index) in ascending order, ties by index.
fn smallest_u(
    gp: &GpPosterior,
    points: &[Vec<f64>],
    means: &[f64],
    skip: &[bool],
    k: usize,
) -> Result<Vec<(f64, usize)>> {
    let kern = gp.kernel();
    let mut order: Vec<(f64, usize)> = (0..points.len())
        .filter(|&i| !skip[i])
        .map(|i| {
            let sp = kern.eval_unchecked(&points[i], &points[i]).sqrt();
            (means[i].abs() / sp, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (bound, i) in order {
        if best.len() == k && bound > best[k - 1].0 {
            break;
        }
        let (_, var) = gp.predict(&points[i])?;
        let s = var.sqrt();
        let u = if s > 0.0 { means[i].abs() / s } else { f64::INFINITY };
        let pos = best.partition_point(|&(v, j)| v < u || (v == u && j < i));
        if pos < k {
            best.insert(pos, (u, i));
            best.truncate(k);
        }
    }
    Ok(best)
}

/// E[P̃] and VAR[P̃] over the given nodes.
///
/// The variance is the mean over distinct node pairs of
/// Φ₂(−uᵢ/σᵢ, −uⱼ/σⱼ; ρᵢⱼ) − Φ(−uᵢ/σᵢ)Φ(−uⱼ/σⱼ), using every pair when
/// there are at most `max_pairs` of them and seeded rounds of random
/// perfect matchings otherwise.
pub fn ptilde_moments_at(gp: &GpPosterior, nodes: &[Vec<f64>], max_pairs: usize, seed: u64) -> Result<(f64, f64)> {
    let n = nodes.len();
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two nodes".into()));
    }
    let (means, vars) = gp.predict_batch(nodes)?;
    let sig: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
    let p: Vec<f64> = (0..n)
        .map(|i| {
            if sig[i] > 0.0 {
                norm_cdf(-means[i] / sig[i])
            } else if means[i] < 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mean = p.iter().sum::<f64>() / n as f64;

    let v = gp.cross_half(nodes);
    let kern = gp.kernel();
    let pair_term = |i: usize, j: usize| -> f64 {
        if sig[i] == 0.0 || sig[j] == 0.0 {
            return 0.0;
        }
        let cov = kern.eval_unchecked(&nodes[i], &nodes[j]) - v.column(i).dot(&v.column(j));
        let rho = cov / (sig[i] * sig[j]);
        bvn_cdf_clamped(-means[i] / sig[i], -means[j] / sig[j], rho) - p[i] * p[j]
    };
    let total_pairs = n * (n - 1) / 2;
    let mut acc = 0.0;
    let count;
    if total_pairs <= max_pairs {
        for i in 0..n {
            for j in 0..i {
                acc += pair_term(i, j);
            }
        }
        count = total_pairs;
    } else {
        // Rounds of random perfect matchings: every node enters each round
        // once, which balances the pair sample across nodes.
        let mut rng = rng_from_seed(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut used = 0;
        while used < max_pairs {
            perm.shuffle(&mut rng);
            for pair in perm.chunks_exact(2) {
                if used == max_pairs {
                    break;
                }
                acc += pair_term(pair[0], pair[1]);
                used += 1;
            }
        }
        count = max_pairs;
    }
    let var = (acc / count as f64).max(0.0);
    Ok((mean, var))
}

/// Node average of Φ(−u/σ) over many points, in chunks.
fn mean_failure_probability(gp: &GpPosterior, nodes: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in nodes.chunks(8192) {
        let (means, vars) = gp.predict_batch(chunk)?;
        for (u, v) in means.iter().zip(&vars) {
            let s = v.sqrt();
            total += if s > 0.0 {
                norm_cdf(-u / s)
            } else if *u < 0.0 {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(total / nodes.len() as f64)
}

/// [`ptilde_moments_at`] on `n_outer` stratified draws from π.
pub fn ptilde_moments(gp: &GpPosterior, pi: &dyn InputDistribution, n_outer: usize, seed: u64) -> Result<(f64, f64)> {
    let nodes = pi.sample_stratified(n_outer, &mut rng_from_seed(sub_seed(seed, 0)));
    ptilde_moments_at(gp, &nodes, 100_000, sub_seed(seed, 1))
}

/// AK-MCS settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AkMcsOptions {
    pub n_mc: usize,
    pub n_initial: usize,
    pub budget: usize,
    pub utility: RiskUtility,
    /// Defaults: U → 2 (stop when min U ≥ 2), EFF → 1e-3, SUR → 1e-4.
    pub stop_threshold: Option<f64>,
    /// EFF half-width ε; `None` means 2σ(x) pointwise.
    pub eff_epsilon: Option<f64>,
    /// Kernel template; `None` means an anisotropic SE kernel scaled to S.
    pub kernel: Option<KernelSpec>,
    pub prior_mean: PriorMeanFamily,
    pub fit: FitOptions,
    /// SUR scores only this many lowest-U candidates ...
    pub sur_candidates: usize,
    /// ... against this many fixed nodes subsampled from S.
    pub sur_nodes: usize,
    /// Nodes subsampled from S for the epistemic moments.
    pub moment_nodes: usize,
    pub seed: u64,
}

impl Default for AkMcsOptions {
    fn default() -> Self {
        Self {
            n_mc: 100_000,
            n_initial: 12,
            budget: 60,
            utility: RiskUtility::U,
            stop_threshold: None,
            eff_epsilon: None,
            kernel: None,
            prior_mean: PriorMeanFamily::Constant,
            fit: FitOptions::default(),
            sur_candidates: 200,
            sur_nodes: 1000,
            moment_nodes: 2000,
            seed: 0,
        }
    }
}

/// One true-model query of the active-learning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub iter: usize,
    pub x: Vec<f64>,
    pub g_value: f64,
    /// Utility of the selected point; NaN for the initial design.
    pub utility_value: f64,
    /// Plug-in estimate before this query; NaN for the initial design.
    pub p_hat_current: f64,
}

#[derive(Debug, Clone)]
pub struct AkMcsResult {
    pub estimate: FailureEstimate,
    pub audit: Vec<AuditRow>,
    pub gp: GpPosterior,
}

pub fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.x.len());
    let mut header = vec!["iter".to_string()];
    header.extend(x_headers(dim));
    header.extend(["g_value", "utility_value", "p_hat_current"].map(String::from));
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![r.iter.to_string()];
            v.extend(r.x.iter().map(|x| fmt_csv(*x)));
            v.extend([fmt_csv(r.g_value), fmt_csv(r.utility_value), fmt_csv(r.p_hat_current)]);
            v
        }),
    )
}

fn default_kernel(points: &[Vec<f64>], ys: &[f64]) -> KernelSpec {
    let d = points[0].len();
    let n = points.len() as f64;
    let scales: Vec<f64> = (0..d)
        .map(|j| {
            let m = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let v = points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let yv = ys.iter().map(|y| (y - ym).powi(2)).sum::<f64>() / ys.len() as f64;
    let mut k = KernelSpec::se(if yv > 0.0 { yv } else { 1.0 }, 1.0);
    k.length_scales = scales;
    k
}

/// Refits hyperparameters warm-started from `kernel`, falling back to the
/// previous hyperparameters if every restart fails.
pub(crate) fn refit(
    kernel: &KernelSpec,
    family: PriorMeanFamily,
    data: &Dataset,
    fit: &FitOptions,
    seed: u64,
) -> Result<(KernelSpec, GpPosterior)> {
    let mean = PriorMean::fit_ols(family, data);
    let opts = FitOptions { seed, ..fit.clone() };
    match fit_hyperparameters(kernel, &mean, data, &opts) {
        Ok(r) => Ok(r),
        Err(_) => {
            let gp = GpPosterior::fit(kernel.clone(), mean, data.clone())?;
            Ok((kernel.clone(), gp))
        }
    }
}

/// Active-Kriging Monte Carlo simulation.
///
/// 1. Draw the population S of `n_mc` points from π.
/// 2. Evaluate g on `n_initial` random members of S.
/// 3. Refit the GP and select the next member of S by the utility, until
///    the stopping rule holds or the budget is spent.
/// 4. Estimate P[g < 0] from the sign of the GP mean over S.
pub fn akmcs_run<F: FnMut(&[f64]) -> f64>(
    g: &mut Counted<F>,
    pi: &dyn InputDistribution,
    opts: &AkMcsOptions,
) -> Result<AkMcsResult> {
    let d = pi.dim();
    if opts.n_initial < d + 1 || opts.budget < opts.n_initial || opts.n_mc < opts.n_initial {
        return Err(Error::InvalidParameter(format!(
            "need d+1 <= n_initial <= budget and n_initial <= N (n_initial={}, budget={}, N={})",
            opts.n_initial, opts.budget, opts.n_mc
        )));
    }
    let seed = opts.seed;
    let population = pi.sample_n(opts.n_mc, &mut rng_from_seed(sub_seed(seed, 0)));
    let initial = sample_indices(&mut rng_from_seed(sub_seed(seed, 1)), opts.n_mc, opts.n_initial).into_vec();
    let sur_nodes: Vec<Vec<f64>> = sample_indices(&mut rng_from_seed(sub_seed(seed, 2)), opts.n_mc, opts.sur_nodes.min(opts.n_mc))
        .into_iter()
        .map(|i| population[i].clone())
        .collect();
    let threshold = opts.stop_threshold.unwrap_or(match opts.utility {
        RiskUtility::Eff => 1e-3,
        RiskUtility::Sur => 1e-4,
        _ => 2.0,
    });

    let start_calls = g.calls();
    let mut in_train = vec![false; opts.n_mc];
    let mut data = Dataset::empty(d)?;
    let mut audit = Vec::new();
    for &i in &initial {
        let y = g.call(&population[i]);
        data.push(population[i].clone(), y)?;
        in_train[i] = true;
        audit.push(AuditRow {
            iter: 0,
            x: population[i].clone(),
            g_value: y,
            utility_value: f64::NAN,
            p_hat_current: f64::NAN,
        });
    }
    let mut kernel = opts
        .kernel
        .clone()
        .unwrap_or_else(|| default_kernel(&population, data.responses()));
    let mut warnings = Vec::new();
    let mut iter = 0usize;
    let (gp, converged) = loop {
        let fit = if iter == 0 {
            opts.fit.clone()
        } else {
            FitOptions { restarts: 1, ..opts.fit.clone() }
        };
        let (k, gp) = refit(&kernel, opts.prior_mean, &data, &fit, sub_seed(seed, 100 + iter as u64))?;
        kernel = k;
        let means = gp.mean_batch(&population);
        let p_now = means.iter().filter(|&&u| u < 0.0).count() as f64 / opts.n_mc as f64;

        let (idx, value, stop) = match opts.utility {
            RiskUtility::U => match smallest_u(&gp, &population, &means, &in_train, 1)?.first() {
                Some(&(u, i)) => (Some(i), u, u >= threshold),
                None => (None, f64::NAN, true),
            },
            RiskUtility::Eff => {
                let (_, vars) = gp.predict_batch(&population)?;
                let scores: Vec<f64> = (0..opts.n_mc)
                    .map(|i| {
                        let s = vars[i].sqrt();
                        if in_train[i] || s <= 0.0 {
                            return f64::NAN;
                        }
                        eff(means[i], s, opts.eff_epsilon.unwrap_or(2.0 * s)).unwrap_or(f64::NAN)
                    })
                    .collect();
                match argmax(scores.iter().copied()) {
                    Some(i) => (Some(i), scores[i], scores[i] <= threshold),
                    None => (None, f64::NAN, true),
                }
            }
            RiskUtility::Sur => {
                let cands = smallest_u(&gp, &population, &means, &in_train, opts.sur_candidates)?;
                let pts: Vec<Vec<f64>> = cands.iter().map(|&(_, i)| population[i].clone()).collect();
                if pts.is_empty() {
                    (None, f64::NAN, true)
                } else {
                    let scores = sur_scores(&gp, &pts, &sur_nodes)?;
                    let j = argmin(scores.iter().copied()).unwrap_or(0);
                    (Some(cands[j].1), scores[j], scores[j] <= threshold)
                }
            }
            other => {
                return Err(Error::InvalidParameter(format!("{other:?} is not an active-learning utility")))
            }
        };
        if stop {
            break (gp, true);
        }
        if data.len() >= opts.budget {
            warnings.push("budget exhausted before the stopping rule was met".into());
            break (gp, false);
        }
        let i = idx.expect("a candidate exists when not stopping");
        iter += 1;
        let y = g.call(&population[i]);
        in_train[i] = true;
        audit.push(AuditRow {
            iter,
            x: population[i].clone(),
            g_value: y,
            utility_value: value,
            p_hat_current: p_now,
        });
        data.push(population[i].clone(), y)?;
    };

    let means = gp.mean_batch(&population);
    let p_hat = means.iter().filter(|&&u| u < 0.0).count() as f64 / opts.n_mc as f64;
    let moment_nodes: Vec<Vec<f64>> =
        sample_indices(&mut rng_from_seed(sub_seed(seed, 3)), opts.n_mc, opts.moment_nodes.clamp(2, opts.n_mc))
            .into_iter()
            .map(|i| population[i].clone())
            .collect();
    let (_, e_var) = ptilde_moments_at(&gp, &moment_nodes, 100_000, sub_seed(seed, 4))?;
    let e_mean = mean_failure_probability(&gp, &population)?;
    Ok(AkMcsResult {
        estimate: FailureEstimate {
            p_hat,
            epistemic_mean: e_mean,
            epistemic_variance: e_var,
            n_model_evals: g.calls() - start_calls,
            n_mc: opts.n_mc,
            utility_used: opts.utility,
            mc_variance: p_hat * (1.0 - p_hat) / opts.n_mc as f64,
            converged,
            warnings,
        },
        audit,
        gp,
    })
}
