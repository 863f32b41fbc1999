//! Bayesian parameter estimation: random-walk Metropolis–Hastings, GP
//! surrogates of the log joint density (BAPE) and the adaptive variant
//! that factors a running posterior approximation out of the surrogate.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{argmax, lhs_sample, Domain};
use crate::dist::{rng_from_seed, sub_seed, InputDistribution, MultivariateNormal, ProductDistribution};
use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, GpPosterior, PriorMeanFamily};
use crate::hyper::FitOptions;
use crate::io::{fmt_csv, write_csv, x_headers};
use crate::kernel::KernelSpec;
use crate::risk::refit;

/// Log joint density l(x) = log π(y|x) + log π(x) with a forward-model
/// call counter.
pub struct LogJointModel<'a> {
    log_likelihood: Box<dyn FnMut(&[f64]) -> f64 + 'a>,
    log_prior: Box<dyn Fn(&[f64]) -> f64 + 'a>,
    calls: usize,
}

impl<'a> LogJointModel<'a> {
    pub fn new(log_likelihood: impl FnMut(&[f64]) -> f64 + 'a, log_prior: impl Fn(&[f64]) -> f64 + 'a) -> Self {
        Self {
            log_likelihood: Box::new(log_likelihood),
            log_prior: Box::new(log_prior),
            calls: 0,
        }
    }

    pub fn with_prior(log_likelihood: impl FnMut(&[f64]) -> f64 + 'a, prior: &'a ProductDistribution) -> Self {
        Self::new(log_likelihood, move |x| prior.ln_pdf(x))
    }

    /// Evaluates l(x); every call counts as one forward-model run.
    pub fn eval(&mut self, x: &[f64]) -> f64 {
        self.calls += 1;
        (self.log_likelihood)(x) + (self.log_prior)(x)
    }

    pub fn log_prior(&self, x: &[f64]) -> f64 {
        (self.log_prior)(x)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    /// Post-burn-in states, one row per step.
    pub samples: Vec<Vec<f64>>,
    pub log_target: Vec<f64>,
    /// Fraction of accepted proposals over all steps.
    pub acceptance_rate: f64,
    pub seed: u64,
}

impl McmcChain {
    pub fn mean(&self) -> Vec<f64> {
        let d = self.samples.first().map_or(0, Vec::len);
        let n = self.samples.len() as f64;
        (0..d).map(|j| self.samples.iter().map(|s| s[j]).sum::<f64>() / n).collect()
    }

    /// Per-coordinate sample standard deviation.
    pub fn std(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.samples.len() as f64;
        m.iter()
            .enumerate()
            .map(|(j, mj)| (self.samples.iter().map(|s| (s[j] - mj).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect()
    }

    /// Every `k`-th sample.
    pub fn thinned(&self, k: usize) -> Vec<Vec<f64>> {
        self.samples.iter().step_by(k.max(1)).cloned().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.samples.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend(x_headers(d));
        header.push("log_target".into());
        write_csv(
            path,
            &header,
            self.samples.iter().zip(&self.log_target).enumerate().map(|(i, (s, l))| {
                let mut row = vec![i.to_string()];
                row.extend(s.iter().map(|v| fmt_csv(*v)));
                row.push(fmt_csv(*l));
                row
            }),
        )
    }
}

/// Gaussian random-walk Metropolis–Hastings. Runs `t` steps in total and
/// keeps the last `t - burn_in` states.
pub fn mh_sample(
    log_target: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    proposal_std: &[f64],
    t: usize,
    burn_in: usize,
    seed: u64,
) -> Result<McmcChain> {
    check_dim(x0.len(), proposal_std.len())?;
    if t <= burn_in {
        return Err(Error::InvalidParameter(format!("chain length {t} must exceed burn-in {burn_in}")));
    }
    if proposal_std.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("proposal std must be positive".into()));
    }
    let mut x = x0.to_vec();
    let mut lx = log_target(&x);
    if lx == f64::NEG_INFINITY || lx.is_nan() {
        return Err(Error::InvalidInitialState);
    }
    let mut rng = rng_from_seed(seed);
    let mut samples = Vec::with_capacity(t - burn_in);
    let mut values = Vec::with_capacity(t - burn_in);
    let mut accepted = 0usize;
    let mut prop = vec![0.0; x.len()];
    for step in 0..t {
        for (p, (xi, s)) in prop.iter_mut().zip(x.iter().zip(proposal_std)) {
            let z: f64 = rng.sample(StandardNormal);
            *p = xi + s * z;
        }
        let u: f64 = rng.random();
        let lp = log_target(&prop);
        // Symmetric proposal: the q-ratio cancels.
        if u.ln() < lp - lx {
            x.copy_from_slice(&prop);
            lx = lp;
            accepted += 1;
        }
        if step >= burn_in {
            samples.push(x.clone());
            values.push(lx);
        }
    }
    Ok(McmcChain {
        samples,
        log_target: values,
        acceptance_rate: accepted as f64 / t as f64,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationUtility {
    Ev,
    Ee,
}

/// log of the lognormal variance exp(2u+σ²)(exp(σ²)−1); −∞ when σ² = 0.
pub fn log_ev(u: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    2.0 * u + var + var.exp_m1().ln()
}

pub fn ev(u: f64, var: f64) -> f64 {
    log_ev(u, var).exp()
}

/// Lognormal differential entropy u + ½log(2πeσ²); −∞ when σ² = 0.
pub fn ee(u: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    u + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
}

/// Exponentiated-variance utility on the log scale (argmax-equivalent).
pub fn ev_utility(gp: &GpPosterior, x: &[f64]) -> Result<f64> {
    let (u, v) = gp.predict(x)?;
    Ok(log_ev(u, v))
}

pub fn ee_utility(gp: &GpPosterior, x: &[f64]) -> Result<f64> {
    let (u, v) = gp.predict(x)?;
    Ok(ee(u, v))
}

fn utility_value(kind: CalibrationUtility, u: f64, v: f64) -> f64 {
    match kind {
        CalibrationUtility::Ev => log_ev(u, v),
        CalibrationUtility::Ee => ee(u, v),
    }
}

/// Acquisition box for an unbounded prior: marginal quantiles `q` and `1 - q`.
pub fn prior_domain(prior: &ProductDistribution, q: f64) -> Result<Domain> {
    Domain::new(prior.quantile_box(q))
}

/// Replaces −∞ by (min finite value) − 50.
pub fn floor_log_values(values: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
    let min = values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::InvalidInput("no finite log-joint value to anchor the floor".into()));
    }
    if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::InvalidInput("log-joint values must be finite or -inf".into()));
    }
    let floor = min - 50.0;
    let mut used = false;
    let out = values
        .iter()
        .map(|&v| {
            if v == f64::NEG_INFINITY {
                used = true;
                floor
            } else {
                v
            }
        })
        .collect();
    Ok((out, used.then_some(floor)))
}

fn template(domain: &Domain, ys: &[f64]) -> KernelSpec {
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
    let mut k = KernelSpec::se(if v > 0.0 { v } else { 1.0 }, 1.0);
    k.length_scales = domain.bounds.iter().map(|(lo, hi)| 0.2 * (hi - lo)).collect();
    k
}

/// Settings shared by [`bape_run`] and [`agp_iterate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub m0: usize,
    /// Total number of log-joint evaluations.
    pub budget: usize,
    pub utility: CalibrationUtility,
    pub pool_size: usize,
    pub kernel: Option<KernelSpec>,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            m0: 5,
            budget: 25,
            utility: CalibrationUtility::Ev,
            pool_size: 1000,
            kernel: None,
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BapeResult {
    /// GP of l(x) (floored values).
    pub gp: GpPosterior,
    pub queries: Vec<Vec<f64>>,
    /// Raw l values, possibly −∞.
    pub values: Vec<f64>,
    /// Floor substituted for −∞ values in the last fit, if any.
    pub floor: Option<f64>,
    pub n_evals: usize,
}

struct Surrogate {
    kernel: KernelSpec,
    fits: u64,
}

impl Surrogate {
    fn fit(&mut self, xs: &[Vec<f64>], ys: Vec<f64>, opts: &CalibrationOptions) -> Result<GpPosterior> {
        let data = Dataset::new(xs.to_vec(), ys)?;
        let fit = FitOptions {
            optimize_noise: Some(false),
            restarts: if self.fits == 0 { opts.fit.restarts } else { 1 },
            ..opts.fit.clone()
        };
        let (k, gp) = refit(&self.kernel, PriorMeanFamily::Constant, &data, &fit, sub_seed(opts.seed, 100 + self.fits))?;
        self.kernel = k;
        self.fits += 1;
        Ok(gp)
    }
}

fn fresh_pool(domain: &Domain, n: usize, seed: u64, queried: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let pool = lhs_sample(domain, n, seed)?;
    Ok(pool.points.into_iter().filter(|p| !queried.contains(p)).collect())
}

/// Active GP approximation of the log joint density: LHS initial design,
/// then refit, query the utility maximizer over a fresh pool and augment
/// until `budget` evaluations.
pub fn bape_run(log_joint: &mut LogJointModel<'_>, domain: &Domain, opts: &CalibrationOptions) -> Result<BapeResult> {
    domain.validate()?;
    if opts.m0 < 2 || opts.budget < opts.m0 {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= m0 <= M (m0={}, M={})",
            opts.m0, opts.budget
        )));
    }
    let init = lhs_sample(domain, opts.m0, sub_seed(opts.seed, 0))?;
    let mut xs = init.points;
    let mut values: Vec<f64> = xs.iter().map(|x| log_joint.eval(x)).collect();
    let (floored, _) = floor_log_values(&values)?;
    let mut sur = Surrogate {
        kernel: opts.kernel.clone().unwrap_or_else(|| template(domain, &floored)),
        fits: 0,
    };
    let mut iter = 0u64;
    loop {
        let (floored, floor) = floor_log_values(&values)?;
        let gp = sur.fit(&xs, floored, opts)?;
        if xs.len() >= opts.budget {
            return Ok(BapeResult {
                gp,
                queries: xs,
                values,
                floor,
                n_evals: log_joint.calls(),
            });
        }
        iter += 1;
        let pool = fresh_pool(domain, opts.pool_size, sub_seed(opts.seed, iter), &xs)?;
        if pool.is_empty() {
            return Err(Error::InvalidInput("candidate pool is empty after excluding queried points".into()));
        }
        let (means, vars) = gp.predict_batch(&pool)?;
        let idx = argmax(means.iter().zip(&vars).map(|(u, v)| utility_value(opts.utility, *u, *v)))
            .unwrap_or(0);
        let x = pool[idx].clone();
        values.push(log_joint.eval(&x));
        xs.push(x);
    }
}

/// MH on the surrogate posterior ∝ exp(u(x)) restricted to the domain box,
/// started at the best training point.
pub fn surrogate_mh(
    gp: &GpPosterior,
    domain: &Domain,
    proposal_std: &[f64],
    t: usize,
    burn_in: usize,
    seed: u64,
) -> Result<McmcChain> {
    let data = gp.data();
    let best = argmax(data.responses().iter().copied())
        .ok_or_else(|| Error::InvalidInput("surrogate has no training data".into()))?;
    let x0 = data.inputs()[best].clone();
    let mut target = |x: &[f64]| {
        if domain.contains(x) {
            gp.mean_unchecked(x)
        } else {
            f64::NEG_INFINITY
        }
    };
    mh_sample(&mut target, &x0, proposal_std, t, burn_in, seed)
}

/// Proposal scale of 1/20 of each box side.
pub fn default_proposal(domain: &Domain) -> Vec<f64> {
    domain.bounds.iter().map(|(lo, hi)| (hi - lo) / 20.0).collect()
}

/// Posterior approximation factored out of the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub enum ApproxPosterior {
    /// Uniform on the domain box.
    Uniform(Vec<(f64, f64)>),
    Gaussian(MultivariateNormal),
}

impl ApproxPosterior {
    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        match self {
            ApproxPosterior::Uniform(b) => {
                if x.iter().zip(b).all(|(v, (lo, hi))| v >= lo && v <= hi) {
                    -b.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
            ApproxPosterior::Gaussian(g) => g.ln_pdf(x),
        }
    }

    /// Random-walk scale matched to the approximation.
    fn proposal(&self, domain: &Domain) -> Vec<f64> {
        match self {
            ApproxPosterior::Uniform(_) => default_proposal(domain),
            ApproxPosterior::Gaussian(g) => {
                let d = g.dim() as f64;
                let c = g.covariance();
                (0..g.dim()).map(|i| 2.38 / d.sqrt() * c[(i, i)].sqrt()).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgpRound {
    pub q: ApproxPosterior,
    /// GP of g = l − log q on the training set at the end of the round.
    pub gp: GpPosterior,
    /// Set when the density estimate failed and the previous q was inflated.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct AgpResult {
    /// Round 0 holds q₀ and the initial fit; round n holds qₙ and g̃ₙ.
    pub rounds: Vec<AgpRound>,
    pub queries: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub n_evals: usize,
}

impl AgpResult {
    pub fn last(&self) -> &AgpRound {
        self.rounds.last().expect("at least one round")
    }

    /// MH on exp(g̃)q for the final round.
    pub fn sample(&self, domain: &Domain, t: usize, burn_in: usize, seed: u64) -> Result<McmcChain> {
        let r = self.last();
        agp_mh(r, domain, t, burn_in, seed)
    }
}

fn agp_mh(round: &AgpRound, domain: &Domain, t: usize, burn_in: usize, seed: u64) -> Result<McmcChain> {
    let data = round.gp.data();
    let log_q = |x: &[f64]| round.q.ln_pdf(x);
    let start = argmax(data.inputs().iter().zip(data.responses()).map(|(x, g)| g + log_q(x)))
        .ok_or_else(|| Error::InvalidInput("surrogate has no training data".into()))?;
    let x0 = data.inputs()[start].clone();
    let mut target = |x: &[f64]| {
        if domain.contains(x) {
            round.gp.mean_unchecked(x) + log_q(x)
        } else {
            f64::NEG_INFINITY
        }
    };
    mh_sample(&mut target, &x0, &round.q.proposal(domain), t, burn_in, seed)
}

/// Settings for the adaptive rounds of [`agp_iterate`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgpOptions {
    pub base: CalibrationOptions,
    pub n_rounds: usize,
    pub samples_per_round: usize,
    pub burn_in: usize,
    /// Every k-th MH sample joins the candidate pool.
    pub thin: usize,
}

impl Default for AgpOptions {
    fn default() -> Self {
        Self {
            base: CalibrationOptions::default(),
            n_rounds: 4,
            samples_per_round: 5000,
            burn_in: 500,
            thin: 10,
        }
    }
}

/// Adaptive GP iteration. Each round samples exp(g̃ₙ)qₙ by MH, queries
/// l at utility maximizers, moment-matches a Gaussian qₙ₊₁ to the samples
/// and refits g on l − log qₙ₊₁ over the stored evaluations. The
/// (budget − m0) queries are spread evenly over the rounds.
pub fn agp_iterate(log_joint: &mut LogJointModel<'_>, domain: &Domain, opts: &AgpOptions) -> Result<AgpResult> {
    let base = &opts.base;
    domain.validate()?;
    if opts.n_rounds == 0 {
        return Err(Error::InvalidParameter("need at least one round".into()));
    }
    if base.m0 < 2 || base.budget < base.m0 {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= m0 <= M (m0={}, M={})",
            base.m0, base.budget
        )));
    }
    let init = lhs_sample(domain, base.m0, sub_seed(base.seed, 0))?;
    let mut xs = init.points;
    let mut values: Vec<f64> = xs.iter().map(|x| log_joint.eval(x)).collect();
    let residual = |q: &ApproxPosterior, xs: &[Vec<f64>], values: &[f64]| -> Result<Vec<f64>> {
        let (l, _) = floor_log_values(values)?;
        Ok(xs.iter().zip(l).map(|(x, l)| l - q.ln_pdf(x)).collect())
    };
    let mut q = ApproxPosterior::Uniform(domain.bounds.clone());
    let g0 = residual(&q, &xs, &values)?;
    let mut sur = Surrogate {
        kernel: base.kernel.clone().unwrap_or_else(|| template(domain, &g0)),
        fits: 0,
    };
    let gp = sur.fit(&xs, g0, base)?;
    let mut rounds = vec![AgpRound {
        q: q.clone(),
        gp,
        fallback: false,
    }];
    let extra = base.budget - base.m0;
    let mut pool_stream = 0u64;
    for n in 0..opts.n_rounds {
        let current = rounds.last().expect("nonempty").clone();
        let chain = agp_mh(
            &current,
            domain,
            opts.samples_per_round + opts.burn_in,
            opts.burn_in,
            sub_seed(base.seed, 10_000 + n as u64),
        )?;
        let quota = extra / opts.n_rounds + usize::from(n < extra % opts.n_rounds);
        let mut gp = current.gp.clone();
        for k in 0..quota {
            if k > 0 {
                gp = sur.fit(&xs, residual(&q, &xs, &values)?, base)?;
            }
            pool_stream += 1;
            let mut pool = fresh_pool(domain, base.pool_size, sub_seed(base.seed, pool_stream), &xs)?;
            pool.extend(chain.thinned(opts.thin).into_iter().filter(|p| !xs.contains(p)));
            pool.dedup();
            if pool.is_empty() {
                return Err(Error::InvalidInput("candidate pool is empty".into()));
            }
            let (means, vars) = gp.predict_batch(&pool)?;
            let idx = argmax(
                pool.iter()
                    .zip(means.iter().zip(&vars))
                    .map(|(x, (u, v))| utility_value(base.utility, u + q.ln_pdf(x), *v)),
            )
            .unwrap_or(0);
            let x = pool.swap_remove(idx);
            values.push(log_joint.eval(&x));
            xs.push(x);
        }
        let (next, fallback) = match MultivariateNormal::from_samples(&chain.samples) {
            Ok(g) => (ApproxPosterior::Gaussian(g), false),
            Err(_) => match &q {
                ApproxPosterior::Gaussian(g) => (ApproxPosterior::Gaussian(g.inflated(1.5)?), true),
                u => (u.clone(), true),
            },
        };
        q = next;
        let gp = sur.fit(&xs, residual(&q, &xs, &values)?, base)?;
        rounds.push(AgpRound {
            q: q.clone(),
            gp,
            fallback,
        });
    }
    Ok(AgpResult {
        rounds,
        queries: xs,
        values,
        n_evals: log_joint.calls(),
    })
}

/// Summary written by the calibration front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub posterior_mean: Vec<f64>,
    pub posterior_std: Vec<f64>,
    pub acceptance_rate: f64,
    pub n_model_evals: usize,
}

impl CalibrationReport {
    pub fn from_chain(chain: &McmcChain, n_model_evals: usize) -> Self {
        Self {
            posterior_mean: chain.mean(),
            posterior_std: chain.std(),
            acceptance_rate: chain.acceptance_rate,
            n_model_evals,
        }
    }
}
