//! Drivers for the five pendulum tasks: propagation (UP), rare-event
//! probability (RE), parameter estimation (PE), sensitivity (SA) and
//! optimization under uncertainty (OU).
//!
//! Every driver takes the forward solver as an argument, so callers can
//! instrument it; pass `&mut pendulum_solve` for the RK4 model.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pendulum::{PendulumConfig, Trajectory};
use crate::bayesopt::{bo_run, pof, AcquisitionSpec, BoOptions, ConstraintMode, HistoryRow};
use crate::calibrate::{bape_run, default_proposal, prior_domain, surrogate_mh, CalibrationOptions, LogJointModel};
use crate::design::{lhs_marginals, Domain};
use crate::dist::{rng_from_seed, sub_seed, Marginal, ProductDistribution};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpPosterior, PriorMeanFamily};
use crate::hyper::{fit_hyperparameters, FitOptions};
use crate::kernel::KernelSpec;
use crate::model::Counted;
use crate::quadrature::{bq_active_run, bq_estimate, BqLoopOptions, Embedder};
use crate::risk::{akmcs_run, AkMcsOptions, AuditRow, FailureEstimate, RiskUtility};
use crate::sensitivity::{active_sa_run, ActiveSaOptions, ActiveSaResult, SobolOptions};

/// Forward solver handle.
pub type Solver<'a> = dyn FnMut(&PendulumConfig) -> Result<Trajectory> + 'a;

pub const INPUT_NAMES: [&str; 3] = ["theta0", "L", "g"];

/// Independent input distributions for (θ₀, L, g) plus integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumInputs {
    pub theta0: Marginal,
    #[serde(rename = "L")]
    pub length: Marginal,
    pub g: Marginal,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
}

impl Default for PendulumInputs {
    fn default() -> Self {
        Self {
            theta0: Marginal::Normal { mean: 0.2, std: 0.01 },
            length: Marginal::Normal { mean: 1.0, std: 0.01 },
            g: Marginal::Normal { mean: 9.81, std: 0.05 },
            horizon: 2.0,
            dt: 1e-3,
        }
    }
}

impl PendulumInputs {
    /// Gaussian inputs around (θ₀, L, g) with a common coefficient of variation.
    pub fn with_cv(theta0: f64, length: f64, g: f64, cv: f64) -> Self {
        let n = |m: f64| Marginal::Normal {
            mean: m,
            std: cv * m.abs(),
        };
        Self {
            theta0: n(theta0),
            length: n(length),
            g: n(g),
            ..Default::default()
        }
    }

    pub fn marginals(&self) -> [Marginal; 3] {
        [self.theta0, self.length, self.g]
    }

    pub fn validate(&self) -> Result<()> {
        for m in self.marginals() {
            m.validate()?;
        }
        self.config([0.2, 1.0, 9.81]).validate()
    }

    pub fn config(&self, x: [f64; 3]) -> PendulumConfig {
        PendulumConfig {
            theta0: x[0],
            length: x[1],
            g: x[2],
            horizon: self.horizon,
            dt: self.dt,
        }
    }

    fn reduced(&self) -> Reduced {
        let marg = self.marginals();
        let active: Vec<usize> = (0..3).filter(|&i| !marg[i].is_degenerate()).collect();
        Reduced {
            base: marg.map(|m| m.mean()),
            marginals: active.iter().map(|&i| marg[i]).collect(),
            active,
        }
    }
}

/// Inputs restricted to the dimensions with nonzero spread.
struct Reduced {
    base: [f64; 3],
    active: Vec<usize>,
    marginals: Vec<Marginal>,
}

impl Reduced {
    fn lift(&self, z: &[f64]) -> [f64; 3] {
        let mut x = self.base;
        for (k, &i) in self.active.iter().enumerate() {
            x[i] = z[k];
        }
        x
    }

    fn product(&self) -> Result<ProductDistribution> {
        ProductDistribution::new(self.marginals.clone())
    }

    fn spread(&self, v: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; 3];
        for (k, &i) in self.active.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }
}

fn theta_t(solver: &mut Solver<'_>, inputs: &PendulumInputs, x: [f64; 3]) -> f64 {
    solver(&inputs.config(x)).map_or(f64::NAN, |t| t.final_state().0)
}

fn se_template(marginals: &[Marginal], ys: &[f64]) -> KernelSpec {
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
    let mut k = KernelSpec::se(if v > 0.0 { v } else { 1.0 }, 1.0);
    k.length_scales = marginals.iter().map(|m| 3.0 * m.variance().sqrt()).collect();
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpMethod {
    /// Sample average of the GP mean over π on an LHS design.
    GpMeanMc,
    /// Bayesian quadrature on a variance-reducing sequential design.
    Bq,
}

/// Moments of θ(T) under the input distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpResult {
    pub method: UpMethod,
    pub mean: f64,
    pub variance: f64,
    /// Surrogate (epistemic) variance of `mean`.
    pub mean_epistemic_variance: f64,
    /// Sampling variance of `mean` from the finite node set.
    pub mean_mc_variance: f64,
    /// Spread of `variance` across GP posterior sample paths.
    pub variance_epistemic_variance: f64,
    pub n_model_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpOptions {
    pub n_nodes: usize,
    pub n_paths: usize,
    pub path_nodes: usize,
    pub fit: FitOptions,
}

impl Default for UpOptions {
    fn default() -> Self {
        Self {
            n_nodes: 4000,
            n_paths: 200,
            path_nodes: 300,
            fit: FitOptions::default(),
        }
    }
}

/// Joint posterior draws at `nodes`, one row per path.
fn sample_paths(gp: &GpPosterior, nodes: &[Vec<f64>], n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mean = DVector::from_vec(gp.mean_batch(nodes));
    let cov: DMatrix<f64> = gp.covariance_matrix(nodes)?;
    let eig = SymmetricEigen::new(cov);
    let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut rng = rng_from_seed(seed);
    Ok((0..n_paths)
        .map(|_| {
            let z = DVector::from_fn(nodes.len(), |i, _| scale[i] * rng.sample::<f64, _>(StandardNormal));
            (&mean + &eig.eigenvectors * z).iter().copied().collect()
        })
        .collect())
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Mean and variance of θ(T) from a GP of x ↦ θ(T) built on `budget` runs.
pub fn run_up(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    method: UpMethod,
    budget: usize,
    opts: &UpOptions,
    seed: u64,
) -> Result<UpResult> {
    inputs.validate()?;
    if budget < 5 {
        return Err(Error::InvalidParameter(format!("propagation needs budget >= 5, got {budget}")));
    }
    let red = inputs.reduced();
    let mut f = Counted::new(|z: &[f64]| theta_t(solver, inputs, red.lift(z)));
    if red.active.is_empty() {
        let y = f.call(&[]);
        return Ok(UpResult {
            method,
            mean: y,
            variance: 0.0,
            mean_epistemic_variance: 0.0,
            mean_mc_variance: 0.0,
            variance_epistemic_variance: 0.0,
            n_model_evals: f.calls(),
        });
    }
    let pi = red.product()?;
    let m0 = match method {
        UpMethod::GpMeanMc => budget,
        UpMethod::Bq => (budget / 3).max(5),
    };
    let mut rng = rng_from_seed(sub_seed(seed, 0));
    let xs = lhs_marginals(&red.marginals, m0, &mut rng);
    let ys: Vec<f64> = xs.iter().map(|x| f.call(x)).collect();
    let kernel = se_template(&red.marginals, &ys);
    let data = Dataset::new(xs, ys)?;
    let fit = FitOptions {
        seed: sub_seed(seed, 1),
        optimize_noise: Some(false),
        ..opts.fit.clone()
    };
    let prior = crate::gp::PriorMean::fit_ols(PriorMeanFamily::Constant, &data);
    let (_, mut gp) = fit_hyperparameters(&kernel, &prior, &data, &fit)?;
    let embedder = Embedder::monte_carlo(&pi, opts.n_nodes, sub_seed(seed, 2))?;
    if method == UpMethod::Bq && budget > m0 {
        let design = Embedder::monte_carlo(&pi, 1000, sub_seed(seed, 3))?;
        let loop_opts = BqLoopOptions {
            fit: FitOptions { restarts: 1, ..fit.clone() },
            ..Default::default()
        };
        gp = bq_active_run(|x| f.call(x), gp, &pi, &design, budget - m0, &loop_opts, sub_seed(seed, 4))?;
    }
    let est = bq_estimate(&gp, &embedder.embedding(&gp)?)?;
    let Embedder::MonteCarlo { nodes, .. } = &embedder else {
        unreachable!("Monte Carlo embedder")
    };
    let (_, var_u) = mean_var(&gp.mean_batch(nodes));
    let sub: Vec<Vec<f64>> = nodes.iter().take(opts.path_nodes).cloned().collect();
    let paths = sample_paths(&gp, &sub, opts.n_paths, sub_seed(seed, 5))?;
    let path_vars: Vec<f64> = paths.iter().map(|p| mean_var(p).1).collect();
    Ok(UpResult {
        method,
        mean: est.mean,
        variance: var_u,
        mean_epistemic_variance: est.variance,
        mean_mc_variance: var_u / nodes.len() as f64,
        variance_epistemic_variance: mean_var(&path_vars).1,
        n_model_evals: f.calls(),
    })
}

/// P[θ(T) ≥ θ_max] by AK-MCS on the limit state θ_max − θ(T).
pub fn run_re(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    theta_max: f64,
    budget: usize,
    utility: RiskUtility,
    n_mc: usize,
    seed: u64,
) -> Result<(FailureEstimate, Vec<AuditRow>)> {
    inputs.validate()?;
    if budget < 12 {
        return Err(Error::InvalidParameter(format!("rare-event task needs budget >= 12, got {budget}")));
    }
    let red = inputs.reduced();
    let mut g = Counted::new(|z: &[f64]| theta_max - theta_t(solver, inputs, red.lift(z)));
    if red.active.is_empty() {
        let p = if g.call(&[]) <= 0.0 { 1.0 } else { 0.0 };
        return Ok((
            FailureEstimate {
                p_hat: p,
                epistemic_mean: p,
                epistemic_variance: 0.0,
                n_model_evals: g.calls(),
                n_mc: 0,
                utility_used: utility,
                mc_variance: 0.0,
                converged: true,
                warnings: vec!["all inputs are point masses".into()],
            },
            Vec::new(),
        ));
    }
    let pi = red.product()?;
    let opts = AkMcsOptions {
        n_mc,
        budget,
        utility,
        seed,
        ..Default::default()
    };
    let r = akmcs_run(&mut g, &pi, &opts)?;
    let audit = r
        .audit
        .into_iter()
        .map(|row| AuditRow {
            x: red.spread(&row.x, f64::NAN).iter().zip(red.base).map(|(v, b)| if v.is_nan() { b } else { *v }).collect(),
            ..row
        })
        .collect();
    Ok((r.estimate, audit))
}

/// Observation design for parameter estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeSpec {
    pub obs_times: Vec<f64>,
    pub noise_std: f64,
    /// (θ₀, L, g) used to synthesize the data.
    pub truth: [f64; 3],
}

impl Default for PeSpec {
    fn default() -> Self {
        Self {
            obs_times: (1..=20).map(|i| i as f64 * 0.1).collect(),
            noise_std: 0.01,
            truth: [0.2, 1.0, 9.81],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeOptions {
    pub m0: usize,
    pub pool_size: usize,
    pub mcmc_steps: usize,
    pub burn_in: usize,
    /// Posterior draws pushed through the model for the predictive check.
    pub n_predictive: usize,
}

impl Default for PeOptions {
    fn default() -> Self {
        Self {
            m0: 10,
            pool_size: 2000,
            mcmc_steps: 20_000,
            burn_in: 2000,
            n_predictive: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeResult {
    pub observations: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub posterior_std: Vec<f64>,
    pub truth: Vec<f64>,
    /// |mean − truth| / |truth| per parameter.
    pub relative_error: Vec<f64>,
    /// Fraction of observations inside the 95% posterior predictive band.
    pub coverage: Option<f64>,
    pub acceptance_rate: f64,
    /// Forward solves spent building the surrogate (synthetic data excluded).
    pub n_model_evals: usize,
    /// Forward solves spent on the predictive check.
    pub n_predictive_evals: usize,
}

/// Linear-interpolated percentile of sorted values.
fn percentile(v: &[f64], p: f64) -> f64 {
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Synthesizes noisy angle observations at the truth, then estimates the
/// posterior of the active inputs by BAPE and MH on the surrogate.
pub fn run_pe(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    spec: &PeSpec,
    budget: usize,
    opts: &PeOptions,
    seed: u64,
) -> Result<PeResult> {
    inputs.validate()?;
    if spec.obs_times.is_empty() || spec.obs_times.iter().any(|&t| !(t > 0.0 && t <= inputs.horizon)) {
        return Err(Error::InvalidParameter("observation times must lie in (0, T]".into()));
    }
    if !(spec.noise_std > 0.0) {
        return Err(Error::InvalidParameter("observation noise must be positive".into()));
    }
    let angles = |solver: &mut Solver<'_>, x: [f64; 3]| -> Option<Vec<f64>> {
        let tr = solver(&inputs.config(x)).ok()?;
        spec.obs_times.iter().map(|&t| tr.at(t).ok().map(|s| s.0)).collect()
    };
    let clean = angles(solver, spec.truth).ok_or_else(|| Error::InvalidInput("truth is not a valid configuration".into()))?;
    let mut rng = rng_from_seed(sub_seed(seed, 0));
    let observations: Vec<f64> = clean
        .iter()
        .map(|y| y + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let red = inputs.reduced();
    let truth = spec.truth.to_vec();
    if red.active.is_empty() {
        let mean = red.base.to_vec();
        return Ok(PeResult {
            observations,
            relative_error: mean.iter().zip(&truth).map(|(m, t)| (m - t).abs() / t.abs()).collect(),
            posterior_mean: mean,
            posterior_std: vec![0.0; 3],
            truth,
            coverage: None,
            acceptance_rate: 0.0,
            n_model_evals: 0,
            n_predictive_evals: 0,
        });
    }
    let prior = red.product()?;
    let domain: Domain = prior_domain(&prior, 1e-6)?;
    let n_obs = observations.len() as f64;
    let norm = -n_obs * (spec.noise_std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    let cell = RefCell::new(&mut *solver);
    let log_lik = |z: &[f64]| match angles(*cell.borrow_mut(), red.lift(z)) {
        Some(a) => {
            norm - 0.5
                * a.iter()
                    .zip(&observations)
                    .map(|(a, y)| ((y - a) / spec.noise_std).powi(2))
                    .sum::<f64>()
        }
        None => f64::NEG_INFINITY,
    };
    let mut lj = LogJointModel::with_prior(log_lik, &prior);
    let copts = CalibrationOptions {
        m0: opts.m0.min(budget),
        budget,
        pool_size: opts.pool_size,
        seed: sub_seed(seed, 1),
        ..Default::default()
    };
    let bape = bape_run(&mut lj, &domain, &copts)?;
    let n_model_evals = lj.calls();
    drop(lj);
    let chain = surrogate_mh(
        &bape.gp,
        &domain,
        &default_proposal(&domain),
        opts.mcmc_steps,
        opts.burn_in,
        sub_seed(seed, 2),
    )?;
    let mean = red.spread(&chain.mean(), 0.0);
    let std = red.spread(&chain.std(), 0.0);
    let posterior_mean: Vec<f64> = mean
        .iter()
        .enumerate()
        .map(|(i, m)| if red.active.contains(&i) { *m } else { red.base[i] })
        .collect();

    let solver = cell.into_inner();
    let mut n_predictive_evals = 0;
    let coverage = if opts.n_predictive > 0 {
        let step = (chain.samples.len() / opts.n_predictive).max(1);
        let mut prng = rng_from_seed(sub_seed(seed, 3));
        let mut draws: Vec<Vec<f64>> = vec![Vec::new(); observations.len()];
        for z in chain.samples.iter().step_by(step).take(opts.n_predictive) {
            n_predictive_evals += 1;
            if let Some(a) = angles(solver, red.lift(z)) {
                for (d, a) in draws.iter_mut().zip(a) {
                    d.push(a + spec.noise_std * prng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        for d in draws.iter_mut() {
            d.sort_by(f64::total_cmp);
        }
        let inside = draws
            .iter()
            .zip(&observations)
            .filter(|(d, y)| !d.is_empty() && percentile(d, 0.025) <= **y && **y <= percentile(d, 0.975))
            .count();
        Some(inside as f64 / observations.len() as f64)
    } else {
        None
    };
    Ok(PeResult {
        observations,
        relative_error: posterior_mean.iter().zip(&truth).map(|(m, t)| (m - t).abs() / t.abs()).collect(),
        posterior_mean,
        posterior_std: std,
        truth,
        coverage,
        acceptance_rate: chain.acceptance_rate,
        n_model_evals,
        n_predictive_evals,
    })
}

/// Sobol indices of θ(T) over (θ₀, L, g) by MUSIC-driven refinement.
pub fn run_sa(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    budget: usize,
    n: usize,
    seed: u64,
) -> Result<ActiveSaResult> {
    inputs.validate()?;
    if budget < 10 {
        return Err(Error::InvalidParameter(format!("sensitivity task needs budget >= 10, got {budget}")));
    }
    let mut f = Counted::new(|x: &[f64]| theta_t(solver, inputs, [x[0], x[1], x[2]]));
    let opts = ActiveSaOptions {
        m0: 10,
        budget,
        n,
        sobol: SobolOptions::without_ci(),
        seed,
        ..Default::default()
    };
    active_sa_run(&mut f, &inputs.marginals(), &opts)
}

/// Optimization under uncertainty over the mean initial angle μ_θ:
/// minimize E[(θ(T) − θ*)²] subject to E[θ'(T)] ≥ 0, both expectations
/// replaced by sample averages over fixed common random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuSpec {
    pub target: f64,
    pub mu_bounds: (f64, f64),
    /// Standard deviation of θ₀ around μ_θ.
    pub sigma_theta: f64,
    pub n_saa: usize,
}

impl Default for OuSpec {
    fn default() -> Self {
        Self {
            target: 0.15,
            mu_bounds: (-0.3, 0.4),
            sigma_theta: 0.01,
            n_saa: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuResult {
    pub mu_theta: f64,
    /// SAA estimate of E[(θ(T) − θ*)²] at `mu_theta`.
    pub objective: f64,
    /// SAA estimate of E[θ'(T)] at `mu_theta`.
    pub constraint: f64,
    /// Surrogate probability that E[θ'(T)] ≥ 0 at `mu_theta`.
    pub pof: f64,
    /// Outer candidates evaluated by the optimizer.
    pub n_bo_evals: usize,
    /// Forward solves (n_saa per outer candidate).
    pub n_model_evals: usize,
    pub history: Vec<HistoryRow>,
    pub diagnostics: Vec<String>,
}

/// Common random numbers for the sample averages: (z_θ, L, g) per draw.
pub fn saa_draws(inputs: &PendulumInputs, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            [z, inputs.length.sample(&mut rng), inputs.g.sample(&mut rng)]
        })
        .collect()
}

/// (objective, constraint) sample averages at μ_θ.
pub fn saa_estimate(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    spec: &OuSpec,
    draws: &[[f64; 3]],
    mu: f64,
) -> (f64, f64) {
    let n = draws.len() as f64;
    let (mut obj, mut con) = (0.0, 0.0);
    for d in draws {
        let (th, om) = solver(&inputs.config([mu + spec.sigma_theta * d[0], d[1], d[2]]))
            .map_or((f64::NAN, f64::NAN), |t| t.final_state());
        obj += (th - spec.target).powi(2);
        con += om;
    }
    (obj / n, con / n)
}

pub fn run_ou(
    solver: &mut Solver<'_>,
    inputs: &PendulumInputs,
    spec: &OuSpec,
    budget: usize,
    seed: u64,
) -> Result<OuResult> {
    inputs.validate()?;
    let (lo, hi) = spec.mu_bounds;
    if !(lo < hi) || spec.n_saa == 0 || !(spec.sigma_theta >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid optimization spec {spec:?}")));
    }
    let draws = saa_draws(inputs, spec.n_saa, sub_seed(seed, 0));
    let solves = RefCell::new(0usize);
    let cache: RefCell<Option<(f64, (f64, f64))>> = RefCell::new(None);
    let cell = RefCell::new(&mut *solver);
    let eval = |mu: f64| -> (f64, f64) {
        if let Some((m, v)) = *cache.borrow() {
            if m == mu {
                return v;
            }
        }
        let mut s = cell.borrow_mut();
        let v = saa_estimate(&mut **s, inputs, spec, &draws, mu);
        *solves.borrow_mut() += draws.len();
        *cache.borrow_mut() = Some((mu, v));
        v
    };
    let mut objective = Counted::new(|x: &[f64]| -eval(x[0]).0);
    let mut constraints = vec![Counted::new(|x: &[f64]| -eval(x[0]).1)];
    let opts = BoOptions {
        m0: 4.min(budget),
        budget,
        spec: AcquisitionSpec::ei().with_constraints(ConstraintMode::ProductPof),
        noisy: true,
        seed: sub_seed(seed, 1),
        ..Default::default()
    };
    let state = bo_run(&mut objective, &mut constraints, &Domain::new(vec![(lo, hi)])?, &opts)?;
    let n_bo_evals = objective.calls();
    let (mu, _) = state
        .incumbent
        .clone()
        .ok_or_else(|| Error::InvalidInput("no feasible candidate was evaluated".into()))?;
    let row = state
        .history
        .iter()
        .find(|h| h.x == mu)
        .expect("incumbent comes from the history");
    let pof_at = match state.constraint_gps.first() {
        Some(cg) => {
            let (u, v) = cg.predict(&mu)?;
            pof(u, v.sqrt())
        }
        None => 1.0,
    };
    Ok(OuResult {
        mu_theta: mu[0],
        objective: -row.y,
        constraint: -row.constraints[0],
        pof: pof_at,
        n_bo_evals,
        n_model_evals: solves.into_inner(),
        history: state.history,
        diagnostics: state.diagnostics,
    })
}

/// Task selector for spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UqTask {
    Up {
        #[serde(default = "default_up_method")]
        method: UpMethod,
    },
    Re {
        theta_max: f64,
        #[serde(default = "default_re_utility")]
        utility: RiskUtility,
    },
    Pe(PeSpec),
    Sa {
        #[serde(default = "default_sa_n")]
        n: usize,
    },
    Ou(OuSpec),
}

fn default_up_method() -> UpMethod {
    UpMethod::GpMeanMc
}

fn default_re_utility() -> RiskUtility {
    RiskUtility::U
}

fn default_sa_n() -> usize {
    100_000
}

/// Contents of a task spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqTaskSpec {
    pub task: UqTask,
    #[serde(default)]
    pub inputs: PendulumInputs,
    pub budget: Option<usize>,
}

impl UqTask {
    pub fn default_budget(&self) -> usize {
        match self {
            UqTask::Up { .. } => 30,
            UqTask::Re { .. } => 60,
            UqTask::Pe(_) => 40,
            UqTask::Sa { .. } => 30,
            UqTask::Ou(_) => 15,
        }
    }
}
