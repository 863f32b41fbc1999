//! Sobol indices by pick-freeze Monte Carlo, on the true model or on a GP
//! mean, with the MUSIC utility for index-targeted design refinement.
//!
//! With A_B^{(i)} equal to A except for column i, taken from B:
//!
//! * `mean(Y_B (Y_AB − Y_A))` estimates the first-order variance V_i, and
//! * `mean(Y_A Y_AB) − mean(Y_A)²` estimates V_{~i}, the variance explained by
//!   every input except i, so T_i = 1 − V_{~i}/V.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{argmax, lhs_marginals, nearest_training_index};
use crate::dist::{rng_from_seed, sub_seed, Marginal};
use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, GpPosterior, PriorMeanFamily};
use crate::hyper::FitOptions;
use crate::io::{fmt_csv, write_csv};
use crate::kernel::KernelSpec;
use crate::model::Counted;
use crate::risk::refit;

/// Reported indices are clamped to this range; raw values stay in the diagnostics.
pub const INDEX_CLAMP: (f64, f64) = (-0.1, 1.1);

/// Paired sample matrices A and B, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PickFreezeMatrices {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl PickFreezeMatrices {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    /// Row j of A_B^{(i)}.
    pub fn ab_row(&self, i: usize, j: usize) -> Vec<f64> {
        let mut r = self.a[j].clone();
        r[i] = self.b[j][i];
        r
    }

    /// A_B^{(i)}: A with column i replaced by column i of B.
    pub fn ab(&self, i: usize) -> Vec<Vec<f64>> {
        (0..self.n()).map(|j| self.ab_row(i, j)).collect()
    }
}

/// Independent draws for A and B with one random stream per dimension
/// (`sub_seed(seed, j)`), so that relabeling inputs relabels columns.
pub fn pick_freeze(marginals: &[Marginal], n: usize, seed: u64) -> Result<PickFreezeMatrices> {
    let streams: Vec<u64> = (0..marginals.len() as u64).map(|j| sub_seed(seed, j)).collect();
    pick_freeze_streams(marginals, n, &streams)
}

pub fn pick_freeze_streams(marginals: &[Marginal], n: usize, streams: &[u64]) -> Result<PickFreezeMatrices> {
    check_dim(marginals.len(), streams.len())?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("pick-freeze needs n >= 2, got {n}")));
    }
    for m in marginals {
        m.validate()?;
    }
    let d = marginals.len();
    let mut a = vec![vec![0.0; d]; n];
    let mut b = vec![vec![0.0; d]; n];
    for (j, (m, s)) in marginals.iter().zip(streams).enumerate() {
        let mut rng = rng_from_seed(*s);
        for row in a.iter_mut() {
            row[j] = m.sample(&mut rng);
        }
        for row in b.iter_mut() {
            row[j] = m.sample(&mut rng);
        }
    }
    Ok(PickFreezeMatrices { a, b })
}

/// Model outputs on A, B and every A_B^{(i)}.
#[derive(Debug, Clone, PartialEq)]
pub struct PickFreezeOutputs {
    pub ya: Vec<f64>,
    pub yb: Vec<f64>,
    pub yab: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct RawIndices {
    first: Vec<f64>,
    total: Vec<f64>,
    variance: f64,
}

fn estimate(out: &PickFreezeOutputs, rows: &[usize]) -> RawIndices {
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| rows.iter().map(|&j| f(j)).sum::<f64>() / n;
    // Outputs are shifted by mean(Y_A) first: for outputs with a large
    // offset relative to their spread the raw products cancel catastrophically.
    let c = mean(&|j| out.ya[j]);
    let ya = |j: usize| out.ya[j] - c;
    let f0 = mean(&ya);
    let f0sq = f0 * f0;
    let variance = mean(&|j| ya(j) * ya(j)) - f0sq;
    let mut first = Vec::with_capacity(out.yab.len());
    let mut total = Vec::with_capacity(out.yab.len());
    for yab in &out.yab {
        let v_i = mean(&|j| (out.yb[j] - c) * (yab[j] - out.ya[j]));
        let v_not_i = mean(&|j| ya(j) * (yab[j] - c)) - f0sq;
        first.push(v_i / variance);
        total.push(1.0 - v_not_i / variance);
    }
    RawIndices { first, total, variance }
}

fn clamp(v: f64) -> f64 {
    v.clamp(INDEX_CLAMP.0, INDEX_CLAMP.1)
}

/// Values kept alongside the reported indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SobolDiagnostics {
    pub first_order_raw: Vec<f64>,
    pub total_raw: Vec<f64>,
    /// Indices of the u + σ and u − σ surfaces (GP estimates only).
    pub perturbed_plus: Option<(Vec<f64>, Vec<f64>)>,
    pub perturbed_minus: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolResult {
    pub first_order: Vec<f64>,
    pub total: Vec<f64>,
    #[serde(rename = "variance")]
    pub total_variance: f64,
    pub n_evals: usize,
    /// Bootstrap half-widths per dimension as [first_order, total].
    #[serde(rename = "ci")]
    pub ci_half_width: Option<Vec<[f64; 2]>>,
    #[serde(skip)]
    pub diagnostics: SobolDiagnostics,
}

/// Settings for the estimators; `bootstrap = 0` skips confidence intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolOptions {
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for SobolOptions {
    fn default() -> Self {
        Self { bootstrap: 200, seed: 0 }
    }
}

impl SobolOptions {
    pub fn without_ci() -> Self {
        Self { bootstrap: 0, seed: 0 }
    }
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn bootstrap_half_widths(out: &PickFreezeOutputs, opts: &SobolOptions) -> Vec<[f64; 2]> {
    let n = out.ya.len();
    let d = out.yab.len();
    let mut rng = rng_from_seed(opts.seed);
    let mut firsts = vec![Vec::with_capacity(opts.bootstrap); d];
    let mut totals = vec![Vec::with_capacity(opts.bootstrap); d];
    let mut rows = vec![0usize; n];
    for _ in 0..opts.bootstrap {
        for r in rows.iter_mut() {
            *r = rng.random_range(0..n);
        }
        let e = estimate(out, &rows);
        for i in 0..d {
            firsts[i].push(e.first[i]);
            totals[i].push(e.total[i]);
        }
    }
    let hw = |v: &mut Vec<f64>| {
        let mut v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if v.len() < 2 {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        0.5 * (quantile_sorted(&v, 0.975) - quantile_sorted(&v, 0.025))
    };
    (0..d).map(|i| [hw(&mut firsts[i]), hw(&mut totals[i])]).collect()
}

/// Applies the estimators to precomputed outputs.
pub fn sobol_from_outputs(out: &PickFreezeOutputs, n_evals: usize, opts: &SobolOptions) -> Result<SobolResult> {
    let n = out.ya.len();
    if n < 2 || out.yb.len() != n || out.yab.iter().any(|y| y.len() != n) {
        return Err(Error::InvalidInput("pick-freeze outputs have inconsistent lengths".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let raw = estimate(out, &rows);
    let second = out.ya.iter().map(|y| y * y).sum::<f64>() / n as f64;
    if !(raw.variance > 64.0 * f64::EPSILON * second.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateOutput {
            variance: raw.variance,
        });
    }
    let ci = (opts.bootstrap > 0).then(|| bootstrap_half_widths(out, opts));
    Ok(SobolResult {
        first_order: raw.first.iter().copied().map(clamp).collect(),
        total: raw.total.iter().copied().map(clamp).collect(),
        total_variance: raw.variance,
        n_evals,
        ci_half_width: ci,
        diagnostics: SobolDiagnostics {
            first_order_raw: raw.first,
            total_raw: raw.total,
            perturbed_plus: None,
            perturbed_minus: None,
        },
    })
}

fn outputs_with(m: &PickFreezeMatrices, mut f: impl FnMut(&[Vec<f64>]) -> Vec<f64>) -> PickFreezeOutputs {
    PickFreezeOutputs {
        ya: f(&m.a),
        yb: f(&m.b),
        yab: (0..m.dim()).map(|i| f(&m.ab(i))).collect(),
    }
}

/// Pick-freeze estimates on the true model; (d + 2)n evaluations.
pub fn sobol_mc<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    m: &PickFreezeMatrices,
    opts: &SobolOptions,
) -> Result<SobolResult> {
    let before = f.calls();
    let out = outputs_with(m, |xs| xs.iter().map(|x| f.call(x)).collect());
    sobol_from_outputs(&out, f.calls() - before, opts)
}

/// Pick-freeze estimates on the GP mean, with the ±σ surfaces recorded
/// as diagnostics when `perturbed` is set.
pub fn sobol_gp(gp: &GpPosterior, m: &PickFreezeMatrices, opts: &SobolOptions, perturbed: bool) -> Result<SobolResult> {
    check_dim(gp.dim(), m.dim())?;
    if !perturbed {
        let out = outputs_with(m, |xs| gp.mean_batch(xs));
        return sobol_from_outputs(&out, 0, opts);
    }
    let mut sets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
    let mut push = |xs: &[Vec<f64>]| -> Result<()> {
        let (u, v) = gp.predict_batch(xs)?;
        let s: Vec<f64> = v.iter().map(|v| v.sqrt()).collect();
        sets[1].push(u.iter().zip(&s).map(|(u, s)| u + s).collect());
        sets[2].push(u.iter().zip(&s).map(|(u, s)| u - s).collect());
        sets[0].push(u);
        Ok(())
    };
    push(&m.a)?;
    push(&m.b)?;
    for i in 0..m.dim() {
        push(&m.ab(i))?;
    }
    let as_outputs = |mut ys: Vec<Vec<f64>>| {
        let rest = ys.split_off(2);
        let yb = ys.pop().expect("two leading sets");
        let ya = ys.pop().expect("two leading sets");
        PickFreezeOutputs { ya, yb, yab: rest }
    };
    let minus = as_outputs(sets.pop().expect("three sets"));
    let plus = as_outputs(sets.pop().expect("three sets"));
    let mut res = sobol_from_outputs(&as_outputs(sets.pop().expect("three sets")), 0, opts)?;
    let side = |o: &PickFreezeOutputs| {
        sobol_from_outputs(o, 0, &SobolOptions::without_ci())
            .ok()
            .map(|r| (r.first_order, r.total))
    };
    res.diagnostics.perturbed_plus = side(&plus);
    res.diagnostics.perturbed_minus = side(&minus);
    Ok(res)
}

/// Inner nodes for the conditional moments: full-dimension draws from π,
/// one random stream per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerNodes {
    pub nodes: Vec<Vec<f64>>,
}

impl InnerNodes {
    pub fn draw(marginals: &[Marginal], n_inner: usize, seed: u64) -> Result<Self> {
        if n_inner < 2 {
            return Err(Error::InvalidParameter(format!("need n_inner >= 2, got {n_inner}")));
        }
        let d = marginals.len();
        let mut nodes = vec![vec![0.0; d]; n_inner];
        for (j, m) in marginals.iter().enumerate() {
            let mut rng = rng_from_seed(sub_seed(seed, j as u64));
            for row in nodes.iter_mut() {
                row[j] = m.sample(&mut rng);
            }
        }
        Ok(Self { nodes })
    }
}

/// (μᵢ(t), υᵢ²(t)): mean and variance of u(x) with xᵢ frozen at t and the
/// other inputs taken from the inner nodes.
pub fn conditional_moments_at(gp: &GpPosterior, i: usize, t: f64, nodes: &InnerNodes) -> Result<(f64, f64)> {
    let d = gp.dim();
    if i >= d {
        return Err(Error::InvalidInput(format!("dimension {i} out of range for d = {d}")));
    }
    if d == 1 {
        return Ok((gp.mean(&[t])?, 0.0));
    }
    let pts: Vec<Vec<f64>> = nodes
        .nodes
        .iter()
        .map(|x| {
            let mut p = x.clone();
            p[i] = t;
            p
        })
        .collect();
    let u = gp.mean_batch(&pts);
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    Ok((mu, var.max(0.0)))
}

pub fn conditional_moments(
    gp: &GpPosterior,
    marginals: &[Marginal],
    i: usize,
    t: f64,
    n_inner: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_dim(gp.dim(), marginals.len())?;
    conditional_moments_at(gp, i, t, &InnerNodes::draw(marginals, n_inner, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// Dᵢ = wᵢ|xᵢ − xᵢ†|.
    D1,
    /// Dᵢ = wᵢ‖x − x†‖².
    D2,
}

pub fn uniform_weights(d: usize) -> Vec<f64> {
    vec![1.0 / d as f64; d]
}

fn validate_weights(w: &[f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("weights must be nonnegative and sum to 1, got sum {s}")));
    }
    Ok(())
}

/// MUSIC utility D(x)ᵀM(x), with Mᵢ the per-dimension EIGF of the
/// conditional mean against the nearest training point x†.
pub fn music_utility(gp: &GpPosterior, x: &[f64], weights: &[f64], prefactor: Prefactor, nodes: &InnerNodes) -> Result<f64> {
    check_dim(gp.dim(), x.len())?;
    check_dim(gp.dim(), weights.len())?;
    validate_weights(weights)?;
    let j = nearest_training_index(gp, x).ok_or_else(|| Error::InvalidInput("MUSIC needs training data".into()))?;
    let xs = &gp.data().inputs()[j];
    let dist2: f64 = x.iter().zip(xs).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut total = 0.0;
    for i in 0..x.len() {
        let d_i = match prefactor {
            Prefactor::D1 => weights[i] * (x[i] - xs[i]).abs(),
            Prefactor::D2 => weights[i] * dist2,
        };
        if d_i == 0.0 {
            continue;
        }
        let (mu, var) = conditional_moments_at(gp, i, x[i], nodes)?;
        let (mu_ref, _) = conditional_moments_at(gp, i, xs[i], nodes)?;
        total += d_i * ((mu - mu_ref).powi(2) + var);
    }
    Ok(total)
}

pub fn music_scores(
    gp: &GpPosterior,
    pool: &[Vec<f64>],
    weights: &[f64],
    prefactor: Prefactor,
    nodes: &InnerNodes,
) -> Result<Vec<f64>> {
    pool.iter().map(|x| music_utility(gp, x, weights, prefactor, nodes)).collect()
}

/// Settings for [`active_sa_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSaOptions {
    pub m0: usize,
    /// Total number of true-model evaluations M.
    pub budget: usize,
    /// Rows of the final pick-freeze matrices.
    pub n: usize,
    /// `None` means 1/d for each active input.
    pub weights: Option<Vec<f64>>,
    pub prefactor: Prefactor,
    pub n_inner: usize,
    pub pool_size: usize,
    pub kernel: Option<KernelSpec>,
    pub fit: FitOptions,
    pub sobol: SobolOptions,
    pub seed: u64,
}

impl Default for ActiveSaOptions {
    fn default() -> Self {
        Self {
            m0: 10,
            budget: 30,
            n: 100_000,
            weights: None,
            prefactor: Prefactor::D1,
            n_inner: 64,
            pool_size: 100,
            kernel: None,
            fit: FitOptions::default(),
            sobol: SobolOptions::without_ci(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaAuditRow {
    pub iter: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub music: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveSaResult {
    pub sobol: SobolResult,
    pub audit: Vec<SaAuditRow>,
    /// GP over the active inputs only.
    pub gp: GpPosterior,
    /// Indices of inputs with nonzero spread.
    pub active: Vec<usize>,
}

/// MUSIC-driven refinement: LHS design of `m0` points, then up to `budget`
/// evaluations chosen by argmax MUSIC over fresh pools, then Sobol indices
/// of the final GP mean on fresh pick-freeze matrices. Point-mass inputs
/// are left out of the GP and get zero indices.
pub fn active_sa_run<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    marginals: &[Marginal],
    opts: &ActiveSaOptions,
) -> Result<ActiveSaResult> {
    for m in marginals {
        m.validate()?;
    }
    if opts.m0 < 2 || opts.budget < opts.m0 {
        return Err(Error::InvalidParameter(format!(
            "need 2 <= m0 <= M (m0={}, M={})",
            opts.m0, opts.budget
        )));
    }
    let active: Vec<usize> = (0..marginals.len()).filter(|&i| !marginals[i].is_degenerate()).collect();
    if active.is_empty() {
        return Err(Error::DegenerateOutput { variance: 0.0 });
    }
    let act_marg: Vec<Marginal> = active.iter().map(|&i| marginals[i]).collect();
    let da = active.len();
    let weights = match &opts.weights {
        Some(w) => {
            check_dim(marginals.len(), w.len())?;
            let w: Vec<f64> = active.iter().map(|&i| w[i]).collect();
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(Error::InvalidParameter("weights vanish on every active input".into()));
            }
            w.iter().map(|v| v / s).collect()
        }
        None => uniform_weights(da),
    };
    let base: Vec<f64> = marginals.iter().map(Marginal::mean).collect();
    let lift = |z: &[f64]| {
        let mut x = base.clone();
        for (k, &i) in active.iter().enumerate() {
            x[i] = z[k];
        }
        x
    };

    let mut rng = rng_from_seed(sub_seed(opts.seed, 0));
    let mut zs = lhs_marginals(&act_marg, opts.m0, &mut rng);
    let mut ys: Vec<f64> = zs.iter().map(|z| f.call(&lift(z))).collect();
    let mut kernel = opts.kernel.clone().unwrap_or_else(|| {
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
        let mut k = KernelSpec::se(if v > 0.0 { v } else { 1.0 }, 1.0);
        k.length_scales = act_marg.iter().map(|m| 2.0 * m.variance().sqrt()).collect();
        k
    });
    let nodes = InnerNodes::draw(&act_marg, opts.n_inner, sub_seed(opts.seed, 1))?;
    let mut audit = Vec::new();
    let mut iter = 0usize;
    let gp = loop {
        let data = Dataset::new(zs.clone(), ys.clone())?;
        let fit = FitOptions {
            optimize_noise: Some(false),
            restarts: if iter == 0 { opts.fit.restarts } else { 1 },
            ..opts.fit.clone()
        };
        let (k, gp) = refit(&kernel, PriorMeanFamily::Constant, &data, &fit, sub_seed(opts.seed, 1000 + iter as u64))?;
        kernel = k;
        if zs.len() >= opts.budget {
            break gp;
        }
        iter += 1;
        let mut prng = rng_from_seed(sub_seed(opts.seed, 2000 + iter as u64));
        let pool: Vec<Vec<f64>> = lhs_marginals(&act_marg, opts.pool_size, &mut prng)
            .into_iter()
            .filter(|z| !zs.contains(z))
            .collect();
        let scores = music_scores(&gp, &pool, &weights, opts.prefactor, &nodes)?;
        let idx = argmax(scores.iter().copied())
            .ok_or_else(|| Error::InvalidInput("MUSIC pool is empty".into()))?;
        let z = pool[idx].clone();
        let y = f.call(&lift(&z));
        audit.push(SaAuditRow {
            iter,
            x: lift(&z),
            y,
            music: scores[idx],
        });
        zs.push(z);
        ys.push(y);
    };

    let m = pick_freeze(&act_marg, opts.n, sub_seed(opts.seed, 3))?;
    let reduced = sobol_gp(&gp, &m, &opts.sobol, false)?;
    let d = marginals.len();
    let spread = |v: &[f64]| {
        let mut out = vec![0.0; d];
        for (k, &i) in active.iter().enumerate() {
            out[i] = v[k];
        }
        out
    };
    let sobol = SobolResult {
        first_order: spread(&reduced.first_order),
        total: spread(&reduced.total),
        total_variance: reduced.total_variance,
        n_evals: f.calls(),
        ci_half_width: reduced.ci_half_width.map(|c| {
            let mut out = vec![[0.0, 0.0]; d];
            for (k, &i) in active.iter().enumerate() {
                out[i] = c[k];
            }
            out
        }),
        diagnostics: SobolDiagnostics {
            first_order_raw: spread(&reduced.diagnostics.first_order_raw),
            total_raw: spread(&reduced.diagnostics.total_raw),
            perturbed_plus: None,
            perturbed_minus: None,
        },
    };
    Ok(ActiveSaResult { sobol, audit, gp, active })
}

/// One row per input dimension.
pub fn write_sobol_csv(path: &Path, r: &SobolResult, names: Option<&[String]>) -> Result<()> {
    let header: Vec<String> = ["input", "first_order", "total", "first_order_ci", "total_ci"]
        .map(String::from)
        .to_vec();
    write_csv(
        path,
        &header,
        (0..r.first_order.len()).map(|i| {
            let name = names.and_then(|n| n.get(i).cloned()).unwrap_or_else(|| format!("x{}", i + 1));
            let ci = r.ci_half_width.as_ref().map_or([f64::NAN; 2], |c| c[i]);
            vec![name, fmt_csv(r.first_order[i]), fmt_csv(r.total[i]), fmt_csv(ci[0]), fmt_csv(ci[1])]
        }),
    )
}

pub fn write_audit_csv(path: &Path, rows: &[SaAuditRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.x.len());
    let mut header = vec!["iter".to_string()];
    header.extend(crate::io::x_headers(d));
    header.extend(["y", "music"].map(String::from));
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![r.iter.to_string()];
            v.extend(r.x.iter().map(|x| fmt_csv(*x)));
            v.push(fmt_csv(r.y));
            v.push(fmt_csv(r.music));
            v
        }),
    )
}
