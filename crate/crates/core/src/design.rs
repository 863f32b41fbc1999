//! Space-filling designs and active-learning point selection.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dist::{rng_from_seed, Marginal};
use crate::error::{check_dim, Error, Result};
use crate::gp::GpPosterior;

/// Box domain with an optional weighting distribution for integrals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub bounds: Vec<(f64, f64)>,
    /// Independent marginals π; `None` means uniform on the box.
    pub weights: Option<Vec<Marginal>>,
}

impl Domain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        let d = Self {
            bounds,
            weights: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dim],
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<Marginal>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::InvalidParameter("domain has no dimensions".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!("bad bounds ({lo}, {hi})")));
            }
        }
        if let Some(w) = &self.weights {
            check_dim(self.dim(), w.len())?;
            for m in w {
                m.validate()?;
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.bounds).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Draws integration nodes from the weighting distribution, rejecting
    /// draws outside the box.
    pub fn sample_weights(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        match &self.weights {
            None => (0..n)
                .map(|_| self.bounds.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
                .collect(),
            Some(ms) => {
                let mut out = Vec::with_capacity(n);
                let mut tries = 0usize;
                while out.len() < n && tries < 1000 * n.max(1) {
                    tries += 1;
                    let x: Vec<f64> = ms.iter().map(|m| m.sample(rng)).collect();
                    if self.contains(&x) {
                        out.push(x);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Lhs,
    MonteCarlo,
    Grid,
}

/// Finite set of candidate points.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub points: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Evenly spaced 1-D grid including both ends.
    pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Self {
        let points = (0..n)
            .map(|i| {
                let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                vec![lo + (hi - lo) * t]
            })
            .collect();
        Self {
            points,
            provenance: Provenance::Grid,
        }
    }
}

/// Stratified unit-cube coordinates: column j is a random permutation of
/// the n strata, jittered uniformly within each stratum.
pub fn lhs_unit(dim: usize, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        perm.shuffle(rng);
        for (i, row) in out.iter_mut().enumerate() {
            row[j] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

/// Latin hypercube sample of the domain box.
pub fn lhs_sample(domain: &Domain, n: usize, seed: u64) -> Result<CandidatePool> {
    lhs_sample_rng(domain, n, &mut rng_from_seed(seed))
}

pub fn lhs_sample_rng(domain: &Domain, n: usize, rng: &mut dyn RngCore) -> Result<CandidatePool> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("LHS size must be >= 1".into()));
    }
    let mut points = lhs_unit(domain.dim(), n, rng);
    for row in &mut points {
        for (v, (lo, hi)) in row.iter_mut().zip(&domain.bounds) {
            *v = lo + (hi - lo) * *v;
        }
    }
    Ok(CandidatePool {
        points,
        provenance: Provenance::Lhs,
    })
}

/// Latin hypercube sample pushed through marginal quantile functions, so each
/// marginal is stratified in probability.
pub fn lhs_marginals(marginals: &[Marginal], n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    let mut points = lhs_unit(marginals.len(), n, rng);
    for row in &mut points {
        for (v, m) in row.iter_mut().zip(marginals) {
            *v = m.quantile(*v);
        }
    }
    points
}

/// Index of the largest finite score, ties to the lowest index.
pub(crate) fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) fn argmin(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    argmax(scores.into_iter().map(|s| -s))
}

fn nonempty(pool: &CandidatePool, gp: &GpPosterior) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty candidate pool".into()));
    }
    for p in &pool.points {
        check_dim(gp.dim(), p.len())?;
    }
    Ok(())
}

/// Active learning MacKay: the candidate with the largest posterior variance.
pub fn alm_select(gp: &GpPosterior, pool: &CandidatePool) -> Result<usize> {
    nonempty(pool, gp)?;
    let (_, vars) = gp.predict_batch(&pool.points)?;
    Ok(argmax(vars).unwrap_or(0))
}

/// Posterior variance of the design augmented by `x_new`, as a rank-one
/// downdate σ²ₘ₊₁(x′) = σ²ₘ(x′) − c(x′, x_new)² / (σ²ₘ(x_new) + ν²).
#[derive(Debug, Clone)]
pub struct VarianceAfterAdd<'a> {
    gp: &'a GpPosterior,
    x_new: Vec<f64>,
    v_new: DVector<f64>,
    denom: f64,
}

impl VarianceAfterAdd<'_> {
    pub fn variance(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.gp.dim(), x.len())?;
        let vx = self.gp.half_solve(&self.gp.kernel_vector(x));
        let k = self.gp.kernel();
        let prior = k.eval_unchecked(x, x);
        let var = prior - vx.norm_squared();
        let c = k.eval_unchecked(x, &self.x_new) - vx.dot(&self.v_new);
        self.gp.clamp(var - c * c / self.denom, prior)
    }
}

pub fn variance_after_add<'a>(gp: &'a GpPosterior, x_new: &[f64]) -> Result<VarianceAfterAdd<'a>> {
    check_dim(gp.dim(), x_new.len())?;
    let v_new = gp.half_solve(&gp.kernel_vector(x_new));
    let prior = gp.kernel().eval_unchecked(x_new, x_new);
    let var = (prior - v_new.norm_squared()).max(0.0);
    let denom = var + gp.kernel().noise_variance;
    if denom <= 1e-12 * prior.max(f64::MIN_POSITIVE) || gp.kernel().noise_variance == 0.0 && gp.data().contains_input(x_new) {
        return Err(Error::Conditioning {
            jitter: 0.0,
            reason: "new point duplicates the design with zero observation noise".into(),
        });
    }
    Ok(VarianceAfterAdd {
        gp,
        x_new: x_new.to_vec(),
        v_new,
        denom,
    })
}

/// Node-averaged updated variance for every candidate. Candidates that
/// cannot be added (zero predictive variance) keep the current average.
pub fn integrated_variance_after_add(
    gp: &GpPosterior,
    candidates: &[Vec<f64>],
    nodes: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if nodes.is_empty() {
        return Err(Error::InvalidInput("no integration nodes".into()));
    }
    let (_, node_var) = gp.predict_batch(nodes)?;
    let base = node_var.iter().sum::<f64>() / nodes.len() as f64;
    let v_nodes = gp.cross_half(nodes);
    let v_cand = gp.cross_half(candidates);
    let k = gp.kernel();
    let nu2 = k.noise_variance;
    let mut out = Vec::with_capacity(candidates.len());
    for (c, x) in candidates.iter().enumerate() {
        let vc = v_cand.column(c);
        let prior = k.eval_unchecked(x, x);
        let denom = (prior - vc.norm_squared()).max(0.0) + nu2;
        if denom <= 1e-12 * prior {
            out.push(base);
            continue;
        }
        let mut reduction = 0.0;
        for (j, node) in nodes.iter().enumerate() {
            let cov = k.eval_unchecked(node, x) - v_nodes.column(j).dot(&vc);
            reduction += (cov * cov / denom).min(node_var[j]);
        }
        out.push(base - reduction / nodes.len() as f64);
    }
    Ok(out)
}

/// Active learning Cohn: the candidate whose addition minimizes the
/// node-averaged posterior variance.
pub fn alc_select(gp: &GpPosterior, pool: &CandidatePool, nodes: &[Vec<f64>]) -> Result<usize> {
    nonempty(pool, gp)?;
    let scores = integrated_variance_after_add(gp, &pool.points, nodes)?;
    Ok(argmin(scores).unwrap_or(0))
}

/// Nearest training point by Euclidean distance, ties to the lowest index.
pub fn nearest_training_index(gp: &GpPosterior, x: &[f64]) -> Option<usize> {
    argmin(gp.data().inputs().iter().map(|xi| {
        xi.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }))
}

/// EIGF score (u(x) − y†)² + σ²(x) with y† the response at the nearest
/// training point.
pub fn eigf_scores(gp: &GpPosterior, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if gp.data().is_empty() {
        return Err(Error::InvalidInput("EIGF needs training data".into()));
    }
    let (means, vars) = gp.predict_batch(points)?;
    Ok(points
        .iter()
        .zip(means.iter().zip(&vars))
        .map(|(x, (u, v))| {
            let j = nearest_training_index(gp, x).expect("non-empty data");
            let r = u - gp.data().responses()[j];
            r * r + v
        })
        .collect())
}

pub fn eigf_select(gp: &GpPosterior, pool: &CandidatePool) -> Result<usize> {
    nonempty(pool, gp)?;
    Ok(argmax(eigf_scores(gp, &pool.points)?).unwrap_or(0))
}
