//! Bayesian quadrature: Gaussian posteriors over ∫f(x)π(x)dx.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{argmax, CandidatePool};
use crate::dist::{rng_from_seed, sub_seed, InputDistribution, MultivariateNormal};
use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, GpPosterior};
use crate::hyper::{fit_hyperparameters, FitOptions};
use crate::kernel::{KernelFamily, KernelSpec};

/// Above this many nodes the double integral uses paired draws instead of
/// the full cross-batch double sum.
const FULL_DOUBLE_SUM_MAX: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingMethod {
    AnalyticSeStandardGaussian,
    MonteCarlo { nodes: usize },
}

/// Kernel mean embeddings of the design points and of π itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub w: DVector<f64>,
    pub double_integral: f64,
    /// ∫u_pr(x)π(x)dx.
    pub prior_mean_integral: f64,
    pub method: EmbeddingMethod,
}

/// How embeddings w(x) = ∫k(x, x′)π(x′)dx′ are computed.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    /// Closed form for an isotropic SE kernel against N(0, I).
    AnalyticSe,
    /// Sample averages over two independent node batches drawn from π.
    MonteCarlo {
        nodes: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        pi_mean: Vec<f64>,
    },
}

impl Embedder {
    pub fn monte_carlo(pi: &dyn InputDistribution, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one embedding node".into()));
        }
        let nodes = pi.sample_n(n, &mut rng_from_seed(sub_seed(seed, 0)));
        let second = pi.sample_n(n, &mut rng_from_seed(sub_seed(seed, 1)));
        Ok(Embedder::MonteCarlo {
            nodes,
            second,
            pi_mean: pi.mean(),
        })
    }

    fn check_kernel(&self, k: &KernelSpec) -> Result<()> {
        if let Embedder::AnalyticSe = self {
            if k.family != KernelFamily::SquaredExponential {
                return Err(Error::InvalidParameter(
                    "analytic embedding needs the squared-exponential kernel".into(),
                ));
            }
            if !k.is_isotropic() {
                return Err(Error::InvalidParameter(
                    "analytic embedding needs an isotropic length scale".into(),
                ));
            }
        }
        Ok(())
    }

    /// w(x) for one point.
    pub fn embed_point(&self, k: &KernelSpec, x: &[f64]) -> f64 {
        match self {
            Embedder::AnalyticSe => {
                let l2 = k.length_scales[0] * k.length_scales[0];
                let d = x.len() as f64;
                let r2: f64 = x.iter().map(|v| v * v).sum();
                k.signal_variance * (l2 / (l2 + 1.0)).powf(d / 2.0) * (-r2 / (2.0 * (l2 + 1.0))).exp()
            }
            Embedder::MonteCarlo { nodes, .. } => {
                nodes.iter().map(|n| k.eval_unchecked(x, n)).sum::<f64>() / nodes.len() as f64
            }
        }
    }

    /// ∫∫k(x, x′)π(x)π(x′)dxdx′.
    pub fn double_integral(&self, k: &KernelSpec, dim: usize) -> f64 {
        match self {
            Embedder::AnalyticSe => {
                let l2 = k.length_scales[0] * k.length_scales[0];
                k.signal_variance * (l2 / (l2 + 2.0)).powf(dim as f64 / 2.0)
            }
            Embedder::MonteCarlo { nodes, second, .. } => {
                if nodes.len() <= FULL_DOUBLE_SUM_MAX {
                    let mut s = 0.0;
                    for a in nodes {
                        for b in second {
                            s += k.eval_unchecked(a, b);
                        }
                    }
                    s / (nodes.len() * second.len()) as f64
                } else {
                    nodes
                        .iter()
                        .zip(second)
                        .map(|(a, b)| k.eval_unchecked(a, b))
                        .sum::<f64>()
                        / nodes.len() as f64
                }
            }
        }
    }

    fn pi_mean(&self, dim: usize) -> Vec<f64> {
        match self {
            Embedder::AnalyticSe => vec![0.0; dim],
            Embedder::MonteCarlo { pi_mean, .. } => pi_mean.clone(),
        }
    }

    fn method(&self) -> EmbeddingMethod {
        match self {
            Embedder::AnalyticSe => EmbeddingMethod::AnalyticSeStandardGaussian,
            Embedder::MonteCarlo { nodes, .. } => EmbeddingMethod::MonteCarlo { nodes: nodes.len() },
        }
    }

    /// Embedding vector for the posterior's design and kernel.
    pub fn embedding(&self, gp: &GpPosterior) -> Result<EmbeddingVector> {
        let k = gp.kernel();
        self.check_kernel(k)?;
        let dim = gp.dim();
        if let Embedder::MonteCarlo { nodes, .. } = self {
            check_dim(dim, nodes[0].len())?;
        }
        let w = DVector::from_iterator(
            gp.data().len(),
            gp.data().inputs().iter().map(|x| self.embed_point(k, x)),
        );
        Ok(EmbeddingVector {
            w,
            double_integral: self.double_integral(k, dim),
            prior_mean_integral: gp.prior_mean().integral(&self.pi_mean(dim)),
            method: self.method(),
        })
    }
}

/// Closed-form SE embedding under the standard Gaussian.
pub fn se_embedding_analytic(gp: &GpPosterior) -> Result<EmbeddingVector> {
    Embedder::AnalyticSe.embedding(gp)
}

/// Sample-average embedding with `n` nodes from π.
pub fn embedding_mc(gp: &GpPosterior, pi: &dyn InputDistribution, n: usize, seed: u64) -> Result<EmbeddingVector> {
    check_dim(gp.dim(), pi.dim())?;
    Embedder::monte_carlo(pi, n, seed)?.embedding(gp)
}

/// Posterior mean and variance of the integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralEstimate {
    pub mean: f64,
    pub variance: f64,
    pub method: EmbeddingMethod,
    pub design_size: usize,
}

pub fn bq_estimate(gp: &GpPosterior, emb: &EmbeddingVector) -> Result<IntegralEstimate> {
    check_dim(gp.data().len(), emb.w.len())?;
    let mean = emb.prior_mean_integral + emb.w.dot(gp.alpha());
    let v = gp.half_solve(&emb.w);
    let variance = (emb.double_integral - v.norm_squared()).max(0.0);
    Ok(IntegralEstimate {
        mean,
        variance,
        method: emb.method,
        design_size: gp.data().len(),
    })
}

/// Variance reduction U_BQ(x) of the integral from adding x to the design;
/// `None` where the candidate carries no new information.
pub fn bq_utilities(gp: &GpPosterior, embedder: &Embedder, points: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let k = gp.kernel();
    embedder.check_kernel(k)?;
    let emb = embedder.embedding(gp)?;
    let sinv_w = gp.solve(&emb.w);
    let (_, vars) = gp.predict_batch(points)?;
    let nu2 = k.noise_variance;
    Ok(points
        .iter()
        .zip(&vars)
        .map(|(x, &s2)| {
            let denom = s2 + nu2;
            let prior = k.eval_unchecked(x, x);
            if denom <= 1e-12 * prior || (nu2 == 0.0 && gp.data().contains_input(x)) {
                return None;
            }
            let c = embedder.embed_point(k, x) - gp.kernel_vector(x).dot(&sinv_w);
            Some(c * c / denom)
        })
        .collect())
}

/// Candidate whose addition most reduces the integral's variance.
pub fn bq_design_select(gp: &GpPosterior, pool: &CandidatePool, embedder: &Embedder) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty candidate pool".into()));
    }
    let u = bq_utilities(gp, embedder, &pool.points)?;
    argmax(u.iter().map(|v| v.unwrap_or(f64::NAN)))
        .ok_or_else(|| Error::InvalidInput("no candidate carries new information".into()))
}

/// f′ = f·π/q, so that ∫f′q = ∫fπ.
pub struct Reweighted<'a, F> {
    f: F,
    pi: &'a dyn InputDistribution,
    q: &'a MultivariateNormal,
}

impl<F: Fn(&[f64]) -> f64> Reweighted<'_, F> {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let lq = self.q.ln_pdf(x);
        if !lq.is_finite() || lq.exp() == 0.0 {
            return Err(Error::DensityUnderflow(x.to_vec()));
        }
        let lp = self.pi.ln_pdf(x);
        Ok((self.f)(x) * (lp - lq).exp())
    }
}

pub fn importance_reweight<'a, F: Fn(&[f64]) -> f64>(
    f: F,
    pi: &'a dyn InputDistribution,
    q: &'a MultivariateNormal,
) -> Result<Reweighted<'a, F>> {
    check_dim(pi.dim(), q.dim())?;
    Ok(Reweighted { f, pi, q })
}

/// Settings for the sequential BQ design loop.
#[derive(Debug, Clone, PartialEq)]
pub struct BqLoopOptions {
    pub pool_size: usize,
    /// Refit hyperparameters every this many additions (0 = never).
    pub refit_every: usize,
    pub fit: FitOptions,
}

impl Default for BqLoopOptions {
    fn default() -> Self {
        Self {
            pool_size: 500,
            refit_every: 1,
            fit: FitOptions::default(),
        }
    }
}

/// Grows a design by repeatedly adding the variance-optimal pool point
/// (pool drawn from π), evaluating `f` there. Returns the final posterior,
/// stopping early when no pool point would change the posterior.
#[allow(clippy::too_many_arguments)]
pub fn bq_active_run<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    gp0: GpPosterior,
    pi: &dyn InputDistribution,
    embedder: &Embedder,
    additions: usize,
    options: &BqLoopOptions,
    seed: u64,
) -> Result<GpPosterior> {
    let mut gp = gp0;
    let mut kernel = gp.kernel().clone();
    for it in 0..additions {
        let pool = CandidatePool {
            points: pi.sample_n(options.pool_size, &mut rng_from_seed(sub_seed(seed, it as u64))),
            provenance: crate::design::Provenance::MonteCarlo,
        };
        let u = bq_utilities(&gp, embedder, &pool.points)?;
        let Some(idx) = argmax(u.iter().map(|v| v.unwrap_or(f64::NAN))) else {
            break;
        };
        let x = pool.points[idx].clone();
        let y = f(&x);
        let mut data: Dataset = gp.data().clone();
        data.push(x, y)?;
        let prior_mean = crate::gp::PriorMean::fit_ols(gp.prior_mean().family, &data);
        gp = if options.refit_every > 0 && (it + 1) % options.refit_every == 0 {
            let opts = FitOptions {
                seed: sub_seed(options.fit.seed, it as u64),
                ..options.fit.clone()
            };
            let (k, g) = fit_hyperparameters(&kernel, &prior_mean, &data, &opts)?;
            kernel = k;
            g
        } else {
            GpPosterior::fit(kernel.clone(), prior_mean, data)?
        };
    }
    Ok(gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ProductDistribution;
    use crate::gp::PriorMean;

    #[test]
    fn analytic_embedding_at_origin() {
        let data = Dataset::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let gp = GpPosterior::fit(KernelSpec::se(1.0, 1.0), PriorMean::zero(), data).unwrap();
        let e = se_embedding_analytic(&gp).unwrap();
        assert!((e.w[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn analytic_embedding_rejects_other_kernels() {
        let data = Dataset::new(vec![vec![0.0, 1.0]], vec![1.0]).unwrap();
        let m = KernelSpec::new(KernelFamily::Matern52, 1.0, vec![1.0]);
        let gp = GpPosterior::fit(m, PriorMean::zero(), data.clone()).unwrap();
        assert!(se_embedding_analytic(&gp).is_err());
        let aniso = KernelSpec::se(1.0, 1.0).anisotropic(2);
        let gp = GpPosterior::fit(aniso, PriorMean::zero(), data).unwrap();
        assert!(se_embedding_analytic(&gp).is_err());
    }

    #[test]
    fn single_node_embedding_is_kernel_value() {
        let data = Dataset::new(vec![vec![0.3]], vec![1.0]).unwrap();
        let k = KernelSpec::se(1.0, 0.7);
        let gp = GpPosterior::fit(k.clone(), PriorMean::zero(), data).unwrap();
        let pi = ProductDistribution::standard_normal(1);
        let e = embedding_mc(&gp, &pi, 1, 9).unwrap();
        let Embedder::MonteCarlo { nodes, .. } = Embedder::monte_carlo(&pi, 1, 9).unwrap() else {
            unreachable!()
        };
        assert_eq!(e.w[0], k.eval(&[0.3], &nodes[0]).unwrap());
    }

    #[test]
    fn prior_only_estimate() {
        let gp = GpPosterior::fit(KernelSpec::se(2.0, 1.0), PriorMean::zero(), Dataset::empty(1).unwrap()).unwrap();
        let e = se_embedding_analytic(&gp).unwrap();
        let est = bq_estimate(&gp, &e).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.variance, e.double_integral);
    }

    #[test]
    fn reweight_identity() {
        let q = MultivariateNormal::new(DVector::from_vec(vec![0.0]), nalgebra::DMatrix::identity(1, 1)).unwrap();
        let f = |x: &[f64]| x[0].sin();
        let r = importance_reweight(f, &q, &q).unwrap();
        assert!((r.eval(&[0.4]).unwrap() - 0.4f64.sin()).abs() < 1e-15);
        assert!(matches!(r.eval(&[1e3]), Err(Error::DensityUnderflow(_))));
    }
}
