//! Univariate and bivariate standard normal distribution functions.
//!
//! The bivariate CDF follows Genz's BVNU scheme: a Gauss–Legendre rule of
//! fixed order (6, 12 or 20 points depending on |ρ|) applied to Sheppard's
//! single-integral representation for |ρ| < 0.925, and to the Drezner–
//! Wesolowsky asymptotic expansion for strongly correlated pairs.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::OnceLock;

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Standard normal density φ(x).
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / TWO_PI.sqrt()
}

/// Standard normal CDF Φ(x).
pub fn norm_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of Φ. Returns ±∞ at the endpoints.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step against the more accurate CDF.
    let d = norm_pdf(x);
    if d > 0.0 {
        x - (norm_cdf(x) - p) / d
    } else {
        x
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], computed by Newton iteration
/// on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

struct Rules {
    rules: [(Vec<f64>, Vec<f64>); 3],
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules {
        rules: [gauss_legendre(6), gauss_legendre(12), gauss_legendre(20)],
    })
}

/// P[X > h, Y > k] for standard normals with correlation `r`.
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    let (nodes, weights) = {
        let rule = if r.abs() < 0.3 {
            &rules().rules[0]
        } else if r.abs() < 0.75 {
            &rules().rules[1]
        } else {
            &rules().rules[2]
        };
        (&rule.0, &rule.1)
    };

    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (t, w) in nodes.iter().zip(weights) {
            let sn = (asr * (1.0 + t) / 2.0).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        bvn = bvn * asr / (4.0 * PI) + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = TWO_PI.sqrt() * norm_cdf(-b / a);
                bvn -= (-hk / 2.0).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            let mut sum = 0.0;
            for (t, w) in nodes.iter().zip(weights) {
                let xs = (a * (1.0 + t)).powi(2);
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    let sp = 1.0 + c * xs * (1.0 + d * xs);
                    let rs = (1.0 - xs).sqrt();
                    let ep = (-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs;
                    sum += w * asr.exp() * (sp - ep);
                }
            }
            bvn = (a * sum - bvn) / TWO_PI;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 {
                norm_cdf(k) - norm_cdf(h)
            } else {
                norm_cdf(-h) - norm_cdf(-k)
            };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Standard bivariate normal CDF P[Z₁ ≤ h, Z₂ ≤ k] with correlation `rho`.
pub fn bivariate_normal_cdf(h: f64, k: f64, rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "correlation {rho} outside [-1, 1]"
        )));
    }
    Ok(bvn_upper(-h, -k, rho))
}

/// Like [`bivariate_normal_cdf`] but clamps `rho` into [-1, 1] first; used
/// where the correlation comes from a round-off-prone covariance ratio.
pub(crate) fn bvn_cdf_clamped(h: f64, k: f64, rho: f64) -> f64 {
    bvn_upper(-h, -k, rho.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(12);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((integral - 2.0 / 11.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cdf_and_quantile_agree() {
        for &p in &[1e-9, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((norm_cdf(norm_quantile(p)) / p - 1.0).abs() < 1e-13, "p={p}");
        }
        // Reference values from 30-digit arithmetic.
        let refs = [
            (-8.0, 6.2209605742717841e-16),
            (-5.0, 2.8665157187919391e-7),
            (-3.0, 1.3498980316300945e-3),
            (-1.5, 6.6807201268858066e-2),
            (-0.3, 0.38208857781104737),
            (0.7, 0.75803634777692697),
            (2.2, 0.98609655248650140),
            (6.0, 0.99999999901341235),
        ];
        for (x, want) in refs {
            assert!((norm_cdf(x) - want).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn independence_and_arcsine_identity() {
        assert!((bivariate_normal_cdf(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let v = bivariate_normal_cdf(0.0, 0.0, 0.5).unwrap();
        assert!((v - (0.25 + 1.0 / 12.0)).abs() < 1e-12);
        for i in -20..=20 {
            let rho = i as f64 / 20.0;
            let v = bivariate_normal_cdf(0.0, 0.0, rho).unwrap();
            let want = 0.25 + rho.asin() / TWO_PI;
            assert!((v - want).abs() < 1e-10, "rho={rho}: {v} vs {want}");
        }
    }

    #[test]
    fn degenerate_correlations() {
        let (h, k) = (0.3, -0.4);
        let v = bivariate_normal_cdf(h, k, 1.0).unwrap();
        assert!((v - norm_cdf(h.min(k))).abs() < 1e-14);
        let v = bivariate_normal_cdf(h, k, -1.0).unwrap();
        assert!((v - (norm_cdf(h) + norm_cdf(k) - 1.0).max(0.0)).abs() < 1e-14);
        let v = bivariate_normal_cdf(1.0, 2.0, -1.0).unwrap();
        assert!((v - (norm_cdf(1.0) + norm_cdf(2.0) - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_rho() {
        assert!(bivariate_normal_cdf(0.0, 0.0, 1.5).is_err());
    }

    /// Independent route: Φ₂(h,k;ρ) = ∫_{-∞}^{h} φ(x) Φ((k − ρx)/√(1−ρ²)) dx
    /// by composite Gauss–Legendre on [-12, h].
    fn one_d_integral(h: f64, k: f64, rho: f64) -> f64 {
        let (x, w) = gauss_legendre(40);
        let lo = -12.0f64;
        let panels = 400;
        let width = (h - lo) / panels as f64;
        let s = (1.0 - rho * rho).sqrt();
        let mut total = 0.0;
        for p in 0..panels {
            let a = lo + p as f64 * width;
            for (t, wt) in x.iter().zip(&w) {
                let u = a + 0.5 * width * (t + 1.0);
                total += 0.5 * width * wt * norm_pdf(u) * norm_cdf((k - rho * u) / s);
            }
        }
        total
    }

    #[test]
    fn matches_quadrature_route() {
        for &h in &[-2.5, -0.7, 0.0, 0.4, 1.9] {
            for &k in &[-1.8, -0.2, 0.6, 2.2] {
                for &rho in &[-0.99, -0.93, -0.6, -0.2, 0.1, 0.5, 0.8, 0.94, 0.999] {
                    let a = bivariate_normal_cdf(h, k, rho).unwrap();
                    let b = one_d_integral(h, k, rho);
                    assert!((a - b).abs() < 1e-9, "h={h} k={k} rho={rho}: {a} vs {b}");
                }
            }
        }
    }
}
