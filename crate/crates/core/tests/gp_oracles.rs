//! GP core checked against independent linear-algebra and finite-difference oracles.

use gpuq::gp::{Dataset, GpPosterior, PriorMean, PriorMeanFamily};
use gpuq::hyper::{
    fit_hyperparameters, log_marginal_likelihood, loo_loss, loo_predictions, mle_objective, select_kernel_cv,
    CvOptions, FitOptions, Objective,
};
use gpuq::kernel::{KernelFamily, KernelSpec};
use gpuq::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_points(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| scale * r.random::<f64>()).collect()).collect()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn toy_data(seed: u64, m: usize, d: usize) -> Dataset {
    let mut r = rng(seed);
    let xs = random_points(&mut r, m, d, 2.0);
    let ys = xs.iter().map(|x| x.iter().map(|v| (2.0 * v).sin()).sum::<f64>() + 0.3).collect();
    Dataset::new(xs, ys).unwrap()
}

#[test]
fn general_matern_matches_closed_form_52() {
    let mut r = rng(1);
    let general = KernelSpec::new(KernelFamily::MaternGeneral, 1.3, vec![0.7]).with_smoothness(vec![2.5]);
    let closed = KernelSpec::new(KernelFamily::Matern52, 1.3, vec![0.7]);
    for _ in 0..100 {
        let x: Vec<f64> = (0..2).map(|_| 3.0 * r.random::<f64>()).collect();
        let y: Vec<f64> = (0..2).map(|_| 3.0 * r.random::<f64>()).collect();
        let a = general.eval(&x, &y).unwrap();
        let b = closed.eval(&x, &y).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn general_matern_half_is_exponential() {
    let general = KernelSpec::new(KernelFamily::MaternGeneral, 1.0, vec![1.0]).with_smoothness(vec![0.5]);
    let expo = KernelSpec::new(KernelFamily::Matern12, 1.0, vec![1.0]);
    for i in 0..50 {
        let t = 0.1 * i as f64;
        let a = general.eval(&[0.0], &[t]).unwrap();
        let b = expo.eval(&[0.0], &[t]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn large_alpha_rq_approaches_se() {
    let rq = KernelSpec::new(KernelFamily::RationalQuadratic, 1.0, vec![1.0]).with_smoothness(vec![1e6]);
    let se = KernelSpec::se(1.0, 1.0);
    let mut r = rng(2);
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = (0..3).map(|_| r.random::<f64>()).collect();
        assert!((rq.eval(&x, &y).unwrap() - se.eval(&x, &y).unwrap()).abs() < 1e-4);
    }
}

#[test]
fn gram_matrices_are_symmetric_psd() {
    let mut r = rng(3);
    let families = [
        KernelSpec::se(1.0, 0.5),
        KernelSpec::new(KernelFamily::Matern12, 2.0, vec![0.3]),
        KernelSpec::new(KernelFamily::Matern32, 1.0, vec![0.8]),
        KernelSpec::new(KernelFamily::Matern52, 1.0, vec![0.4, 1.0, 2.0]),
        KernelSpec::new(KernelFamily::MaternGeneral, 1.0, vec![0.6]).with_smoothness(vec![1.7]),
        KernelSpec::new(KernelFamily::RationalQuadratic, 1.0, vec![0.5]).with_smoothness(vec![0.8]),
        KernelSpec::new(KernelFamily::Linear, 1.0, vec![]),
        KernelSpec::new(KernelFamily::Polynomial, 1.0, vec![]).with_smoothness(vec![3.0, 0.5]),
    ];
    for k in &families {
        let x = random_points(&mut r, 5, 3, 1.0);
        let g = k.gram(&x, false);
        assert_eq!(g, g.transpose(), "{:?}", k.family);
        assert!(min_eigenvalue(&g) >= -1e-10, "{:?}", k.family);
    }
}

#[test]
fn gram_matrix_entries_and_dimension_check() {
    let k = KernelSpec::se(2.0, 1.0);
    let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
    assert_eq!(k.gram_matrix(&x, &x).unwrap()[(0, 0)], 2.0);
    let bad = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
    assert!(matches!(k.gram_matrix(&x, &bad), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn cholesky_reconstructs_covariance() {
    let mut r = rng(4);
    let xs = random_points(&mut r, 20, 2, 3.0);
    let ys: Vec<f64> = xs.iter().map(|x| x[0] - x[1]).collect();
    let k = KernelSpec::new(KernelFamily::Matern52, 1.5, vec![0.9, 1.4]).with_noise(1e-3);
    let gp = GpPosterior::fit(k.clone(), PriorMean::zero(), Dataset::new(xs.clone(), ys).unwrap()).unwrap();
    let l = gp.factor();
    let mut sigma = k.gram(&xs, true);
    for i in 0..20 {
        sigma[(i, i)] += gp.jitter();
    }
    let rel = (l * l.transpose() - &sigma).norm() / sigma.norm();
    assert!(rel < 1e-10, "relative error {rel}");
}

/// Conditional of a jointly Gaussian (f(x₁), f(x₂), f(x)) computed by an
/// explicit block inverse.
#[test]
fn prediction_matches_joint_gaussian_conditioning() {
    let k = KernelSpec::se(1.7, 0.6);
    let pts = [vec![0.1], vec![0.9], vec![0.45]];
    let y = [0.4, -0.8];
    let gp = GpPosterior::fit(
        k.clone(),
        PriorMean::constant(0.2),
        Dataset::new(pts[..2].to_vec(), y.to_vec()).unwrap(),
    )
    .unwrap();
    let joint = DMatrix::from_fn(3, 3, |i, j| k.eval(&pts[i], &pts[j]).unwrap());
    let kxx = joint.view((0, 0), (2, 2)).into_owned();
    let kx = joint.view((2, 0), (1, 2)).into_owned();
    let inv = kxx.lu().try_inverse().unwrap();
    let resid = DVector::from_vec(vec![y[0] - 0.2, y[1] - 0.2]);
    let mean = 0.2 + (&kx * &inv * resid)[0];
    let var = joint[(2, 2)] - (&kx * &inv * kx.transpose())[0];
    let (u, s2) = gp.predict(&pts[2]).unwrap();
    assert!((u - mean).abs() < 1e-10);
    assert!((s2 - var).abs() < 1e-10);
}

#[test]
fn noisy_prediction_matches_conditioning_with_noise() {
    let k = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![0.5]).with_noise(0.05);
    let xs = vec![vec![0.0], vec![0.3], vec![1.0]];
    let ys = vec![1.0, 0.7, -0.2];
    let gp = GpPosterior::fit(k.clone(), PriorMean::zero(), Dataset::new(xs.clone(), ys.clone()).unwrap()).unwrap();
    let sigma = k.gram(&xs, true);
    let inv = sigma.lu().try_inverse().unwrap();
    let x = [0.6];
    let kv = DVector::from_iterator(3, xs.iter().map(|p| k.eval(p, &x).unwrap()));
    let mean = kv.dot(&(&inv * DVector::from_vec(ys)));
    let var = 1.0 - kv.dot(&(&inv * &kv));
    let (u, s2) = gp.predict(&x).unwrap();
    assert!((u - mean).abs() < 1e-10);
    assert!((s2 - var).abs() < 1e-10);
    let (_, s2_obs) = gp.predict_observation(&x).unwrap();
    assert!((s2_obs - var - 0.05).abs() < 1e-10);
}

#[test]
fn covariance_is_zero_at_training_points_and_psd() {
    let data = toy_data(5, 8, 2);
    let gp = GpPosterior::fit(KernelSpec::se(1.0, 0.7), PriorMean::zero(), data.clone()).unwrap();
    let mut r = rng(6);
    for _ in 0..20 {
        let x: Vec<f64> = (0..2).map(|_| 2.0 * r.random::<f64>()).collect();
        assert!(gp.covariance(&data.inputs()[3], &x).unwrap().abs() < 1e-8);
        let pair = vec![x.clone(), (0..2).map(|_| 2.0 * r.random::<f64>()).collect()];
        let c = gp.covariance_matrix(&pair).unwrap();
        assert!(min_eigenvalue(&c) >= -1e-10);
        assert!((c[(0, 0)] - gp.predict(&x).unwrap().1).abs() < 1e-12);
    }
}

fn finite_difference_check(objective: Objective, seed: u64) {
    let data = toy_data(seed, 10, 2);
    let k = KernelSpec::new(KernelFamily::Matern52, 1.2, vec![0.6, 0.9]).with_noise(1e-2);
    let pm = PriorMean::fit_ols(PriorMeanFamily::Constant, &data);
    let eval = |k: &KernelSpec| match objective {
        Objective::Mle => log_marginal_likelihood(k, &pm, &data).unwrap(),
        Objective::Loo => loo_loss(k, &pm, &data).unwrap(),
    };
    let base = eval(&k);
    let theta = k.log_params(&base.params);
    let h = 1e-5;
    for (i, g) in base.gradient.iter().enumerate() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let fd = (eval(&k.with_log_params(&base.params, &tp)).value
            - eval(&k.with_log_params(&base.params, &tm)).value)
            / (2.0 * h);
        let rel = (g - fd).abs() / fd.abs().max(1e-6);
        assert!(rel < 1e-4, "{objective:?} param {:?}: analytic {g}, fd {fd}", base.params[i]);
    }
}

#[test]
fn mle_gradient_matches_finite_differences() {
    for seed in 0..5 {
        finite_difference_check(Objective::Mle, seed);
    }
}

#[test]
fn loo_gradient_matches_finite_differences() {
    for seed in 0..5 {
        finite_difference_check(Objective::Loo, 100 + seed);
    }
}

#[test]
fn data_fit_term_invariant_under_joint_scaling() {
    let data = toy_data(7, 6, 1);
    let doubled = data.with_responses(data.responses().iter().map(|y| 2.0 * y).collect()).unwrap();
    let k = KernelSpec::se(1.0, 0.5);
    let k4 = KernelSpec::se(4.0, 0.5);
    let a = log_marginal_likelihood(&k, &PriorMean::zero(), &data).unwrap().value;
    let b = log_marginal_likelihood(&k4, &PriorMean::zero(), &doubled).unwrap().value;
    // Only ½log|4Σ| − ½log|Σ| = m·log 2 separates the two.
    assert!((b - a - 6.0 * 2f64.ln()).abs() < 1e-9);
}

#[test]
fn closed_form_loo_matches_literal_refits() {
    let data = toy_data(8, 6, 2);
    let k = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![0.8]).with_noise(1e-3);
    let closed = loo_predictions(&k, &PriorMean::zero(), &data).unwrap();
    for (i, (u, s2)) in closed.iter().enumerate() {
        let keep: Vec<usize> = (0..6).filter(|&j| j != i).collect();
        let gp = GpPosterior::fit(k.clone(), PriorMean::zero(), data.subset(&keep)).unwrap();
        let (ur, s2r) = gp.predict_observation(&data.inputs()[i]).unwrap();
        assert!((u - ur).abs() < 1e-8, "fold {i}: {u} vs {ur}");
        assert!((s2 - s2r).abs() < 1e-8, "fold {i}: {s2} vs {s2r}");
    }
}

#[test]
fn perfectly_predicted_point_contributes_log_variance_only() {
    // Two-point data where each point is predicted exactly by the other:
    // y = 0 everywhere with a zero mean.
    let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
    let k = KernelSpec::se(1.0, 1.0);
    let loss = loo_loss(&k, &PriorMean::zero(), &data).unwrap().value;
    let s2: f64 = loo_predictions(&k, &PriorMean::zero(), &data)
        .unwrap()
        .iter()
        .map(|(_, v)| 0.5 * v.ln())
        .sum();
    assert!((loss - s2).abs() < 1e-12);
}

/// Draws y ~ N(0, K + ν²I) for the SE kernel with σ₀² = 1.
fn se_sample(seed: u64, m: usize, ell: f64, nugget: f64) -> Dataset {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = (0..m).map(|i| vec![5.0 * (i as f64 + r.random::<f64>()) / m as f64]).collect();
    let k = KernelSpec::se(1.0, ell).with_noise(nugget);
    let l = k.gram(&xs, true).cholesky().unwrap().l();
    let z = DVector::from_fn(m, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = l * z;
    Dataset::new(xs, y.iter().copied().collect()).unwrap()
}

#[test]
fn mle_recovers_length_scale_in_the_scanned_basin() {
    // A tiny fixed nugget keeps the 60-point Gram matrix factorizable; the
    // fit uses the same nugget so the model is well specified.
    let nugget = 1e-8;
    let data = se_sample(9, 60, 0.5, nugget);
    let template = KernelSpec::se(1.0, 1.0).with_noise(nugget);
    let opts = FitOptions {
        optimize_noise: Some(false),
        ..FitOptions::default().with_seed(3).with_restarts(4)
    };
    let (k, _) = fit_hyperparameters(&template, &PriorMean::zero(), &data, &opts).unwrap();
    let fitted = k.length_scales[0].ln();
    assert!((fitted - 0.5f64.ln()).abs() < 0.3, "fitted ℓ = {}", k.length_scales[0]);

    // Grid scan of the objective surface over (log σ₀², log ℓ).
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..61 {
        for j in 0..41 {
            let ls = -2.5 + 3.0 * i as f64 / 60.0;
            let lv = -3.0 + 6.0 * j as f64 / 40.0;
            let kk = KernelSpec::se(lv.exp(), ls.exp()).with_noise(nugget);
            if let Ok(v) = log_marginal_likelihood(&kk, &PriorMean::zero(), &data) {
                if v.value < best.0 {
                    best = (v.value, ls);
                }
            }
        }
    }
    assert!((best.1 - fitted).abs() < 0.1, "grid optimum log ℓ {} vs fitted {fitted}", best.1);
    let at_fit = log_marginal_likelihood(&k, &PriorMean::zero(), &data).unwrap().value;
    assert!(at_fit <= best.0 + 1e-6);
}

#[test]
fn fitted_objective_never_exceeds_the_template() {
    let data = toy_data(10, 15, 2);
    let template = KernelSpec::new(KernelFamily::Matern52, 1.0, vec![1.0, 1.0]).with_noise(1e-4);
    let pm = PriorMean::zero();
    for objective in [Objective::Mle, Objective::Loo] {
        let opts = FitOptions {
            objective,
            restarts: 1,
            ..FitOptions::default()
        };
        let (k, _) = fit_hyperparameters(&template, &pm, &data, &opts).unwrap();
        let params = template.free_params(true);
        let value = |k: &KernelSpec| match objective {
            Objective::Mle => mle_objective(k, &pm, &data, &params).unwrap().value,
            Objective::Loo => loo_loss(k, &pm, &data).unwrap().value,
        };
        assert!(value(&k) <= value(&template) + 1e-12, "{objective:?}");
    }
}

#[test]
fn fitting_is_bit_reproducible() {
    let data = toy_data(11, 20, 1);
    let opts = FitOptions::default().with_seed(42);
    let t = KernelSpec::se(1.0, 1.0);
    let (a, _) = fit_hyperparameters(&t, &PriorMean::zero(), &data, &opts).unwrap();
    let (b, _) = fit_hyperparameters(&t, &PriorMean::zero(), &data, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_restarts_rejected() {
    let data = toy_data(12, 5, 1);
    let opts = FitOptions::default().with_restarts(0);
    assert!(fit_hyperparameters(&KernelSpec::se(1.0, 1.0), &PriorMean::zero(), &data, &opts).is_err());
}

#[test]
fn cv_prefers_linear_kernel_for_linear_data() {
    let mut r = rng(13);
    let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![4.0 * r.random::<f64>()]).collect();
    let ys = xs.iter().map(|x| 1.5 * x[0] + 0.05 * r.sample::<f64, _>(StandardNormal)).collect();
    let data = Dataset::new(xs, ys).unwrap();
    let cands = [KernelSpec::se(1.0, 1.0), KernelSpec::new(KernelFamily::Linear, 1.0, vec![])];
    // σ₀²·x·x' has no offset, so the line goes through the origin and the
    // prior mean stays zero.
    let opts = CvOptions {
        prior_mean: PriorMeanFamily::Zero,
        ..CvOptions::default()
    };
    let best = select_kernel_cv(&cands, &data, 5, 1, &opts).unwrap();
    assert_eq!(best.family, KernelFamily::Linear);
}

#[test]
fn cv_prefers_se_for_smooth_sinusoid() {
    let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![6.0 * i as f64 / 29.0]).collect();
    let ys = xs.iter().map(|x| x[0].sin()).collect();
    let data = Dataset::new(xs, ys).unwrap();
    let cands = [
        KernelSpec::new(KernelFamily::Matern12, 1.0, vec![1.0]),
        KernelSpec::se(1.0, 1.0),
    ];
    let best = select_kernel_cv(&cands, &data, 5, 2, &CvOptions::default()).unwrap();
    assert_eq!(best.family, KernelFamily::SquaredExponential);
}

#[test]
fn cv_single_candidate_returned_unchanged() {
    let data = toy_data(14, 6, 1);
    let c = KernelSpec::new(KernelFamily::Matern32, 0.3, vec![2.0]);
    let best = select_kernel_cv(std::slice::from_ref(&c), &data, 3, 0, &CvOptions::default()).unwrap();
    assert_eq!(best, c);
}
