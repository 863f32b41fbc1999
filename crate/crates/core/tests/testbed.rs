//! Pendulum physics checks and the five task drivers against direct
//! simulation, grid search and true-model MCMC oracles. Every driver runs
//! through an instrumented solver so its reported evaluation counts can
//! be checked exactly.

use std::sync::OnceLock;

use gpuq::calibrate::mh_sample;
use gpuq::dist::{rng_from_seed, sub_seed, InputDistribution, Marginal, ProductDistribution};
use gpuq::model::Counted;
use gpuq::risk::RiskUtility;
use gpuq::sensitivity::{pick_freeze, sobol_mc, SobolOptions};
use gpuq::testbed::pendulum::{final_angle, pendulum_solve, PendulumConfig, Trajectory};
use gpuq::testbed::tasks::{
    run_ou, run_pe, run_re, run_sa, run_up, saa_draws, saa_estimate, OuSpec, PeOptions, PeSpec, PendulumInputs,
    UpMethod, UpOptions,
};
use gpuq::Result;

fn config(theta0: f64, horizon: f64, dt: f64) -> PendulumConfig {
    PendulumConfig {
        theta0,
        length: 1.0,
        g: 9.81,
        horizon,
        dt,
    }
}

#[test]
fn small_angle_matches_harmonic_solution() {
    let tr = pendulum_solve(&config(0.01, 1.0, 1e-3)).unwrap();
    let exact = 0.01 * (9.81f64.sqrt() * 1.0).cos();
    assert!((tr.final_state().0 - exact).abs() < 1e-5);
    assert_eq!(tr.times.len(), 1001);
    assert_eq!(*tr.times.last().unwrap(), 1.0);
}

#[test]
fn energy_is_conserved() {
    let cfg = config(0.8, 10.0, 1e-3);
    let tr = pendulum_solve(&cfg).unwrap();
    let e0 = cfg.energy(cfg.theta0, 0.0);
    let drift = tr
        .theta
        .iter()
        .zip(&tr.omega)
        .map(|(t, o)| ((cfg.energy(*t, *o) - e0) / e0).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-6, "drift {drift}");
}

#[test]
fn step_halving_shows_fourth_order() {
    let th = |dt: f64| pendulum_solve(&config(1.0, 2.0, dt)).unwrap().final_state().0;
    let (a, b, c) = (th(0.04), th(0.02), th(0.01));
    let ratio = (a - b).abs() / (b - c).abs();
    assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn trajectory_interpolation_and_validation() {
    let tr = pendulum_solve(&config(0.3, 0.5, 0.1)).unwrap();
    let (t1, w1) = tr.at(0.1).unwrap();
    assert_eq!((t1, w1), (tr.theta[1], tr.omega[1]));
    let (mid, _) = tr.at(0.15).unwrap();
    assert!((mid - 0.5 * (tr.theta[1] + tr.theta[2])).abs() < 1e-15);
    assert!(tr.at(0.6).is_err());
    assert!(tr.at(-0.1).is_err());
    assert!(pendulum_solve(&PendulumConfig { length: 0.0, ..PendulumConfig::default() }).is_err());
    assert!(pendulum_solve(&PendulumConfig { dt: 3.0, ..PendulumConfig::default() }).is_err());
    // A horizon that is not a multiple of dt ends exactly on T.
    let odd = pendulum_solve(&config(0.3, 0.25, 0.1)).unwrap();
    assert_eq!(odd.times, vec![0.0, 0.1, 0.2, 0.25]);
    assert_eq!(
        final_angle(0.3, 1.0, 9.81, 0.25, 0.1).unwrap(),
        odd.final_state().0
    );
}

/// Runs `body` with a solver that counts its calls; returns the count.
fn counting<T>(body: impl FnOnce(&mut dyn FnMut(&PendulumConfig) -> Result<Trajectory>) -> T) -> (T, usize) {
    let mut calls = 0usize;
    let mut solver = |c: &PendulumConfig| {
        calls += 1;
        pendulum_solve(c)
    };
    let out = body(&mut solver);
    (out, calls)
}

fn narrow_inputs() -> PendulumInputs {
    PendulumInputs::with_cv(0.2, 1.0, 9.81, 0.01)
}

/// 10⁶ direct θ(T) draws under the narrow inputs, shared by the UP and RE
/// checks.
fn direct_samples() -> &'static [f64] {
    static CELL: OnceLock<Vec<f64>> = OnceLock::new();
    CELL.get_or_init(|| {
        let inputs = narrow_inputs();
        let mut rng = rng_from_seed(99);
        (0..1_000_000)
            .map(|_| {
                let x = inputs.marginals().map(|m| m.sample(&mut rng));
                pendulum_solve(&inputs.config(x)).unwrap().final_state().0
            })
            .collect()
    })
}

#[test]
fn up_point_masses_reduce_to_one_solve() {
    let inputs = PendulumInputs::with_cv(0.2, 1.0, 9.81, 0.0);
    for method in [UpMethod::GpMeanMc, UpMethod::Bq] {
        let (r, calls) = counting(|s| run_up(s, &inputs, method, 10, &UpOptions::default(), 1).unwrap());
        assert_eq!(calls, 1);
        assert_eq!(r.n_model_evals, 1);
        assert_eq!(r.mean, final_angle(0.2, 1.0, 9.81, 2.0, 1e-3).unwrap());
        assert_eq!(r.variance, 0.0);
    }
}

#[test]
fn up_matches_direct_simulation() {
    let ys = &direct_samples()[..100_000];
    let n = ys.len() as f64;
    let m = ys.iter().sum::<f64>() / n;
    let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
    let mut results = Vec::new();
    for method in [UpMethod::GpMeanMc, UpMethod::Bq] {
        let (r, calls) = counting(|s| run_up(s, &narrow_inputs(), method, 30, &UpOptions::default(), 3).unwrap());
        assert_eq!(r.n_model_evals, calls);
        assert!(calls <= 30);
        let sd = (r.mean_epistemic_variance + r.mean_mc_variance + v / n).sqrt();
        assert!((r.mean - m).abs() < 3.0 * sd, "{method:?}: {} vs {m} (sd {sd})", r.mean);
        assert!((r.variance / v - 1.0).abs() < 0.1, "{method:?}: var {} vs {v}", r.variance);
        results.push(r);
    }
    let (a, b) = (&results[0], &results[1]);
    let band = (a.mean_epistemic_variance + a.mean_mc_variance + b.mean_epistemic_variance + b.mean_mc_variance).sqrt();
    assert!((a.mean - b.mean).abs() < 3.0 * band);
    assert!(run_up(&mut pendulum_solve, &narrow_inputs(), UpMethod::Bq, 4, &UpOptions::default(), 1).is_err());
}

#[test]
fn re_trivial_thresholds() {
    let inputs = narrow_inputs();
    let (low, _) = run_re(&mut pendulum_solve, &inputs, -1.0, 20, RiskUtility::U, 10_000, 1).unwrap();
    assert_eq!(low.p_hat, 1.0);
    let (high, _) = run_re(&mut pendulum_solve, &inputs, 1.0, 20, RiskUtility::U, 10_000, 1).unwrap();
    assert_eq!(high.p_hat, 0.0);
}

#[test]
fn re_matches_direct_simulation() {
    let threshold = 0.2044;
    let ys = direct_samples();
    let oracle = ys.iter().filter(|&&y| y >= threshold).count() as f64 / ys.len() as f64;
    assert!((0.005..0.02).contains(&oracle), "oracle {oracle}");
    let ((est, audit), calls) =
        counting(|s| run_re(s, &narrow_inputs(), threshold, 60, RiskUtility::U, 100_000, 5).unwrap());
    assert_eq!(est.n_model_evals, calls);
    assert_eq!(audit.len(), calls);
    assert!(calls <= 60);
    assert!((est.p_hat / oracle - 1.0).abs() < 0.2, "{} vs {oracle}", est.p_hat);
}

#[test]
fn pe_surrogate_posterior_matches_true_model_mcmc() {
    let inputs = PendulumInputs::default();
    let spec = PeSpec::default();
    let (pe, calls) = counting(|s| run_pe(s, &inputs, &spec, 40, &PeOptions::default(), 7).unwrap());
    // One solve synthesizes the data.
    assert_eq!(calls, 1 + pe.n_model_evals + pe.n_predictive_evals);
    assert_eq!(pe.n_model_evals, 40);
    assert!(pe.coverage.unwrap() >= 0.9);

    let prior = ProductDistribution::new(inputs.marginals().to_vec()).unwrap();
    let obs = pe.observations.clone();
    let mut target = |x: &[f64]| {
        let Ok(tr) = pendulum_solve(&inputs.config([x[0], x[1], x[2]])) else {
            return f64::NEG_INFINITY;
        };
        let ll: f64 = spec
            .obs_times
            .iter()
            .zip(&obs)
            .map(|(t, y)| -0.5 * ((y - tr.at(*t).unwrap().0) / spec.noise_std).powi(2))
            .sum();
        ll + prior.ln_pdf(x)
    };
    let direct = mh_sample(&mut target, &[0.2, 1.0, 9.81], &[0.002, 0.005, 0.02], 6000, 1000, 1).unwrap();
    let (dm, ds) = (direct.mean(), direct.std());
    for i in 0..3 {
        assert!(
            (pe.posterior_mean[i] - dm[i]).abs() < 0.25 * ds[i],
            "parameter {i}: {} vs {}",
            pe.posterior_mean[i],
            dm[i]
        );
        assert!((pe.posterior_std[i] / ds[i] - 1.0).abs() < 0.25);
    }
}

#[test]
fn pe_noise_free_data_recovers_truth() {
    let spec = PeSpec { noise_std: 1e-8, ..PeSpec::default() };
    let pe = run_pe(&mut pendulum_solve, &PendulumInputs::default(), &spec, 40, &PeOptions::default(), 7).unwrap();
    for (i, e) in pe.relative_error.iter().enumerate() {
        assert!(*e < 0.01, "parameter {i}: relative error {e}");
    }
}

#[test]
fn pe_point_mass_prior_is_returned() {
    let inputs = PendulumInputs::with_cv(0.2, 1.0, 9.81, 0.0);
    let (pe, calls) = counting(|s| run_pe(s, &inputs, &PeSpec::default(), 40, &PeOptions::default(), 1).unwrap());
    assert_eq!(pe.posterior_mean, vec![0.2, 1.0, 9.81]);
    assert_eq!(pe.posterior_std, vec![0.0; 3]);
    assert_eq!(calls, 1);
    assert_eq!(pe.n_model_evals, 0);
    let bad = PeSpec { obs_times: vec![2.5], ..PeSpec::default() };
    assert!(run_pe(&mut pendulum_solve, &PendulumInputs::default(), &bad, 40, &PeOptions::default(), 1).is_err());
}

#[test]
fn sa_inactive_gravity() {
    let mut inputs = PendulumInputs::default();
    inputs.g = Marginal::PointMass { value: 9.81 };
    let (sa, calls) = counting(|s| run_sa(s, &inputs, 30, 100_000, 2).unwrap());
    assert_eq!(sa.sobol.n_evals, calls);
    assert_eq!(calls, 30);
    assert!(sa.sobol.first_order[2].abs() < 0.02);
    assert!(sa.sobol.total[2].abs() < 0.02);
}

#[test]
fn sa_matches_direct_sobol_and_is_stable() {
    let inputs = PendulumInputs::with_cv(0.2, 1.0, 9.81, 0.02);
    let m = pick_freeze(&inputs.marginals(), 20_000, 8).unwrap();
    let mut f = Counted::new(|x: &[f64]| pendulum_solve(&inputs.config([x[0], x[1], x[2]])).unwrap().final_state().0);
    let direct = sobol_mc(&mut f, &m, &SobolOptions::without_ci()).unwrap();
    assert_eq!(f.calls(), 100_000);
    let rank = |v: &[f64]| {
        let mut idx = vec![0usize, 1, 2];
        idx.sort_by(|a, b| v[*b].total_cmp(&v[*a]));
        idx
    };
    let mut ranks = Vec::new();
    for seed in [2, 3] {
        let sa = run_sa(&mut pendulum_solve, &inputs, 30, 100_000, seed).unwrap();
        let sum: f64 = sa.sobol.first_order.iter().sum();
        assert!((0.85..=1.05).contains(&sum), "sum {sum}");
        for i in 0..3 {
            assert!((sa.sobol.first_order[i] - direct.first_order[i]).abs() < 0.05, "S{i}");
            assert!((sa.sobol.total[i] - direct.total[i]).abs() < 0.05, "T{i}");
        }
        ranks.push(rank(&sa.sobol.total));
    }
    assert_eq!(ranks[0], ranks[1]);
    assert_eq!(ranks[0][0], rank(&direct.total)[0]);
}

fn deterministic_inputs() -> PendulumInputs {
    let mut inputs = PendulumInputs::default();
    inputs.length = Marginal::PointMass { value: 1.0 };
    inputs.g = Marginal::PointMass { value: 9.81 };
    inputs
}

#[test]
fn ou_deterministic_case_matches_grid_search() {
    let inputs = deterministic_inputs();
    let spec = OuSpec { sigma_theta: 0.0, n_saa: 1, ..OuSpec::default() };
    let (ou, calls) = counting(|s| run_ou(s, &inputs, &spec, 15, 4).unwrap());
    assert_eq!(ou.n_model_evals, calls);
    assert_eq!(ou.n_model_evals, ou.n_bo_evals * spec.n_saa);
    assert_eq!(ou.n_bo_evals, 15);

    let (lo, hi) = spec.mu_bounds;
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 0..=7000 {
        let mu = lo + (hi - lo) * k as f64 / 7000.0;
        let (th, om) = pendulum_solve(&inputs.config([mu, 1.0, 9.81])).unwrap().final_state();
        let obj = (th - spec.target).powi(2);
        if om >= 0.0 && obj < best.1 {
            best = (mu, obj);
        }
    }
    assert!((ou.mu_theta - best.0).abs() < 0.02, "mu {} vs grid {}", ou.mu_theta, best.0);
}

#[test]
fn ou_optimum_beats_bounds_and_is_feasible() {
    let inputs = PendulumInputs::default();
    let uncontrolled = pendulum_solve(&inputs.config([0.2, 1.0, 9.81])).unwrap().final_state().0;
    let spec = OuSpec { target: uncontrolled, ..OuSpec::default() };
    let seed = 6;
    let (ou, calls) = counting(|s| run_ou(s, &inputs, &spec, 15, seed).unwrap());
    assert_eq!(ou.n_model_evals, calls);

    let draws = saa_draws(&inputs, spec.n_saa, sub_seed(seed, 0));
    let (obj, con) = saa_estimate(&mut pendulum_solve, &inputs, &spec, &draws, ou.mu_theta);
    assert_eq!(obj, ou.objective);
    assert_eq!(con, ou.constraint);
    assert!(con >= 0.0);
    assert!(ou.pof >= 0.9, "pof {}", ou.pof);
    for bound in [spec.mu_bounds.0, spec.mu_bounds.1] {
        let (b, _) = saa_estimate(&mut pendulum_solve, &inputs, &spec, &draws, bound);
        assert!(ou.objective <= b);
    }
}

#[test]
fn drivers_are_seed_deterministic() {
    let inputs = narrow_inputs();
    let up = || run_up(&mut pendulum_solve, &inputs, UpMethod::Bq, 12, &UpOptions::default(), 9).unwrap();
    assert_eq!(up(), up());
    let re = || run_re(&mut pendulum_solve, &inputs, 0.2044, 20, RiskUtility::U, 5000, 9).unwrap();
    assert_eq!(format!("{:?}", re()), format!("{:?}", re()));
    let opts = PeOptions { mcmc_steps: 3000, burn_in: 500, n_predictive: 20, ..PeOptions::default() };
    let pe = || run_pe(&mut pendulum_solve, &inputs, &PeSpec::default(), 15, &opts, 9).unwrap();
    assert_eq!(pe(), pe());
    let sa = || run_sa(&mut pendulum_solve, &inputs, 12, 2000, 9).unwrap().audit;
    assert_eq!(sa(), sa());
    let ou = || run_ou(&mut pendulum_solve, &inputs, &OuSpec { n_saa: 5, ..OuSpec::default() }, 8, 9).unwrap();
    assert_eq!(format!("{:?}", ou()), format!("{:?}", ou()));
}
