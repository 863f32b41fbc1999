//! Acquisition functions against Φ and Monte Carlo oracles, acquisition
//! maximization against exhaustive scoring, and the BO loop on toys with
//! known optima.

use gpuq::bayesopt::{
    acquire, bo_run, ei, pi, pof, ucb, write_history_csv, AcquisitionKind, AcquisitionSpec, BoOptions, BoState,
    ConstraintMode,
};
use gpuq::design::{CandidatePool, Domain, Provenance};
use gpuq::gp::{Dataset, GpPosterior, PriorMean};
use gpuq::kernel::KernelSpec;
use gpuq::model::Counted;
use gpuq::stats::norm_cdf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Plain = fn(&[f64]) -> f64;

fn no_constraints() -> Vec<Counted<Plain>> {
    Vec::new()
}

fn state_with(gp: GpPosterior, constraint_gps: Vec<GpPosterior>, incumbent: Option<(Vec<f64>, f64)>) -> BoState {
    BoState {
        objective_gp: Some(gp),
        constraint_gps,
        incumbent,
        history: Vec::new(),
        n_evals: 0,
        diagnostics: Vec::new(),
    }
}

fn fit_1d(xs: &[f64], ys: &[f64], k: KernelSpec) -> GpPosterior {
    let data = Dataset::new(xs.iter().map(|&x| vec![x]).collect(), ys.to_vec()).unwrap();
    GpPosterior::fit(k, PriorMean::zero(), data).unwrap()
}

#[test]
fn ei_closed_form_matches_monte_carlo() {
    assert!((ei(0.0, 1.0, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
    assert_eq!(ei(-1.0, 0.0, 0.0), 0.0);
    assert_eq!(ei(2.0, 0.0, 0.5), 1.5);

    let (u, s, yb) = (1.0, 0.5, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        acc += (u + s * z - yb).max(0.0);
    }
    assert!((ei(u, s, yb) - acc / n as f64).abs() < 1e-3);
}

#[test]
fn pi_ucb_pof_examples() {
    assert!((pi(0.3, 1.0, 0.3, 0.0) - 0.5).abs() < 1e-15);
    assert!(pi(0.0, 1.0, 0.0, 1e6) < 1e-300);
    assert!((pi(1.0, 2.0, 0.0, 0.5) - 0.598_706_325_682_923_6).abs() < 1e-9);
    assert!((pi(1.0, 2.0, 0.0, 0.5) - norm_cdf(0.25)).abs() < 1e-15);
    assert_eq!(pi(1.0, 0.0, 0.0, 0.5), 1.0);
    assert_eq!(pi(0.4, 0.0, 0.0, 0.5), 0.0);

    assert_eq!(ucb(1.3, 2.0, 0.0), 1.3);
    assert_eq!(ucb(1.3, 0.0, 5.0), 1.3);
    assert!((ucb(1.0, 2.0, 1.96) - 4.92).abs() < 1e-12);

    assert_eq!(pof(0.0, 0.7), 0.5);
    assert!((pof(-3.0 * 0.4, 0.4) - 0.998_650_101_968_369_9).abs() < 1e-9);
    assert_eq!(pof(0.0, 0.0), 1.0);
    assert_eq!(pof(1e-9, 0.0), 0.0);
}

#[test]
fn spec_validation() {
    let mut s = AcquisitionSpec::ei();
    s.xi = -0.1;
    assert!(s.validate().is_err());
    for eps in [0.0, 1.0, -0.2, 1.5] {
        assert!(AcquisitionSpec::ei().with_constraints(ConstraintMode::PofThreshold(eps)).validate().is_err());
    }
    assert!(AcquisitionSpec::ei().with_constraints(ConstraintMode::PofThreshold(0.95)).validate().is_ok());
}

#[test]
fn ei_never_picks_the_noise_free_incumbent() {
    let xs = [0.1, 0.4, 0.6, 0.9];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| (6.0 * x).sin()).collect();
    let gp = fit_1d(&xs, &ys, KernelSpec::se(1.0, 0.2));
    let (bi, yb) = ys.iter().enumerate().fold((0, f64::MIN), |a, (i, &y)| if y > a.1 { (i, y) } else { a });
    let state = state_with(gp, Vec::new(), Some((vec![xs[bi]], yb)));
    let mut pts = vec![vec![xs[bi]]];
    pts.extend((0..50).map(|i| vec![i as f64 / 49.0]));
    let pool = CandidatePool { points: pts, provenance: Provenance::Grid };
    let idx = acquire(&state, &pool, &AcquisitionSpec::ei()).unwrap();
    assert_ne!(idx, 0);

    let single = CandidatePool { points: vec![vec![0.77]], provenance: Provenance::Grid };
    assert_eq!(acquire(&state, &single, &AcquisitionSpec::ei()).unwrap(), 0);
    let empty = CandidatePool { points: Vec::new(), provenance: Provenance::Grid };
    assert!(acquire(&state, &empty, &AcquisitionSpec::ei()).is_err());
}

/// Scores every pool point from scratch with GP predictions and the
/// acquisition formulas, then takes the first maximizer.
fn brute_force(
    gp: &GpPosterior,
    cgp: &GpPosterior,
    yb: f64,
    pool: &CandidatePool,
    spec: &AcquisitionSpec,
) -> usize {
    let mut scores = Vec::new();
    let mut feas = Vec::new();
    for x in &pool.points {
        let (u, v) = gp.predict(x).unwrap();
        let (ug, vg) = cgp.predict(x).unwrap();
        let p = norm_cdf(-ug / vg.max(0.0).sqrt());
        let s = v.max(0.0).sqrt();
        let a = match spec.kind {
            AcquisitionKind::Ei => {
                let z = (u - yb) / s;
                (u - yb) * norm_cdf(z) + s * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
            AcquisitionKind::Pi => norm_cdf((u - yb - spec.xi) / s),
            AcquisitionKind::Ucb => u + spec.xi * s,
        };
        scores.push(a);
        feas.push(p);
    }
    let first_max = |v: Vec<f64>| {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    };
    match spec.constraint_mode {
        ConstraintMode::None => first_max(scores),
        ConstraintMode::ProductPof => first_max(scores.iter().zip(&feas).map(|(a, p)| a * p).collect()),
        ConstraintMode::PofThreshold(eps) => {
            if feas.iter().any(|&p| p >= eps) {
                first_max(scores.iter().zip(&feas).map(|(&a, &p)| if p >= eps { a } else { f64::MIN }).collect())
            } else {
                first_max(feas)
            }
        }
    }
}

#[test]
fn constrained_acquisition_matches_exhaustive_scoring() {
    let xs = [0.05, 0.3, 0.55, 0.8, 0.95];
    let f: Vec<f64> = xs.iter().map(|&x: &f64| -(x - 0.6f64).powi(2) + 0.1 * (9.0 * x).sin()).collect();
    let g: Vec<f64> = xs.iter().map(|&x| x - 0.5).collect();
    let gp = fit_1d(&xs, &f, KernelSpec::se(0.1, 0.25));
    let cgp = fit_1d(&xs, &g, KernelSpec::se(0.3, 0.4));
    let (bi, yb) = xs
        .iter()
        .zip(&f)
        .zip(&g)
        .filter(|(_, &c)| c <= 0.0)
        .map(|((&x, &y), _)| (x, y))
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let state = state_with(gp.clone(), vec![cgp.clone()], Some((vec![bi], yb)));
    let pool = CandidatePool::grid_1d(0.0, 1.0, 401);
    for kind in [AcquisitionKind::Ei, AcquisitionKind::Pi, AcquisitionKind::Ucb] {
        for mode in [
            ConstraintMode::None,
            ConstraintMode::ProductPof,
            ConstraintMode::PofThreshold(0.9),
            ConstraintMode::PofThreshold(0.999_999_999),
        ] {
            let spec = AcquisitionSpec { kind, xi: 0.05, constraint_mode: mode };
            let got = acquire(&state, &pool, &spec).unwrap();
            let want = brute_force(&gp, &cgp, yb, &pool, &spec);
            assert_eq!(got, want, "{kind:?} {mode:?}");
        }
    }
}

#[test]
fn product_pof_without_constraints_is_unconstrained() {
    let xs = [0.0, 0.35, 0.7, 1.0];
    let ys = [0.2, 0.9, 0.4, -0.3];
    let gp = fit_1d(&xs, &ys, KernelSpec::se(0.5, 0.3));
    let state = state_with(gp, Vec::new(), Some((vec![0.35], 0.9)));
    let pool = CandidatePool::grid_1d(0.0, 1.0, 301);
    for kind in [AcquisitionKind::Ei, AcquisitionKind::Pi, AcquisitionKind::Ucb] {
        let plain = AcquisitionSpec { kind, xi: 0.1, constraint_mode: ConstraintMode::None };
        let prod = AcquisitionSpec { constraint_mode: ConstraintMode::ProductPof, ..plain };
        assert_eq!(acquire(&state, &pool, &plain).unwrap(), acquire(&state, &pool, &prod).unwrap());
    }
}

#[test]
fn cold_start_without_feasible_point_maximizes_feasibility() {
    let xs = [0.6, 0.8, 1.0];
    let gp = fit_1d(&xs, &[1.0, 2.0, 3.0], KernelSpec::se(1.0, 0.3));
    let cgp = fit_1d(&xs, &[0.1, 0.3, 0.5], KernelSpec::se(1.0, 0.5));
    let state = state_with(gp, vec![cgp.clone()], None);
    let pool = CandidatePool::grid_1d(0.0, 1.0, 101);
    let idx = acquire(&state, &pool, &AcquisitionSpec::ei()).unwrap();
    let p: Vec<f64> = pool
        .points
        .iter()
        .map(|x| {
            let (u, v) = cgp.predict(x).unwrap();
            norm_cdf(-u / v.sqrt())
        })
        .collect();
    let best = p.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(p[idx], best);
}

fn assert_history_invariants(state: &BoState, budget: usize) {
    assert_eq!(state.history.len(), state.n_evals);
    assert!(state.n_evals <= budget);
    let mut prev = f64::NEG_INFINITY;
    for h in &state.history {
        if h.y_best_so_far.is_nan() {
            assert!(prev == f64::NEG_INFINITY, "best went back to undefined");
            continue;
        }
        assert!(h.y_best_so_far >= prev);
        prev = h.y_best_so_far;
    }
}

#[test]
fn bo_finds_interior_maximum() {
    let mut f = Counted::new(|x: &[f64]| -(x[0] - 0.3).powi(2));
    let domain = Domain::unit(1);
    let opts = BoOptions { m0: 4, budget: 15, seed: 5, ..BoOptions::default() };
    let state = bo_run(&mut f, &mut no_constraints(), &domain, &opts).unwrap();
    let (xb, yb) = state.incumbent.clone().unwrap();
    assert!((xb[0] - 0.3).abs() < 0.02, "x_best = {}", xb[0]);
    assert_eq!(f.calls(), 15);
    assert_eq!(state.n_evals, 15);
    let max_y = state.history.iter().map(|h| h.y).fold(f64::MIN, f64::max);
    assert_eq!(yb, max_y);
    assert_eq!(state.history.last().unwrap().y_best_so_far, yb);
    assert_history_invariants(&state, 15);
    assert!(state.history.iter().take(4).all(|h| h.iter == 0));
}

#[test]
fn bo_on_increasing_function_ends_near_the_boundary() {
    let mut f = Counted::new(|x: &[f64]| 2.0 * x[0] + 0.5);
    let opts = BoOptions { seed: 8, ..BoOptions::default() };
    let state = bo_run(&mut f, &mut no_constraints(), &Domain::unit(1), &opts).unwrap();
    let xb = state.incumbent.unwrap().0[0];
    assert!(xb >= 0.9, "x_best = {xb}");
}

#[test]
fn bo_respects_inequality_constraint() {
    let mut f = Counted::new(|x: &[f64]| x[0]);
    let mut cons = vec![Counted::new((|x: &[f64]| x[0] - 0.7) as Plain)];
    let opts = BoOptions {
        spec: AcquisitionSpec::ei().with_constraints(ConstraintMode::PofThreshold(0.95)),
        seed: 2,
        ..BoOptions::default()
    };
    let state = bo_run(&mut f, &mut cons, &Domain::unit(1), &opts).unwrap();
    let xb = state.incumbent.clone().unwrap().0[0];
    assert!((0.6..=0.72).contains(&xb), "x_best = {xb}");
    assert!(xb <= 0.7);
    assert_eq!(cons[0].calls(), 15);
    for h in &state.history {
        assert_eq!(h.is_feasible, h.constraints[0] <= 0.0);
    }
    assert_history_invariants(&state, 15);
}

#[test]
fn bo_rejects_bad_budgets_and_is_deterministic() {
    let domain = Domain::unit(1);
    for (m0, budget) in [(1, 10), (5, 4)] {
        let mut f = Counted::new(|x: &[f64]| x[0]);
        let opts = BoOptions { m0, budget, ..BoOptions::default() };
        assert!(bo_run(&mut f, &mut no_constraints(), &domain, &opts).is_err());
    }
    let run = || {
        let mut f = Counted::new(|x: &[f64]| (5.0 * x[0]).sin() * x[1]);
        let opts = BoOptions { budget: 9, seed: 21, ..BoOptions::default() };
        bo_run(&mut f, &mut no_constraints(), &Domain::unit(2), &opts).unwrap().history
    };
    assert_eq!(run(), run());
}

#[test]
fn noisy_mode_uses_posterior_mean_incumbent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<f64> = (0..64).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut k = 0;
    let mut f = Counted::new(move |x: &[f64]| {
        k += 1;
        -(x[0] - 0.5).powi(2) + noise[k % 64]
    });
    let opts = BoOptions { noisy: true, budget: 12, seed: 3, ..BoOptions::default() };
    let state = bo_run(&mut f, &mut no_constraints(), &Domain::unit(1), &opts).unwrap();
    let gp = state.objective_gp.as_ref().unwrap();
    let (xb, yb) = state.incumbent.clone().unwrap();
    assert!((gp.predict(&xb).unwrap().0 - yb).abs() < 1e-12);
    for h in &state.history {
        assert!(gp.predict(&h.x).unwrap().0 <= yb + 1e-12);
    }
    assert!(gp.kernel().noise_variance > 0.0);
    assert_history_invariants(&state, 12);
}

#[test]
fn history_csv_layout() {
    let mut f = Counted::new(|x: &[f64]| x[0] + x[1]);
    let mut cons = vec![Counted::new((|x: &[f64]| x[0] - 0.5) as Plain)];
    let opts = BoOptions { budget: 6, m0: 3, seed: 1, ..BoOptions::default() };
    let state = bo_run(&mut f, &mut cons, &Domain::unit(2), &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &state.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iter,x1,x2,y,constraint_1,is_feasible,y_best_so_far");
    assert_eq!(lines.count(), 6);
}
