//! Subcommand pipelines: input loading happens in [`prepare`], before the
//! output directory is touched; computation and reporting in [`Job::run`].

use crate::builtins::{linear_limit_state, Toy};
use crate::*;
use gpuq::bayesopt::{bo_run, write_history_csv, AcquisitionKind, AcquisitionSpec, BoOptions, ConstraintMode};
use gpuq::calibrate::{
    agp_iterate, bape_run, default_proposal, prior_domain, surrogate_mh, AgpOptions, CalibrationOptions,
    CalibrationReport, CalibrationUtility, LogJointModel,
};
use gpuq::design::{lhs_marginals, Domain};
use gpuq::dist::{rng_from_seed, sub_seed, Marginal, ProductDistribution};
use gpuq::gp::{Dataset, GpPosterior, PriorMean, PriorMeanFamily};
use gpuq::hyper::{fit_hyperparameters, log_marginal_likelihood, loo_loss, FitOptions, Objective};
use gpuq::io::{fmt_csv, read_dataset_csv, read_points_csv, write_csv, write_dataset_csv, x_headers};
use gpuq::kernel::{KernelFamily, KernelSpec};
use gpuq::model::Counted;
use gpuq::quadrature::{bq_active_run, bq_estimate, BqLoopOptions, Embedder};
use gpuq::risk::{akmcs_run, AkMcsOptions, FailureEstimate, RiskUtility};
use gpuq::sensitivity::{
    active_sa_run, pick_freeze, sobol_mc, write_sobol_csv, ActiveSaOptions, SaAuditRow, SobolOptions, SobolResult,
};
use gpuq::testbed::pendulum::{final_angle, pendulum_solve};
use gpuq::testbed::tasks::{
    run_ou, run_pe, run_re, run_sa, run_up, OuSpec, PeOptions, PeSpec, UpMethod, UpOptions,
};
use gpuq::testbed::{PendulumInputs, UqTask, UqTaskSpec};
use std::f64::consts::PI;

/// A validated subcommand with its inputs loaded.
pub(crate) enum Job<'a> {
    Fit(&'a FitArgs, Dataset, Option<Vec<Vec<f64>>>),
    Propagate(&'a PropagateArgs, Source, Vec<Marginal>),
    Risk(&'a RiskArgs),
    Optimize(&'a OptimizeArgs),
    Calibrate(&'a CalibrateArgs),
    Sensitivity(&'a SensitivityArgs),
    Pendulum(UqTaskSpec, usize),
}

pub(crate) enum Source {
    Toy(Toy),
    Data(Dataset),
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    read_dataset_csv(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn load_marginals(path: &Path) -> CliResult<Vec<Marginal>> {
    let m: Vec<Marginal> =
        serde_json::from_str(&read_text(path)?).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    ProductDistribution::new(m.clone()).map_err(Failure::config)?;
    Ok(m)
}

pub(crate) fn prepare(cmd: &Command) -> CliResult<Job<'_>> {
    Ok(match cmd {
        Command::Fit(a) => {
            let data = load_dataset(&a.data)?;
            if !(a.noise >= 0.0) {
                return Err(Failure::config("--noise must be non-negative"));
            }
            let points = match &a.predict {
                Some(p) => {
                    let pts = read_points_csv(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
                    if pts.iter().any(|x| x.len() != data.dim()) {
                        return Err(Failure::config(format!(
                            "{}: prediction points must have {} columns",
                            p.display(),
                            data.dim()
                        )));
                    }
                    Some(pts)
                }
                None => None,
            };
            Job::Fit(a, data, points)
        }
        Command::Propagate(a) => {
            let (source, marginals) = match (&a.data, a.function) {
                (Some(path), _) => {
                    let data = load_dataset(path)?;
                    let m = load_marginals(a.inputs.as_deref().expect("clap enforces --inputs with --data"))?;
                    if m.len() != data.dim() {
                        return Err(Failure::config(format!(
                            "{} marginals for {}-dimensional data",
                            m.len(),
                            data.dim()
                        )));
                    }
                    (Source::Data(data), m)
                }
                (None, Some(toy)) => {
                    let m = match &a.inputs {
                        Some(p) => load_marginals(p)?,
                        None => toy.default_marginals(a.dim),
                    };
                    if toy.dim().is_some_and(|d| d != m.len()) || m.is_empty() {
                        return Err(Failure::config(format!("{toy:?} cannot take {} inputs", m.len())));
                    }
                    (Source::Toy(toy), m)
                }
                (None, None) => unreachable!("clap requires --function or --data"),
            };
            if marginals.iter().any(Marginal::is_degenerate) {
                return Err(Failure::config("propagation needs inputs with nonzero spread"));
            }
            Job::Propagate(a, source, marginals)
        }
        Command::Risk(a) => Job::Risk(a),
        Command::Optimize(a) => Job::Optimize(a),
        Command::Calibrate(a) => {
            if a.problem == CalProblem::Pendulum
                && (a.method == CalMethod::Agp || a.utility == Some(CalUtility::Ee))
            {
                return Err(Failure::config("the pendulum problem runs BAPE with the EV utility only"));
            }
            Job::Calibrate(a)
        }
        Command::Sensitivity(a) => Job::Sensitivity(a),
        Command::Pendulum(a) => {
            let mut spec = match (&a.spec, a.task) {
                (Some(path), _) => serde_json::from_str::<UqTaskSpec>(&read_text(path)?)
                    .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?,
                (None, Some(task)) => UqTaskSpec {
                    task: match task {
                        PendulumTask::Up => UqTask::Up {
                            method: if a.bq { UpMethod::Bq } else { UpMethod::GpMeanMc },
                        },
                        PendulumTask::Re => UqTask::Re {
                            theta_max: a.theta_max,
                            utility: RiskUtility::U,
                        },
                        PendulumTask::Pe => UqTask::Pe(PeSpec::default()),
                        PendulumTask::Sa => UqTask::Sa { n: a.n },
                        PendulumTask::Ou => UqTask::Ou(OuSpec::default()),
                    },
                    inputs: PendulumInputs::default(),
                    budget: None,
                },
                (None, None) => unreachable!("clap requires --spec or --task"),
            };
            spec.inputs.validate().map_err(Failure::config)?;
            spec.budget = a.budget.or(spec.budget);
            let budget = spec.budget.unwrap_or_else(|| spec.task.default_budget());
            Job::Pendulum(spec, budget)
        }
    })
}

impl Job<'_> {
    pub(crate) fn run(self, seed: u64, out: &RunDir) -> CliResult<()> {
        match self {
            Job::Fit(a, data, points) => fit(a, data, points.as_deref(), seed, out),
            Job::Propagate(a, source, marginals) => propagate(a, source, &marginals, seed, out),
            Job::Risk(a) => risk(a, seed, out),
            Job::Optimize(a) => optimize(a, seed, out),
            Job::Calibrate(a) => calibrate(a, seed, out),
            Job::Sensitivity(a) => sensitivity(a, seed, out),
            Job::Pendulum(spec, budget) => pendulum(&spec, budget, seed, out),
        }
    }
}

fn sample_variance(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let m = ys.iter().sum::<f64>() / n;
    ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n
}

#[derive(Serialize)]
struct FitReport {
    kernel: KernelSpec,
    prior_mean: PriorMean,
    objective: Objective,
    neg_log_marginal_likelihood: f64,
    loo_loss: f64,
    jitter: f64,
    n_points: usize,
    dim: usize,
}

fn fit(a: &FitArgs, data: Dataset, points: Option<&[Vec<f64>]>, seed: u64, out: &RunDir) -> CliResult<()> {
    let d = data.dim();
    let family = match a.kernel {
        KernelArg::Se => KernelFamily::SquaredExponential,
        KernelArg::Matern12 => KernelFamily::Matern12,
        KernelArg::Matern32 => KernelFamily::Matern32,
        KernelArg::Matern52 => KernelFamily::Matern52,
        KernelArg::Rq => KernelFamily::RationalQuadratic,
        KernelArg::Linear => KernelFamily::Linear,
        KernelArg::Poly => KernelFamily::Polynomial,
    };
    let objective = match a.objective {
        ObjectiveArg::Mle => Objective::Mle,
        ObjectiveArg::Loo => Objective::Loo,
    };
    let mean_family = match a.prior_mean {
        PriorMeanArg::Zero => PriorMeanFamily::Zero,
        PriorMeanArg::Constant => PriorMeanFamily::Constant,
        PriorMeanArg::Linear => PriorMeanFamily::Linear,
    };
    let v = sample_variance(data.responses());
    let spans: Vec<f64> = (0..d)
        .map(|j| {
            let col = data.inputs().iter().map(|x| x[j]);
            let span = col.clone().fold(f64::MIN, f64::max) - col.fold(f64::MAX, f64::min);
            if span > 0.0 { 0.2 * span } else { 1.0 }
        })
        .collect();
    let template = KernelSpec::new(family, if v > 0.0 { v } else { 1.0 }, spans).with_noise(a.noise);
    let prior = PriorMean::fit_ols(mean_family, &data);
    let opts = FitOptions {
        objective,
        restarts: a.restarts,
        seed: sub_seed(seed, 0),
        ..FitOptions::default()
    };
    let (kernel, gp) = fit_hyperparameters(&template, &prior, &data, &opts).map_err(Failure::from_compute)?;
    let report = FitReport {
        neg_log_marginal_likelihood: log_marginal_likelihood(&kernel, &prior, &data)
            .map_err(Failure::from_compute)?
            .value,
        loo_loss: loo_loss(&kernel, &prior, &data).map_err(Failure::from_compute)?.value,
        kernel: kernel.clone(),
        prior_mean: prior,
        objective,
        jitter: gp.jitter(),
        n_points: data.len(),
        dim: d,
    };
    out.json("kernel.json", &kernel)?;
    out.json("fit_report.json", &report)?;
    if let Some(pts) = points {
        let pred = gp.predict_many(pts).map_err(Failure::from_compute)?;
        let mut header = x_headers(d);
        header.extend(["mean".to_string(), "variance".to_string()]);
        let rows = pts.iter().zip(pred).map(|(x, (u, s2))| {
            let mut r: Vec<String> = x.iter().map(|v| fmt_csv(*v)).collect();
            r.extend([fmt_csv(u), fmt_csv(s2)]);
            r
        });
        out.csv("predictions.csv", |p| write_csv(p, &header, rows))?;
    }
    Ok(())
}

/// GP with an SE kernel scaled to the input spread and a small fitted nugget.
fn input_surrogate(data: Dataset, marginals: &[Marginal], seed: u64) -> gpuq::Result<GpPosterior> {
    let v = sample_variance(data.responses());
    let v = if v > 0.0 { v } else { 1.0 };
    let mut k = KernelSpec::se(v, 1.0).with_noise(1e-6 * v);
    k.length_scales = marginals.iter().map(|m| 2.0 * m.variance().sqrt()).collect();
    let prior = PriorMean::fit_ols(PriorMeanFamily::Constant, &data);
    let opts = FitOptions {
        seed,
        ..FitOptions::default()
    };
    Ok(fit_hyperparameters(&k, &prior, &data, &opts)?.1)
}

#[derive(Serialize)]
struct PropagateReport {
    method: PropagateMethod,
    mean: f64,
    /// Posterior variance of `mean` under the surrogate.
    mean_epistemic_variance: f64,
    /// Variance of the surrogate mean over the integration nodes.
    variance: f64,
    design_size: usize,
    n_model_evals: usize,
}

fn propagate(a: &PropagateArgs, source: Source, marginals: &[Marginal], seed: u64, out: &RunDir) -> CliResult<()> {
    let pi = ProductDistribution::new(marginals.to_vec()).map_err(Failure::config)?;
    let d = marginals.len();
    let run = || -> gpuq::Result<(GpPosterior, usize)> {
        match source {
            Source::Data(data) => Ok((input_surrogate(data, marginals, sub_seed(seed, 1))?, 0)),
            Source::Toy(toy) => {
                let mut f = Counted::new(|x: &[f64]| toy.eval(x));
                let m0 = match a.method {
                    PropagateMethod::GpMeanMc => a.budget,
                    PropagateMethod::Bq => (a.budget / 3).max(d + 1).min(a.budget),
                };
                if m0 < 2 {
                    return Err(gpuq::Error::InvalidParameter(format!("budget {} is too small", a.budget)));
                }
                let xs = lhs_marginals(marginals, m0, &mut rng_from_seed(sub_seed(seed, 0)));
                let ys = xs.iter().map(|x| f.call(x)).collect();
                let mut gp = input_surrogate(Dataset::new(xs, ys)?, marginals, sub_seed(seed, 1))?;
                if a.budget > m0 {
                    let design = Embedder::monte_carlo(&pi, 1000, sub_seed(seed, 3))?;
                    let opts = BqLoopOptions {
                        fit: FitOptions {
                            restarts: 1,
                            seed: sub_seed(seed, 5),
                            ..FitOptions::default()
                        },
                        ..BqLoopOptions::default()
                    };
                    gp = bq_active_run(|x| f.call(x), gp, &pi, &design, a.budget - m0, &opts, sub_seed(seed, 4))?;
                }
                Ok((gp, f.calls()))
            }
        }
    };
    let (gp, n_model_evals) = run().map_err(Failure::from_compute)?;
    let embedder = Embedder::monte_carlo(&pi, a.n_nodes, sub_seed(seed, 2)).map_err(Failure::from_compute)?;
    let est = embedder
        .embedding(&gp)
        .and_then(|e| bq_estimate(&gp, &e))
        .map_err(Failure::from_compute)?;
    let Embedder::MonteCarlo { nodes, .. } = &embedder else {
        unreachable!("Monte Carlo embedder")
    };
    let report = PropagateReport {
        method: a.method,
        mean: est.mean,
        mean_epistemic_variance: est.variance,
        variance: sample_variance(&gp.mean_batch(nodes)),
        design_size: gp.data().len(),
        n_model_evals,
    };
    out.json("propagate.json", &report)?;
    out.csv("design.csv", |p| write_dataset_csv(p, gp.data()))
}

fn risk(a: &RiskArgs, seed: u64, out: &RunDir) -> CliResult<()> {
    let utility = match a.utility {
        RiskUtilityArg::U => RiskUtility::U,
        RiskUtilityArg::Eff => RiskUtility::Eff,
        RiskUtilityArg::Sur => RiskUtility::Sur,
    };
    let (est, audit): (FailureEstimate, _) = match a.function {
        LimitState::Linear2d => {
            let mut g = Counted::new(|x: &[f64]| linear_limit_state(a.beta, x));
            let opts = AkMcsOptions {
                n_mc: a.n_mc,
                budget: a.budget,
                utility,
                seed,
                ..AkMcsOptions::default()
            };
            let r = akmcs_run(&mut g, &ProductDistribution::standard_normal(2), &opts).map_err(Failure::from_compute)?;
            (r.estimate, r.audit)
        }
        LimitState::Pendulum => run_re(
            &mut pendulum_solve,
            &PendulumInputs::default(),
            a.theta_max,
            a.budget,
            utility,
            a.n_mc,
            seed,
        )
        .map_err(Failure::from_compute)?,
    };
    out.json("failure_estimate.json", &est)?;
    out.csv("audit.csv", |p| gpuq::risk::write_audit_csv(p, &audit))
}

#[derive(Serialize)]
struct OptimizeReport {
    problem: OptProblem,
    x_best: Option<Vec<f64>>,
    y_best: Option<f64>,
    n_evals: usize,
    diagnostics: Vec<String>,
}

type Plain = fn(&[f64]) -> f64;

fn optimize(a: &OptimizeArgs, seed: u64, out: &RunDir) -> CliResult<()> {
    if a.problem == OptProblem::PendulumOu {
        let r = run_ou(&mut pendulum_solve, &PendulumInputs::default(), &OuSpec::default(), a.budget, seed)
            .map_err(Failure::from_compute)?;
        out.json("optimize.json", &r)?;
        return out.csv("history.csv", |p| write_history_csv(p, &r.history));
    }
    let kind = match a.acquisition {
        AcquisitionArg::Ei => AcquisitionKind::Ei,
        AcquisitionArg::Pi => AcquisitionKind::Pi,
        AcquisitionArg::Ucb => AcquisitionKind::Ucb,
    };
    let mode = match a.constraint_mode {
        ConstraintModeArg::Product => ConstraintMode::ProductPof,
        ConstraintModeArg::Threshold => ConstraintMode::PofThreshold(a.pof_threshold),
    };
    let (mut f, mut cons): (Counted<Plain>, Vec<Counted<Plain>>) = match a.problem {
        OptProblem::Quadratic => (Counted::new(|x| -(x[0] - 0.3).powi(2)), Vec::new()),
        _ => (Counted::new(|x| x[0]), vec![Counted::new(|x| x[0] - 0.7)]),
    };
    let opts = BoOptions {
        m0: a.m0,
        budget: a.budget,
        spec: AcquisitionSpec {
            kind,
            xi: a.xi,
            constraint_mode: mode,
        },
        seed,
        ..BoOptions::default()
    };
    let state = bo_run(&mut f, &mut cons, &Domain::unit(1), &opts).map_err(Failure::from_compute)?;
    let report = OptimizeReport {
        problem: a.problem,
        x_best: state.incumbent.as_ref().map(|(x, _)| x.clone()),
        y_best: state.incumbent.as_ref().map(|(_, y)| *y),
        n_evals: f.calls(),
        diagnostics: state.diagnostics.clone(),
    };
    out.json("optimize.json", &report)?;
    out.csv("history.csv", |p| write_history_csv(p, &state.history))
}

fn gaussian_toy_loglik(x: &[f64]) -> f64 {
    -0.5 * ((x[0] - 1.0) / 0.5f64).powi(2) - (0.5 * (2.0 * PI).sqrt()).ln()
}

fn calibrate(a: &CalibrateArgs, seed: u64, out: &RunDir) -> CliResult<()> {
    if a.problem == CalProblem::Pendulum {
        let opts = PeOptions {
            mcmc_steps: a.mcmc_steps,
            burn_in: a.burn_in,
            ..PeOptions::default()
        };
        let r = run_pe(
            &mut pendulum_solve,
            &PendulumInputs::default(),
            &PeSpec::default(),
            a.budget.unwrap_or(40),
            &opts,
            seed,
        )
        .map_err(Failure::from_compute)?;
        return out.json("calibration.json", &r);
    }
    let prior = ProductDistribution::new(vec![Marginal::Normal { mean: 0.0, std: 2.0 }]).map_err(Failure::config)?;
    let run = || -> gpuq::Result<_> {
        let dom = prior_domain(&prior, 1e-6)?;
        let mut lj = LogJointModel::with_prior(gaussian_toy_loglik, &prior);
        let base = CalibrationOptions {
            budget: a.budget.unwrap_or(25),
            utility: match a.utility.unwrap_or(CalUtility::Ev) {
                CalUtility::Ev => CalibrationUtility::Ev,
                CalUtility::Ee => CalibrationUtility::Ee,
            },
            seed: sub_seed(seed, 0),
            ..CalibrationOptions::default()
        };
        let mh_seed = sub_seed(seed, 1);
        Ok(match a.method {
            CalMethod::Bape => {
                let r = bape_run(&mut lj, &dom, &base)?;
                let chain = surrogate_mh(&r.gp, &dom, &default_proposal(&dom), a.mcmc_steps, a.burn_in, mh_seed)?;
                (chain, r.n_evals)
            }
            CalMethod::Agp => {
                let r = agp_iterate(&mut lj, &dom, &AgpOptions { base, ..AgpOptions::default() })?;
                (r.sample(&dom, a.mcmc_steps, a.burn_in, mh_seed)?, r.n_evals)
            }
        })
    };
    let (chain, n_evals) = run().map_err(Failure::from_compute)?;
    out.json("calibration.json", &CalibrationReport::from_chain(&chain, n_evals))?;
    out.csv("chain.csv", |p| chain.write_csv(p))
}

fn write_sobol(out: &RunDir, r: &SobolResult, names: &[String], audit: Option<&[SaAuditRow]>) -> CliResult<()> {
    out.json("sobol.json", r)?;
    out.csv("sobol.csv", |p| write_sobol_csv(p, r, Some(names)))?;
    match audit {
        Some(rows) => out.csv("audit.csv", |p| gpuq::sensitivity::write_audit_csv(p, rows)),
        None => Ok(()),
    }
}

fn sensitivity(a: &SensitivityArgs, seed: u64, out: &RunDir) -> CliResult<()> {
    let sobol_opts = SobolOptions {
        bootstrap: a.bootstrap,
        seed: sub_seed(seed, 1),
    };
    let inputs = PendulumInputs::default();
    let (names, marginals): (Vec<String>, Vec<Marginal>) = match a.function {
        SaFunction::Additive => (x_headers(2), Toy::Additive.default_marginals(2)),
        SaFunction::Ishigami => (x_headers(3), Toy::Ishigami.default_marginals(3)),
        SaFunction::Pendulum => (
            ["theta0", "L", "g"].map(String::from).to_vec(),
            inputs.marginals().to_vec(),
        ),
    };
    let model = |x: &[f64]| -> f64 {
        match a.function {
            SaFunction::Additive => Toy::Additive.eval(x),
            SaFunction::Ishigami => Toy::Ishigami.eval(x),
            SaFunction::Pendulum => final_angle(x[0], x[1], x[2], inputs.horizon, inputs.dt).unwrap_or(f64::NAN),
        }
    };
    let (r, audit) = match (a.method, a.function) {
        (SaMethod::Mc, _) => {
            let m = pick_freeze(&marginals, a.n, sub_seed(seed, 0)).map_err(Failure::from_compute)?;
            (sobol_mc(&mut Counted::new(model), &m, &sobol_opts).map_err(Failure::from_compute)?, None)
        }
        (SaMethod::Active, SaFunction::Pendulum) => {
            let r = run_sa(&mut pendulum_solve, &inputs, a.budget, a.n, seed).map_err(Failure::from_compute)?;
            (r.sobol, Some(r.audit))
        }
        (SaMethod::Active, _) => {
            let opts = ActiveSaOptions {
                budget: a.budget,
                n: a.n,
                sobol: sobol_opts,
                seed,
                ..ActiveSaOptions::default()
            };
            let r = active_sa_run(&mut Counted::new(model), &marginals, &opts).map_err(Failure::from_compute)?;
            (r.sobol, Some(r.audit))
        }
    };
    write_sobol(out, &r, &names, audit.as_deref())
}

fn pendulum(spec: &UqTaskSpec, budget: usize, seed: u64, out: &RunDir) -> CliResult<()> {
    out.json("task_spec.json", spec)?;
    let inputs = &spec.inputs;
    let solver = &mut pendulum_solve;
    match &spec.task {
        UqTask::Up { method } => {
            let r = run_up(solver, inputs, *method, budget, &UpOptions::default(), seed).map_err(Failure::from_compute)?;
            out.json("result.json", &r)
        }
        UqTask::Re { theta_max, utility } => {
            let (est, audit) =
                run_re(solver, inputs, *theta_max, budget, *utility, 100_000, seed).map_err(Failure::from_compute)?;
            out.json("result.json", &est)?;
            out.csv("audit.csv", |p| gpuq::risk::write_audit_csv(p, &audit))
        }
        UqTask::Pe(pe) => {
            let r = run_pe(solver, inputs, pe, budget, &PeOptions::default(), seed).map_err(Failure::from_compute)?;
            out.json("result.json", &r)
        }
        UqTask::Sa { n } => {
            let r = run_sa(solver, inputs, budget, *n, seed).map_err(Failure::from_compute)?;
            out.json("result.json", &r.sobol)?;
            let names = ["theta0", "L", "g"].map(String::from);
            out.csv("sobol.csv", |p| write_sobol_csv(p, &r.sobol, Some(&names)))?;
            out.csv("audit.csv", |p| gpuq::sensitivity::write_audit_csv(p, &r.audit))
        }
        UqTask::Ou(ou) => {
            let r = run_ou(solver, inputs, ou, budget, seed).map_err(Failure::from_compute)?;
            out.json("result.json", &r)?;
            out.csv("history.csv", |p| write_history_csv(p, &r.history))
        }
    }
}
