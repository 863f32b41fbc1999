//! Command-line front end for the `gpuq` toolkit.
//!
//! Every subcommand validates its inputs, writes `manifest.json` to the
//! output directory, runs one seeded pipeline and writes its JSON and CSV
//! results next to the manifest. Exit status is 0 on success, 2 on a
//! configuration error and 3 on a numerical failure or unwritable output.

pub mod builtins;
mod commands;

use builtins::Toy;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "gpuq", version, about = "Gaussian-process surrogates for uncertainty quantification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Master seed; every random stream of the run derives from it.
    #[arg(long)]
    pub seed: u64,
    /// Worker threads. Pipelines run sequentially, so only 1 changes nothing.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Output directory, created if missing.
    #[arg(long, default_value = "gpuq-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Fit GP hyperparameters to a dataset CSV.
    Fit(FitArgs),
    /// Mean of a function under an input distribution.
    Propagate(PropagateArgs),
    /// Failure probability by active-learning Monte Carlo.
    Risk(RiskArgs),
    /// Bayesian optimization of a built-in problem.
    Optimize(OptimizeArgs),
    /// Surrogate-based posterior estimation.
    Calibrate(CalibrateArgs),
    /// Sobol indices by pick-freeze Monte Carlo or GP refinement.
    Sensitivity(SensitivityArgs),
    /// Pendulum testbed tasks.
    Pendulum(PendulumArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Fit(a) => &a.common,
            Command::Propagate(a) => &a.common,
            Command::Risk(a) => &a.common,
            Command::Optimize(a) => &a.common,
            Command::Calibrate(a) => &a.common,
            Command::Sensitivity(a) => &a.common,
            Command::Pendulum(a) => &a.common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelArg {
    Se,
    Matern12,
    Matern32,
    Matern52,
    Rq,
    Linear,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Mle,
    Loo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMeanArg {
    Zero,
    Constant,
    Linear,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset CSV with header x1,…,xd,y.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelArg::Se)]
    pub kernel: KernelArg,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Mle)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    /// Initial noise variance; a positive value is also optimized.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = PriorMeanArg::Constant)]
    pub prior_mean: PriorMeanArg,
    /// Points CSV (header x1,…,xd) to predict at.
    #[arg(long)]
    pub predict: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagateMethod {
    /// Node average of the GP mean on an LHS design.
    GpMeanMc,
    /// Bayesian quadrature with a variance-reducing sequential design.
    Bq,
}

#[derive(Debug, Args, Serialize)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Built-in integrand.
    #[arg(long, value_enum, conflicts_with = "data", required_unless_present = "data")]
    pub function: Option<Toy>,
    /// Dataset CSV used instead of a built-in function.
    #[arg(long, requires = "inputs")]
    pub data: Option<PathBuf>,
    /// JSON array of input marginals, e.g. [{"kind":"normal","mean":0,"std":1}].
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Input dimension for the square function without `--inputs`.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = PropagateMethod::GpMeanMc)]
    pub method: PropagateMethod,
    /// Evaluations of the built-in function.
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    /// Monte Carlo nodes for the integral.
    #[arg(long, default_value_t = 4000)]
    pub n_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitState {
    /// x₁ + x₂ + β√2 under a standard normal in 2-D.
    Linear2d,
    /// θ_max − θ(T) under the default pendulum inputs.
    Pendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskUtilityArg {
    U,
    Eff,
    Sur,
}

#[derive(Debug, Args, Serialize)]
pub struct RiskArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = LimitState::Linear2d)]
    pub function: LimitState,
    #[arg(long, value_enum, default_value_t = RiskUtilityArg::U)]
    pub utility: RiskUtilityArg,
    /// Maximum number of true-model evaluations.
    #[arg(long, default_value_t = 60)]
    pub budget: usize,
    /// Monte Carlo population size.
    #[arg(long, default_value_t = 100_000)]
    pub n_mc: usize,
    /// Reliability index of the linear limit state.
    #[arg(long, default_value_t = 2.33)]
    pub beta: f64,
    /// Angle threshold of the pendulum limit state.
    #[arg(long, default_value_t = 0.22)]
    pub theta_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptProblem {
    /// Maximize −(x − 0.3)² on [0, 1].
    Quadratic,
    /// Maximize x on [0, 1] subject to x ≤ 0.7.
    Constrained,
    /// Pendulum optimization under uncertainty over the mean initial angle.
    PendulumOu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionArg {
    Ei,
    Pi,
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintModeArg {
    Product,
    Threshold,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = OptProblem::Quadratic)]
    pub problem: OptProblem,
    /// Total evaluations, initial design included.
    #[arg(long, default_value_t = 15)]
    pub budget: usize,
    #[arg(long, default_value_t = 4)]
    pub m0: usize,
    #[arg(long, value_enum, default_value_t = AcquisitionArg::Ei)]
    pub acquisition: AcquisitionArg,
    /// ξ for PI and UCB.
    #[arg(long, default_value_t = 0.0)]
    pub xi: f64,
    #[arg(long, value_enum, default_value_t = ConstraintModeArg::Threshold)]
    pub constraint_mode: ConstraintModeArg,
    /// Feasibility threshold for `--constraint-mode threshold`.
    #[arg(long, default_value_t = 0.95)]
    pub pof_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalProblem {
    /// Normal likelihood N(1, 0.5²) with prior N(0, 2²).
    GaussianToy,
    /// Pendulum parameters from synthetic noisy angles.
    Pendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalMethod {
    Bape,
    Agp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalUtility {
    Ev,
    Ee,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = CalProblem::GaussianToy)]
    pub problem: CalProblem,
    #[arg(long, value_enum, default_value_t = CalMethod::Bape)]
    pub method: CalMethod,
    /// Query utility; the pendulum problem supports only ev.
    #[arg(long, value_enum)]
    pub utility: Option<CalUtility>,
    /// Log-joint evaluations (default 25, or 40 for the pendulum).
    #[arg(long)]
    pub budget: Option<usize>,
    /// MH steps on the surrogate, burn-in included.
    #[arg(long, default_value_t = 40_000)]
    pub mcmc_steps: usize,
    #[arg(long, default_value_t = 2000)]
    pub burn_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaFunction {
    Additive,
    Ishigami,
    Pendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaMethod {
    /// Pick-freeze estimators on the true model.
    Mc,
    /// MUSIC-driven GP refinement, indices of the GP mean.
    Active,
}

#[derive(Debug, Args, Serialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = SaFunction::Additive)]
    pub function: SaFunction,
    #[arg(long, value_enum, default_value_t = SaMethod::Mc)]
    pub method: SaMethod,
    /// Rows of the pick-freeze matrices.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// True-model evaluations for `--method active`.
    #[arg(long, default_value_t = 30)]
    pub budget: usize,
    /// Bootstrap resamples for confidence intervals (0 disables them).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PendulumTask {
    Up,
    Re,
    Pe,
    Sa,
    Ou,
}

#[derive(Debug, Args, Serialize)]
pub struct PendulumArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Task spec JSON file.
    #[arg(long, conflicts_with = "task", required_unless_present = "task")]
    pub spec: Option<PathBuf>,
    /// Task with default settings, used instead of a spec file.
    #[arg(long, value_enum)]
    pub task: Option<PendulumTask>,
    /// Overrides the spec's budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Angle threshold for `--task re`.
    #[arg(long, default_value_t = 0.22)]
    pub theta_max: f64,
    /// Use Bayesian quadrature for `--task up`.
    #[arg(long)]
    pub bq: bool,
    /// Pick-freeze rows for `--task sa`.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Output(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Numerical(_) | Failure::Output(_) => EXIT_FAILURE,
        }
    }

    /// Library errors raised while computing: bad parameters are the
    /// caller's configuration, anything else is numerical.
    pub(crate) fn from_compute(e: gpuq::Error) -> Self {
        use gpuq::Error as E;
        match e {
            E::InvalidParameter(_) | E::InvalidInput(_) | E::DimensionMismatch { .. } => Failure::Config(e.to_string()),
            E::Io(_) => Failure::Output(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Failure::Config(msg.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Output(m) => write!(f, "cannot write output: {m}"),
        }
    }
}

pub(crate) type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct Manifest<'a> {
    argv: Vec<String>,
    config: &'a Command,
    version: &'static str,
    seed: u64,
    threads: usize,
    created_unix_seconds: u64,
}

/// Output directory of one run.
pub(crate) struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Output(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub(crate) fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub(crate) fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let p = self.path(name);
        gpuq::io::write_json(&p, value).map_err(|e| Failure::Output(format!("{}: {e}", p.display())))
    }

    /// Runs a CSV writer, reporting failures as output errors.
    pub(crate) fn csv(&self, name: &str, write: impl FnOnce(&Path) -> gpuq::Result<()>) -> CliResult<()> {
        let p = self.path(name);
        write(&p).map_err(|e| Failure::Output(format!("{}: {e}", p.display())))
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command, &argv) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("gpuq: {f}");
            f.exit_code()
        }
    }
}

fn execute(cmd: &Command, argv: &[OsString]) -> CliResult<()> {
    let common = cmd.common();
    if common.threads == 0 {
        return Err(Failure::config("--threads must be at least 1"));
    }
    let job = commands::prepare(cmd)?;
    let out = RunDir::create(&common.out)?;
    let manifest = Manifest {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: cmd,
        version: env!("CARGO_PKG_VERSION"),
        seed: common.seed,
        threads: common.threads,
        created_unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    out.json("manifest.json", &manifest)?;
    job.run(common.seed, &out)
}
