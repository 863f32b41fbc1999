//! Named analytic test functions available to the subcommands.

use clap::ValueEnum;
use gpuq::dist::Marginal;
use serde::Serialize;
use std::f64::consts::PI;

/// Analytic toy models f: R^d → R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toy {
    /// Σ xᵢ² (any dimension).
    Square,
    /// x₁ + 2x₂.
    Additive,
    /// sin x₁ + 7 sin² x₂ + 0.1 x₃⁴ sin x₁.
    Ishigami,
}

impl Toy {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Toy::Square => x.iter().map(|v| v * v).sum(),
            Toy::Additive => x[0] + 2.0 * x[1],
            Toy::Ishigami => x[0].sin() + 7.0 * x[1].sin().powi(2) + 0.1 * x[2].powi(4) * x[0].sin(),
        }
    }

    /// Fixed dimension, or `None` when any dimension works.
    pub fn dim(self) -> Option<usize> {
        match self {
            Toy::Square => None,
            Toy::Additive => Some(2),
            Toy::Ishigami => Some(3),
        }
    }

    /// Default input law: N(0, 1) for the square, U(0, 1) for the additive
    /// model and U(−π, π) for Ishigami.
    pub fn default_marginals(self, dim: usize) -> Vec<Marginal> {
        match self {
            Toy::Square => vec![Marginal::Normal { mean: 0.0, std: 1.0 }; dim],
            Toy::Additive => vec![Marginal::Uniform { low: 0.0, high: 1.0 }; 2],
            Toy::Ishigami => vec![Marginal::Uniform { low: -PI, high: PI }; 3],
        }
    }
}

/// Linear limit state x₁ + x₂ + β√2 under N(0, I₂); P[g < 0] = Φ(−β).
pub fn linear_limit_state(beta: f64, x: &[f64]) -> f64 {
    x[0] + x[1] + beta * std::f64::consts::SQRT_2
}
