//! Pendulum forward model and the task drivers built on it.

pub mod pendulum;
pub mod tasks;

pub use pendulum::{pendulum_solve, PendulumConfig, Trajectory};
pub use tasks::{PendulumInputs, Solver, UqTask, UqTaskSpec};
