//! Unforced simple pendulum θ'' + (g/L) sin θ = 0 integrated with fixed-step RK4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumConfig {
    /// Initial angle (rad); the pendulum starts at rest.
    pub theta0: f64,
    /// Rod length (m).
    #[serde(rename = "L")]
    pub length: f64,
    /// Gravitational acceleration (m/s²).
    pub g: f64,
    /// Horizon (s).
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            theta0: 0.2,
            length: 1.0,
            g: 9.81,
            horizon: 2.0,
            dt: 1e-3,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.g > 0.0
            && self.horizon > 0.0
            && self.dt > 0.0
            && self.dt <= self.horizon
            && self.theta0.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid pendulum configuration {self:?}")))
        }
    }

    /// E = ½ω² − (g/L) cos θ, per unit mL².
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * omega * omega - self.g / self.length * theta.cos()
    }
}

/// States on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl Trajectory {
    /// (θ(T), ω(T)).
    pub fn final_state(&self) -> (f64, f64) {
        let n = self.times.len() - 1;
        (self.theta[n], self.omega[n])
    }

    /// Linear interpolation between grid points; `t` must lie in [0, T].
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        let last = *self.times.last().expect("nonempty trajectory");
        if !(0.0..=last).contains(&t) {
            return Err(Error::InvalidInput(format!("time {t} outside [0, {last}]")));
        }
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        if k + 1 >= self.times.len() {
            return Ok(self.final_state());
        }
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        Ok((
            self.theta[k] + w * (self.theta[k + 1] - self.theta[k]),
            self.omega[k] + w * (self.omega[k + 1] - self.omega[k]),
        ))
    }
}

/// Classical RK4 on (θ, ω) with step `dt`; the last step is shortened to
/// land exactly on T.
pub fn pendulum_solve(cfg: &PendulumConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let c = cfg.g / cfg.length;
    let rhs = |th: f64, om: f64| (om, -c * th.sin());
    let steps = (cfg.horizon / cfg.dt - 1e-9).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut theta = Vec::with_capacity(steps + 1);
    let mut omega = Vec::with_capacity(steps + 1);
    let (mut th, mut om) = (cfg.theta0, 0.0);
    times.push(0.0);
    theta.push(th);
    omega.push(om);
    for k in 0..steps {
        let t0 = k as f64 * cfg.dt;
        let t1 = if k + 1 == steps { cfg.horizon } else { (k + 1) as f64 * cfg.dt };
        let h = t1 - t0;
        let (k1t, k1o) = rhs(th, om);
        let (k2t, k2o) = rhs(th + 0.5 * h * k1t, om + 0.5 * h * k1o);
        let (k3t, k3o) = rhs(th + 0.5 * h * k2t, om + 0.5 * h * k2o);
        let (k4t, k4o) = rhs(th + h * k3t, om + h * k3o);
        th += h / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
        om += h / 6.0 * (k1o + 2.0 * k2o + 2.0 * k3o + k4o);
        times.push(t1);
        theta.push(th);
        omega.push(om);
    }
    Ok(Trajectory { times, theta, omega })
}

/// θ(T) for inputs (θ₀, L, g).
pub fn final_angle(theta0: f64, length: f64, g: f64, horizon: f64, dt: f64) -> Result<f64> {
    let cfg = PendulumConfig {
        theta0,
        length,
        g,
        horizon,
        dt,
    };
    Ok(pendulum_solve(&cfg)?.final_state().0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_rest() {
        let tr = pendulum_solve(&PendulumConfig::default()).unwrap();
        assert_eq!(tr.theta[0], 0.2);
        assert_eq!(tr.omega[0], 0.0);
        assert_eq!(*tr.times.last().unwrap(), 2.0);
        assert_eq!(tr.times.len(), 2001);
    }

    #[test]
    fn uneven_horizon_lands_on_t() {
        let cfg = PendulumConfig {
            horizon: 0.0105,
            ..Default::default()
        };
        let tr = pendulum_solve(&cfg).unwrap();
        assert_eq!(*tr.times.last().unwrap(), 0.0105);
        assert_eq!(tr.times.len(), 12);
    }

    #[test]
    fn interpolation_hits_grid_values() {
        let tr = pendulum_solve(&PendulumConfig::default()).unwrap();
        let (th, om) = tr.at(tr.times[500]).unwrap();
        assert_eq!(th, tr.theta[500]);
        assert_eq!(om, tr.omega[500]);
        assert!(tr.at(2.5).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = PendulumConfig {
            length: 0.0,
            ..Default::default()
        };
        assert!(pendulum_solve(&cfg).is_err());
    }
}
