//! Power-law noise schedule, uniform timestep grid and the Euler update.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::numerics::Tensor;

/// `sigma(t) = (t / T)^p` over a uniform grid of `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawSchedule {
    pub power: f64,
    pub total_time: f64,
    pub steps: usize,
}

impl Default for PowerLawSchedule {
    fn default() -> Self {
        Self {
            power: 0.5,
            total_time: 1.0,
            steps: 64,
        }
    }
}

impl PowerLawSchedule {
    pub fn new(power: f64, total_time: f64, steps: usize) -> Result<Self> {
        let s = Self {
            power,
            total_time,
            steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power.is_finite() && self.power > 0.0) {
            return Err(invalid_config(format!("schedule.power must be positive, got {}", self.power)));
        }
        if !(self.total_time.is_finite() && self.total_time > 0.0) {
            return Err(invalid_config(format!(
                "schedule.total_time must be positive, got {}",
                self.total_time
            )));
        }
        if self.steps == 0 {
            return Err(invalid_config("schedule.steps must be at least 1"));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_range(t)?;
        Ok((t / self.total_time).powf(self.power))
    }

    pub fn sigma_derivative(&self, t: f64) -> Result<f64> {
        self.check_range(t)?;
        if t == 0.0 && self.power < 1.0 {
            return Err(Error::Singularity("sigma'(0) is unbounded for p < 1".into()));
        }
        Ok(self.power / self.total_time * (t / self.total_time).powf(self.power - 1.0))
    }

    /// `sigma'(t) / sigma(t)`, which reduces to `p / t`.
    pub fn log_derivative_ratio(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Singularity(format!("sigma'/sigma is singular at t = {t}")));
        }
        self.check_range(t)?;
        Ok(self.power / t)
    }

    /// Grid value `t_i = T * i / steps`.
    pub fn grid_time(&self, i: usize) -> f64 {
        if i == self.steps {
            return self.total_time;
        }
        self.total_time * i as f64 / self.steps as f64
    }

    /// Time at which a chunk evaluates its velocity on local step `local_step`
    /// (`0` is the pure-noise end `t = T`).
    pub fn time_at_local_step(&self, local_step: usize) -> f64 {
        self.grid_time(self.steps - local_step)
    }

    /// Step size used on local step `local_step`, moving from
    /// `t_{steps - local_step}` to the next grid point below it.
    pub fn dt_at_local_step(&self, local_step: usize) -> f64 {
        let i = self.steps - local_step;
        self.grid_time(i) - self.grid_time(i - 1)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            times: (0..=self.steps).rev().map(|i| self.grid_time(i)).collect(),
        }
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if !(0.0..=self.total_time).contains(&t) {
            return Err(invalid_input(format!(
                "t = {t} outside [0, {}]",
                self.total_time
            )));
        }
        Ok(())
    }
}

/// Descending timestep values from `T` to `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dts(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[0] - w[1]).collect()
    }
}

/// First-order Euler update `x + v * dt`.
pub fn euler_step(x: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(invalid_input(format!("dt must be positive, got {dt}")));
    }
    x.add_scaled(v, dt)
}
