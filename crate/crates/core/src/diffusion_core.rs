//! Corruption process, timestep sampling, input rescaling and the velocity
//! field, independent of any network.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{L2dError, Result};

/// Distance below `t = 1` at which the velocity field is refused.
pub const VELOCITY_GUARD: f64 = 1e-6;

/// Linear schedules `alpha(t) = t`, `beta(t) = 1 - t` with the base noise
/// scale `sigma` kept in `p0 = N(0, sigma^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    sigma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { sigma: 64.0 }
    }
}

impl Schedule {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(L2dError::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alpha(&self, t: f64) -> f64 {
        t
    }

    pub fn beta(&self, t: f64) -> f64 {
        1.0 - t
    }

    /// Standard deviation of an `x_t` component when `x1` has unit variance.
    pub fn marginal_std(&self, t: f64) -> f64 {
        let b = self.beta(t) * self.sigma;
        (t * t + b * b).sqrt()
    }

    /// Early stopping time `1 - 1/sigma`.
    pub fn early_stop_time(&self) -> f64 {
        1.0 - 1.0 / self.sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Vec<f64>,
    pub t: f64,
}

pub(crate) fn check_timestep(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(L2dError::Timestep(t));
    }
    Ok(())
}

/// Draws `x0 ~ N(0, sigma^2 I)` of dimension `dim`.
pub fn sample_noise<R: Rng + ?Sized>(dim: usize, schedule: &Schedule, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            schedule.sigma * z
        })
        .collect()
}

/// `t x1 + (1 - t) x0` for a given noise draw.
pub fn interpolate(x1: &[f64], x0: &[f64], t: f64) -> Result<DiffusionState> {
    check_timestep(t)?;
    if x1.len() != x0.len() {
        return Err(L2dError::Shape(format!(
            "x1 has {} components, x0 {}",
            x1.len(),
            x0.len()
        )));
    }
    let x = x1.iter().zip(x0).map(|(a, b)| t * a + (1.0 - t) * b).collect();
    Ok(DiffusionState { x, t })
}

/// Corrupts `x1` to time `t` with a fresh noise draw.
pub fn corrupt<R: Rng + ?Sized>(x1: &[f64], t: f64, schedule: &Schedule, rng: &mut R) -> Result<DiffusionState> {
    check_timestep(t)?;
    if t == 1.0 {
        return Ok(DiffusionState { x: x1.to_vec(), t });
    }
    let x0 = sample_noise(x1.len(), schedule, rng);
    interpolate(x1, &x0, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    #[default]
    Uniform,
    Cosmap,
}

/// Inverse CDF of the cosmap density `2 / (pi (1 - 2t + 2t^2))`.
pub fn cosmap(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    (0.5 * (1.0 + (PI / 2.0 * (u - 0.5)).tan())).clamp(0.0, 1.0)
}

pub fn cosmap_density(t: f64) -> f64 {
    2.0 / (PI * (1.0 - 2.0 * t + 2.0 * t * t))
}

pub fn sample_timesteps<R: Rng + ?Sized>(count: usize, kind: TimestepSampling, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            match kind {
                TimestepSampling::Uniform => u,
                TimestepSampling::Cosmap => cosmap(u),
            }
        })
        .collect()
}

/// Multiplier applied to `x_t` so that its components have unit variance.
pub fn input_scale(t: f64, schedule: &Schedule) -> f64 {
    1.0 / schedule.marginal_std(t)
}

pub fn input_rescale(state: &DiffusionState, schedule: &Schedule) -> Vec<f64> {
    let s = input_scale(state.t, schedule);
    state.x.iter().map(|v| v * s).collect()
}

/// `(x_hat - x) / (1 - t)`.
pub fn velocity(x_hat: &[f64], state: &DiffusionState) -> Result<Vec<f64>> {
    if state.t >= 1.0 - VELOCITY_GUARD {
        return Err(L2dError::Singularity(state.t));
    }
    if x_hat.len() != state.x.len() {
        return Err(L2dError::Shape(format!(
            "x_hat has {} components, state {}",
            x_hat.len(),
            state.x.len()
        )));
    }
    let inv = 1.0 / (1.0 - state.t);
    Ok(x_hat.iter().zip(&state.x).map(|(a, b)| (a - b) * inv).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = Schedule::default();
        assert_eq!(
            (s.alpha(0.0), s.alpha(1.0), s.beta(0.0), s.beta(1.0)),
            (0.0, 1.0, 1.0, 0.0)
        );
        assert!(Schedule::new(0.0).is_err());
        assert!(Schedule::new(-3.0).is_err());
    }

    #[test]
    fn cosmap_endpoints() {
        assert_eq!(cosmap(0.0), 0.0);
        assert_eq!(cosmap(1.0), 1.0);
        assert!((cosmap(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rescale_factors() {
        let s = Schedule::default();
        assert!((input_scale(1.0, &s) - 1.0).abs() < 1e-15);
        assert!((input_scale(0.0, &s) - 1.0 / 64.0).abs() < 1e-15);
    }
}
