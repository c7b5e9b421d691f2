//! Rectified-flow corruption, regression target, Euler sampling and
//! per-modality classifier-free guidance.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("euler step requires t_prev < t_i, got t_prev={t_prev} t_i={t_i}")]
    Schedule { t_i: f64, t_prev: f64 },
    #[error("sampling schedule needs at least one step")]
    EmptySchedule,
    #[error("guidance scale {0} must be finite and non-negative")]
    GuidanceScale(f64),
}

/// One point on the straight path between a clean latent and noise.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: f64,
    pub zt: Tensor,
}

impl FlowSample {
    pub fn new(z0: Tensor, z1: Tensor, t: f64) -> Result<Self, FlowError> {
        let zt = corrupt(&z0, &z1, t)?;
        Ok(Self { z0, z1, t, zt })
    }

    pub fn target(&self) -> Result<Tensor, FlowError> {
        fm_target(&self.z0, &self.z1)
    }
}

/// `(1 - t) z0 + t z1`.
pub fn corrupt(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    Ok(z0.zip_map(z1, "corrupt", |a, b| (1.0 - t) * a + t * b)?)
}

/// Velocity regression target `z1 - z0`.
pub fn fm_target(z0: &Tensor, z1: &Tensor) -> Result<Tensor, FlowError> {
    Ok(z1.sub(z0)?)
}

/// Draws `t ~ U[0, 1]`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..=1.0)
}

/// `z + (t_prev - t_i) v`, moving from `t_i` down to `t_prev`.
pub fn euler_step(z: &Tensor, v: &Tensor, t_i: f64, t_prev: f64) -> Result<Tensor, FlowError> {
    if t_prev >= t_i {
        return Err(FlowError::Schedule { t_i, t_prev });
    }
    let dt = t_prev - t_i;
    Ok(z.zip_map(v, "euler_step", |a, b| a + dt * b)?)
}

/// Classifier-free extrapolation `v_uncond + scale (v_cond - v_uncond)`.
///
/// Evaluated as `(1 - scale) v_uncond + scale v_cond`, which returns
/// either branch bit-exactly at scale 0 and 1.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor, FlowError> {
    let w = 1.0 - scale;
    Ok(v_cond.zip_map(v_uncond, "guided_velocity", |c, u| w * u + scale * c)?)
}

/// Strictly decreasing time grid from 1 to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    times: Vec<f64>,
}

impl SamplerSchedule {
    /// `steps + 1` uniformly spaced times `1, (N-1)/N, ..., 0`.
    pub fn uniform(steps: usize) -> Result<Self, FlowError> {
        if steps == 0 {
            return Err(FlowError::EmptySchedule);
        }
        let n = steps as f64;
        let times = (0..=steps).rev().map(|i| i as f64 / n).collect();
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Consecutive `(t_i, t_{i-1})` pairs in integration order.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale_video: f64,
    pub scale_audio: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale_video: 4.0,
            scale_audio: 3.0,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale_video: f64, scale_audio: f64) -> Result<Self, FlowError> {
        for s in [scale_video, scale_audio] {
            if !s.is_finite() || s < 0.0 {
                return Err(FlowError::GuidanceScale(s));
            }
        }
        Ok(Self {
            scale_video,
            scale_audio,
        })
    }
}

/// Integrates `velocity` from `z1` at `t = 1` down to `t = 0`.
pub fn integrate<E>(
    z1: Tensor,
    schedule: &SamplerSchedule,
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor, E>,
) -> Result<Tensor, E>
where
    E: From<FlowError>,
{
    let mut z = z1;
    for (t_i, t_prev) in schedule.intervals() {
        let v = velocity(&z, t_i)?;
        z = euler_step(&z, &v, t_i, t_prev)?;
    }
    Ok(z)
}
