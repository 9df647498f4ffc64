//! Rectified-flow forward process and the Euler sampler.
//!
//! `x_tau = (1 - tau) x0 + tau eps` with noise at `tau = 1`; the model predicts
//! `v = eps - x0`, and a sample prediction is `x0_hat = x_tau - tau v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Backbone;
use crate::numerics::Tensor;
use crate::window::GridShape;

/// Linear schedule over discrete timesteps `0..num_steps`, `tau = (t + 1) / num_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { num_steps: 1000 }
    }
}

impl NoiseSchedule {
    pub fn tau(&self, t: usize) -> f64 {
        (t.min(self.num_steps - 1) + 1) as f64 / self.num_steps as f64
    }

    /// Uniformly drawn training timestep.
    pub fn sample_tau<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.tau(rng.gen_range(0..self.num_steps))
    }

    /// `steps + 1` sampling times from 1 down to 0.
    pub fn sampling_grid(&self, steps: usize) -> Vec<f64> {
        (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(invalid(format!("cfg scale must be finite and >= 0, got {}", self.cfg_scale)));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn interpolate(x0: &Tensor, eps: &Tensor, tau: f64) -> Result<Tensor> {
    same_shape("interpolate", x0, eps)?;
    x0.zip_map(eps, |a, e| (1.0 - tau) * a + tau * e)
}

pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape("velocity_target", x0, eps)?;
    x0.zip_map(eps, |a, e| e - a)
}

pub fn to_sample(x_tau: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    same_shape("to_sample", x_tau, v)?;
    if tau == 0.0 {
        return Ok(x_tau.clone());
    }
    x_tau.zip_map(v, |x, v| x - tau * v)
}

/// A velocity predictor with its conditioning already bound.
pub trait VelocityField {
    /// Velocity at `x` and time `tau`; `drop_cond` selects the unconditional branch.
    fn velocity(&self, x: &Tensor, tau: f64, drop_cond: bool) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, bool) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, tau: f64, drop_cond: bool) -> Result<Tensor> {
        self(x, tau, drop_cond)
    }
}

/// A backbone conditioned on one upsampled LQ clip.
pub struct Conditioned<'a> {
    pub model: &'a Backbone,
    pub lq: &'a Tensor,
    pub grid: GridShape,
}

impl VelocityField for Conditioned<'_> {
    fn velocity(&self, x: &Tensor, tau: f64, drop_cond: bool) -> Result<Tensor> {
        self.model.velocity(x, self.lq, tau, drop_cond, self.grid)
    }
}

/// `v_u + s (v_c - v_u)`; a scale of 1 evaluates only the conditional branch.
pub fn guided_velocity<M: VelocityField + ?Sized>(model: &M, x: &Tensor, tau: f64, scale: f64) -> Result<Tensor> {
    let vc = model.velocity(x, tau, false)?;
    same_shape("guided_velocity", x, &vc)?;
    if scale == 1.0 {
        return Ok(vc);
    }
    let vu = model.velocity(x, tau, true)?;
    same_shape("guided_velocity", x, &vu)?;
    vu.zip_map(&vc, |u, c| u + scale * (c - u))
}

/// One Euler step `x - (tau_from - tau_to) v` with guidance.
pub fn euler_step<M: VelocityField + ?Sized>(
    model: &M,
    x: &Tensor,
    tau_from: f64,
    tau_to: f64,
    scale: f64,
) -> Result<Tensor> {
    let v = guided_velocity(model, x, tau_from, scale)?;
    let dt = tau_from - tau_to;
    x.zip_map(&v, |x, v| x - dt * v)
}

/// Integrates from `tau = 1` (the noise `eps`) to `tau = 0` in `cfg.steps` uniform steps.
pub fn euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    eps: &Tensor,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    cfg.validate()?;
    let grid = schedule.sampling_grid(cfg.steps);
    let mut x = eps.clone();
    for w in grid.windows(2) {
        x = euler_step(model, &x, w[0], w[1], cfg.cfg_scale)?;
    }
    Ok(x)
}
