//! Noise schedule, forward noising, DDIM updates and classifier-free
//! guidance, plus the denoiser and the full conditioned model.

pub mod model;
pub mod unet;

pub use model::{
    draw_conditioning, sample, training_loss, training_loss_with, BranchToggles, ConditioningBundle,
    FaceMakeUp, LossConfig, LossOutput, ModelConfig, SampleConditioning, SampleDraw, SampleOptions,
    SampleOutput, TrainingSample,
};
pub use unet::{Denoiser, DenoiserConfig};

use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// Default `x̂0` clipping bound used by the sampler.
pub const DEFAULT_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Validates `0 < beta < 1`, strictly increasing, at least two steps.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(param_err!("schedule needs at least 2 steps, got {}", beta.len()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(param_err!("every beta must lie in (0, 1)"));
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(param_err!("betas must be strictly increasing"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Linear in beta.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        check_range(t, beta_start, beta_end)?;
        let betas = (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`, with `None` (past the last step) meaning `ᾱ = 1`.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }
}

fn check_range(t: usize, beta_start: f64, beta_end: f64) -> Result<()> {
    if t < 2 {
        return Err(param_err!("schedule needs T >= 2, got {t}"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(param_err!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    Ok(())
}

/// Scaled-linear schedule: `beta` interpolates linearly in `sqrt(beta)`.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    check_range(t, beta_start, beta_end)?;
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    let betas = (0..t)
        .map(|i| {
            let s = a + (b - a) * i as f64 / (t - 1) as f64;
            s * s
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    if t >= s.len() {
        return Err(param_err!("timestep {t} outside [0, {})", s.len()));
    }
    let ab = s.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Deterministic DDIM update between two cumulative alphas.
///
/// Written as `sqrt(ᾱp/ᾱt) x_t + (sqrt(1-ᾱp) - sqrt(ᾱp/ᾱt) sqrt(1-ᾱt)) eps`,
/// which equals recombining the predicted `x̂0`; entries whose `x̂0` falls
/// outside `[-clip, clip]` are recombined from the clamped value instead.
pub fn ddim_update(
    x_t: &Tensor,
    eps: &Tensor,
    abar_t: f64,
    abar_prev: f64,
    clip: Option<f64>,
) -> Result<Tensor> {
    let (st, sp) = (abar_t.sqrt(), abar_prev.sqrt());
    let (nt, np) = ((1.0 - abar_t).sqrt(), (1.0 - abar_prev).sqrt());
    let ratio = (abar_prev / abar_t).sqrt();
    let coef = np - ratio * nt;
    x_t.zip_map(eps, |x, e| {
        let x0 = (x - nt * e) / st;
        match clip {
            Some(c) if x0.abs() > c => sp * x0.clamp(-c, c) + np * e,
            _ => ratio * x + coef * e,
        }
    })
}

/// One DDIM step from `t` to `t_prev` (`None` = the clean end point).
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    s: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Tensor> {
    if t >= s.len() {
        return Err(param_err!("timestep {t} outside [0, {})", s.len()));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(param_err!("t_prev {p} must be below t {t}"));
        }
    }
    ddim_update(x_t, eps, s.alpha_bar[t], s.alpha_bar_at(t_prev), clip)
}

/// `u + scale (c - u)`; `scale` 0 and 1 return the inputs exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.expect_same_shape(eps_cond)?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// Descending DDIM timesteps with uniform stride `T / steps`; `steps` must
/// divide `T`.
pub fn timestep_grid(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(param_err!("steps {steps} outside [1, {total}]"));
    }
    if !total.is_multiple_of(steps) {
        return Err(param_err!("steps {steps} do not divide T = {total}"));
    }
    let stride = total / steps;
    Ok((0..steps).rev().map(|i| i * stride).collect())
}
