//! Deterministic DDIM generation loop.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::param::{predict_eps, predict_x0};
use crate::rng::NoiseRng;
use crate::schedule::{ddim_timesteps, NoiseSchedule};
use crate::volume::Volume;

pub const DEFAULT_INFERENCE_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub shape: [usize; 3],
}

impl SamplerConfig {
    pub fn new(shape: [usize; 3], seed: u64) -> Self {
        Self {
            steps: DEFAULT_INFERENCE_STEPS,
            eta: 0.0,
            seed,
            shape,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("sampler needs steps >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidParameter(format!("empty shape {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Standard deviation of the fresh noise injected by one DDIM update.
pub fn ddim_sigma(ab_t: f64, ab_prev: f64, eta: f64) -> f64 {
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

/// One DDIM update from `ab_t` to `ab_prev`:
/// `sqrt(ab_prev)*x0_hat + sqrt(1 - ab_prev - sigma^2)*eps_hat + sigma*noise`.
/// `ab_prev = 1` is allowed and collapses the update to `x0_hat`.
pub fn ddim_step(
    xt: &[f64],
    x0_hat: &[f64],
    eps_hat: &[f64],
    ab_t: f64,
    ab_prev: f64,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let n = xt.len();
    for other in [x0_hat.len(), eps_hat.len()] {
        if other != n {
            return Err(Error::shape(&[n], &[other]));
        }
    }
    if !(ab_t > 0.0 && ab_t < 1.0) {
        return Err(Error::DegenerateAlphaBar(ab_t));
    }
    if !(ab_prev > 0.0 && ab_prev <= 1.0) {
        return Err(Error::DegenerateAlphaBar(ab_prev));
    }
    if ab_prev < ab_t {
        return Err(Error::InvalidAbOrdering { ab_t, ab_prev });
    }
    let sigma = ddim_sigma(ab_t, ab_prev, eta);
    if sigma > 0.0 && noise.len() != n {
        return Err(Error::shape(&[n], &[noise.len()]));
    }
    let a = ab_prev.sqrt();
    let c = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = if sigma > 0.0 {
        (0..n)
            .map(|i| a * x0_hat[i] + c * eps_hat[i] + sigma * noise[i])
            .collect()
    } else {
        (0..n).map(|i| a * x0_hat[i] + c * eps_hat[i]).collect()
    };
    Ok(out)
}

/// Runs the sampler and returns the raw 64-bit values, x fastest.
pub fn generate_values(denoiser: &dyn Denoiser, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let timesteps = ddim_timesteps(schedule.len(), cfg.steps)?;
    let n = cfg.shape.iter().product();
    let mut rng = NoiseRng::new(cfg.seed);
    let mut x = rng.gaussian_vec(n);
    let kind = denoiser.kind();

    for (pos, &t) in timesteps.iter().enumerate().rev() {
        let ab_t = schedule.ab(t)?;
        let ab_prev = if pos == 0 {
            1.0
        } else {
            schedule.ab(timesteps[pos - 1])?
        };
        let pred = denoiser.predict(&x, cfg.shape, t)?;
        if pred.len() != n {
            return Err(Error::shape(&[n], &[pred.len()]));
        }
        let x0_hat = predict_x0(kind, &pred, &x, ab_t)?;
        let eps_hat = predict_eps(kind, &pred, &x, ab_t)?;
        let noise = if cfg.eta > 0.0 { rng.gaussian_vec(n) } else { Vec::new() };
        x = ddim_step(&x, &x0_hat, &eps_hat, ab_t, ab_prev, cfg.eta, &noise)?;
        debug_assert!(x.iter().all(|v| v.is_finite()), "non-finite sample at step {t}");
    }
    Ok(x)
}

/// Generates one volume on a 1 mm isotropic grid. Values are not clamped.
pub fn generate(denoiser: &dyn Denoiser, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Volume> {
    let values = generate_values(denoiser, schedule, cfg)?;
    Volume::from_f64(cfg.shape, [1.0; 3], &values)
}
